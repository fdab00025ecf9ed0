import numpy as np
import pytest

from anomstream.errors import DataError, SchemaConflictError
from anomstream.schema import Catalog, Event

from helpers import make_catalog


def test_entity_interning_dense_and_idempotent():
    cat = Catalog()
    cat.register_entity_type("user")
    assert cat.intern_entity(0, "U147", 0) == 0
    assert cat.first_seen(0, 0) == 0
    # repeat intern keeps the id and the original first_seen
    assert cat.intern_entity(0, "U147", 3) == 0
    assert cat.first_seen(0, 0) == 0
    assert cat.intern_entity(0, "U66", 1) == 1
    assert cat.n_entities(0) == 2
    assert cat.entity_name(0, 1) == "U66"
    assert cat.lookup_entity(0, "U66") == 1
    assert cat.lookup_entity(0, "nope") is None


def test_global_rows_partition_all_types():
    cat = make_catalog(n_users=4, n_hosts=3)
    rows = np.concatenate([cat.global_rows(0), cat.global_rows(1)])
    assert sorted(rows.tolist()) == list(range(cat.total_entities))
    assert cat.total_entities == 7


def test_event_type_registration():
    cat = Catalog()
    cat.register_entity_type("user")
    cat.register_entity_type("host")
    spec = cat.register_event_type("login", ("user", "host"))
    assert spec.arity == 2
    # re-register with the same signature is a no-op
    assert cat.register_event_type("login", ("user", "host")).id == spec.id
    with pytest.raises(SchemaConflictError):
        cat.register_event_type("login", ("host", "user"))
    with pytest.raises(SchemaConflictError):
        cat.register_event_type("solo", ("user",))
    with pytest.raises(DataError):
        cat.entity_type_id("proc")
    with pytest.raises(DataError):
        cat.event_type_id("nope")


def test_new_entities_in_window():
    cat = Catalog()
    cat.register_entity_type("user")
    cat.intern_entity(0, "a", 0)
    cat.intern_entity(0, "b", 0)
    cat.intern_entity(0, "c", 2)
    assert cat.new_entities_in_window(0, 2) == {2}
    assert cat.new_entities_in_window(0, 1) == set()
    assert cat.new_entities_in_window(0, 0) == {0, 1}


def test_seen_up_to_unions_new_entities():
    cat = Catalog()
    cat.register_entity_type("user")
    for name, step in (("a", 0), ("b", 1), ("c", 1), ("d", 3)):
        cat.intern_entity(0, name, step)
    for t in range(4):
        prev = set() if t == 0 else set(cat.entities_seen_up_to(0, t - 1).tolist())
        now = set(cat.entities_seen_up_to(0, t).tolist())
        assert now == prev | cat.new_entities_in_window(0, t)
    assert cat.entities_seen_up_to(0, 3).tolist() == [0, 1, 2, 3]


def test_validate_event():
    cat = make_catalog()
    cat.validate_event(Event(0, 0, (0, 0)))
    with pytest.raises(DataError):
        cat.validate_event(Event(0, 0, (0,)))
    with pytest.raises(DataError):
        cat.validate_event(Event(0, 0, (0, 99)))


def test_accumulate_counts():
    cat = make_catalog(n_users=3, n_hosts=3)
    events = [Event(0, 0, (0, 1)), Event(0, 0, (1, 1)), Event(0, 1, (0, 2, 1))]
    cat.accumulate_counts(events)
    assert cat.counts(0, 1).tolist() == [1, 1, 0]
    assert cat.counts(0, 2).tolist() == [0, 2, 0]
    assert cat.counts(1, 3).tolist() == [0, 1, 0]
    # the conditioning position is tallied too
    assert cat.counts(1, 1).tolist() == [1, 0, 0]
    # counts for an event type never seen come back all zero
    assert cat.counts(1, 2).tolist() == [0, 0, 1]
    cat.reset_counts()
    assert cat.counts(0, 2).tolist() == [0, 0, 0]


def test_counts_grow_with_new_entities():
    cat = make_catalog(n_users=2, n_hosts=2)
    cat.accumulate_counts([Event(0, 0, (0, 1))])
    cat.intern_entity(1, "h_late", 1)
    assert cat.counts(0, 2).tolist() == [0, 1, 0]
    cat.accumulate_counts([Event(86400, 0, (1, 2))])
    assert cat.counts(0, 2).tolist() == [0, 1, 1]


def test_catalog_snapshot_round_trip(tmp_path):
    cat = Catalog()
    cat.register_entity_type("user")
    cat.register_entity_type("host")
    cat.register_event_type("login", ("user", "host"))
    cat.intern_entity(0, "plain", 0)
    cat.intern_entity(0, "tab\tname", 1)
    cat.intern_entity(0, "nl\nname", 2)
    cat.intern_entity(1, "back\\slash", 0)
    cat.intern_entity(1, "h1", 5)
    cat.accumulate_counts([Event(0, 0, (0, 0)), Event(0, 0, (1, 1))])
    path = tmp_path / "catalog.txt"
    cat.save(path)

    back = Catalog.load(path)
    assert back.total_entities == cat.total_entities
    for tid in (0, 1):
        assert [back.entity_name(tid, i) for i in range(back.n_entities(tid))] \
            == [cat.entity_name(tid, i) for i in range(cat.n_entities(tid))]
        assert back.first_seen_array(tid).tolist() \
            == cat.first_seen_array(tid).tolist()
        assert back.global_rows(tid).tolist() == cat.global_rows(tid).tolist()
    assert back.counts(0, 1).tolist() == cat.counts(0, 1).tolist()
    assert back.counts(0, 2).tolist() == cat.counts(0, 2).tolist()
    assert back.event_spec(0).signature == cat.event_spec(0).signature


def test_catalog_snapshot_rejects_other_files(tmp_path):
    path = tmp_path / "junk.txt"
    path.write_text("not a catalog\n")
    with pytest.raises(DataError):
        Catalog.load(path)
