"""Event/entity data model: type registries, name interning, occurrence counts.

Entity ids are dense per entity type and assigned in first-seen order. Every
entity additionally gets a global row index (dense across all types, in
intern order) which is what the embedding table is indexed by.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DataError, SchemaConflictError

LABEL_BENIGN = 0
LABEL_MALICIOUS = 1


@dataclass(frozen=True)
class EntityType:
    id: int
    name: str


@dataclass(frozen=True)
class EventTypeSpec:
    id: int
    name: str
    signature: tuple[int, ...]  # entity-type ids, one per position

    @property
    def arity(self) -> int:
        return len(self.signature)


@dataclass(frozen=True)
class Event:
    timestamp: int
    event_type: int
    entities: tuple[int, ...]  # per-type local ids, signature order
    label: Optional[int] = None  # LABEL_BENIGN / LABEL_MALICIOUS / None


class _TypeStore:
    """Per-entity-type interning state."""

    __slots__ = ("name_to_id", "names", "first_seen", "global_rows")

    def __init__(self):
        self.name_to_id: dict[str, int] = {}
        self.names: list[str] = []
        self.first_seen: list[int] = []
        self.global_rows: list[int] = []


class Catalog:
    """Registry of entity/event types plus the interned entity catalog.

    Single-writer during ingestion; treat as immutable afterwards.
    """

    def __init__(self):
        self.entity_types: list[EntityType] = []
        self._entity_type_by_name: dict[str, int] = {}
        self.event_types: list[EventTypeSpec] = []
        self._event_type_by_name: dict[str, int] = {}
        self._stores: list[_TypeStore] = []
        self.total_entities = 0
        # (event_type_id, position i, local id) -> occurrence count, with the
        # per-entity axis stored as a growable array per (e, i)
        self._counts: dict[tuple[int, int], np.ndarray] = {}

    # -- type registries ---------------------------------------------------

    def register_entity_type(self, name: str) -> EntityType:
        if name in self._entity_type_by_name:
            return self.entity_types[self._entity_type_by_name[name]]
        et = EntityType(id=len(self.entity_types), name=name)
        self.entity_types.append(et)
        self._entity_type_by_name[name] = et.id
        self._stores.append(_TypeStore())
        return et

    def entity_type_id(self, name: str) -> int:
        try:
            return self._entity_type_by_name[name]
        except KeyError:
            raise DataError(f"unknown entity type: {name!r}") from None

    def register_event_type(self, name: str, signature: Iterable[str]) -> EventTypeSpec:
        sig = tuple(self.entity_type_id(n) for n in signature)
        if len(sig) < 2:
            raise SchemaConflictError(
                f"event type {name!r} needs at least 2 entities, got {len(sig)}"
            )
        existing = self._event_type_by_name.get(name)
        if existing is not None:
            spec = self.event_types[existing]
            if spec.signature != sig:
                raise SchemaConflictError(
                    f"event type {name!r} already registered with a different signature"
                )
            return spec
        spec = EventTypeSpec(id=len(self.event_types), name=name, signature=sig)
        self.event_types.append(spec)
        self._event_type_by_name[name] = spec.id
        return spec

    def event_type_id(self, name: str) -> int:
        try:
            return self._event_type_by_name[name]
        except KeyError:
            raise DataError(f"unknown event type: {name!r}") from None

    def event_spec(self, event_type: int) -> EventTypeSpec:
        return self.event_types[event_type]

    # -- interning ----------------------------------------------------------

    def intern_entity(self, entity_type: int, name: str, time_step: int) -> int:
        if not 0 <= entity_type < len(self._stores):
            raise DataError(f"unknown entity type id: {entity_type}")
        store = self._stores[entity_type]
        local = store.name_to_id.get(name)
        if local is not None:
            return local
        local = len(store.names)
        store.name_to_id[name] = local
        store.names.append(name)
        store.first_seen.append(int(time_step))
        store.global_rows.append(self.total_entities)
        self.total_entities += 1
        return local

    def lookup_entity(self, entity_type: int, name: str) -> Optional[int]:
        return self._stores[entity_type].name_to_id.get(name)

    def entity_name(self, entity_type: int, local_id: int) -> str:
        return self._stores[entity_type].names[local_id]

    def n_entities(self, entity_type: int) -> int:
        return len(self._stores[entity_type].names)

    def first_seen(self, entity_type: int, local_id: int) -> int:
        return self._stores[entity_type].first_seen[local_id]

    def first_seen_array(self, entity_type: int) -> np.ndarray:
        return np.asarray(self._stores[entity_type].first_seen, dtype=np.int64)

    def global_row(self, entity_type: int, local_id: int) -> int:
        return self._stores[entity_type].global_rows[local_id]

    def global_rows(self, entity_type: int) -> np.ndarray:
        return np.asarray(self._stores[entity_type].global_rows, dtype=np.int64)

    def new_entities_in_window(self, entity_type: int, time_step: int) -> set[int]:
        """Local ids of entities whose first occurrence is exactly `time_step`."""
        store = self._stores[entity_type]
        return {i for i, fs in enumerate(store.first_seen) if fs == time_step}

    def entities_seen_up_to(self, entity_type: int, time_step: int) -> np.ndarray:
        """Local ids (dense order) of entities first seen at or before `time_step`."""
        fs = self.first_seen_array(entity_type)
        return np.nonzero(fs <= time_step)[0].astype(np.int64)

    # -- events --------------------------------------------------------------

    def validate_event(self, event: Event) -> None:
        spec = self.event_spec(event.event_type)
        if len(event.entities) != spec.arity:
            raise DataError(
                f"event of type {spec.name!r} carries {len(event.entities)} "
                f"entities, expected {spec.arity}"
            )
        for pos, (local, etype) in enumerate(zip(event.entities, spec.signature), start=1):
            if not 0 <= local < self.n_entities(etype):
                raise DataError(
                    f"event of type {spec.name!r} references unknown entity "
                    f"{local} at position {pos}"
                )

    # -- occurrence counts ---------------------------------------------------

    def accumulate_counts(self, events: Iterable[Event]) -> None:
        for event in events:
            spec = self.event_types[event.event_type]
            for i, local in enumerate(event.entities, start=1):
                key = (spec.id, i)
                arr = self._counts.get(key)
                n = self.n_entities(spec.signature[i - 1])
                if arr is None:
                    arr = np.zeros(n, dtype=np.int64)
                    self._counts[key] = arr
                elif len(arr) < n:
                    arr = np.concatenate([arr, np.zeros(n - len(arr), dtype=np.int64)])
                    self._counts[key] = arr
                arr[local] += 1

    def counts(self, event_type: int, position: int) -> np.ndarray:
        """Occurrence counts C(v) over local ids for (event type, position)."""
        key = (event_type, position)
        arr = self._counts.get(key)
        n = self.n_entities(self.event_types[event_type].signature[position - 1])
        if arr is None:
            return np.zeros(n, dtype=np.int64)
        if len(arr) < n:
            return np.concatenate([arr, np.zeros(n - len(arr), dtype=np.int64)])
        return arr

    def reset_counts(self) -> None:
        self._counts.clear()

    # -- serialization ---------------------------------------------------------

    MAGIC = "anomstream-catalog v1"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.MAGIC + "\n")
            for et in self.entity_types:
                fh.write(f"T\t{et.id}\t{_escape(et.name)}\n")
            for spec in self.event_types:
                sig = ",".join(str(t) for t in spec.signature)
                fh.write(f"E\t{spec.id}\t{sig}\t{_escape(spec.name)}\n")
            for tid, store in enumerate(self._stores):
                for local, name in enumerate(store.names):
                    fh.write(
                        f"V\t{tid}\t{local}\t{store.first_seen[local]}\t"
                        f"{store.global_rows[local]}\t{_escape(name)}\n"
                    )
            for (eid, pos), arr in sorted(self._counts.items()):
                for local, count in enumerate(arr):
                    if count:
                        fh.write(f"C\t{eid}\t{pos}\t{local}\t{int(count)}\n")

    @classmethod
    def load(cls, path) -> "Catalog":
        cat = cls()
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != cls.MAGIC:
                raise DataError(f"not a catalog snapshot: {path}")
            max_row = -1
            for raw in fh:
                parts = raw.rstrip("\n").split("\t")
                kind = parts[0]
                if kind == "T":
                    et = cat.register_entity_type(_unescape(parts[2]))
                    if et.id != int(parts[1]):
                        raise DataError("entity type ids out of order in snapshot")
                elif kind == "E":
                    sig_ids = [int(x) for x in parts[2].split(",")]
                    names = [cat.entity_types[t].name for t in sig_ids]
                    spec = cat.register_event_type(_unescape(parts[3]), names)
                    if spec.id != int(parts[1]):
                        raise DataError("event type ids out of order in snapshot")
                elif kind == "V":
                    tid, local, fs, grow = (int(parts[i]) for i in range(1, 5))
                    store = cat._stores[tid]
                    if local != len(store.names):
                        raise DataError("entity ids out of order in snapshot")
                    name = _unescape(parts[5])
                    store.name_to_id[name] = local
                    store.names.append(name)
                    store.first_seen.append(fs)
                    store.global_rows.append(grow)
                    max_row = max(max_row, grow)
                elif kind == "C":
                    eid, pos, local, count = (int(parts[i]) for i in range(1, 5))
                    key = (eid, pos)
                    n = cat.n_entities(cat.event_types[eid].signature[pos - 1])
                    if key not in cat._counts:
                        cat._counts[key] = np.zeros(n, dtype=np.int64)
                    cat._counts[key][local] = count
                else:
                    raise DataError(f"unknown record kind {kind!r} in snapshot")
            cat.total_entities = max_row + 1
        return cat


def _escape(name: str) -> str:
    return (
        name.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _unescape(name: str) -> str:
    out = []
    it = iter(name)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, "")
        out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
    return "".join(out)
