"""Log ingestion: comprehensive-events-style auth/proc parsing with the
standard filters, red-team label joins, rare-process collapsing, the
canonical event file, and a community-structured synthetic generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, ParseError
from .schema import Catalog, Event
from .stream import window_of

logger = logging.getLogger(__name__)

RARE_PROCESS_TOKEN = "<RARE_PROCESS>"
DEFAULT_DENY_LIST = frozenset({"LOCAL SYSTEM", "NETWORK SERVICE",
                               "ANONYMOUS LOGON"})

ENTITY_USER = "user"
ENTITY_COMPUTER = "computer"
ENTITY_AUTH_TYPE = "auth_type"
ENTITY_PROCESS = "process"

EVENT_LOCAL_AUTH = "local_auth"
EVENT_REMOTE_AUTH = "remote_auth"
EVENT_PROC_START = "proc_start"


def register_default_schema(catalog: Catalog) -> Catalog:
    """User/computer/auth-type/process entities and the three event shapes:
    local_auth (U, T, C), remote_auth (U, T, C, C), proc_start (C, U, P)."""
    for name in (ENTITY_USER, ENTITY_COMPUTER, ENTITY_AUTH_TYPE, ENTITY_PROCESS):
        catalog.register_entity_type(name)
    catalog.register_event_type(EVENT_LOCAL_AUTH,
                                (ENTITY_USER, ENTITY_AUTH_TYPE, ENTITY_COMPUTER))
    catalog.register_event_type(EVENT_REMOTE_AUTH,
                                (ENTITY_USER, ENTITY_AUTH_TYPE,
                                 ENTITY_COMPUTER, ENTITY_COMPUTER))
    catalog.register_event_type(EVENT_PROC_START,
                                (ENTITY_COMPUTER, ENTITY_USER, ENTITY_PROCESS))
    return catalog


def register_schema(catalog: Catalog, schema: dict) -> Catalog:
    for name in schema.get("entity_types", []):
        catalog.register_entity_type(name)
    for name, signature in schema.get("event_types", {}).items():
        catalog.register_event_type(name, tuple(signature))
    return catalog


@dataclass
class ParseConfig:
    deny_list: frozenset = DEFAULT_DENY_LIST
    drop_failures: bool = False      # outcome is ignored unless this is set
    rare_threshold: int = 40
    rare_count_train_only: bool = False


@dataclass
class CanonicalRecord:
    """One event as names; the schema-independent interchange row."""

    timestamp: int
    type_name: str
    entity_names: tuple[str, ...]
    label: Optional[int] = 0


@dataclass
class IngestStats:
    total: int = 0
    kept: int = 0
    filtered: int = 0
    errored: int = 0
    by_reason: dict[str, int] = field(default_factory=dict)
    error_lines: list[str] = field(default_factory=list)
    redteam_rows: int = 0
    redteam_matched: int = 0
    redteam_unmatched: list[tuple] = field(default_factory=list)

    def note(self, reason: str) -> None:
        self.by_reason[reason] = self.by_reason.get(reason, 0) + 1

    def merged(self, other: "IngestStats") -> "IngestStats":
        out = IngestStats(
            total=self.total + other.total,
            kept=self.kept + other.kept,
            filtered=self.filtered + other.filtered,
            errored=self.errored + other.errored,
        )
        for src in (self.by_reason, other.by_reason):
            for k, v in src.items():
                out.by_reason[k] = out.by_reason.get(k, 0) + v
        out.error_lines = self.error_lines + other.error_lines
        out.redteam_rows = self.redteam_rows + other.redteam_rows
        out.redteam_matched = self.redteam_matched + other.redteam_matched
        out.redteam_unmatched = self.redteam_unmatched + other.redteam_unmatched
        return out


def _account_name(qualified: str) -> str:
    """Name part of 'name@domain' (the whole string when unqualified)."""
    return qualified.split("@", 1)[0]


def parse_auth(line: str, line_no: int = 0,
               config: Optional[ParseConfig] = None) -> Optional[CanonicalRecord]:
    """Nine comma-separated fields: time, source user, destination user,
    source computer, destination computer, auth package, logon type,
    orientation, outcome. Keeps LogOn events whose destination user is a
    real user account; machine accounts (trailing '$') and deny-listed
    built-ins are dropped. Returns None for filtered lines."""
    config = config or ParseConfig()
    parts = line.rstrip("\n").split(",")
    if len(parts) != 9:
        raise ParseError(f"auth line needs 9 fields, got {len(parts)}",
                         line_no=line_no)
    (time_s, _src_user, dst_user, src_comp, dst_comp,
     package, logon_type, orientation, outcome) = parts
    try:
        t = int(time_s)
    except ValueError:
        raise ParseError(f"bad timestamp {time_s!r}", line_no=line_no) from None
    if orientation != "LogOn":
        return None
    account = _account_name(dst_user)
    if account.endswith("$") or account in config.deny_list:
        return None
    if config.drop_failures and outcome != "Success":
        return None
    auth_type = f"{package}|{logon_type}"
    if src_comp == dst_comp:
        return CanonicalRecord(t, EVENT_LOCAL_AUTH,
                               (dst_user, auth_type, dst_comp), 0)
    return CanonicalRecord(t, EVENT_REMOTE_AUTH,
                           (dst_user, auth_type, src_comp, dst_comp), 0)


def parse_proc(line: str, line_no: int = 0,
               config: Optional[ParseConfig] = None) -> Optional[CanonicalRecord]:
    """Five comma-separated fields: time, user, computer, process, action.
    Keeps process starts only."""
    parts = line.rstrip("\n").split(",")
    if len(parts) != 5:
        raise ParseError(f"proc line needs 5 fields, got {len(parts)}",
                         line_no=line_no)
    time_s, user, computer, process, action = parts
    try:
        t = int(time_s)
    except ValueError:
        raise ParseError(f"bad timestamp {time_s!r}", line_no=line_no) from None
    if action != "Start":
        return None
    return CanonicalRecord(t, EVENT_PROC_START, (computer, user, process), 0)


def parse_redteam(path: str) -> set[tuple[int, str, str, str]]:
    """Rows of (time, user, source computer, destination computer)."""
    rows = set()
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"red-team line needs 4 fields, got {len(parts)}",
                                 line_no=i)
            rows.add((int(parts[0]), parts[1], parts[2], parts[3]))
    return rows


def parse_auth_file(path: str, config: Optional[ParseConfig] = None,
                    redteam: Optional[set] = None,
                    ) -> tuple[list[CanonicalRecord], IngestStats]:
    """Parse and filter an auth file, joining red-team labels by exact
    (time, destination user, source computer, destination computer) match.
    Malformed lines are counted and reported, never silently dropped."""
    config = config or ParseConfig()
    stats = IngestStats()
    matched: set = set()
    if redteam is not None:
        stats.redteam_rows = len(redteam)
    records: list[CanonicalRecord] = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            stats.total += 1
            try:
                rec = parse_auth(line, i, config)
            except ParseError as exc:
                stats.errored += 1
                stats.error_lines.append(str(exc))
                continue
            if rec is None:
                stats.filtered += 1
                continue
            if redteam is not None:
                parts = line.rstrip("\n").split(",")
                key = (rec.timestamp, parts[2], parts[3], parts[4])
                if key in redteam:
                    rec.label = 1
                    matched.add(key)
            stats.kept += 1
            records.append(rec)
    if redteam is not None:
        stats.redteam_matched = len(matched)
        stats.redteam_unmatched = sorted(redteam - matched)
        if stats.redteam_unmatched:
            logger.warning("%d red-team rows matched no kept auth event",
                           len(stats.redteam_unmatched))
    return records, stats


def parse_proc_file(path: str, config: Optional[ParseConfig] = None,
                    ) -> tuple[list[CanonicalRecord], IngestStats]:
    config = config or ParseConfig()
    stats = IngestStats()
    records: list[CanonicalRecord] = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            stats.total += 1
            try:
                rec = parse_proc(line, i, config)
            except ParseError as exc:
                stats.errored += 1
                stats.error_lines.append(str(exc))
                continue
            if rec is None:
                stats.filtered += 1
                continue
            stats.kept += 1
            records.append(rec)
    return records, stats


def apply_rare_process_token(records: Sequence[CanonicalRecord],
                             threshold: int = 40,
                             window_seconds: Optional[int] = None,
                             train_windows: Optional[int] = None,
                             ) -> tuple[list[CanonicalRecord], int]:
    """Replace process entities whose total occurrence count is strictly
    below `threshold` with the shared rare-process token. Counting spans the
    whole record list; pass window_seconds/train_windows to count on the
    training slice only. Returns (records, distinct processes collapsed)."""
    def in_count_scope(rec: CanonicalRecord) -> bool:
        if train_windows is None or window_seconds is None:
            return True
        return window_of(rec.timestamp, window_seconds) < train_windows

    counts: dict[str, int] = {}
    for rec in records:
        if rec.type_name == EVENT_PROC_START and in_count_scope(rec):
            name = rec.entity_names[2]
            counts[name] = counts.get(name, 0) + 1
    rare = {name for name, c in counts.items() if c < threshold}
    if not rare:
        return list(records), 0
    out = []
    for rec in records:
        if rec.type_name == EVENT_PROC_START and rec.entity_names[2] in rare:
            names = rec.entity_names[:2] + (RARE_PROCESS_TOKEN,)
            out.append(CanonicalRecord(rec.timestamp, rec.type_name, names,
                                       rec.label))
        else:
            out.append(rec)
    return out, len(rare)


# -- canonical event file ---------------------------------------------------------
# Tab-separated: timestamp, event type name, one field per entity name in
# signature order, label in {0, 1, ?}. Names escape backslash/tab/newline/CR.

_ESC = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESC = {"\\\\": "\\", "\\t": "\t", "\\n": "\n", "\\r": "\r"}


def escape_name(name: str) -> str:
    return "".join(_ESC.get(ch, ch) for ch in name)


def unescape_name(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text) and text[i: i + 2] in _UNESC:
            out.append(_UNESC[text[i: i + 2]])
            i += 2
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def format_canonical_line(rec: CanonicalRecord) -> str:
    label = "?" if rec.label is None else str(rec.label)
    fields = [str(rec.timestamp), rec.type_name]
    fields.extend(escape_name(n) for n in rec.entity_names)
    fields.append(label)
    return "\t".join(fields)


def parse_canonical_line(line: str, line_no: int = 0) -> CanonicalRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 4:
        raise ParseError(f"canonical line needs >= 4 fields, got {len(parts)}",
                         line_no=line_no)
    try:
        t = int(parts[0])
    except ValueError:
        raise ParseError(f"bad timestamp {parts[0]!r}", line_no=line_no) from None
    raw_label = parts[-1]
    if raw_label == "?":
        label: Optional[int] = None
    elif raw_label in ("0", "1"):
        label = int(raw_label)
    else:
        raise ParseError(f"bad label {raw_label!r}", line_no=line_no)
    names = tuple(unescape_name(p) for p in parts[2:-1])
    return CanonicalRecord(t, parts[1], names, label)


def write_canonical(path: str, records: Iterable[CanonicalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(format_canonical_line(rec) + "\n")


def read_canonical(path: str) -> list[CanonicalRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            if line.strip():
                out.append(parse_canonical_line(line, i))
    return out


def intern_records(records: Sequence[CanonicalRecord], catalog: Catalog,
                   window_seconds: int) -> list[Event]:
    """Turn name records into id events, interning unseen entities with
    first-seen set to each record's own window index."""
    events = []
    for rec in records:
        eid = catalog.event_type_id(rec.type_name)
        spec = catalog.event_spec(eid)
        if len(rec.entity_names) != spec.arity:
            raise DataError(
                f"{rec.type_name!r} record carries {len(rec.entity_names)} "
                f"entities, expected {spec.arity}"
            )
        step = window_of(rec.timestamp, window_seconds)
        locals_ = tuple(
            catalog.intern_entity(spec.signature[i], name, step)
            for i, name in enumerate(rec.entity_names)
        )
        events.append(Event(rec.timestamp, eid, locals_, rec.label))
    return events


# -- synthetic stream --------------------------------------------------------------


@dataclass
class SynthConfig:
    n_users: int = 200
    n_hosts: int = 150
    n_processes: int = 80
    n_auth_types: int = 4
    n_communities: int = 2
    windows: int = 13
    train_windows: int = 8
    events_per_window: int = 16000
    window_seconds: int = 86400
    anomaly_rate: float = 0.001          # test windows only
    cross_community_rate: float = 0.02   # benign remote auths with foreign dst
    proc_fraction: float = 0.3
    local_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        for rate in (self.anomaly_rate, self.cross_community_rate,
                     self.proc_fraction, self.local_fraction):
            if not 0.0 <= rate <= 1.0:
                raise DataError("rates must be in [0, 1]")
        if self.proc_fraction + self.local_fraction > 1.0:
            raise DataError("proc_fraction + local_fraction must be <= 1")
        if self.n_communities < 2:
            raise DataError("anomaly injection needs >= 2 communities")
        if self.n_hosts < 2 * self.n_communities:
            raise DataError("need at least two hosts per community")
        if not 0 <= self.train_windows <= self.windows:
            raise DataError("train_windows out of range")


def _community_members(n: int, n_comm: int, comm: int) -> np.ndarray:
    return np.arange(comm, n, n_comm)


def generate_synthetic(config: SynthConfig) -> list[CanonicalRecord]:
    """Labelled stream over the three default event types. Entities belong
    to round-robin communities; benign activity stays inside a user's
    community except that a small fraction of remote auths have a foreign
    destination. Injected anomalies are remote auths where an ordinary user
    reaches a foreign source AND destination host, labelled malicious.
    A remote auth "crosses communities" when the destination host's
    community differs from the user's; benign crossing stays at
    cross_community_rate while every anomaly crosses. Byte-identical output
    under a fixed seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    nc = config.n_communities
    user_comm = {c: _community_members(config.n_users, nc, c) for c in range(nc)}
    host_comm = {c: _community_members(config.n_hosts, nc, c) for c in range(nc)}
    proc_comm = {c: _community_members(config.n_processes, nc, c) for c in range(nc)}
    # auth-type popularity decays geometrically, shared by everyone
    auth_p = 0.5 ** np.arange(config.n_auth_types)
    auth_p /= auth_p.sum()

    def pick(arr: np.ndarray) -> int:
        return int(arr[rng.integers(len(arr))])

    def pick_other(arr: np.ndarray, exclude: int) -> int:
        # uniform over arr minus exclude, via index shift
        i = rng.integers(len(arr) - 1)
        v = int(arr[i])
        return int(arr[len(arr) - 1]) if v == exclude else v

    records: list[CanonicalRecord] = []
    for w in range(config.windows):
        base = w * config.window_seconds
        is_test = w >= config.train_windows
        n_anom = round(config.anomaly_rate * config.events_per_window) if is_test else 0
        n_benign = config.events_per_window - n_anom
        window_records: list[CanonicalRecord] = []

        kinds = rng.random(n_benign)
        for j in range(n_benign):
            t = base + int(rng.integers(config.window_seconds))
            u = int(rng.integers(config.n_users))
            c = u % nc
            a = int(rng.choice(config.n_auth_types, p=auth_p))
            atype = f"PKG{a}|L{a}"
            if kinds[j] < config.proc_fraction:
                host = pick(host_comm[c])
                proc = pick(proc_comm[c])
                window_records.append(CanonicalRecord(
                    t, EVENT_PROC_START, (f"C{host}", f"U{u}", f"P{proc}"), 0))
            elif kinds[j] < config.proc_fraction + config.local_fraction:
                host = pick(host_comm[c])
                window_records.append(CanonicalRecord(
                    t, EVENT_LOCAL_AUTH, (f"U{u}", atype, f"C{host}"), 0))
            else:
                src = pick(host_comm[c])
                if rng.random() < config.cross_community_rate:
                    foreign = (c + 1 + int(rng.integers(nc - 1))) % nc
                    dst = pick(host_comm[foreign])
                else:
                    dst = pick_other(host_comm[c], src)
                window_records.append(CanonicalRecord(
                    t, EVENT_REMOTE_AUTH,
                    (f"U{u}", atype, f"C{src}", f"C{dst}"), 0))
        for _ in range(n_anom):
            t = base + int(rng.integers(config.window_seconds))
            u = int(rng.integers(config.n_users))
            c = u % nc
            foreign = (c + 1 + int(rng.integers(nc - 1))) % nc
            src = pick(host_comm[foreign])
            dst = pick_other(host_comm[foreign], src)
            a = int(rng.choice(config.n_auth_types, p=auth_p))
            window_records.append(CanonicalRecord(
                t, EVENT_REMOTE_AUTH,
                (f"U{u}", f"PKG{a}|L{a}", f"C{src}", f"C{dst}"), 1))
        window_records.sort(key=lambda r: r.timestamp)
        records.extend(window_records)
    return records
