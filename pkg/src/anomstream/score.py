"""Event scoring: discrete p-values from the exact conditional softmax,
log-aggregated raw scores, and per-event-type standardization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, NumericError
from .model import CLAMP, ModelParams, conditional_distribution
from .schema import Catalog, Event

EPS_STD = 1e-6
FLAG_UNSTANDARDIZED = "unstandardized"

# events per softmax chunk are sized so chunk*|V| stays near this many floats
_CHUNK_BUDGET = 1 << 21


@dataclass
class ScoredEvent:
    event: Event
    p_values: tuple[float, ...]       # one per predicted position, in (0, 1]
    raw_score: float                  # y >= 0
    standardized_score: float
    flags: tuple[str, ...] = ()


def discrete_p_value(params: ModelParams, catalog: Catalog, event: Event,
                     position: int, up_to: Optional[int] = None) -> float:
    """Total probability of candidates no more likely than the observed one:
    sum_v p(v) * 1{p(v) <= p(observed)}, ties on the <= side."""
    spec = catalog.event_spec(event.event_type)
    cand_type = spec.signature[position - 1]
    if up_to is None:
        locals_ = np.arange(catalog.n_entities(cand_type), dtype=np.int64)
    else:
        locals_ = catalog.entities_seen_up_to(cand_type, up_to)
    probs = conditional_distribution(
        params, catalog, event.event_type, position,
        event.entities[: position - 1], up_to=up_to,
    )
    observed = event.entities[position - 1]
    where = np.nonzero(locals_ == observed)[0]
    if len(where) == 0:
        raise DataError(
            f"observed entity {observed} not in the candidate set at "
            f"position {position}"
        )
    p_obs = probs[where[0]]
    return float(probs[probs <= p_obs].sum())


def raw_event_score(p_values: Sequence[float]) -> float:
    """y = -(1/(N_e - 1)) sum_i log p_i; zero iff every p-value is 1."""
    if len(p_values) == 0:
        raise DataError("raw_event_score needs at least one p-value")
    total = 0.0
    for p in p_values:
        if p <= 0.0:
            raise NumericError(f"p-value {p} out of range (0, 1]")
        total += math.log(p)
    return -total / len(p_values)


@dataclass
class Standardizer:
    """Per-event-type mean/std of raw training scores (sample std, floored)."""

    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def has_type(self, event_type_name: str) -> bool:
        return event_type_name in self.mean

    def transform(self, event_type_name: str, raw: float) -> float:
        if event_type_name not in self.mean:
            raise DataError(f"standardizer not fitted for {event_type_name!r}")
        return (raw - self.mean[event_type_name]) / self.std[event_type_name]

    def transform_or_flag(self, event_type_name: str,
                          raw: float) -> tuple[float, tuple[str, ...]]:
        """Types unseen in training pass through with mean 0 / std 1, flagged."""
        if event_type_name in self.mean:
            return self.transform(event_type_name, raw), ()
        return raw, (FLAG_UNSTANDARDIZED,)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"mean": self.mean, "std": self.std}, f, indent=2,
                      sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Standardizer":
        with open(path, encoding="utf-8") as f:
            blob = json.load(f)
        return cls(mean=dict(blob["mean"]), std=dict(blob["std"]))


def fit_standardizer(scored: Sequence[ScoredEvent], catalog: Catalog) -> Standardizer:
    """Sample mean/std (ddof=1) of raw scores per event type; std floored at
    EPS_STD so degenerate types stay finite."""
    by_type: dict[str, list[float]] = {}
    for s in scored:
        name = catalog.event_spec(s.event.event_type).name
        by_type.setdefault(name, []).append(s.raw_score)
    st = Standardizer()
    for name, ys in by_type.items():
        if len(ys) < 2:
            raise DataError(f"need >= 2 training events of type {name!r} "
                            "to fit the standardizer")
        arr = np.asarray(ys)
        st.mean[name] = float(arr.mean())
        st.std[name] = float(max(arr.std(ddof=1), EPS_STD))
    return st


def standardized_score(standardizer: Standardizer, event_type_name: str,
                       raw: float) -> float:
    return standardizer.transform(event_type_name, raw)


class Scorer:
    """Batch scorer over immutable parameters. `up_to` restricts every
    candidate set to entities first seen at or before that window."""

    def __init__(self, params: ModelParams, catalog: Catalog,
                 standardizer: Optional[Standardizer] = None):
        self.params = params
        self.catalog = catalog
        self.standardizer = standardizer

    def _position_p_values(self, events: Sequence[Event], idx: np.ndarray,
                           event_type: int, position: int,
                           up_to: Optional[int]) -> np.ndarray:
        spec = self.catalog.event_spec(event_type)
        tp = self.params.type_params[event_type]
        cand_type = spec.signature[position - 1]
        if up_to is None:
            cand = np.arange(self.catalog.n_entities(cand_type), dtype=np.int64)
        else:
            cand = self.catalog.entities_seen_up_to(cand_type, up_to)
        if len(cand) == 0:
            raise DataError(
                f"empty candidate set for {spec.name!r} position {position}"
            )
        cand_emb = self.params.embeddings[self.catalog.global_rows(cand_type)[cand]]

        b = len(idx)
        prefix_rows = np.empty((b, position - 1), dtype=np.int64)
        obs_local = np.empty(b, dtype=np.int64)
        for r, j in enumerate(idx):
            ev = events[j]
            for p in range(position - 1):
                prefix_rows[r, p] = self.catalog.global_row(
                    spec.signature[p], ev.entities[p])
            obs_local[r] = ev.entities[position - 1]

        obs_pos = np.searchsorted(cand, obs_local)
        bad = (obs_pos >= len(cand)) | (cand[np.minimum(obs_pos, len(cand) - 1)]
                                        != obs_local)
        if bad.any():
            raise DataError(
                f"observed entity outside the candidate set for {spec.name!r} "
                f"position {position}; intern the window before scoring"
            )

        w = tp.weights[position - 2]
        out = np.empty(b)
        chunk = max(1, _CHUNK_BUDGET // max(1, len(cand)))
        for s in range(0, b, chunk):
            e = min(b, s + chunk)
            ctx = np.einsum("j,bjd->bd", w,
                            self.params.embeddings[prefix_rows[s:e]])
            logits = (ctx * tp.beta) @ cand_emb.T
            np.clip(logits, -CLAMP, CLAMP, out=logits)
            logits -= logits.max(axis=1, keepdims=True)
            np.exp(logits, out=logits)
            probs = logits / logits.sum(axis=1, keepdims=True)
            p_obs = probs[np.arange(e - s), obs_pos[s:e]]
            out[s:e] = np.where(probs <= p_obs[:, None], probs, 0.0).sum(axis=1)
        return out

    def score_events(self, events: Sequence[Event],
                     up_to: Optional[int] = None) -> list[ScoredEvent]:
        n = len(events)
        p_vals: list[Optional[list[float]]] = [None] * n
        by_type: dict[int, list[int]] = {}
        for j, ev in enumerate(events):
            self.catalog.validate_event(ev)
            by_type.setdefault(ev.event_type, []).append(j)
        for eid in sorted(by_type):
            idx = np.asarray(by_type[eid], dtype=np.int64)
            spec = self.catalog.event_spec(eid)
            cols = []
            for i in range(2, spec.arity + 1):
                cols.append(self._position_p_values(events, idx, eid, i, up_to))
            stacked = np.stack(cols, axis=1)
            for r, j in enumerate(idx):
                p_vals[j] = stacked[r].tolist()
        out = []
        for j, ev in enumerate(events):
            ps = tuple(p_vals[j])
            y = raw_event_score(ps)
            name = self.catalog.event_spec(ev.event_type).name
            if self.standardizer is None:
                z, flags = y, ()
            else:
                z, flags = self.standardizer.transform_or_flag(name, y)
            out.append(ScoredEvent(ev, ps, y, z, flags))
        return out


# -- scored-record files ---------------------------------------------------------

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r", ",": "\\c"}
_UNESCAPES = {"\\\\": "\\", "\\t": "\t", "\\n": "\n", "\\r": "\r", "\\c": ","}


def _escape(text: str) -> str:
    out = []
    for ch in text:
        out.append(_ESCAPES.get(ch, ch))
    return "".join(out)


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text):
            pair = text[i: i + 2]
            if pair in _UNESCAPES:
                out.append(_UNESCAPES[pair])
                i += 2
                continue
        out.append(text[i])
        i += 1
    return "".join(out)


def format_scored_line(scored: ScoredEvent, catalog: Catalog) -> str:
    """timestamp, event type, entity names, p-values, y, z, label, flags
    (tab-separated; list fields comma-joined with escaped names)."""
    ev = scored.event
    spec = catalog.event_spec(ev.event_type)
    names = ",".join(
        _escape(catalog.entity_name(spec.signature[i], local))
        for i, local in enumerate(ev.entities)
    )
    ps = ",".join(repr(p) for p in scored.p_values)
    label = "?" if ev.label is None else str(ev.label)
    flags = ",".join(scored.flags) if scored.flags else "-"
    return "\t".join([
        str(ev.timestamp), spec.name, names, ps,
        repr(scored.raw_score), repr(scored.standardized_score), label, flags,
    ])


def write_scored_events(path: str, scored: Sequence[ScoredEvent],
                        catalog: Catalog, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for s in scored:
            f.write(format_scored_line(s, catalog) + "\n")


@dataclass
class ScoredRecord:
    """Parsed scored line; entities kept as names (catalog-independent)."""

    timestamp: int
    event_type: str
    entities: tuple[str, ...]
    p_values: tuple[float, ...]
    raw_score: float
    standardized_score: float
    label: Optional[int]
    flags: tuple[str, ...]


def parse_scored_line(line: str, line_no: int = 0) -> ScoredRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 8:
        raise DataError(f"line {line_no}: expected 8 fields, got {len(parts)}")
    label = None if parts[6] == "?" else int(parts[6])
    flags = () if parts[7] == "-" else tuple(parts[7].split(","))
    return ScoredRecord(
        timestamp=int(parts[0]),
        event_type=parts[1],
        entities=tuple(_unescape(t) for t in parts[2].split(",")),
        p_values=tuple(float(t) for t in parts[3].split(",")),
        raw_score=float(parts[4]),
        standardized_score=float(parts[5]),
        label=label,
        flags=flags,
    )


def read_scored_events(path: str) -> list[ScoredRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            if line.strip():
                out.append(parse_scored_line(line, i))
    return out
