"""Analyst triage service: serves ranked anomalies per window over HTTP and
feeds verdicts back into the retraining exclusion step.

Windows move scoring -> awaiting_review -> (retraining) -> closed, strictly
in order; the next window is scored only after the previous one closes.
Every verdict and retrain is appended to a journal, and deterministic
per-window seeding makes an unattended service run match `replay` output.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import ingest, kernels
from .errors import DataError
from .model import ModelParams
from .rundir import RunPaths, read_json, sha256_file, write_json
from .schema import LABEL_MALICIOUS, Catalog
from .score import Standardizer, read_scored_events, write_scored_events
from .stream import (initialize_new_entities, retrain, score_window,
                     window_of, window_rng)
from .train import build_noise_tables

logger = logging.getLogger(__name__)

PHASE_SCORING = "scoring"
PHASE_AWAITING = "awaiting_review"
PHASE_RETRAINING = "retraining"
PHASE_CLOSED = "closed"

VERDICT_UNREVIEWED = "unreviewed"
VERDICT_BENIGN = "benign"
VERDICT_MALICIOUS = "malicious"


@dataclass
class TriageItem:
    event_id: str
    window: int
    rank: int
    z: float
    raw: float
    p_values: list[float]
    timestamp: int
    event_type: str
    entities: list[str]
    verdict: str = VERDICT_UNREVIEWED
    note: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class WindowRuntime:
    index: int
    records: list
    phase: str = PHASE_SCORING
    items: list[TriageItem] = field(default_factory=list)
    by_id: dict[str, TriageItem] = field(default_factory=dict)
    events: list = field(default_factory=list)
    new_entities: dict[str, int] = field(default_factory=dict)
    params_in: str = ""
    params_out: str = ""
    retrain_stats: Optional[dict] = None


class VerdictBody(BaseModel):
    event_id: str
    verdict: str
    note: str = ""


class TriageService:
    """Owns the pipeline state; all mutations run under one lock."""

    def __init__(self, cfg, backend_name: str = "auto"):
        # cfg is a cli.RunConfig; imported lazily to avoid a module cycle
        self.cfg = cfg
        self.paths = RunPaths(cfg.paths["workdir"]).ensure()
        self.backend = kernels.get_backend(backend_name)
        self.lock = threading.Lock()

        for required in (self.paths.catalog, self.paths.params,
                         self.paths.standardizer):
            if not required.exists():
                raise DataError(f"missing training artifact: {required}; "
                                "run `train` first")
        self.catalog = Catalog.load(self.paths.catalog)
        self.params = ModelParams.load(self.paths.params)
        self.standardizer = Standardizer.load(self.paths.standardizer)
        self.noises = build_noise_tables(self.catalog)

        events_path = cfg.paths.get("events")
        if not events_path:
            raise DataError("paths.events is required to serve")
        records = ingest.read_canonical(events_path)
        test = [r for r in records
                if window_of(r.timestamp, cfg.window_seconds)
                >= cfg.train_windows]
        buckets: dict[int, list] = {}
        for r in test:
            buckets.setdefault(window_of(r.timestamp, cfg.window_seconds),
                               []).append(r)
        self.order = sorted(buckets)
        if not self.order:
            raise DataError("no events beyond the training windows")
        self.windows = {t: WindowRuntime(index=t, records=buckets[t])
                        for t in self.order}
        self._params_hash = sha256_file(self.paths.params)
        self._restore()

    # -- persistence ---------------------------------------------------------

    def _journal_append(self, entry: dict) -> None:
        entry = dict(entry)
        entry["at"] = time.time()
        with open(self.paths.journal, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
            f.flush()

    def _read_journal(self) -> list[dict]:
        if not self.paths.journal.exists():
            return []
        out = []
        with open(self.paths.journal, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    out.append(json.loads(line))
        return out

    def _state_path(self):
        return self.paths.root / "service_state.json"

    def _save_state(self) -> None:
        closed = [t for t in self.order
                  if self.windows[t].phase == PHASE_CLOSED]
        write_json(self._state_path(), {"closed": closed})

    def _restore(self) -> None:
        """Rebuild from snapshots plus the journal: closed windows come back
        from their scored files and saved parameters; verdicts for the open
        window are re-applied from the journal."""
        closed: list[int] = []
        if self._state_path().exists():
            closed = list(read_json(self._state_path()).get("closed", []))
        journal = self._read_journal()
        verdicts: dict[str, tuple[str, str]] = {}
        for entry in journal:
            if entry.get("op") == "verdict":
                verdicts[entry["event_id"]] = (entry["verdict"],
                                               entry.get("note", ""))

        for t in closed:
            w = self.windows.get(t)
            if w is None:
                continue
            w.events = ingest.intern_records(w.records, self.catalog,
                                             self.cfg.window_seconds)
            if not self.paths.window_scored(t).exists():
                raise DataError(f"state snapshot lists window {t} as closed "
                                "but its scored file is missing")
            self._items_from_scored_file(w)
            for item in w.items:
                if item.event_id in verdicts:
                    item.verdict, item.note = verdicts[item.event_id]
            w.phase = PHASE_CLOSED
            if self.cfg.refresh_noise:
                keep = self._retrain_events(w)
                self.catalog.accumulate_counts(keep)
            report_path = self.paths.window_report(t)
            if report_path.exists():
                blob = read_json(report_path)
                w.params_in = blob.get("params_in", "")
                w.params_out = blob.get("params_out", "")
                w.retrain_stats = blob.get("retrain")
                w.new_entities = blob.get("new_entities", {})
        if closed:
            last = closed[-1]
            self.params = ModelParams.load(self.paths.window_params(last))
            self._params_hash = sha256_file(self.paths.window_params(last))
            if self.cfg.refresh_noise:
                self.noises = build_noise_tables(self.catalog)

        self._advance()
        current = self._current_open()
        if current is not None:
            for item in current.items:
                if item.event_id in verdicts and item.verdict == VERDICT_UNREVIEWED:
                    item.verdict, item.note = verdicts[item.event_id]

    def _items_from_scored_file(self, w: WindowRuntime) -> None:
        rows = read_scored_events(self.paths.window_scored(w.index))
        if len(rows) != len(w.records):
            raise DataError(f"scored file for window {w.index} does not "
                            "match the event stream")
        ranked = sorted(
            range(len(rows)),
            key=lambda j: (-rows[j].standardized_score, rows[j].timestamp, j))
        w.items = []
        w.by_id = {}
        for rank, j in enumerate(ranked, start=1):
            r = rows[j]
            item = TriageItem(
                event_id=f"{w.index}:{j}", window=w.index, rank=rank,
                z=r.standardized_score, raw=r.raw_score,
                p_values=list(r.p_values), timestamp=r.timestamp,
                event_type=r.event_type, entities=list(r.entities))
            w.items.append(item)
            w.by_id[item.event_id] = item

    # -- pipeline ------------------------------------------------------------

    def _current_open(self) -> Optional[WindowRuntime]:
        for t in self.order:
            w = self.windows[t]
            if w.phase != PHASE_CLOSED:
                return w if w.phase in (PHASE_AWAITING, PHASE_RETRAINING) else None
        return None

    def _advance(self) -> None:
        """Score the next pending window once every earlier one is closed."""
        for t in self.order:
            w = self.windows[t]
            if w.phase == PHASE_CLOSED:
                continue
            if w.phase == PHASE_SCORING:
                self._score_window(w)
            return

    def _score_window(self, w: WindowRuntime) -> None:
        w.params_in = self._params_hash
        w.events = ingest.intern_records(w.records, self.catalog,
                                         self.cfg.window_seconds)
        w.new_entities = initialize_new_entities(self.params, self.catalog,
                                                 w.index)
        scored = score_window(self.params, self.catalog, w.events, w.index,
                              self.standardizer)
        write_scored_events(self.paths.window_scored(w.index), scored,
                            self.catalog)
        ranked = sorted(
            range(len(scored)),
            key=lambda j: (-scored[j].standardized_score,
                           scored[j].event.timestamp, j))
        w.items = []
        w.by_id = {}
        for rank, j in enumerate(ranked, start=1):
            s = scored[j]
            spec = self.catalog.event_spec(s.event.event_type)
            names = [self.catalog.entity_name(spec.signature[i], local)
                     for i, local in enumerate(s.event.entities)]
            item = TriageItem(
                event_id=f"{w.index}:{j}", window=w.index, rank=rank,
                z=s.standardized_score, raw=s.raw_score,
                p_values=list(s.p_values), timestamp=s.event.timestamp,
                event_type=spec.name, entities=names)
            w.items.append(item)
            w.by_id[item.event_id] = item
        w.phase = PHASE_AWAITING
        self._journal_append({"op": "window_scored", "window": w.index,
                              "events": len(w.events)})
        logger.info("window %d scored: %d events", w.index, len(w.events))

    def _retrain_indices(self, w: WindowRuntime) -> list[int]:
        malicious_ids = {i.event_id for i in w.items
                         if i.verdict == VERDICT_MALICIOUS}
        return [j for j, ev in enumerate(w.events)
                if ev.label != LABEL_MALICIOUS
                and f"{w.index}:{j}" not in malicious_ids]

    def _retrain_events(self, w: WindowRuntime) -> list:
        return [w.events[j] for j in self._retrain_indices(w)]

    def _do_retrain(self, w: WindowRuntime, journal: bool = True) -> None:
        w.phase = PHASE_RETRAINING
        keep_idx = self._retrain_indices(w)
        keep = [w.events[j] for j in keep_idx]
        kept_set = set(keep_idx)
        excluded = [f"{w.index}:{j}" for j in range(len(w.events))
                    if j not in kept_set]
        if self.cfg.refresh_noise and keep:
            self.catalog.accumulate_counts(keep)
            self.noises = build_noise_tables(self.catalog)
        stats = retrain(keep, self.params, self.catalog, self.cfg.retrain,
                        window_rng(self.cfg.seed, w.index), self.noises,
                        window_idx=w.index, backend=self.backend)
        self.params.save(self.paths.window_params(w.index))
        w.params_out = sha256_file(self.paths.window_params(w.index))
        self._params_hash = w.params_out
        w.retrain_stats = dataclasses.asdict(stats)
        write_json(self.paths.window_report(w.index), {
            "window": w.index,
            "events": len(w.events),
            "new_entities": w.new_entities,
            "excluded_malicious": len(w.events) - len(keep),
            "retrain": w.retrain_stats,
            "params_in": w.params_in,
            "params_out": w.params_out,
            "retrain_set_size": len(keep),
            "excluded_event_ids": excluded,
        })
        w.phase = PHASE_CLOSED
        if journal:
            self._journal_append({
                "op": "retrain", "window": w.index,
                "retrain_set_size": len(keep),
                "excluded_event_ids": excluded,
            })
        self._save_state()
        self._advance()

    # -- API surface -----------------------------------------------------------

    def list_windows(self) -> list[dict]:
        out = []
        for t in self.order:
            w = self.windows[t]
            out.append({
                "window": t,
                "phase": w.phase,
                "events": len(w.records),
                "new_entities": w.new_entities,
                "params_in": w.params_in,
                "params_out": w.params_out,
            })
        return out

    def window_detail(self, t: int) -> dict:
        w = self._window_or_404(t)
        return {
            "window": t,
            "phase": w.phase,
            "events": len(w.records),
            "new_entities": w.new_entities,
            "params_in": w.params_in,
            "params_out": w.params_out,
            "retrain": w.retrain_stats,
        }

    def _window_or_404(self, t: int) -> WindowRuntime:
        w = self.windows.get(t)
        if w is None:
            raise HTTPException(status_code=404, detail=f"unknown window {t}")
        return w

    def top_anomalies(self, t: int, limit: int) -> list[TriageItem]:
        w = self._window_or_404(t)
        if w.phase == PHASE_SCORING:
            raise HTTPException(status_code=409,
                                detail=f"window {t} is not scored yet")
        if limit < 0:
            raise HTTPException(status_code=400, detail="limit must be >= 0")
        return w.items[:limit]

    def submit_verdict(self, t: int, body: VerdictBody) -> TriageItem:
        w = self._window_or_404(t)
        if body.verdict not in (VERDICT_BENIGN, VERDICT_MALICIOUS):
            raise HTTPException(status_code=400,
                                detail=f"bad verdict {body.verdict!r}")
        item = w.by_id.get(body.event_id)
        if item is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown event {body.event_id!r}")
        if item.verdict == body.verdict and item.note == (body.note or ""):
            return item  # idempotent repeat
        if w.phase != PHASE_AWAITING:
            raise HTTPException(
                status_code=409,
                detail=f"window {t} is {w.phase}; verdicts are frozen")
        if item.verdict != VERDICT_UNREVIEWED:
            raise HTTPException(
                status_code=409,
                detail=f"event {body.event_id!r} already has a verdict")
        item.verdict = body.verdict
        item.note = body.note or ""
        self._journal_append({"op": "verdict", "window": t,
                              "event_id": body.event_id,
                              "verdict": body.verdict, "note": item.note})
        return item

    def trigger_retrain(self, t: int) -> dict:
        w = self._window_or_404(t)
        if w.phase != PHASE_AWAITING:
            raise HTTPException(
                status_code=409,
                detail=f"window {t} is {w.phase}, not awaiting_review")
        self._do_retrain(w)
        return self.window_detail(t)


def build_app(cfg, backend_name: str = "auto") -> FastAPI:
    service = TriageService(cfg, backend_name)
    app = FastAPI(title="anomstream triage", version="1")
    app.state.service = service

    @app.get("/v1/windows")
    def list_windows():
        with service.lock:
            return {"windows": service.list_windows()}

    @app.get("/v1/windows/{t}")
    def window_detail(t: int):
        with service.lock:
            return service.window_detail(t)

    @app.get("/v1/windows/{t}/anomalies")
    def top_anomalies(t: int, limit: int = 50):
        with service.lock:
            items = service.top_anomalies(t, limit)
            return {"window": t, "phase": service.windows[t].phase,
                    "items": [i.to_dict() for i in items]}

    @app.post("/v1/windows/{t}/verdicts")
    def submit_verdict(t: int, body: VerdictBody):
        with service.lock:
            return service.submit_verdict(t, body).to_dict()

    @app.post("/v1/windows/{t}/retrain")
    def trigger_retrain(t: int):
        with service.lock:
            return service.trigger_retrain(t)

    return app
