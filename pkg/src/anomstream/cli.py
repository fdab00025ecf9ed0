"""Operator entry point: ingest, train, replay, eval, serve.

One declarative JSON config drives every command; see README for the key
reference. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import evaluate, ingest, kernels
from .errors import ConfigError, DataError, EngineError
from .model import ModelParams
from .rundir import RunPaths, read_json, sha256_file, write_json
from .schema import Catalog
from .score import (Scorer, Standardizer, fit_standardizer,
                    read_scored_events, write_scored_events)
from .stream import (RetrainConfig, group_by_window, process_window,
                     window_of, window_rng)
from .train import TrainConfig, build_noise_tables, fit

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    seed: int = 0
    window_seconds: int = 86400
    train_windows: int = 8
    paths: dict = field(default_factory=dict)
    schema: Optional[dict] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    ingest_options: ingest.ParseConfig = field(default_factory=ingest.ParseConfig)
    synthetic: Optional[ingest.SynthConfig] = None
    eval_budgets: list = field(default_factory=lambda: [50, 100, 200])
    eval_max_fpr: float = 0.01
    eval_event_types: list = field(default_factory=lambda: sorted(
        evaluate.AUTH_EVENT_TYPES))
    refresh_noise: bool = False
    refresh_standardizer: bool = False


def _fill_dataclass(cls, blob: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(blob) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**blob)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from None


_TOP_LEVEL_KEYS = {
    "seed", "window_seconds", "train_windows", "paths", "schema", "train",
    "retrain", "ingest", "synthetic", "eval", "refresh_noise",
    "refresh_standardizer",
}


def config_from_dict(blob: dict) -> RunConfig:
    unknown = set(blob) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cfg = RunConfig()
    cfg.seed = int(blob.get("seed", cfg.seed))
    cfg.window_seconds = int(blob.get("window_seconds", cfg.window_seconds))
    cfg.train_windows = int(blob.get("train_windows", cfg.train_windows))
    if cfg.window_seconds < 1 or cfg.train_windows < 1:
        raise ConfigError("window_seconds and train_windows must be >= 1")
    cfg.paths = dict(blob.get("paths", {}))
    cfg.schema = blob.get("schema")
    train_blob = dict(blob.get("train", {}))
    train_blob.setdefault("seed", cfg.seed)
    cfg.train = _fill_dataclass(TrainConfig, train_blob, "train")
    cfg.retrain = _fill_dataclass(RetrainConfig, dict(blob.get("retrain", {})),
                                  "retrain")
    ingest_blob = dict(blob.get("ingest", {}))
    if "deny_list" in ingest_blob:
        ingest_blob["deny_list"] = frozenset(ingest_blob["deny_list"])
    cfg.ingest_options = _fill_dataclass(ingest.ParseConfig, ingest_blob,
                                         "ingest")
    if "synthetic" in blob and blob["synthetic"] is not None:
        synth_blob = dict(blob["synthetic"])
        synth_blob.setdefault("seed", cfg.seed)
        synth_blob.setdefault("train_windows", cfg.train_windows)
        synth_blob.setdefault("window_seconds", cfg.window_seconds)
        cfg.synthetic = _fill_dataclass(ingest.SynthConfig, synth_blob,
                                        "synthetic")
    eval_blob = dict(blob.get("eval", {}))
    unknown = set(eval_blob) - {"budgets", "max_fpr", "event_types"}
    if unknown:
        raise ConfigError(f"unknown key(s) in eval: {sorted(unknown)}")
    cfg.eval_budgets = [int(b) for b in eval_blob.get("budgets",
                                                      cfg.eval_budgets)]
    cfg.eval_max_fpr = float(eval_blob.get("max_fpr", cfg.eval_max_fpr))
    cfg.eval_event_types = list(eval_blob.get("event_types",
                                              cfg.eval_event_types))
    cfg.refresh_noise = bool(blob.get("refresh_noise", False))
    cfg.refresh_standardizer = bool(blob.get("refresh_standardizer", False))
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            blob = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(blob, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(blob)


def _require_path(cfg: RunConfig, key: str) -> str:
    value = cfg.paths.get(key)
    if not value:
        raise ConfigError(f"paths.{key} is required for this command")
    return value


def _workdir(cfg: RunConfig) -> RunPaths:
    return RunPaths(_require_path(cfg, "workdir")).ensure()


def _build_catalog(cfg: RunConfig) -> Catalog:
    catalog = Catalog()
    if cfg.schema:
        ingest.register_schema(catalog, cfg.schema)
    else:
        ingest.register_default_schema(catalog)
    return catalog


def _backend_name(args) -> str:
    if getattr(args, "sequential", False):
        return "numpy"  # pure-numpy path is reproducible everywhere
    return getattr(args, "backend", "auto") or "auto"


# -- commands ------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args) -> int:
    events_path = _require_path(cfg, "events")
    paths = _workdir(cfg)
    Path(events_path).parent.mkdir(parents=True, exist_ok=True)

    if args.synthetic:
        if cfg.synthetic is None:
            raise ConfigError("--synthetic needs a `synthetic` config section")
        records = ingest.generate_synthetic(cfg.synthetic)
        stats = ingest.IngestStats(total=len(records), kept=len(records))
    else:
        opts = cfg.ingest_options
        auth_path = cfg.paths.get("raw_auth")
        proc_path = cfg.paths.get("raw_proc")
        if not auth_path and not proc_path:
            raise ConfigError("paths.raw_auth or paths.raw_proc is required "
                              "(or pass --synthetic)")
        redteam = None
        if cfg.paths.get("redteam"):
            redteam = ingest.parse_redteam(cfg.paths["redteam"])
        records = []
        stats = ingest.IngestStats()
        if auth_path:
            recs, st = ingest.parse_auth_file(auth_path, opts, redteam)
            records.extend(recs)
            stats = stats.merged(st)
        if proc_path:
            recs, st = ingest.parse_proc_file(proc_path, opts)
            records.extend(recs)
            stats = stats.merged(st)
        records.sort(key=lambda r: r.timestamp)

    train_windows = (cfg.train_windows
                     if cfg.ingest_options.rare_count_train_only else None)
    records, n_rare = ingest.apply_rare_process_token(
        records, cfg.ingest_options.rare_threshold,
        window_seconds=cfg.window_seconds, train_windows=train_windows)

    ingest.write_canonical(events_path, records)

    catalog = _build_catalog(cfg)
    events = ingest.intern_records(records, catalog, cfg.window_seconds)
    catalog.accumulate_counts(events)
    catalog.save(paths.catalog_full)

    if not records:
        print("warning: no events kept; wrote an empty canonical file")
    print(f"ingest: kept={stats.kept} filtered={stats.filtered} "
          f"errored={stats.errored} rare_processes={n_rare} -> {events_path}")
    if stats.redteam_rows:
        print(f"ingest: red-team rows={stats.redteam_rows} "
              f"matched={stats.redteam_matched} "
              f"unmatched={len(stats.redteam_unmatched)}")
    if stats.errored:
        for msg in stats.error_lines[:5]:
            print(f"ingest error: {msg}", file=sys.stderr)
        raise DataError(f"{stats.errored} malformed line(s); see diagnostics")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    events_path = _require_path(cfg, "events")
    paths = _workdir(cfg)
    records = ingest.read_canonical(events_path)
    train_records = [r for r in records
                     if window_of(r.timestamp, cfg.window_seconds)
                     < cfg.train_windows]
    if not train_records:
        raise DataError("no events in the training windows")

    catalog = _build_catalog(cfg)
    events = ingest.intern_records(train_records, catalog, cfg.window_seconds)
    catalog.accumulate_counts(events)

    with open(paths.metrics, "w", encoding="utf-8") as metrics:
        result = fit(events, catalog, cfg.train,
                     backend_name=_backend_name(args),
                     metrics_sink=lambda line: metrics.write(line + "\n"))

    scored = Scorer(result.params, catalog, None).score_events(events)
    standardizer = fit_standardizer(scored, catalog)

    catalog.save(paths.catalog)
    result.params.save(paths.params)
    standardizer.save(paths.standardizer)
    manifest = {
        "command": "train",
        "backend": result.backend,
        "events": len(events),
        "epochs": len(result.epochs),
        "files": {
            "catalog": sha256_file(paths.catalog),
            "params": sha256_file(paths.params),
            "standardizer": sha256_file(paths.standardizer),
        },
        "config": {
            "seed": cfg.seed,
            "window_seconds": cfg.window_seconds,
            "train_windows": cfg.train_windows,
            "train": dataclasses.asdict(cfg.train),
            "retrain": dataclasses.asdict(cfg.retrain),
        },
    }
    write_json(paths.manifest, manifest)
    print(f"train: events={len(events)} epochs={len(result.epochs)} "
          f"backend={result.backend} params={paths.params}")
    return 0


def _load_label_overrides(path: str) -> dict:
    overrides = {}
    for rec in ingest.read_canonical(path):
        overrides[(rec.timestamp, rec.type_name, rec.entity_names)] = rec.label
    return overrides


def cmd_replay(cfg: RunConfig, args) -> int:
    events_path = _require_path(cfg, "events")
    paths = _workdir(cfg)
    for required in (paths.catalog, paths.params, paths.standardizer):
        if not required.exists():
            raise DataError(f"missing training artifact: {required}; "
                            "run `train` first")
    catalog = Catalog.load(paths.catalog)
    params = ModelParams.load(paths.params)
    standardizer = Standardizer.load(paths.standardizer)
    noises = build_noise_tables(catalog)
    backend = kernels.get_backend(_backend_name(args))

    records = ingest.read_canonical(events_path)
    if args.labels:
        overrides = _load_label_overrides(args.labels)
        for rec in records:
            key = (rec.timestamp, rec.type_name, rec.entity_names)
            if key in overrides:
                rec.label = overrides[key]
    test_records = [r for r in records
                    if window_of(r.timestamp, cfg.window_seconds)
                    >= cfg.train_windows]
    windows = group_by_window(test_records, cfg.window_seconds)
    if not windows:
        raise DataError("no events beyond the training windows")

    done: list[int] = []
    if args.resume:
        for t in sorted(windows):
            if paths.window_params(t).exists() and paths.window_report(t).exists():
                done.append(t)
            else:
                break
    params_in_hash = sha256_file(paths.params)
    if done:
        # rebuild catalog state for the already-processed prefix, then pick
        # up the parameters that came out of the last finished window
        for t in done:
            ingest.intern_records(windows[t], catalog, cfg.window_seconds)
        params = ModelParams.load(paths.window_params(done[-1]))
        params_in_hash = sha256_file(paths.window_params(done[-1]))
        print(f"replay: resuming after window {done[-1]}")

    scored_all_mode = "a" if done else "w"
    with open(paths.scored_all, scored_all_mode, encoding="utf-8"):
        pass  # truncate or touch; per-window appends below

    for t in sorted(windows):
        if t in done:
            continue
        events = ingest.intern_records(windows[t], catalog, cfg.window_seconds)
        report = process_window(
            events, params, catalog, t, noises, cfg.retrain, standardizer,
            window_rng(cfg.seed, t),
            refresh_noise=cfg.refresh_noise,
            refresh_standardizer=cfg.refresh_standardizer,
            backend=backend,
        )
        write_scored_events(paths.window_scored(t), report.scored, catalog)
        write_scored_events(paths.scored_all, report.scored, catalog,
                            append=True)
        params.save(paths.window_params(t))
        params_out_hash = sha256_file(paths.window_params(t))
        blob = {
            "window": t,
            "events": len(events),
            "new_entities": report.new_entities,
            "excluded_malicious": report.excluded_malicious,
            "retrain": dataclasses.asdict(report.retrain),
            "params_in": params_in_hash,
            "params_out": params_out_hash,
            "catalog": str(paths.catalog),
        }
        write_json(paths.window_report(t), blob)
        params_in_hash = params_out_hash
        print(f"replay: window={t} events={len(events)} "
              f"new={sum(report.new_entities.values())} "
              f"excluded={report.excluded_malicious} "
              f"retrain_epochs={report.retrain.epochs_run}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    paths = _workdir(cfg)
    scored_paths = args.scored or [str(paths.scored_all)]
    event_types = frozenset(cfg.eval_event_types)
    reports = []
    for p in scored_paths:
        records = read_scored_events(p)
        reports.append(evaluate.evaluate_scored(
            records, cfg.eval_budgets, cfg.eval_max_fpr,
            cfg.window_seconds, event_types))
    report = reports[0]
    if len(reports) > 1:
        report.run_stats = evaluate.summarize_runs(reports, args.ci)
    evaluate.write_report(paths.report, report)
    evaluate.write_roc_points(paths.roc_points, report)
    print(f"eval: events={report.n_events} positives={report.n_positive} "
          f"auc@{report.max_fpr}={report.auc:.4f}")
    for b in sorted(report.dr_at_budget):
        print(f"eval: dr@{b}={report.dr_at_budget[b]:.4f}")
    for name in sorted(report.run_stats):
        mean, half = report.run_stats[name]
        print(f"eval: runs {name} = {mean:.4f} +- {half:.4f}")
    return 0


def cmd_serve(cfg: RunConfig, args) -> int:
    import uvicorn

    from .service import build_app

    app = build_app(cfg, backend_name=_backend_name(args))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomstream",
        description="Streaming anomaly detection over typed event logs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("ingest", help="parse raw logs or generate a "
                                      "synthetic stream")
    add_common(p)
    p.add_argument("--synthetic", action="store_true",
                   help="generate from the `synthetic` config section")

    p = sub.add_parser("train", help="fit embeddings on the training windows")
    add_common(p)
    p.add_argument("--backend", choices=["auto", "compiled", "numpy"],
                   default="auto")
    p.add_argument("--sequential", action="store_true",
                   help="force the numpy backend for bit-reproducible runs")

    p = sub.add_parser("replay", help="stream the test windows: score, "
                                      "then retrain per window")
    add_common(p)
    p.add_argument("--backend", choices=["auto", "compiled", "numpy"],
                   default="auto")
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--resume", action="store_true",
                   help="skip windows that already have snapshots")
    p.add_argument("--labels", default=None,
                   help="canonical-format file overriding labels by exact "
                        "(timestamp, type, entities) match")

    p = sub.add_parser("eval", help="compute detection metrics from scored "
                                    "event files")
    add_common(p)
    p.add_argument("--scored", nargs="*", default=None,
                   help="scored files (several -> per-run mean and CI)")
    p.add_argument("--ci", choices=["normal", "percentile"], default="normal")

    p = sub.add_parser("serve", help="serve the analyst triage API")
    add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--backend", choices=["auto", "compiled", "numpy"],
                   default="auto")
    p.add_argument("--sequential", action="store_true")

    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "replay": cmd_replay,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
