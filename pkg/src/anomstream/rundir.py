"""Run-directory layout shared by the CLI and the triage service."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class RunPaths:
    def __init__(self, root):
        self.root = Path(root)
        self.catalog = self.root / "catalog.txt"
        self.catalog_full = self.root / "catalog_full.txt"
        self.params = self.root / "params.bin"
        self.standardizer = self.root / "standardizer.json"
        self.metrics = self.root / "train_metrics.log"
        self.manifest = self.root / "manifest.json"
        self.journal = self.root / "journal.jsonl"
        self.scored_all = self.root / "scored_events.tsv"
        self.report = self.root / "report.txt"
        self.roc_points = self.root / "roc_points.tsv"

    def ensure(self) -> "RunPaths":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def window_params(self, t: int) -> Path:
        return self.root / f"params_window_{t:05d}.bin"

    def window_scored(self, t: int) -> Path:
        return self.root / f"window_{t:05d}_scored.tsv"

    def window_report(self, t: int) -> Path:
        return self.root / f"window_{t:05d}_report.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)
