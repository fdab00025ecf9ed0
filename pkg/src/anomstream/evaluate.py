"""Detection metrics: truncated ROC with normalized partial AUC, per-day
budgeted detection rate, and cross-run confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError
from .score import ScoredRecord
from .stream import window_of

DEFAULT_BUDGET_FRACTION = 0.01
AUTH_EVENT_TYPES = frozenset({"local_auth", "remote_auth"})


def truncated_roc(scores: Sequence[float], labels: Sequence[int],
                  max_fpr: float = 0.01,
                  ) -> tuple[list[tuple[float, float]], float]:
    """ROC by descending-score sweep with tied scores grouped into single
    vertices, truncated at max_fpr with linear interpolation, area normalized
    by max_fpr. Returns (points, auc)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be equal-length vectors")
    if not 0.0 < max_fpr <= 1.0:
        raise DataError("max_fpr must be in (0, 1]")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("need at least one positive and one negative label")
    if n_pos + n_neg != len(y):
        raise DataError("labels must be 0 or 1")

    order = np.argsort(-s, kind="stable")
    ss = s[order]
    yy = y[order]
    vertices: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(ss)
    while i < n:
        j = i
        while j < n and ss[j] == ss[i]:
            j += 1
        tp += int(yy[i:j].sum())
        fp += (j - i) - int(yy[i:j].sum())
        vertices.append((fp / n_neg, tp / n_pos))
        i = j

    points = [(0.0, 0.0)]
    area = 0.0
    px, py = 0.0, 0.0
    for x, yv in vertices[1:]:
        if x <= max_fpr:
            area += (x - px) * (yv + py) / 2.0
            points.append((x, yv))
            px, py = x, yv
        else:
            frac = (max_fpr - px) / (x - px)
            yi = py + frac * (yv - py)
            area += (max_fpr - px) * (yi + py) / 2.0
            if (max_fpr, yi) != points[-1]:  # vertex may sit on the boundary
                points.append((max_fpr, yi))
            px, py = max_fpr, yi
            break
    return points, area / max_fpr


def _normalize_day(items) -> list[tuple[float, int, int, int]]:
    out = []
    for idx, item in enumerate(items):
        if len(item) == 2:
            score, label = item
            ts = 0
        else:
            score, label, ts = item[0], item[1], item[2]
        if label not in (0, 1):
            raise DataError("labels must be 0 or 1")
        out.append((float(score), int(label), int(ts), idx))
    return out


def detection_rate_at_budget(daily_scores: Mapping[int, Sequence],
                             budget: int) -> float:
    """Fraction of all malicious events found by taking the `budget`
    highest-scored events each day. Ties: higher score, then earlier
    timestamp, then input order."""
    if budget < 1:
        raise DataError("budget must be >= 1")
    total_mal = 0
    caught = 0
    for day in sorted(daily_scores):
        items = _normalize_day(daily_scores[day])
        total_mal += sum(label for _, label, _, _ in items)
        top = sorted(items, key=lambda r: (-r[0], r[2], r[3]))[:budget]
        caught += sum(label for _, label, _, _ in top)
    if total_mal == 0:
        raise DataError("no malicious events in the evaluation slice")
    return caught / total_mal


def confidence_interval(values: Sequence[float],
                        method: str = "normal") -> tuple[float, float]:
    """(mean, half_width) over per-run metric values. `normal` gives
    1.96 * s / sqrt(n) with sample std; `percentile` gives half the
    2.5th-97.5th empirical spread."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) < 2:
        raise DataError("confidence interval needs >= 2 runs")
    mean = float(arr.mean())
    if method == "normal":
        half = float(1.96 * arr.std(ddof=1) / np.sqrt(len(arr)))
    elif method == "percentile":
        lo, hi = np.percentile(arr, [2.5, 97.5])
        half = float((hi - lo) / 2.0)
    else:
        raise DataError(f"unknown CI method {method!r}")
    return mean, half


@dataclass
class EvalReport:
    max_fpr: float
    auc: float
    roc_points: list[tuple[float, float]]
    dr_at_budget: dict[int, float]
    n_events: int
    n_positive: int
    run_stats: dict[str, tuple[float, float]] = field(default_factory=dict)


def evaluate_scored(records: Sequence[ScoredRecord], budgets: Sequence[int],
                    max_fpr: float = 0.01, window_seconds: int = 86400,
                    event_types: Optional[frozenset] = AUTH_EVENT_TYPES,
                    ) -> EvalReport:
    """Metrics over scored records, restricted to the given event types
    (authentication events by default; process events are scored but not
    judged). Records without a label count as benign."""
    rows = [r for r in records
            if event_types is None or r.event_type in event_types]
    if not rows:
        raise DataError("no events after the event-type filter")
    scores = [r.standardized_score for r in rows]
    labels = [r.label if r.label is not None else 0 for r in rows]
    points, auc = truncated_roc(scores, labels, max_fpr)
    daily: dict[int, list[tuple[float, int, int]]] = {}
    for r, lab in zip(rows, labels):
        day = window_of(r.timestamp, window_seconds)
        daily.setdefault(day, []).append((r.standardized_score, lab,
                                          r.timestamp))
    dr = {int(b): detection_rate_at_budget(daily, int(b)) for b in budgets}
    return EvalReport(max_fpr=max_fpr, auc=auc, roc_points=points,
                      dr_at_budget=dr, n_events=len(rows),
                      n_positive=int(sum(labels)))


def summarize_runs(reports: Sequence[EvalReport],
                   method: str = "normal") -> dict[str, tuple[float, float]]:
    """Mean and 95% CI per metric across per-run reports."""
    if len(reports) < 2:
        raise DataError("run summary needs >= 2 reports")
    stats = {"auc": confidence_interval([r.auc for r in reports], method)}
    budgets = sorted(reports[0].dr_at_budget)
    for r in reports[1:]:
        if sorted(r.dr_at_budget) != budgets:
            raise DataError("reports disagree on budget set")
    for b in budgets:
        stats[f"dr@{b}"] = confidence_interval(
            [r.dr_at_budget[b] for r in reports], method)
    return stats


def render_report(report: EvalReport) -> str:
    lines = [
        f"events: {report.n_events}",
        f"positives: {report.n_positive}",
        f"max_fpr: {report.max_fpr!r}",
        f"auc_normalized: {report.auc!r}",
    ]
    for b in sorted(report.dr_at_budget):
        lines.append(f"dr@{b}: {report.dr_at_budget[b]!r}")
    for name in sorted(report.run_stats):
        mean, half = report.run_stats[name]
        lines.append(f"runs.{name}: {mean!r} +- {half!r}")
    lines.append("roc_points:")
    lines.append("fpr\ttpr")
    for x, y in report.roc_points:
        lines.append(f"{x!r}\t{y!r}")
    return "\n".join(lines) + "\n"


def write_report(path: str, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(render_report(report))


def write_roc_points(path: str, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("fpr\ttpr\n")
        for x, y in report.roc_points:
            f.write(f"{x!r}\t{y!r}\n")
