"""Windowed online operation: score each window with frozen parameters,
mean-initialize unseen entities, then retrain embeddings only, anchored to
their previous values with separate new-entity and old-entity weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import DataError
from .model import ModelParams
from .schema import Catalog, Event, LABEL_MALICIOUS
from .score import ScoredEvent, Scorer, Standardizer, fit_standardizer
from .train import (Adam, EmbeddingAnchor, NoiseDistribution, TrainConfig,
                    build_noise_tables, evaluate_loss, pack_events, run_epoch,
                    sample_fixed_negatives)

logger = logging.getLogger(__name__)


@dataclass
class RetrainConfig:
    lambda0: float = 1e-4          # pull on entities first seen this window
    lambda1: float = 1.0           # pull on previously seen entities
    learning_rate: float = 1e-4
    batch_size: int = 256
    validation_fraction: float = 0.05
    patience: int = 2              # epochs without significant improvement
    min_improvement: float = 1e-3  # relative validation-loss decrease
    max_epochs: int = 30
    negatives: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def validate(self) -> None:
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise DataError("regularizer weights must be >= 0")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise DataError("validation_fraction must be in (0, 0.5]")
        if self.patience < 1 or self.max_epochs < 0 or self.negatives < 1:
            raise DataError("patience/max_epochs/negatives out of range")


@dataclass
class RetrainStats:
    epochs_run: int = 0
    retrain_size: int = 0
    validation_size: int = 0
    best_val_loss: Optional[float] = None
    final_val_loss: Optional[float] = None
    stopped_early: bool = False
    rejected_batches: int = 0
    drift_old_max: float = 0.0
    drift_old_median: float = 0.0
    drift_new_max: float = 0.0
    drift_new_median: float = 0.0


@dataclass
class WindowReport:
    window_index: int
    scored: list[ScoredEvent]
    new_entities: dict[str, int] = field(default_factory=dict)
    excluded_malicious: int = 0
    retrain: RetrainStats = field(default_factory=RetrainStats)


def window_of(timestamp: int, window_seconds: int) -> int:
    return int(timestamp // window_seconds)


def group_by_window(records, window_seconds: int) -> dict[int, list]:
    """Bucket anything with a .timestamp by window index, ascending keys."""
    out: dict[int, list] = {}
    for r in records:
        out.setdefault(window_of(r.timestamp, window_seconds), []).append(r)
    return {k: out[k] for k in sorted(out)}


def window_rng(seed: int, window_idx: int) -> np.random.Generator:
    """Stream for one window, stable across replay and service runs."""
    return np.random.default_rng(np.random.SeedSequence((seed, window_idx)))


def init_new_entity(params: ModelParams, catalog: Catalog, entity_type: int,
                    up_to: int) -> np.ndarray:
    """Mean embedding of the type's entities first seen at or before `up_to`."""
    peers = catalog.entities_seen_up_to(entity_type, up_to)
    if len(peers) == 0:
        raise DataError(
            f"no peers to initialize a new entity of type "
            f"{catalog.entity_types[entity_type].name!r}"
        )
    rows = catalog.global_rows(entity_type)[peers]
    return params.embeddings[rows].mean(axis=0)


def initialize_new_entities(params: ModelParams, catalog: Catalog,
                            window_idx: int) -> dict[str, int]:
    """Grow the embedding table to cover entities interned during
    `window_idx`, each set to the mean of its type's previously seen peers.
    Peers never include other entities new to the same window."""
    added = catalog.total_entities - params.n_rows
    if added == 0:
        return {}
    params.append_rows(np.zeros((added, params.dim)))
    counts: dict[str, int] = {}
    filled = 0
    for et in catalog.entity_types:
        new_locals = sorted(catalog.new_entities_in_window(et.id, window_idx))
        if not new_locals:
            continue
        mean = init_new_entity(params, catalog, et.id, window_idx - 1)
        for local in new_locals:
            params.embeddings[catalog.global_row(et.id, local)] = mean
        counts[et.name] = len(new_locals)
        filled += len(new_locals)
    if filled != added:
        raise DataError(
            f"{added} embedding rows added but {filled} entities are new to "
            f"window {window_idx}; windows must be processed in order"
        )
    return counts


def _new_row_mask(params: ModelParams, catalog: Catalog,
                  window_idx: Optional[int]) -> np.ndarray:
    mask = np.zeros(params.n_rows, dtype=bool)
    if window_idx is None:
        return mask
    for et in catalog.entity_types:
        for local in catalog.new_entities_in_window(et.id, window_idx):
            mask[catalog.global_row(et.id, local)] = True
    return mask


def retrain_loss(window_events: Sequence[Event], params_new: ModelParams,
                 params_prev: ModelParams, new_rows: np.ndarray,
                 config: RetrainConfig, catalog: Catalog,
                 noises: dict[tuple[int, int], NoiseDistribution],
                 fixed_negatives, backend=None) -> float:
    """Full objective: summed weighted event loss plus the two anchored
    squared-distance terms. `new_rows` is a boolean mask over embedding rows;
    `params_prev` is the post-initialization snapshot the window started from."""
    if params_new.embeddings.shape != params_prev.embeddings.shape:
        raise DataError("parameter snapshots differ in shape")
    packed = pack_events(window_events, catalog)
    data = evaluate_loss(params_new, packed, catalog, noises,
                         fixed_negatives, backend=backend) * packed.n
    delta_sq = ((params_new.embeddings - params_prev.embeddings) ** 2).sum(axis=1)
    return float(data
                 + config.lambda0 * delta_sq[new_rows].sum()
                 + config.lambda1 * delta_sq[~new_rows].sum())


def retrain(events: Sequence[Event], params: ModelParams, catalog: Catalog,
            config: RetrainConfig, rng: np.random.Generator,
            noises: dict[tuple[int, int], NoiseDistribution],
            window_idx: Optional[int] = None, backend=None) -> RetrainStats:
    """Embedding-only retraining on one window, early-stopped on held-out
    loss, returning the best-validation-epoch embeddings.

    The rng is consumed in a fixed order (stable contract): validation-split
    permutation, then validation negatives, then per-epoch shuffles and
    negatives. Weights, beta, and sigma stay frozen.
    """
    config.validate()
    if backend is None or isinstance(backend, str):
        backend = kernels.get_backend(backend or "auto")
    stats = RetrainStats()
    if len(events) == 0:
        return stats

    n = len(events)
    perm = rng.permutation(n)
    n_val = int(round(config.validation_fraction * n))
    n_val = min(max(n_val, 1), n - 1) if n >= 2 else 0
    val_events = [events[i] for i in perm[:n_val]]
    ret_events = [events[i] for i in perm[n_val:]]
    stats.retrain_size = len(ret_events)
    stats.validation_size = n_val

    packed_ret = pack_events(ret_events, catalog)
    packed_val = pack_events(val_events, catalog) if n_val else None
    fixed_negs = (sample_fixed_negatives(packed_val, catalog, noises,
                                         config.negatives, rng)
                  if n_val else None)

    anchor_emb = params.embeddings.copy()
    lam_rows = np.full(params.n_rows, config.lambda1)
    new_mask = _new_row_mask(params, catalog, window_idx)
    lam_rows[new_mask] = config.lambda0
    anchor = EmbeddingAnchor(anchor=anchor_emb, lam_rows=lam_rows)

    shim = TrainConfig(dim=params.dim, negatives=config.negatives,
                       batch_size=config.batch_size,
                       learning_rate=config.learning_rate,
                       adam_beta1=config.adam_beta1,
                       adam_beta2=config.adam_beta2,
                       adam_epsilon=config.adam_epsilon)
    optimizer = Adam(config.learning_rate, config.adam_beta1,
                     config.adam_beta2, config.adam_epsilon)

    def val_loss() -> Optional[float]:
        if packed_val is None:
            return None
        return evaluate_loss(params, packed_val, catalog, noises,
                             fixed_negs, backend=backend)

    best_val = val_loss()
    best_emb = params.embeddings.copy()
    stats.best_val_loss = best_val
    without_improvement = 0
    for epoch in range(1, config.max_epochs + 1):
        ep = run_epoch(params, packed_ret, catalog, noises, optimizer, shim,
                       rng, epoch, backend=backend, update_type_params=False,
                       anchor=anchor)
        stats.rejected_batches += ep.rejected_batches
        stats.epochs_run = epoch
        v = val_loss()
        stats.final_val_loss = v
        if v is None:
            continue  # degenerate one-event window: no early stopping
        improvement = (best_val - v) / max(abs(best_val), 1e-12)
        if improvement >= config.min_improvement:
            best_val = v
            stats.best_val_loss = v
            best_emb = params.embeddings.copy()
            without_improvement = 0
        else:
            without_improvement += 1
            if without_improvement >= config.patience:
                stats.stopped_early = True
                break
    if packed_val is not None:
        params.embeddings = np.ascontiguousarray(best_emb)

    drift = np.linalg.norm(params.embeddings - anchor_emb, axis=1)
    old = drift[~new_mask]
    new = drift[new_mask]
    if len(old):
        stats.drift_old_max = float(old.max())
        stats.drift_old_median = float(np.median(old))
    if len(new):
        stats.drift_new_max = float(new.max())
        stats.drift_new_median = float(np.median(new))
    return stats


def score_window(params: ModelParams, catalog: Catalog,
                 events: Sequence[Event], window_idx: int,
                 standardizer: Optional[Standardizer]) -> list[ScoredEvent]:
    """Score with frozen parameters; candidates are entities seen up to and
    including this window (new ones carry their mean initialization)."""
    return Scorer(params, catalog, standardizer).score_events(
        events, up_to=window_idx)


def process_window(events: Sequence[Event], params: ModelParams,
                   catalog: Catalog, window_idx: int,
                   noises: dict[tuple[int, int], NoiseDistribution],
                   retrain_config: RetrainConfig,
                   standardizer: Optional[Standardizer],
                   rng: np.random.Generator,
                   extra_exclude: Optional[set[int]] = None,
                   refresh_noise: bool = False,
                   refresh_standardizer: bool = False,
                   backend=None) -> WindowReport:
    """One full pass for a window whose entities were interned at
    `window_idx`: mean-initialize new entities, score everything with the
    incoming parameters, drop events labelled malicious (by data label or by
    the extra index set), retrain embeddings in place.

    Scores are computed before any parameter update, so nothing in the
    window can influence its own scores.
    """
    report = WindowReport(window_index=window_idx, scored=[])
    report.new_entities = initialize_new_entities(params, catalog, window_idx)
    report.scored = score_window(params, catalog, events, window_idx,
                                 standardizer)

    exclude = extra_exclude or set()
    retrain_events = [ev for j, ev in enumerate(events)
                      if ev.label != LABEL_MALICIOUS and j not in exclude]
    report.excluded_malicious = len(events) - len(retrain_events)

    if refresh_noise and retrain_events:
        catalog.accumulate_counts(retrain_events)
        noises.clear()
        noises.update(build_noise_tables(catalog))

    report.retrain = retrain(retrain_events, params, catalog, retrain_config,
                             rng, noises, window_idx=window_idx,
                             backend=backend)

    if refresh_standardizer and standardizer is not None:
        refreshed = _refresh_standardizer(report.scored, catalog)
        standardizer.mean.update(refreshed.mean)
        standardizer.std.update(refreshed.std)
    return report


def _refresh_standardizer(scored: Sequence[ScoredEvent],
                          catalog: Catalog) -> Standardizer:
    by_type: dict[str, list[ScoredEvent]] = {}
    for s in scored:
        name = catalog.event_spec(s.event.event_type).name
        by_type.setdefault(name, []).append(s)
    keep = [s for name, group in by_type.items() if len(group) >= 2
            for s in group]
    if not keep:
        return Standardizer()
    return fit_standardizer(keep, catalog)
