"""Initial model fitting: log-unigram noise, NCE losses, uncertainty-weighted
multi-task aggregation, and a self-contained Adam optimizer.

The training loop never evaluates the full softmax normalizer; it only
touches unnormalized affinities through the selected kernel backend.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DataError, NumericError
from .model import CLAMP, ModelParams
from .schema import Catalog, Event

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    dim: int = 64
    negatives: int = 20          # per predicted entity per event
    epochs: int = 30
    batch_size: int = 5000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.negatives < 1:
            raise DataError("negatives must be >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise DataError("learning_rate/batch_size/epochs out of range")


# -- noise distributions -------------------------------------------------------


@dataclass
class NoiseDistribution:
    """Log-unigram sampling table for one (event type, position)."""

    event_type: int
    position: int
    support_local: np.ndarray   # local ids with C(v) >= 1
    support_global: np.ndarray  # matching embedding rows
    probs: np.ndarray           # Q over the support, sums to 1
    cum: np.ndarray
    q_of_local: np.ndarray      # Q by local id, 0 outside the support

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        """Indices into the support, i.i.d. with replacement."""
        u = rng.random(size)
        idx = np.searchsorted(self.cum, u, side="right")
        return np.minimum(idx, len(self.probs) - 1).astype(np.int64)


def build_noise_distribution(counts, event_type: int, position: int,
                             global_rows: Optional[np.ndarray] = None,
                             n_entities: Optional[int] = None) -> NoiseDistribution:
    """Q(v) = log(1 + C(v)) / sum_u log(1 + C(u)) over entities with C >= 1."""
    if isinstance(counts, dict):
        n = n_entities if n_entities is not None else (max(counts) + 1 if counts else 0)
        arr = np.zeros(n, dtype=np.int64)
        for k, v in counts.items():
            arr[k] = v
    else:
        arr = np.asarray(counts, dtype=np.int64)
    support = np.nonzero(arr > 0)[0].astype(np.int64)
    if len(support) == 0:
        raise DataError(
            f"no observed entities for event type {event_type} position {position}"
        )
    weights = np.log1p(arr[support].astype(np.float64))
    probs = weights / weights.sum()
    q_of_local = np.zeros(len(arr))
    q_of_local[support] = probs
    if global_rows is None:
        support_global = support.copy()
    else:
        support_global = np.asarray(global_rows, dtype=np.int64)[support]
    return NoiseDistribution(
        event_type=event_type,
        position=position,
        support_local=support,
        support_global=support_global,
        probs=probs,
        cum=np.cumsum(probs),
        q_of_local=q_of_local,
    )


def build_noise_tables(catalog: Catalog) -> dict[tuple[int, int], NoiseDistribution]:
    """One distribution per (event type, predicted position)."""
    tables = {}
    for spec in catalog.event_types:
        for i in range(2, spec.arity + 1):
            counts = catalog.counts(spec.id, i)
            if not counts.any():
                continue  # type absent from the training window
            tables[(spec.id, i)] = build_noise_distribution(
                counts, spec.id, i,
                global_rows=catalog.global_rows(spec.signature[i - 1]),
            )
    return tables


def sample_negatives(noise: NoiseDistribution, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    """K i.i.d. local ids drawn from Q (collisions with the true entity kept)."""
    if k < 1:
        raise DataError("need at least one negative sample")
    return noise.support_local[noise.sample(k, rng)]


# -- single-event loss surfaces (scoring-free reference path) ------------------


def _position_nce_loss(params: ModelParams, catalog: Catalog, event: Event,
                       position: int, negatives: Sequence[int],
                       noise: NoiseDistribution) -> float:
    spec = catalog.event_spec(event.event_type)
    tp = params.type_params[event.event_type]
    rows = [catalog.global_row(spec.signature[j], local)
            for j, local in enumerate(event.entities[: position - 1])]
    h = tp.weights[position - 2] @ params.embeddings[rows]
    bh = tp.beta * h
    k = len(negatives)
    cand_type = spec.signature[position - 1]

    def u_of(local: int) -> float:
        q = noise.q_of_local[local]
        if q <= 0.0:
            return math.inf
        z = float(params.embeddings[catalog.global_row(cand_type, local)] @ bh)
        return min(max(z, -CLAMP), CLAMP) - math.log(k * q)

    def softplus(x: float) -> float:
        if x == math.inf:
            return x
        return math.log1p(math.exp(-abs(x))) + max(x, 0.0)

    u_true = u_of(event.entities[position - 1])
    loss = softplus(-u_true) if u_true != math.inf else 0.0
    for neg in negatives:
        if noise.q_of_local[neg] <= 0.0:
            raise NumericError("negative sample outside the noise support")
        loss += softplus(u_of(neg))
    return loss


def nce_entity_loss(params: ModelParams, catalog: Catalog, event: Event,
                    position: int, negatives: Sequence[int],
                    noise: NoiseDistribution) -> float:
    """-log s(true) - sum_j log(1 - s(neg_j)) with s(v) = k(v)/(k(v) + K Q(v))."""
    return _position_nce_loss(params, catalog, event, position, negatives, noise)


def mtl_event_loss(params: ModelParams, catalog: Catalog, event: Event,
                   negatives_per_position: dict[int, Sequence[int]],
                   noises: dict[tuple[int, int], NoiseDistribution]) -> float:
    """Uncertainty-weighted event loss: sum_i [ l_i / sigma_i^2 + log sigma_i ]."""
    spec = catalog.event_spec(event.event_type)
    tp = params.type_params[event.event_type]
    total = 0.0
    for i in range(2, spec.arity + 1):
        li = _position_nce_loss(params, catalog, event, i,
                                negatives_per_position[i],
                                noises[(event.event_type, i)])
        ls = float(tp.log_sigma[i - 2])
        total += math.exp(-2.0 * ls) * li + ls
    return total


# -- gradients ------------------------------------------------------------------


@dataclass
class GradSet:
    emb: np.ndarray
    w: dict[tuple[int, int], np.ndarray]
    beta: dict[int, np.ndarray]
    log_sigma: dict[int, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradSet":
        return cls(
            emb=np.zeros_like(params.embeddings),
            w={(e, i + 2): np.zeros_like(w)
               for e, tp in params.type_params.items()
               for i, w in enumerate(tp.weights)},
            beta={e: np.zeros_like(tp.beta) for e, tp in params.type_params.items()},
            log_sigma={e: np.zeros_like(tp.log_sigma)
                       for e, tp in params.type_params.items()},
        )

    def zero_(self) -> None:
        self.emb.fill(0.0)
        for a in self.w.values():
            a.fill(0.0)
        for a in self.beta.values():
            a.fill(0.0)
        for a in self.log_sigma.values():
            a.fill(0.0)

    def scale_(self, factor: float) -> None:
        self.emb *= factor
        for a in self.w.values():
            a *= factor
        for a in self.beta.values():
            a *= factor
        for a in self.log_sigma.values():
            a *= factor

    def all_finite(self) -> bool:
        if not np.isfinite(self.emb).all():
            return False
        for group in (self.w, self.beta, self.log_sigma):
            for a in group.values():
                if not np.isfinite(a).all():
                    return False
        return True


def event_gradients(params: ModelParams, catalog: Catalog, event: Event,
                    negatives_per_position: dict[int, Sequence[int]],
                    noises: dict[tuple[int, int], NoiseDistribution],
                    backend=None) -> tuple[float, GradSet]:
    """Loss and gradients of the weighted event loss for one event, with the
    given fixed negatives. Used by gradient checks and small-instance tests."""
    if backend is None:
        backend = kernels.get_backend()
    spec = catalog.event_spec(event.event_type)
    tp = params.type_params[event.event_type]
    grads = GradSet.zeros_like(params)
    total = 0.0
    for i in range(2, spec.arity + 1):
        noise = noises[(event.event_type, i)]
        neg_local = np.asarray(negatives_per_position[i], dtype=np.int64)
        cand_type = spec.signature[i - 1]
        prefix_rows = np.array(
            [[catalog.global_row(spec.signature[j], local)
              for j, local in enumerate(event.entities[: i - 1])]],
            dtype=np.int64,
        )
        true_local = event.entities[i - 1]
        true_rows = np.array([catalog.global_row(cand_type, true_local)],
                             dtype=np.int64)
        neg_rows = np.array(
            [[catalog.global_row(cand_type, n) for n in neg_local]], dtype=np.int64
        )
        q_true = np.array([noise.q_of_local[true_local]])
        q_neg = noise.q_of_local[neg_local][None, :].copy()
        loss_sum, _, g_ls = backend.nce_position_batch(
            params.embeddings, grads.emb,
            prefix_rows, true_rows, np.ascontiguousarray(neg_rows),
            q_true, np.ascontiguousarray(q_neg),
            tp.weights[i - 2], tp.beta, float(tp.log_sigma[i - 2]),
            grads.w[(event.event_type, i)], grads.beta[event.event_type],
            clamp=CLAMP,
        )
        grads.log_sigma[event.event_type][i - 2] += g_ls
        total += loss_sum
    return total, grads


# -- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Self-contained Adam with bias correction, one state per named tensor."""

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = epsilon
        self.state: dict[str, AdamState] = {}

    def _state(self, name: str, param: np.ndarray) -> AdamState:
        st = self.state.get(name)
        if st is None:
            st = AdamState(np.zeros_like(param), np.zeros_like(param))
            self.state[name] = st
        elif st.m.shape != param.shape:
            # embedding table grew between windows: extend moments with zeros
            if st.m.ndim != param.ndim or st.m.shape[1:] != param.shape[1:]:
                raise DataError(f"shape mismatch for optimizer state {name!r}")
            pad = param.shape[0] - st.m.shape[0]
            st.m = np.concatenate([st.m, np.zeros((pad,) + param.shape[1:])])
            st.v = np.concatenate([st.v, np.zeros((pad,) + param.shape[1:])])
        return st

    def step(self, named: Iterable[tuple[str, np.ndarray, np.ndarray]]) -> None:
        """Apply one update to each (name, param, grad); params mutated in place."""
        for name, param, grad in named:
            st = self._state(name, param)
            st.t += 1
            st.m = self.beta1 * st.m + (1.0 - self.beta1) * grad
            st.v = self.beta2 * st.v + (1.0 - self.beta2) * grad * grad
            m_hat = st.m / (1.0 - self.beta1 ** st.t)
            v_hat = st.v / (1.0 - self.beta2 ** st.t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              optimizer: Adam) -> bool:
    """One optimizer step over named tensors. Returns False (params untouched)
    if any gradient is non-finite."""
    for g in grads.values():
        if not np.isfinite(g).all():
            logger.warning("non-finite gradient; batch rejected")
            return False
    optimizer.step((name, params[name], grads[name]) for name in params)
    return True


# -- batch packing and the epoch loop ---------------------------------------------


@dataclass
class PackedEvents:
    n: int
    type_of: np.ndarray                      # (n,) event type per event
    row_in_type: np.ndarray                  # (n,) row into the per-type arrays
    ents_local: dict[int, np.ndarray]        # type -> (B_e, N_e) local ids
    ents_global: dict[int, np.ndarray]       # type -> (B_e, N_e) embedding rows
    type_ids: list[int]                      # types present, ascending


def pack_events(events: Sequence[Event], catalog: Catalog) -> PackedEvents:
    n = len(events)
    type_of = np.fromiter((e.event_type for e in events), dtype=np.int64, count=n)
    row_in_type = np.zeros(n, dtype=np.int64)
    ents_local: dict[int, np.ndarray] = {}
    ents_global: dict[int, np.ndarray] = {}
    type_ids = sorted(set(type_of.tolist()))
    for eid in type_ids:
        idx = np.nonzero(type_of == eid)[0]
        row_in_type[idx] = np.arange(len(idx))
        spec = catalog.event_spec(eid)
        loc = np.empty((len(idx), spec.arity), dtype=np.int64)
        for r, j in enumerate(idx):
            loc[r] = events[j].entities
        glob = np.empty_like(loc)
        for pos, etype in enumerate(spec.signature):
            glob[:, pos] = catalog.global_rows(etype)[loc[:, pos]]
        ents_local[eid] = loc
        ents_global[eid] = glob
    return PackedEvents(n, type_of, row_in_type, ents_local, ents_global, type_ids)


# negatives provider: (event_type, position, rows, rng) ->
#   (neg_rows (B,K) global, q_neg (B,K), also embeddable via support index)
NegativesProvider = Callable[[int, int, np.ndarray, np.random.Generator],
                             tuple[np.ndarray, np.ndarray]]


def _default_negatives(noises, k):
    def provider(eid, position, rows, rng):
        noise = noises[(eid, position)]
        idx = noise.sample((len(rows), k), rng)
        return noise.support_global[idx], noise.probs[idx]
    return provider


@dataclass
class EmbeddingAnchor:
    """Squared-distance pull of every embedding row toward its value at the
    start of the window; lam_rows holds the per-row coefficient (new-entity
    vs old-entity weight)."""

    anchor: np.ndarray
    lam_rows: np.ndarray

    @property
    def active(self) -> bool:
        return bool(np.any(self.lam_rows != 0.0))


@dataclass
class EpochStats:
    epoch: int
    mean_loss_per_type: dict[str, float]
    sigmas: dict[str, list[float]]
    rejected_batches: int = 0

    def format_line(self) -> str:
        parts = [f"epoch={self.epoch}"]
        for name in sorted(self.mean_loss_per_type):
            parts.append(f"loss[{name}]={self.mean_loss_per_type[name]:.6f}")
        for name in sorted(self.sigmas):
            sig = ",".join(f"{s:.4f}" for s in self.sigmas[name])
            parts.append(f"sigma[{name}]={sig}")
        if self.rejected_batches:
            parts.append(f"rejected={self.rejected_batches}")
        return "\t".join(parts)


def _adam_tensors(params: ModelParams, grads: GradSet, update_type_params: bool):
    tensors = [("emb", params.embeddings, grads.emb)]
    if update_type_params:
        for eid in sorted(params.type_params):
            tp = params.type_params[eid]
            for i in range(2, tp.arity + 1):
                tensors.append((f"w:{eid}:{i}", tp.weights[i - 2], grads.w[(eid, i)]))
            tensors.append((f"beta:{eid}", tp.beta, grads.beta[eid]))
            tensors.append((f"logsig:{eid}", tp.log_sigma, grads.log_sigma[eid]))
    return tensors


def run_epoch(params: ModelParams, packed: PackedEvents, catalog: Catalog,
              noises: dict[tuple[int, int], NoiseDistribution],
              optimizer: Adam, config: TrainConfig, rng: np.random.Generator,
              epoch: int, backend=None, update_type_params: bool = True,
              anchor: Optional[EmbeddingAnchor] = None,
              negatives_provider: Optional[NegativesProvider] = None,
              grads: Optional[GradSet] = None) -> EpochStats:
    """One pass of shuffled minibatches. Batch gradients are means over the
    batch's events; the anchor regularizer (when active) is added at full
    strength each step."""
    if backend is None:
        backend = kernels.get_backend()
    if negatives_provider is None:
        negatives_provider = _default_negatives(noises, config.negatives)
    if grads is None:
        grads = GradSet.zeros_like(params)

    loss_sums: dict[int, float] = {eid: 0.0 for eid in packed.type_ids}
    counts: dict[int, int] = {eid: 0 for eid in packed.type_ids}
    rejected = 0

    perm = rng.permutation(packed.n)
    for start in range(0, packed.n, config.batch_size):
        batch = perm[start: start + config.batch_size]
        grads.zero_()
        for eid in packed.type_ids:
            rows = packed.row_in_type[batch[packed.type_of[batch] == eid]]
            if len(rows) == 0:
                continue
            spec = catalog.event_spec(eid)
            tp = params.type_params[eid]
            loc = packed.ents_local[eid][rows]
            glob = packed.ents_global[eid][rows]
            for i in range(2, spec.arity + 1):
                noise = noises[(eid, i)]
                neg_rows, q_neg = negatives_provider(eid, i, rows, rng)
                loss_sum, _, g_ls = backend.nce_position_batch(
                    params.embeddings, grads.emb,
                    np.ascontiguousarray(glob[:, : i - 1]),
                    np.ascontiguousarray(glob[:, i - 1]),
                    np.ascontiguousarray(neg_rows),
                    np.ascontiguousarray(noise.q_of_local[loc[:, i - 1]]),
                    np.ascontiguousarray(q_neg),
                    tp.weights[i - 2], tp.beta, float(tp.log_sigma[i - 2]),
                    grads.w[(eid, i)], grads.beta[eid],
                    clamp=CLAMP,
                )
                grads.log_sigma[eid][i - 2] += g_ls
                loss_sums[eid] += loss_sum
            counts[eid] += len(rows)
        grads.scale_(1.0 / len(batch))
        if anchor is not None and anchor.active:
            grads.emb += (2.0 * anchor.lam_rows)[:, None] * (params.embeddings
                                                             - anchor.anchor)
        if not grads.all_finite():
            rejected += 1
            logger.warning("epoch %d: non-finite gradient, batch rejected", epoch)
            continue
        optimizer.step(_adam_tensors(params, grads, update_type_params))

    mean_loss = {
        catalog.event_spec(eid).name: (loss_sums[eid] / counts[eid]
                                       if counts[eid] else 0.0)
        for eid in packed.type_ids
    }
    sigmas = {
        catalog.event_spec(eid).name:
            np.exp(params.type_params[eid].log_sigma).tolist()
        for eid in packed.type_ids
    }
    return EpochStats(epoch, mean_loss, sigmas, rejected)


def evaluate_loss(params: ModelParams, packed: PackedEvents, catalog: Catalog,
                  noises: dict[tuple[int, int], NoiseDistribution],
                  fixed_negatives: dict[tuple[int, int],
                                        tuple[np.ndarray, np.ndarray]],
                  backend=None) -> float:
    """Mean weighted event loss with pre-drawn negatives (no gradients)."""
    if backend is None:
        backend = kernels.get_backend()
    if packed.n == 0:
        return 0.0
    grad_emb = np.zeros_like(params.embeddings)  # untouched: with_grads=False
    total = 0.0
    for eid in packed.type_ids:
        spec = catalog.event_spec(eid)
        tp = params.type_params[eid]
        loc = packed.ents_local[eid]
        glob = packed.ents_global[eid]
        for i in range(2, spec.arity + 1):
            noise = noises[(eid, i)]
            neg_rows, q_neg = fixed_negatives[(eid, i)]
            gw = np.zeros(i - 1)
            gb = np.zeros(params.dim)
            loss_sum, _, _ = backend.nce_position_batch(
                params.embeddings, grad_emb,
                np.ascontiguousarray(glob[:, : i - 1]),
                np.ascontiguousarray(glob[:, i - 1]),
                np.ascontiguousarray(neg_rows),
                np.ascontiguousarray(noise.q_of_local[loc[:, i - 1]]),
                np.ascontiguousarray(q_neg),
                tp.weights[i - 2], tp.beta, float(tp.log_sigma[i - 2]),
                gw, gb, clamp=CLAMP, with_grads=False,
            )
            total += loss_sum
    return total / packed.n


def sample_fixed_negatives(packed: PackedEvents, catalog: Catalog,
                           noises: dict[tuple[int, int], NoiseDistribution],
                           k: int, rng: np.random.Generator):
    """Draw one set of negatives per (type, position) aligned with the packed
    arrays; used for stable validation-loss comparisons."""
    fixed = {}
    for eid in packed.type_ids:
        spec = catalog.event_spec(eid)
        b = len(packed.ents_local[eid])
        for i in range(2, spec.arity + 1):
            noise = noises[(eid, i)]
            idx = noise.sample((b, k), rng)
            fixed[(eid, i)] = (noise.support_global[idx], noise.probs[idx])
    return fixed


@dataclass
class FitResult:
    params: ModelParams
    epochs: list[EpochStats] = field(default_factory=list)
    backend: str = "numpy"


def fit(events: Sequence[Event], catalog: Catalog, config: TrainConfig,
        backend_name: str = "auto",
        noises: Optional[dict] = None,
        metrics_sink: Optional[Callable[[str], None]] = None) -> FitResult:
    """Fit fresh parameters on a training window. Deterministic under
    config.seed on a given machine and backend."""
    config.validate()
    if not events:
        raise DataError("training requires at least one event")
    backend = kernels.get_backend(backend_name)
    rng = np.random.default_rng(config.seed)
    params = ModelParams.initialize(catalog, config.dim, rng)
    if noises is None:
        noises = build_noise_tables(catalog)
    packed = pack_events(events, catalog)
    for eid in packed.type_ids:
        spec = catalog.event_spec(eid)
        for i in range(2, spec.arity + 1):
            if (eid, i) not in noises:
                raise DataError(
                    f"no noise distribution for {spec.name!r} position {i}; "
                    "accumulate counts before fitting"
                )
    optimizer = Adam(config.learning_rate, config.adam_beta1,
                     config.adam_beta2, config.adam_epsilon)
    result = FitResult(params=params, backend=backend.BACKEND_NAME)
    grads = GradSet.zeros_like(params)
    for epoch in range(1, config.epochs + 1):
        stats = run_epoch(params, packed, catalog, noises, optimizer, config,
                          rng, epoch, backend=backend, grads=grads)
        result.epochs.append(stats)
        line = stats.format_line()
        logger.info("%s", line)
        if metrics_sink is not None:
            metrics_sink(line)
    return result
