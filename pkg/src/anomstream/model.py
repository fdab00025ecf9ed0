"""Model parameters and exact conditional probabilities.

The affinity between a candidate entity and its context is
``exp(beta . (x_candidate * h))`` with the context ``h`` a learned linear
combination of the preceding entities' embeddings. Exact softmax
normalization over the full candidate vocabulary is used here only for
scoring and small-instance checks; the training loop never touches it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .schema import Catalog, Event

# Inner products are clamped to +-CLAMP before exponentiation so affinities
# stay finite in float64. Gradients are zero outside the clamp range.
CLAMP = 30.0

_MAGIC = b"ANMSMDL1"
_VERSION = 1


@dataclass
class EventTypeParams:
    """Per-event-type parameters.

    weights[i - 2] is the vector (w_1i ... w_{i-1,i}) combining the prefix
    embeddings when predicting position i (1-based, i >= 2).
    log_sigma[i - 2] is the log prediction uncertainty for position i.
    """

    weights: list[np.ndarray]
    beta: np.ndarray
    log_sigma: np.ndarray

    @property
    def arity(self) -> int:
        return len(self.weights) + 1

    def copy(self) -> "EventTypeParams":
        return EventTypeParams(
            weights=[w.copy() for w in self.weights],
            beta=self.beta.copy(),
            log_sigma=self.log_sigma.copy(),
        )


class ModelParams:
    """Embedding table plus per-event-type parameters.

    Immutable during scoring; mutated only by the trainer under exclusive
    access.
    """

    def __init__(self, dim: int, embeddings: np.ndarray,
                 type_params: dict[int, EventTypeParams]):
        self.dim = dim
        self.embeddings = embeddings
        self.type_params = type_params

    @classmethod
    def initialize(cls, catalog: Catalog, dim: int, rng: np.random.Generator) -> "ModelParams":
        """Fresh parameters: embeddings and beta ~ N(0, 1/d), prefix weights
        1/(i-1) so the initial context is an average, log sigma 0."""
        scale = 1.0 / np.sqrt(dim)
        emb = rng.standard_normal((catalog.total_entities, dim)) * scale
        type_params = {}
        for spec in catalog.event_types:
            weights = [np.full(i - 1, 1.0 / (i - 1)) for i in range(2, spec.arity + 1)]
            beta = rng.standard_normal(dim) * scale
            log_sigma = np.zeros(spec.arity - 1)
            type_params[spec.id] = EventTypeParams(weights, beta, log_sigma)
        return cls(dim, np.ascontiguousarray(emb), type_params)

    @property
    def n_rows(self) -> int:
        return self.embeddings.shape[0]

    def append_rows(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.dim:
            raise DataError(f"expected dim {self.dim}, got {rows.shape[1]}")
        self.embeddings = np.ascontiguousarray(np.vstack([self.embeddings, rows]))

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.dim,
            self.embeddings.copy(),
            {e: p.copy() for e, p in self.type_params.items()},
        )

    # -- snapshot (versioned binary, little-endian, bit-exact round trip) ----

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IIQI", _VERSION, self.dim,
                                 self.n_rows, len(self.type_params)))
            fh.write(np.ascontiguousarray(self.embeddings, dtype="<f8").tobytes())
            for eid in sorted(self.type_params):
                tp = self.type_params[eid]
                fh.write(struct.pack("<II", eid, tp.arity))
                for w in tp.weights:
                    fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(tp.beta, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(tp.log_sigma, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise DataError(f"not a model snapshot: {path}")
            version, dim, n_rows, n_types = struct.unpack("<IIQI", fh.read(20))
            if version != _VERSION:
                raise DataError(f"unsupported snapshot version {version}")
            emb = np.frombuffer(fh.read(8 * n_rows * dim), dtype="<f8")
            emb = emb.reshape(n_rows, dim).astype(np.float64)
            type_params = {}
            for _ in range(n_types):
                eid, arity = struct.unpack("<II", fh.read(8))
                weights = []
                for i in range(2, arity + 1):
                    w = np.frombuffer(fh.read(8 * (i - 1)), dtype="<f8")
                    weights.append(w.astype(np.float64))
                beta = np.frombuffer(fh.read(8 * dim), dtype="<f8").astype(np.float64)
                log_sigma = np.frombuffer(fh.read(8 * (arity - 1)), dtype="<f8")
                type_params[eid] = EventTypeParams(weights, beta,
                                                   log_sigma.astype(np.float64))
        return cls(dim, np.ascontiguousarray(emb), type_params)


# -- core math ----------------------------------------------------------------


def context_vector(weights: np.ndarray, prefix_embeddings: np.ndarray) -> np.ndarray:
    """h = sum_j w_j x_j over the prefix entities."""
    prefix = np.atleast_2d(np.asarray(prefix_embeddings, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != prefix.shape[0]:
        raise DataError(
            f"{len(weights)} weights for a prefix of length {prefix.shape[0]}"
        )
    return weights @ prefix


def affinity(candidate_embedding: np.ndarray, context: np.ndarray,
             beta: np.ndarray) -> float:
    """kappa = exp(beta . (x * h)), clamped inner product."""
    x = np.asarray(candidate_embedding, dtype=np.float64)
    h = np.asarray(context, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    if not (x.shape == h.shape == b.shape):
        raise DataError(f"dimension mismatch: {x.shape}, {h.shape}, {b.shape}")
    if not (np.isfinite(x).all() and np.isfinite(h).all() and np.isfinite(b).all()):
        raise NumericError("non-finite input to affinity")
    z = float(b @ (x * h))
    return float(np.exp(min(max(z, -CLAMP), CLAMP)))


def _context_for(params: ModelParams, catalog: Catalog, event_type: int,
                 position: int, prefix: tuple[int, ...]) -> np.ndarray:
    spec = catalog.event_spec(event_type)
    if not 2 <= position <= spec.arity:
        raise DataError(f"position {position} out of range for {spec.name!r}")
    if len(prefix) != position - 1:
        raise DataError(f"prefix of length {len(prefix)} for position {position}")
    rows = [catalog.global_row(spec.signature[j], local)
            for j, local in enumerate(prefix)]
    tp = params.type_params[event_type]
    return context_vector(tp.weights[position - 2], params.embeddings[rows])


def conditional_distribution(params: ModelParams, catalog: Catalog,
                             event_type: int, position: int,
                             prefix: tuple[int, ...],
                             up_to: int | None = None) -> np.ndarray:
    """Exact softmax over the candidate set, indexed by candidate local id.

    `up_to` restricts candidates to entities first seen at or before that
    time step; the returned array is then aligned with
    ``catalog.entities_seen_up_to(type, up_to)``.
    """
    spec = catalog.event_spec(event_type)
    cand_type = spec.signature[position - 1]
    if up_to is None:
        locals_ = np.arange(catalog.n_entities(cand_type), dtype=np.int64)
    else:
        locals_ = catalog.entities_seen_up_to(cand_type, up_to)
    if len(locals_) == 0:
        raise DataError(f"empty candidate set for entity type {cand_type}")
    h = _context_for(params, catalog, event_type, position, prefix)
    tp = params.type_params[event_type]
    rows = catalog.global_rows(cand_type)[locals_]
    logits = params.embeddings[rows] @ (tp.beta * h)
    np.clip(logits, -CLAMP, CLAMP, out=logits)
    kappa = np.exp(logits)
    return kappa / kappa.sum()


def conditional_probability(params: ModelParams, catalog: Catalog,
                            event_type: int, position: int,
                            prefix: tuple[int, ...], candidate: int,
                            up_to: int | None = None) -> float:
    """P(candidate | prefix, event type) under exact full-vocabulary softmax."""
    dist = conditional_distribution(params, catalog, event_type, position,
                                    prefix, up_to=up_to)
    if up_to is None:
        idx = candidate
    else:
        spec = catalog.event_spec(event_type)
        locals_ = catalog.entities_seen_up_to(spec.signature[position - 1], up_to)
        where = np.nonzero(locals_ == candidate)[0]
        if len(where) == 0:
            raise DataError(f"candidate {candidate} not in candidate set")
        idx = int(where[0])
    return float(dist[idx])


def event_log_probability(params: ModelParams, catalog: Catalog,
                          event: Event, up_to: int | None = None) -> float:
    """Sum of log conditional probabilities over predicted positions."""
    catalog.validate_event(event)
    spec = catalog.event_spec(event.event_type)
    total = 0.0
    for i in range(2, spec.arity + 1):
        p = conditional_probability(params, catalog, event.event_type, i,
                                    event.entities[: i - 1],
                                    event.entities[i - 1], up_to=up_to)
        total += np.log(p)
    return float(total)
