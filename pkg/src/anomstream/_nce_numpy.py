"""Pure-numpy NCE kernel, the fallback for the compiled extension.

Both backends expose `nce_position_batch` with identical semantics: given a
sub-batch of events of one event type at one predicted position, accumulate
the noise-contrastive loss under uncertainty weighting plus its gradients.
Losses/gradients are sums over the sub-batch; the caller applies any batch
normalization.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"

_TINY = 1e-300


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def nce_position_batch(
    emb: np.ndarray,          # (R, d) embedding table
    grad_emb: np.ndarray,     # (R, d) accumulated in place
    prefix_rows: np.ndarray,  # (B, P) int64 global rows
    true_rows: np.ndarray,    # (B,) int64
    neg_rows: np.ndarray,     # (B, K) int64
    q_true: np.ndarray,       # (B,) noise probability of the true entity, 0 allowed
    q_neg: np.ndarray,        # (B, K) noise probabilities, > 0
    weights: np.ndarray,      # (P,) prefix combination weights
    beta: np.ndarray,         # (d,)
    log_sigma: float,
    grad_w: np.ndarray,       # (P,) accumulated in place
    grad_beta: np.ndarray,    # (d,) accumulated in place
    clamp: float = 30.0,
    with_grads: bool = True,
) -> tuple[float, float, float]:
    """Returns (sum of weighted per-event losses, sum of raw NCE losses,
    gradient of the weighted loss w.r.t. log sigma)."""
    d = emb.shape[1]
    n_neg = neg_rows.shape[1]
    inv_s2 = float(np.exp(-2.0 * log_sigma))

    px = emb[prefix_rows]                                # (B, P, d)
    ctx = np.einsum("j,bjd->bd", weights, px)            # (B, d)
    bh = ctx * beta
    xt = emb[true_rows]
    z_t = np.einsum("bd,bd->b", xt, bh)
    xn = emb[neg_rows]
    z_n = np.einsum("bkd,bd->bk", xn, bh)

    live_t = np.abs(z_t) < clamp
    live_n = np.abs(z_n) < clamp
    a_t = np.clip(z_t, -clamp, clamp)
    a_n = np.clip(z_n, -clamp, clamp)

    seen = q_true > 0.0
    u_t = np.where(seen, a_t - np.log(np.maximum(n_neg * q_true, _TINY)), np.inf)
    u_n = a_n - np.log(n_neg * q_neg)

    nce = _softplus(-u_t) + _softplus(u_n).sum(axis=1)
    loss_sum = float(np.sum(inv_s2 * nce + log_sigma))
    nce_sum = float(nce.sum())
    grad_log_sigma = float(np.sum(-2.0 * inv_s2 * nce + 1.0))

    if with_grads:
        g_t = np.where(seen & live_t, -_sigmoid(-u_t) * inv_s2, 0.0)
        g_n = np.where(live_n, _sigmoid(u_n) * inv_s2, 0.0)

        gx = g_t[:, None] * xt + np.einsum("bk,bkd->bd", g_n, xn)  # (B, d)
        grad_beta += np.einsum("bd,bd->d", ctx, gx)
        d_ctx = beta * gx
        grad_w += np.einsum("bd,bjd->j", d_ctx, px)

        np.add.at(grad_emb, true_rows, g_t[:, None] * bh)
        np.add.at(grad_emb, neg_rows.ravel(),
                  (g_n[..., None] * bh[:, None, :]).reshape(-1, d))
        np.add.at(grad_emb, prefix_rows.ravel(),
                  (weights[None, :, None] * d_ctx[:, None, :]).reshape(-1, d))

    return loss_sum, nce_sum, grad_log_sigma
