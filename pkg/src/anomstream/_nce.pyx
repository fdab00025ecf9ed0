# Compiled NCE kernel. Semantics mirror _nce_numpy.nce_position_batch;
# keep the two in sync (tests/test_kernels.py checks parity).

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, log1p

cnp.import_array()

BACKEND_NAME = "compiled"

cdef double _TINY = 1e-300


cdef inline double _softplus(double x) nogil:
    cdef double m = x if x > 0.0 else 0.0
    return log1p(exp(-fabs(x))) + m


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def nce_position_batch(
    double[:, ::1] emb,
    double[:, ::1] grad_emb,
    long long[:, ::1] prefix_rows,
    long long[::1] true_rows,
    long long[:, ::1] neg_rows,
    double[::1] q_true,
    double[:, ::1] q_neg,
    double[::1] weights,
    double[::1] beta,
    double log_sigma,
    double[::1] grad_w,
    double[::1] grad_beta,
    double clamp=30.0,
    bint with_grads=True,
):
    cdef Py_ssize_t B = true_rows.shape[0]
    cdef Py_ssize_t P = prefix_rows.shape[1]
    cdef Py_ssize_t K = neg_rows.shape[1]
    cdef Py_ssize_t d = emb.shape[1]
    cdef double inv_s2 = exp(-2.0 * log_sigma)

    cdef cnp.ndarray[cnp.float64_t, ndim=1] ctx_buf = np.empty(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] bh_buf = np.empty(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gx_buf = np.empty(d)
    cdef double[::1] ctx = ctx_buf
    cdef double[::1] bh = bh_buf
    cdef double[::1] gx = gx_buf

    cdef double loss_sum = 0.0
    cdef double nce_sum = 0.0
    cdef double grad_log_sigma = 0.0

    cdef Py_ssize_t b, j, k, c
    cdef long long row, trow
    cdef double z, a, u, nce, g, wj, kq

    with nogil:
        for b in range(B):
            # context and its elementwise product with beta
            for c in range(d):
                ctx[c] = 0.0
            for j in range(P):
                row = prefix_rows[b, j]
                wj = weights[j]
                for c in range(d):
                    ctx[c] += wj * emb[row, c]
            for c in range(d):
                bh[c] = ctx[c] * beta[c]
                gx[c] = 0.0

            nce = 0.0

            # true entity
            trow = true_rows[b]
            z = 0.0
            for c in range(d):
                z += emb[trow, c] * bh[c]
            a = z
            if a > clamp:
                a = clamp
            elif a < -clamp:
                a = -clamp
            if q_true[b] > 0.0:
                kq = K * q_true[b]
                if kq < _TINY:
                    kq = _TINY
                u = a - log(kq)
                nce += _softplus(-u)
                if with_grads and fabs(z) < clamp:
                    g = -_sigmoid(-u) * inv_s2
                    for c in range(d):
                        grad_emb[trow, c] += g * bh[c]
                        gx[c] += g * emb[trow, c]

            # negative samples
            for k in range(K):
                row = neg_rows[b, k]
                z = 0.0
                for c in range(d):
                    z += emb[row, c] * bh[c]
                a = z
                if a > clamp:
                    a = clamp
                elif a < -clamp:
                    a = -clamp
                u = a - log(K * q_neg[b, k])
                nce += _softplus(u)
                if with_grads and fabs(z) < clamp:
                    g = _sigmoid(u) * inv_s2
                    for c in range(d):
                        grad_emb[row, c] += g * bh[c]
                        gx[c] += g * emb[row, c]

            loss_sum += inv_s2 * nce + log_sigma
            nce_sum += nce
            grad_log_sigma += -2.0 * inv_s2 * nce + 1.0

            if with_grads:
                for c in range(d):
                    grad_beta[c] += ctx[c] * gx[c]
                    gx[c] *= beta[c]  # now d(loss)/d(ctx)
                for j in range(P):
                    row = prefix_rows[b, j]
                    z = 0.0
                    wj = weights[j]
                    for c in range(d):
                        z += gx[c] * emb[row, c]
                        grad_emb[row, c] += wj * gx[c]
                    grad_w[j] += z

    return loss_sum, nce_sum, grad_log_sigma
