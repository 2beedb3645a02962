# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attention and layer-norm kernels (see ``_kernels_py`` for the reference)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


cdef _real_keys(mask, Py_ssize_t B, Py_ssize_t T):
    m = np.asarray(mask, dtype=bool)
    if m.shape[0] != B or m.shape[1] != T:
        raise ValueError("mask shape does not match q")
    keys = np.ascontiguousarray(np.argsort(~m, axis=1, kind="stable"), dtype=np.intp)
    counts = np.ascontiguousarray(m.sum(axis=1), dtype=np.intp)
    return keys, counts


def attention_forward(const double[:, :, ::1] q, const double[:, :, ::1] k,
                      const double[:, :, ::1] v, mask, int n_heads, keep=None,
                      double inv_keep=1.0):
    cdef Py_ssize_t B = q.shape[0], T = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t H = n_heads, dh = D // n_heads
    keys_arr, counts_arr = _real_keys(mask, B, T)
    cdef const Py_ssize_t[:, ::1] keys = keys_arr
    cdef const Py_ssize_t[::1] counts = counts_arr
    cdef const unsigned char[:, :, :, ::1] dr
    cdef bint use_drop = keep is not None
    if use_drop:
        dr = np.ascontiguousarray(keep).view(np.uint8)
    ctx_arr = np.zeros((B, T, D), dtype=np.float64)
    probs_arr = np.zeros((B, H, T, T), dtype=np.float64)
    cdef double[:, :, ::1] ctx = ctx_arr
    cdef double[:, :, :, ::1] p = probs_arr
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef Py_ssize_t b, h, i, ii, jj, j, c, off, n
    cdef double s, mx, tot, w
    cdef double* prow
    cdef const unsigned char* drow
    cdef const double* qrow
    cdef const double* krow
    cdef const double* vrow
    cdef double* crow
    with nogil:
        for b in range(B):
            n = counts[b]
            for h in range(H):
                off = h * dh
                for ii in range(n):
                    i = keys[b, ii]
                    prow = &p[b, h, i, 0]
                    qrow = &q[b, i, off]
                    mx = -1e300
                    for jj in range(n):
                        j = keys[b, jj]
                        krow = &k[b, j, off]
                        s = 0.0
                        for c in range(dh):
                            s = s + qrow[c] * krow[c]
                        s = s * scale
                        prow[j] = s
                        if s > mx:
                            mx = s
                    tot = 0.0
                    for jj in range(n):
                        j = keys[b, jj]
                        w = exp(prow[j] - mx)
                        prow[j] = w
                        tot = tot + w
                    tot = 1.0 / tot
                    crow = &ctx[b, i, off]
                    if use_drop:
                        drow = &dr[b, h, i, 0]
                    for jj in range(n):
                        j = keys[b, jj]
                        w = prow[j] * tot
                        prow[j] = w
                        if use_drop:
                            w = w * drow[j] * inv_keep
                        if w != 0.0:
                            vrow = &v[b, j, off]
                            for c in range(dh):
                                crow[c] += w * vrow[c]
    return ctx_arr, probs_arr


def attention_backward(const double[:, :, ::1] dctx, const double[:, :, ::1] q,
                       const double[:, :, ::1] k, const double[:, :, ::1] v,
                       const double[:, :, :, ::1] probs, mask, int n_heads, keep=None,
                       double inv_keep=1.0):
    cdef Py_ssize_t B = q.shape[0], T = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t H = n_heads, dh = D // n_heads
    keys_arr, counts_arr = _real_keys(mask, B, T)
    cdef const Py_ssize_t[:, ::1] keys = keys_arr
    cdef const Py_ssize_t[::1] counts = counts_arr
    cdef const unsigned char[:, :, :, ::1] dr
    cdef bint use_drop = keep is not None
    if use_drop:
        dr = np.ascontiguousarray(keep).view(np.uint8)
    dq_arr = np.zeros((B, T, D), dtype=np.float64)
    dk_arr = np.zeros((B, T, D), dtype=np.float64)
    dv_arr = np.zeros((B, T, D), dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    row_arr = np.zeros(T, dtype=np.float64)
    cdef double[::1] dp = row_arr
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef Py_ssize_t b, h, i, ii, jj, j, c, off, n
    cdef double s, w, dot, pij
    cdef const double* prow
    cdef const unsigned char* drow
    cdef const double* grow
    cdef const double* qrow
    cdef const double* krow
    cdef const double* vrow
    cdef double* dqrow
    cdef double* dkrow
    cdef double* dvrow
    with nogil:
        for b in range(B):
            n = counts[b]
            for h in range(H):
                off = h * dh
                for ii in range(n):
                    i = keys[b, ii]
                    prow = &probs[b, h, i, 0]
                    grow = &dctx[b, i, off]
                    if use_drop:
                        drow = &dr[b, h, i, 0]
                    dot = 0.0
                    for jj in range(n):
                        j = keys[b, jj]
                        vrow = &v[b, j, off]
                        s = 0.0
                        for c in range(dh):
                            s = s + grow[c] * vrow[c]
                        pij = prow[j]
                        w = pij
                        if use_drop:
                            w = pij * drow[j] * inv_keep
                            s = s * drow[j] * inv_keep
                        if w != 0.0:
                            dvrow = &dv[b, j, off]
                            for c in range(dh):
                                dvrow[c] += w * grow[c]
                        dp[jj] = s
                        dot = dot + s * pij
                    qrow = &q[b, i, off]
                    dqrow = &dq[b, i, off]
                    for jj in range(n):
                        j = keys[b, jj]
                        s = prow[j] * (dp[jj] - dot) * scale
                        if s != 0.0:
                            krow = &k[b, j, off]
                            dkrow = &dk[b, j, off]
                            for c in range(dh):
                                dqrow[c] += s * krow[c]
                                dkrow[c] += s * qrow[c]
    return dq_arr, dk_arr, dv_arr


def layer_norm_forward(const double[:, :, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], D = x.shape[2]
    y_arr = np.empty((B, T, D), dtype=np.float64)
    xhat_arr = np.empty((B, T, D), dtype=np.float64)
    inv_arr = np.empty((B, T), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef double[:, :, ::1] xh = xhat_arr
    cdef double[:, ::1] inv = inv_arr
    cdef Py_ssize_t b, t, c
    cdef double mu, var, r, d
    with nogil:
        for b in range(B):
            for t in range(T):
                mu = 0.0
                for c in range(D):
                    mu = mu + x[b, t, c]
                mu = mu / D
                var = 0.0
                for c in range(D):
                    d = x[b, t, c] - mu
                    var = var + d * d
                r = 1.0 / sqrt(var / D + eps)
                inv[b, t] = r
                for c in range(D):
                    d = (x[b, t, c] - mu) * r
                    xh[b, t, c] = d
                    y[b, t, c] = d * gamma[c] + beta[c]
    return y_arr, xhat_arr, inv_arr


def layer_norm_backward(const double[:, :, ::1] dy, const double[:, :, ::1] xhat,
                        const double[:, ::1] inv_std, const double[::1] gamma):
    cdef Py_ssize_t B = dy.shape[0], T = dy.shape[1], D = dy.shape[2]
    dx_arr = np.empty((B, T, D), dtype=np.float64)
    dg_arr = np.zeros(D, dtype=np.float64)
    db_arr = np.zeros(D, dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t b, t, c
    cdef double m1, m2, g
    with nogil:
        for b in range(B):
            for t in range(T):
                m1 = 0.0
                m2 = 0.0
                for c in range(D):
                    g = dy[b, t, c] * gamma[c]
                    m1 = m1 + g
                    m2 = m2 + g * xhat[b, t, c]
                    dg[c] += dy[b, t, c] * xhat[b, t, c]
                    db[c] += dy[b, t, c]
                m1 = m1 / D
                m2 = m2 / D
                for c in range(D):
                    g = dy[b, t, c] * gamma[c]
                    dx[b, t, c] = (g - m1 - xhat[b, t, c] * m2) * inv_std[b, t]
    return dx_arr, dg_arr, db_arr
