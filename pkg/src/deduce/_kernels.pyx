# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled single-image forward / input-gradient pass for the residual MLP.

Mirrors ``deduce.nn_core.forward`` and ``deduce.nn_core.grad_input``; see
``deduce._fallback`` for the numpy twin. Loops run without the GIL so the
benchmark harness can use threads.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs

cnp.import_array()


cdef void _forward(const double[:, ::1] w_in, const double[::1] b_in,
                   const double[:, :, ::1] w1, const double[:, ::1] b1,
                   const double[:, :, ::1] w2, const double[:, ::1] b2,
                   const double[:, ::1] wh, const double[::1] bh,
                   double slope, const double[::1] x,
                   double[:, ::1] hin, double[:, ::1] u,
                   double[::1] h, double[::1] logits) noexcept nogil:
    cdef Py_ssize_t F = w_in.shape[0], D = w_in.shape[1]
    cdef Py_ssize_t B = w1.shape[0], H = w1.shape[1], C = wh.shape[0]
    cdef Py_ssize_t f, d, j, b, c
    cdef double acc, a
    for f in range(F):
        acc = 0.0
        for d in range(D):
            acc += w_in[f, d] * x[d]
        h[f] = acc + b_in[f]
    for b in range(B):
        for f in range(F):
            hin[b, f] = h[f]
        for j in range(H):
            acc = 0.0
            for f in range(F):
                acc += w1[b, j, f] * h[f]
            u[b, j] = acc + b1[b, j]
        for f in range(F):
            acc = 0.0
            for j in range(H):
                a = u[b, j]
                if a < 0.0:
                    a = slope * a
                acc += w2[b, f, j] * a
            h[f] = h[f] + (acc + b2[b, f])
    for c in range(C):
        acc = 0.0
        for f in range(F):
            acc += wh[c, f] * h[f]
        logits[c] = acc + bh[c]


def forward(net, x):
    """Return (logits, features) for one flat image."""
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    F = net.w_in.shape[0]
    B, H = net.w1.shape[0], net.w1.shape[1]
    C = net.w_head.shape[0]
    hin = np.empty((B, F))
    u = np.empty((B, H))
    h = np.empty(F)
    logits = np.empty(C)
    cdef double[:, ::1] hin_v = hin
    cdef double[:, ::1] u_v = u
    cdef double[::1] h_v = h
    cdef double[::1] lg_v = logits
    cdef const double[:, ::1] w_in = net.w_in
    cdef const double[::1] b_in = net.b_in
    cdef const double[:, :, ::1] w1 = net.w1
    cdef const double[:, ::1] b1 = net.b1
    cdef const double[:, :, ::1] w2 = net.w2
    cdef const double[:, ::1] b2 = net.b2
    cdef const double[:, ::1] wh = net.w_head
    cdef const double[::1] bh = net.b_head
    cdef double slope = net.slope
    with nogil:
        _forward(w_in, b_in, w1, b1, w2, b2, wh, bh, slope, xv, hin_v, u_v, h_v, lg_v)
    return logits, h


def evaluate(net, x, Py_ssize_t target, mean_t, prec_t, double log_norm_t,
             double ce_weight, double density_weight, bint normalized, double eps):
    """Forward plus combined-objective input gradient (ascent direction).

    Returns (probs, ce, logp or None, grad).
    """
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    F = net.w_in.shape[0]
    D = net.w_in.shape[1]
    B, H = net.w1.shape[0], net.w1.shape[1]
    C = net.w_head.shape[0]
    hin = np.empty((B, F))
    u = np.empty((B, H))
    h = np.empty(F)
    logits = np.empty(C)
    probs = np.empty(C)
    grad = np.empty(D)
    scratch = np.empty(3 * F + max(H, 1) + C)
    cdef bint use_density = density_weight != 0.0 or mean_t is not None
    if mean_t is None:
        mean_t = np.zeros(F)
        prec_t = np.zeros((F, F))
    cdef const double[::1] mu = np.ascontiguousarray(mean_t, dtype=np.float64)
    cdef const double[:, ::1] prec = np.ascontiguousarray(prec_t, dtype=np.float64)
    cdef double[:, ::1] hin_v = hin
    cdef double[:, ::1] u_v = u
    cdef double[::1] h_v = h
    cdef double[::1] lg_v = logits
    cdef double[::1] p_v = probs
    cdef double[::1] g_v = grad
    cdef double[::1] s = scratch
    cdef const double[:, ::1] w_in = net.w_in
    cdef const double[::1] b_in = net.b_in
    cdef const double[:, :, ::1] w1 = net.w1
    cdef const double[:, ::1] b1 = net.b1
    cdef const double[:, :, ::1] w2 = net.w2
    cdef const double[:, ::1] b2 = net.b2
    cdef const double[:, ::1] wh = net.w_head
    cdef const double[::1] bh = net.b_head
    cdef double slope = net.slope
    cdef Py_ssize_t f, d, j, b, c, k
    cdef Py_ssize_t nF = F, nD = D, nB = B, nH = H, nC = C
    cdef double m, tot, ce, logp = 0.0, acc, maha, ce_coef, dens_coef
    # scratch layout: diff[F] | pd[F] | dh[F] | du[H] | dlog[C]
    cdef Py_ssize_t o_pd = nF, o_dh = 2 * nF
    cdef Py_ssize_t o_du = 3 * nF, o_dl = 3 * nF + max(nH, 1)

    with nogil:
        _forward(w_in, b_in, w1, b1, w2, b2, wh, bh, slope, xv, hin_v, u_v, h_v, lg_v)

        m = lg_v[0]
        for c in range(1, nC):
            if lg_v[c] > m:
                m = lg_v[c]
        tot = 0.0
        for c in range(nC):
            tot += exp(lg_v[c] - m)
        tot = log(tot)
        for c in range(nC):
            p_v[c] = exp(lg_v[c] - m - tot)
        ce = -(lg_v[target] - m - tot)

        if use_density:
            for f in range(nF):
                s[f] = h_v[f] - mu[f]
            # pd = diff^T prec (prec symmetric)
            for f in range(nF):
                acc = 0.0
                for k in range(nF):
                    acc += s[k] * prec[k, f]
                s[o_pd + f] = acc
            maha = 0.0
            for f in range(nF):
                maha += s[f] * s[o_pd + f]
            logp = log_norm_t - 0.5 * maha

        ce_coef = ce_weight
        if normalized:
            ce_coef = ce_weight / (ce + eps)
        for c in range(nC):
            s[o_dl + c] = ce_coef * p_v[c]
        s[o_dl + target] -= ce_coef

        dens_coef = 0.0
        if density_weight != 0.0:
            dens_coef = density_weight
            if normalized:
                dens_coef = density_weight / (fabs(logp) + eps)

        for f in range(nF):
            acc = 0.0
            for c in range(nC):
                acc += s[o_dl + c] * wh[c, f]
            if density_weight != 0.0:
                acc = acc + dens_coef * s[o_pd + f]
            s[o_dh + f] = acc

        for b in range(nB - 1, -1, -1):
            for j in range(nH):
                acc = 0.0
                for f in range(nF):
                    acc += s[o_dh + f] * w2[b, f, j]
                if u_v[b, j] >= 0.0:
                    s[o_du + j] = acc
                else:
                    s[o_du + j] = acc * slope
            for f in range(nF):
                acc = 0.0
                for j in range(nH):
                    acc += s[o_du + j] * w1[b, j, f]
                s[o_dh + f] = s[o_dh + f] + acc

        for d in range(nD):
            g_v[d] = 0.0
        for f in range(nF):
            acc = s[o_dh + f]
            for d in range(nD):
                g_v[d] += acc * w_in[f, d]

    return probs, ce, (logp if use_density else None), grad


def fnv1a64(const unsigned char[::1] data):
    """64-bit FNV-1a over a byte buffer."""
    cdef unsigned long long h = 0xcbf29ce484222325ULL
    cdef unsigned long long prime = 0x100000001b3ULL
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            h = (h ^ data[i]) * prime
    return h
