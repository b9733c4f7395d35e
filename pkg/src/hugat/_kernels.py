"""Compiled loops behind the fused attention ops in :mod:`hugat.autodiff`.

Each kernel makes one pass per row instead of the many temporaries the
equivalent array expression needs.  The leaky-relu slope is recomputed in
the backward kernels from ``src + dst`` rather than stored.
"""

from __future__ import annotations

import numpy as np
from numba import njit


# placeholder for masked logits: its exp is a normal float, so numpy's
# vectorised exp never hits the slow -inf or subnormal paths
MASKED_LOGIT = -700.0


@njit(cache=True)
def _shifted_logits(src, dst, mask, slope):
    # branch-free inner loops so they vectorise
    K, n = src.shape
    out = np.empty((K, n, n))
    for k in range(K):
        dk = dst[k]
        for i in range(n):
            row = out[k, i]
            mi = mask[i]
            si = src[k, i]
            m = -np.inf
            for j in range(n):
                x = si + dk[j]
                x = x if x >= 0 else slope * x
                v = x if mi[j] else MASKED_LOGIT
                row[j] = v
                m = max(m, v)
            for j in range(n):
                row[j] = row[j] - m if mi[j] else MASKED_LOGIT
    return out


def dense_attention_forward(src, dst, mask, slope):
    out = _shifted_logits(src, dst, mask, slope)
    np.exp(out, out=out)
    _normalize_rows(out, mask)
    return out


@njit(cache=True)
def _normalize_rows(out, mask):
    K, n = out.shape[0], out.shape[1]
    for k in range(K):
        for i in range(n):
            row = out[k, i]
            mi = mask[i]
            total = 0.0
            for j in range(n):
                total += row[j] if mi[j] else 0.0
            inv = 1.0 / total
            for j in range(n):
                row[j] = row[j] * inv if mi[j] else 0.0


@njit(cache=True)
def dense_attention_backward(g, alpha, src, dst, mask, slope):
    # alpha is exactly zero off the mask, so masked entries contribute nothing
    K, n = src.shape
    gs = np.zeros((K, n))
    gd = np.zeros((K, n))
    for k in range(K):
        dk = dst[k]
        gdk = gd[k]
        for i in range(n):
            gi = g[k, i]
            ai = alpha[k, i]
            si = src[k, i]
            dot = 0.0
            for j in range(n):
                dot += gi[j] * ai[j]
            acc = 0.0
            for j in range(n):
                ge = ai[j] * (gi[j] - dot)
                ge = ge * slope if si + dk[j] <= 0 else ge
                acc += ge
                gdk[j] += ge
            gs[k, i] = acc
    return gs, gd


@njit(cache=True)
def csr_attention_forward(src, dst, indptr, cols, slope):
    K, n = src.shape
    out = np.empty((K, cols.shape[0]))
    for k in range(K):
        for i in range(n):
            lo, hi = indptr[i], indptr[i + 1]
            m = -np.inf
            for e in range(lo, hi):
                x = src[k, i] + dst[k, cols[e]]
                if x < 0:
                    x *= slope
                out[k, e] = x
                if x > m:
                    m = x
            total = 0.0
            for e in range(lo, hi):
                v = np.exp(out[k, e] - m)
                out[k, e] = v
                total += v
            inv = 1.0 / total
            for e in range(lo, hi):
                out[k, e] *= inv
    return out


@njit(cache=True)
def csr_attention_backward(g, alpha, src, dst, indptr, cols, slope):
    K, n = src.shape
    gs = np.zeros((K, n))
    gd = np.zeros((K, n))
    for k in range(K):
        for i in range(n):
            lo, hi = indptr[i], indptr[i + 1]
            dot = 0.0
            for e in range(lo, hi):
                dot += g[k, e] * alpha[k, e]
            acc = 0.0
            for e in range(lo, hi):
                j = cols[e]
                ge = alpha[k, e] * (g[k, e] - dot)
                if src[k, i] + dst[k, j] <= 0:
                    ge *= slope
                acc += ge
                gd[k, j] += ge
            gs[k, i] = acc
    return gs, gd


@njit(cache=True)
def csr_aggregate_forward(alpha, h, indptr, cols):
    K = alpha.shape[0]
    n, dh = h.shape
    out = np.zeros((K, n, dh))
    for k in range(K):
        for i in range(n):
            o = out[k, i]
            for e in range(indptr[i], indptr[i + 1]):
                a = alpha[k, e]
                hj = h[cols[e]]
                for d in range(dh):
                    o[d] += a * hj[d]
    return out


@njit(cache=True)
def csr_aggregate_backward(g, alpha, h, indptr, cols):
    K = alpha.shape[0]
    n, dh = h.shape
    ga = np.empty_like(alpha)
    gh = np.zeros_like(h)
    for k in range(K):
        for i in range(n):
            gi = g[k, i]
            for e in range(indptr[i], indptr[i + 1]):
                j = cols[e]
                hj = h[j]
                ghj = gh[j]
                a = alpha[k, e]
                acc = 0.0
                for d in range(dh):
                    acc += gi[d] * hj[d]
                    ghj[d] += a * gi[d]
                ga[k, e] = acc
    return ga, gh


@njit(cache=True)
def lasso_gram_cd(G, c, lam, beta, tol, max_sweeps):
    """Coordinate descent on ``0.5 b'Gb - c'b + lam |b|_1`` starting from ``beta`` (updated in place).

    Returns the number of sweeps used.
    """
    d = c.shape[0]
    q = G @ beta
    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(d):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            rho = c[j] - q[j] + gjj * old
            if rho > lam:
                new = (rho - lam) / gjj
            elif rho < -lam:
                new = (rho + lam) / gjj
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                for k in range(d):
                    q[k] += G[k, j] * delta
                if abs(delta) > biggest:
                    biggest = abs(delta)
        if biggest < tol:
            return sweep + 1
    return max_sweeps
