"""numba-compiled kernels; loop twins of ``_numpy``."""
import numpy as np
from numba import njit


@njit(cache=True)
def _conv_fwd(x, wt, b, y):
    # wt is (k, cin, cout): innermost loop runs over contiguous output channels
    B, T, cin = x.shape
    k, _, cout = wt.shape
    p = (k - 1) // 2
    for bb in range(B):
        for t in range(T):
            for o in range(cout):
                y[bb, t, o] = b[o]
            for j in range(k):
                s = t + j - p
                if s < 0 or s >= T:
                    continue
                for i in range(cin):
                    xv = x[bb, s, i]
                    for o in range(cout):
                        y[bb, t, o] += wt[j, i, o] * xv


@njit(cache=True)
def _conv_bwd(gy, x, wo, gx, gwt, gb):
    # wo is (k, cout, cin); gwt is (k, cin, cout). Both inner loops are
    # independent per element so they vectorize without reassociation.
    B, T, cin = x.shape
    k, cout, _ = wo.shape
    p = (k - 1) // 2
    for bb in range(B):
        for t in range(T):
            for o in range(cout):
                gb[o] += gy[bb, t, o]
            for j in range(k):
                s = t + j - p
                if s < 0 or s >= T:
                    continue
                for i in range(cin):
                    xv = x[bb, s, i]
                    for o in range(cout):
                        gwt[j, i, o] += gy[bb, t, o] * xv
                for o in range(cout):
                    g = gy[bb, t, o]
                    for i in range(cin):
                        gx[bb, s, i] += g * wo[j, o, i]


@njit(cache=True)
def _nearest(z, e, idx, dist):
    n, h = z.shape
    kk = e.shape[0]
    for r in range(n):
        best = np.inf
        bi = 0
        for c in range(kk):
            d = 0.0
            for q in range(h):
                diff = z[r, q] - e[c, q]
                d += diff * diff
            # strict < keeps the lowest index on ties
            if d < best:
                best = d
                bi = c
        idx[r] = bi
        dist[r] = best


@njit(cache=True)
def _cluster_stats(z, idx, counts, sums):
    n, h = z.shape
    for r in range(n):
        c = idx[r]
        counts[c] += 1.0
        for q in range(h):
            sums[c, q] += z[r, q]


def conv1d_forward(x, w, b):
    B, T, _ = x.shape
    wt = np.ascontiguousarray(w.transpose(2, 1, 0))
    y = np.empty((B, T, w.shape[0]), dtype=x.dtype)
    _conv_fwd(np.ascontiguousarray(x), wt, np.ascontiguousarray(b), y)
    return y


def conv1d_backward(gy, x, w):
    wo = np.ascontiguousarray(w.transpose(2, 0, 1))
    gx = np.zeros(x.shape, dtype=x.dtype)
    gwt = np.zeros((w.shape[2], w.shape[1], w.shape[0]), dtype=w.dtype)
    gb = np.zeros(w.shape[0], dtype=w.dtype)
    _conv_bwd(np.ascontiguousarray(gy), np.ascontiguousarray(x), wo, gx, gwt, gb)
    return gx, np.ascontiguousarray(gwt.transpose(2, 1, 0)), gb


def nearest(z, e):
    idx = np.empty(z.shape[0], dtype=np.int64)
    dist = np.empty(z.shape[0], dtype=z.dtype)
    _nearest(np.ascontiguousarray(z), np.ascontiguousarray(e), idx, dist)
    return idx, dist


def cluster_stats(z, idx, k):
    counts = np.zeros(k, dtype=z.dtype)
    sums = np.zeros((k, z.shape[1]), dtype=z.dtype)
    _cluster_stats(np.ascontiguousarray(z), np.ascontiguousarray(idx), counts, sums)
    return counts, sums
