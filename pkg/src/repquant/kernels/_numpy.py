"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature and the
same semantics; outputs agree to float rounding.
"""
import numpy as np

# cap on the (rows, K, H) broadcast block in nearest()
_NEAREST_BLOCK = 1 << 22


def _pad(x, p):
    B, T, C = x.shape
    xp = np.zeros((B, T + 2 * p, C), dtype=x.dtype)
    xp[:, p:p + T, :] = x
    return xp


def _im2col(x, k):
    # (B, T, C) -> (B*T, C*k) with column order matching w.reshape(Cout, C*k)
    B, T, C = x.shape
    xp = _pad(x, (k - 1) // 2)
    cols = np.empty((B, T, C, k), dtype=x.dtype)
    for j in range(k):
        cols[..., j] = xp[:, j:j + T, :]
    return cols.reshape(B * T, C * k)


def conv1d_forward(x, w, b):
    # one matmul against every tap at once, then k shifted adds
    B, T, cin = x.shape
    cout, _, k = w.shape
    xp = _pad(x, (k - 1) // 2)
    taps = w.transpose(1, 2, 0).reshape(cin, k * cout)
    u = (xp.reshape(-1, cin) @ taps).reshape(B, T + k - 1, k, cout)
    y = u[:, 0:T, 0, :] + b
    for j in range(1, k):
        y += u[:, j:j + T, j, :]
    return y


def conv1d_backward(gy, x, w):
    B, T, cin = x.shape
    cout, _, k = w.shape
    p = (k - 1) // 2
    g2 = gy.reshape(B * T, cout)
    cols = _im2col(x, k)
    gw = (g2.T @ cols).reshape(cout, cin, k)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(cout, cin * k)).reshape(B, T, cin, k)
    gxp = np.zeros((B, T + 2 * p, cin), dtype=x.dtype)
    for j in range(k):
        gxp[:, j:j + T, :] += gcols[..., j]
    return gxp[:, p:p + T, :], gw, gb


def nearest(z, e):
    n, h = z.shape
    kk = e.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=z.dtype)
    step = max(1, _NEAREST_BLOCK // max(1, kk * h))
    for s in range(0, n, step):
        diff = z[s:s + step, None, :] - e[None, :, :]
        d = np.einsum("nkh,nkh->nk", diff, diff)
        # argmin returns the first minimum: ties go to the lowest index
        i = np.argmin(d, axis=1)
        idx[s:s + step] = i
        dist[s:s + step] = d[np.arange(len(i)), i]
    return idx, dist


def cluster_stats(z, idx, k):
    counts = np.bincount(idx, minlength=k).astype(z.dtype)
    sums = np.zeros((k, z.shape[1]), dtype=z.dtype)
    np.add.at(sums, idx, z)
    return counts, sums
