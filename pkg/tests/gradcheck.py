"""Finite-difference oracle for the codec's training loss.

Quantization is piecewise constant, so the check freezes it at the base point:
the selected codewords stay fixed and the quantizer output becomes
``Z + (Q0 - Z0)``, the function whose true gradient is the straight-through
gradient. Only forward passes are used here.
"""
import numpy as np

from repquant.codec import decode, encode, forward_and_grads, reconstruction_loss
from repquant.quantizer import rvq_forward


def frozen_loss_fn(params, quant, X, lambda_r, lambda_q):
    Z0 = encode(params, X).reshape(-1, params.arch.dim)
    base = rvq_forward(quant, Z0)
    chosen = [cb.entries[idx] for cb, idx in zip(quant.layers, base.indices)]
    offset = base.quantized_sum - Z0

    def loss():
        Z = encode(params, X).reshape(-1, params.arch.dim)
        X_hat = decode(params, (Z + offset).reshape(X.shape))
        l_q, r = 0.0, Z
        for e in chosen:
            l_q += float(np.sum((r - e) ** 2)) / r.size
            r = r - e
        return lambda_r * reconstruction_loss(X, X_hat) + lambda_q * l_q

    return loss


def codec_fd_error(params, quant, X, lambda_r, lambda_q, h=1e-5):
    """Worst per-block relative error, ``max|a - n| / max(|a|, |n|)`` over the block."""
    res = forward_and_grads(params, quant, X, lambda_r, lambda_q)
    loss = frozen_loss_fn(params, quant, X, lambda_r, lambda_q)
    worst = 0.0
    for layer, g in zip(params.layers(), res.grads):
        for arr, ana in ((layer.weights, g.weights), (layer.bias, g.bias)):
            num = np.zeros_like(arr)
            for ix in np.ndindex(arr.shape):
                old = arr[ix]
                arr[ix] = old + h
                up = loss()
                arr[ix] = old - h
                down = loss()
                arr[ix] = old
                num[ix] = (up - down) / (2 * h)
            scale = max(np.abs(num).max(), np.abs(ana).max())
            if scale > 0:
                worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst
