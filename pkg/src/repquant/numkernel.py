"""Numeric primitives: same-length 1D convolution, ELU, Adam, seeded init.

Arrays are frame-major: a sequence is ``(T, C)`` and a batch of equal-length
sequences is ``(B, T, C)``. Convolutions never mix frames across the batch
axis; each sequence is zero-padded on its own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, NumericFault


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``seed`` and optional stream ids.

    Draw sequences depend only on the key tuple, never on process state.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.kernel < 1:
            raise ConfigurationError(f"non-positive conv dimension in {self}")
        if self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel must be odd, got {self.kernel}")
        if self.stride != 1:
            raise ConfigurationError(f"only stride 1 is supported, got {self.stride}")

    @property
    def n_params(self) -> int:
        return self.out_channels * self.in_channels * self.kernel + (
            self.out_channels if self.has_bias else 0
        )


@dataclass
class ConvLayerParams:
    weights: np.ndarray  # (c_out, c_in, k)
    bias: np.ndarray  # (c_out,)

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def astype(self, dtype) -> "ConvLayerParams":
        return ConvLayerParams(self.weights.astype(dtype), self.bias.astype(dtype))


def _check_conv(x: np.ndarray, spec: ConvLayerSpec, params: ConvLayerParams):
    want = (spec.out_channels, spec.in_channels, spec.kernel)
    if params.weights.shape != want:
        raise ContractError(f"weights shape {params.weights.shape} != {want}")
    if params.bias.shape != (spec.out_channels,):
        raise ContractError(f"bias shape {params.bias.shape} != ({spec.out_channels},)")
    if x.ndim not in (2, 3) or x.shape[-1] != spec.in_channels:
        raise ContractError(
            f"input shape {x.shape} incompatible with {spec.in_channels} input channels"
        )


def conv1d_forward(x: np.ndarray, spec: ConvLayerSpec, params: ConvLayerParams) -> np.ndarray:
    """Non-causal same-length convolution along time.

    ``(k - 1) // 2`` zero frames are added at both ends, so output length
    equals input length. Accepts ``(T, C_in)`` or ``(B, T, C_in)``.
    """
    _check_conv(x, spec, params)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    y = kernels.conv1d_forward(xb, params.weights, params.bias)
    return y[0] if squeeze else y


def conv1d_backward(
    grad_output: np.ndarray,
    cached_input: np.ndarray,
    spec: ConvLayerSpec,
    params: ConvLayerParams,
) -> tuple[np.ndarray, ConvLayerParams]:
    """Gradients of a scalar loss w.r.t. input, weights and bias.

    Returns ``(grad_input, ConvLayerParams(grad_weights, grad_bias))``. When the
    layer has no bias the bias gradient is zeroed.
    """
    _check_conv(cached_input, spec, params)
    want = cached_input.shape[:-1] + (spec.out_channels,)
    if grad_output.shape != want:
        raise ContractError(f"grad_output shape {grad_output.shape} != {want}")
    squeeze = cached_input.ndim == 2
    gy = grad_output[None] if squeeze else grad_output
    xb = cached_input[None] if squeeze else cached_input
    gx, gw, gb = kernels.conv1d_backward(gy, xb, params.weights)
    if not spec.has_bias:
        gb = np.zeros_like(gb)
    return (gx[0] if squeeze else gx), ConvLayerParams(gw, gb)


def elu(x: np.ndarray) -> np.ndarray:
    """ELU with alpha = 1."""
    # expm1 on the clipped value avoids overflow warnings for large positive x
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * np.where(x >= 0, 1, np.exp(np.minimum(x, 0))).astype(grad_out.dtype)


def activation(x: np.ndarray, mode: str = "elu") -> np.ndarray:
    if mode == "elu":
        return elu(x)
    if mode == "identity":
        return x
    raise ConfigurationError(f"unknown activation {mode!r}")


def activation_grad(x: np.ndarray, grad_out: np.ndarray, mode: str = "elu") -> np.ndarray:
    if mode == "elu":
        return elu_grad(x, grad_out)
    if mode == "identity":
        return grad_out
    raise ConfigurationError(f"unknown activation {mode!r}")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    name: str = "params",
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, inputs untouched.

    Arithmetic stays in the dtype of ``params`` so float32 training is
    reproducible bit for bit.
    """
    if params.shape != grads.shape or state.first_moment.shape != params.shape:
        raise ContractError(
            f"{name}: shapes differ (params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape})"
        )
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or lr <= 0:
        raise ConfigurationError(f"bad Adam hyperparameters lr={lr} b1={beta1} b2={beta2}")
    if not np.all(np.isfinite(grads)):
        raise NumericFault(f"non-finite gradient in {name}")
    dt = params.dtype.type
    t = state.step_count + 1
    b1, b2 = dt(beta1), dt(beta2)
    m = b1 * state.first_moment + (dt(1) - b1) * grads
    v = b2 * state.second_moment + (dt(1) - b2) * (grads * grads)
    m_hat = m / dt(1 - beta1**t)
    v_hat = v / dt(1 - beta2**t)
    new = params - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return new.astype(params.dtype, copy=False), AdamState(m, v, t)


def init_conv_params(
    spec: ConvLayerSpec, rng: np.random.Generator, dtype=np.float32
) -> ConvLayerParams:
    """Uniform fan-in init in ``[-a, a]``, ``a = 1/sqrt(c_in * k)``; zero bias.

    Consumes exactly ``c_out * c_in * k`` float64 draws from ``rng``.
    """
    a = 1.0 / np.sqrt(spec.in_channels * spec.kernel)
    shape = (spec.out_channels, spec.in_channels, spec.kernel)
    w = rng.uniform(-a, a, size=shape).astype(dtype)
    return ConvLayerParams(w, np.zeros(spec.out_channels, dtype=dtype))
