"""Convolutional encoder/decoder around a residual vector quantizer.

Layer layout (every conv is ``Conv1d(H, H, k, 1)`` with bias)::

    encoder: Conv -> [Res, Res, Conv+ELU] * enc_blocks -> Conv
    decoder: Conv -> [Conv+ELU, Res, Res] * dec_blocks -> Conv
    Res(x) = x + ELU(Conv(ELU(Conv(x))))

The first and last conv of each stack carry no activation. With
``enc_blocks == dec_blocks == 0`` the codec has no convolutions at all and both
stacks are the identity; that is the encoderless VQ baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, NumericFault
from .numkernel import (
    ConvLayerParams,
    ConvLayerSpec,
    conv1d_backward,
    conv1d_forward,
    elu,
    elu_grad,
    init_conv_params,
)
from .quantizer import RvqResult, RvqStack, rvq_forward, straight_through


@dataclass(frozen=True)
class ArchSpec:
    dim: int
    enc_blocks: int = 2
    dec_blocks: int = 2
    kernel: int = 3
    clusters: int = 1024
    rvq_layers: int = 1

    def __post_init__(self):
        if self.dim < 1 or self.clusters < 1 or self.rvq_layers < 1:
            raise ConfigurationError(f"non-positive size in {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.enc_blocks < 0 or self.dec_blocks < 0:
            raise ConfigurationError(f"negative block count in {self}")
        if (self.enc_blocks == 0) != (self.dec_blocks == 0):
            raise ConfigurationError(
                "enc_blocks and dec_blocks must both be positive, or both 0 for the encoderless baseline"
            )

    @property
    def encoderless(self) -> bool:
        return self.enc_blocks == 0

    @property
    def conv_spec(self) -> ConvLayerSpec:
        return ConvLayerSpec(self.dim, self.dim, self.kernel, 1, True)

    @property
    def n_encoder_convs(self) -> int:
        return 0 if self.encoderless else 2 + 5 * self.enc_blocks

    @property
    def n_decoder_convs(self) -> int:
        return 0 if self.encoderless else 2 + 5 * self.dec_blocks

    @property
    def n_params(self) -> int:
        return (self.n_encoder_convs + self.n_decoder_convs) * self.conv_spec.n_params


# program ops: ("conv", layer, activated) or ("res", layer_a, layer_b)
def encoder_program(blocks: int) -> list[tuple]:
    if blocks == 0:
        return []
    prog, i = [("conv", 0, False)], 1
    for _ in range(blocks):
        prog += [("res", i, i + 1), ("res", i + 2, i + 3), ("conv", i + 4, True)]
        i += 5
    prog.append(("conv", i, False))
    return prog


def decoder_program(blocks: int) -> list[tuple]:
    if blocks == 0:
        return []
    prog, i = [("conv", 0, False)], 1
    for _ in range(blocks):
        prog += [("conv", i, True), ("res", i + 1, i + 2), ("res", i + 3, i + 4)]
        i += 5
    prog.append(("conv", i, False))
    return prog


@dataclass
class CodecParameters:
    arch: ArchSpec
    encoder_layers: list[ConvLayerParams]
    decoder_layers: list[ConvLayerParams]

    def layers(self) -> list[ConvLayerParams]:
        """All convs in checkpoint order: encoder then decoder, forward order."""
        return self.encoder_layers + self.decoder_layers

    def layer_names(self) -> list[str]:
        return [f"encoder.conv{i}" for i in range(len(self.encoder_layers))] + [
            f"decoder.conv{i}" for i in range(len(self.decoder_layers))
        ]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.layers())

    def astype(self, dtype) -> "CodecParameters":
        return CodecParameters(
            self.arch,
            [p.astype(dtype) for p in self.encoder_layers],
            [p.astype(dtype) for p in self.decoder_layers],
        )

    def copy(self) -> "CodecParameters":
        return CodecParameters(
            self.arch,
            [ConvLayerParams(p.weights.copy(), p.bias.copy()) for p in self.encoder_layers],
            [ConvLayerParams(p.weights.copy(), p.bias.copy()) for p in self.decoder_layers],
        )


@dataclass
class LossReport:
    l_r: float
    l_q: float
    l_total: float
    step: int = 0


def build_codec(arch: ArchSpec, rng: np.random.Generator, dtype=np.float32) -> CodecParameters:
    spec = arch.conv_spec
    enc = [init_conv_params(spec, rng, dtype) for _ in range(arch.n_encoder_convs)]
    dec = [init_conv_params(spec, rng, dtype) for _ in range(arch.n_decoder_convs)]
    return CodecParameters(arch, enc, dec)


def _run(program, layers, spec, x, tape=None):
    for op in program:
        if op[0] == "conv":
            _, i, act = op
            pre = conv1d_forward(x, spec, layers[i])
            if tape is not None:
                tape.append((x, pre))
            x = elu(pre) if act else pre
        else:
            _, a, b = op
            pre1 = conv1d_forward(x, spec, layers[a])
            h = elu(pre1)
            pre2 = conv1d_forward(h, spec, layers[b])
            if tape is not None:
                tape.append((x, pre1, h, pre2))
            x = x + elu(pre2)
    return x


def _run_backward(program, layers, spec, tape, g, grads):
    for op, rec in zip(reversed(program), reversed(tape)):
        if op[0] == "conv":
            _, i, act = op
            x, pre = rec
            if act:
                g = elu_grad(pre, g)
            g, grads[i] = conv1d_backward(g, x, spec, layers[i])
        else:
            _, a, b = op
            x, pre1, h, pre2 = rec
            gb = elu_grad(pre2, g)
            gh, grads[b] = conv1d_backward(gb, h, spec, layers[b])
            ga = elu_grad(pre1, gh)
            gx, grads[a] = conv1d_backward(ga, x, spec, layers[a])
            g = g + gx
    return g


def _check_input(params: CodecParameters, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (2, 3) or x.shape[-1] != params.arch.dim or x.shape[-2] < 1:
        raise ContractError(f"input shape {x.shape} does not match codec dim {params.arch.dim}")
    return x


def encode(params: CodecParameters, X) -> np.ndarray:
    """``(T, H)`` or ``(B, T, H)`` features to latents of the same shape."""
    X = _check_input(params, X)
    return _run(encoder_program(params.arch.enc_blocks), params.encoder_layers, params.arch.conv_spec, X)


def decode(params: CodecParameters, Q) -> np.ndarray:
    Q = _check_input(params, Q)
    return _run(decoder_program(params.arch.dec_blocks), params.decoder_layers, params.arch.conv_spec, Q)


def reconstruction_loss(X, X_hat) -> float:
    """``||X - X_hat||_F^2 / (H*T)``; batches average over all frames."""
    X, X_hat = np.asarray(X), np.asarray(X_hat)
    if X.shape != X_hat.shape:
        raise ContractError(f"shape mismatch {X.shape} vs {X_hat.shape}")
    d = X.astype(np.float64) - X_hat.astype(np.float64)
    return float(np.sum(d * d) / d.size)


@dataclass
class ForwardResult:
    report: LossReport
    encoder_grads: list[ConvLayerParams]
    decoder_grads: list[ConvLayerParams]
    latents: np.ndarray  # (N, H), flattened over batch and time
    rvq: RvqResult = field(repr=False)
    reconstruction: np.ndarray = field(repr=False)

    @property
    def grads(self) -> list[ConvLayerParams]:
        return self.encoder_grads + self.decoder_grads


def _finite_or_fault(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in {what}")


def forward_and_grads(
    params: CodecParameters,
    quant: RvqStack,
    X,
    lambda_r: float,
    lambda_q: float,
) -> ForwardResult:
    """Loss report and exact gradients for one batch.

    Decoder weights see only ``lambda_r * l_r``. The encoder gets that gradient
    passed straight through the quantizer plus ``lambda_q * dl_q/dZ`` with the
    selected codewords held fixed. Codebooks get nothing here.
    """
    X = _check_input(params, X)
    arch = params.arch
    spec = arch.conv_spec
    if quant.dim != arch.dim:
        raise ContractError(f"quantizer dim {quant.dim} != codec dim {arch.dim}")
    shape = X.shape
    enc_prog, dec_prog = encoder_program(arch.enc_blocks), decoder_program(arch.dec_blocks)

    enc_tape: list = []
    Z = _run(enc_prog, params.encoder_layers, spec, X, enc_tape)
    _finite_or_fault(Z, "encoder output")
    Zf = Z.reshape(-1, arch.dim)
    rvq = rvq_forward(quant, Zf)
    Q = rvq.quantized_sum.reshape(shape)
    dec_tape: list = []
    X_hat = _run(dec_prog, params.decoder_layers, spec, Q, dec_tape)
    _finite_or_fault(X_hat, "decoder output")

    l_r = reconstruction_loss(X, X_hat)
    l_q = rvq.loss
    report = LossReport(l_r, l_q, lambda_r * l_r + lambda_q * l_q)

    enc_grads: list = [None] * len(params.encoder_layers)
    dec_grads: list = [None] * len(params.decoder_layers)
    if enc_prog:
        dt = X.dtype.type
        scale = dt(2.0 / X.size)
        g_xhat = (dt(lambda_r) * scale) * (X_hat - X)
        g_q = _run_backward(dec_prog, params.decoder_layers, spec, dec_tape, g_xhat, dec_grads)
        g_z = straight_through(g_q)
        # codewords are constants here, and every residual has identity Jacobian in Z
        g_lq = np.zeros_like(Zf)
        for i, (cb, r) in enumerate(zip(quant.layers, rvq.residuals)):
            g_lq += r - cb.entries[rvq.indices[i]].astype(r.dtype, copy=False)
        g_z = g_z + (dt(lambda_q) * scale) * g_lq.reshape(shape)
        _run_backward(enc_prog, params.encoder_layers, spec, enc_tape, g_z, enc_grads)
        for name, g in zip(params.layer_names(), enc_grads + dec_grads):
            if not (np.all(np.isfinite(g.weights)) and np.all(np.isfinite(g.bias))):
                raise NumericFault(f"non-finite gradient in {name}")
    return ForwardResult(report, enc_grads, dec_grads, Zf, rvq, X_hat)
