"""Training loop, configuration and the binary checkpoint container.

Checkpoint layout (little-endian)::

    b"RPCC" | u32 version=1
    | u32 H, kernel, enc_blocks, dec_blocks, K, M | u64 step | u64 seed
    | conv params, float32, encoder then decoder, each weights (c_out, c_in, k) then bias
    | per RVQ layer: entries (K, H), ema_counts (K,), ema_sums (K, H), float32
    | Adam first moments for every conv block in param order, then second moments

A k-means model is the same container with ``enc_blocks = dec_blocks = 0`` and
``M = 1``; its counts are the cluster populations.

Randomness is keyed by ``(seed, purpose, ...)`` rather than carried as mutable
state, so a checkpoint's ``(seed, step)`` pair is enough to resume exactly.
"""
from __future__ import annotations

import dataclasses
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import ArchSpec, CodecParameters, LossReport, build_codec, encode, forward_and_grads
from .errors import ConfigurationError, CorruptionError, DataError, FormatError, NumericFault
from .featureio import (
    RepresentationSequence,
    Segment,
    load_corpus,
    make_batches,
    read_feature_file,
    segment_sequence,
)
from .numkernel import AdamState, ConvLayerParams, adam_step, make_rng
from .quantizer import (
    Codebook,
    RvqStack,
    TOKEN_SUFFIX,
    TokenSequence,
    ema_update,
    init_codebook,
    quantize_vq,
    reset_dead_codes,
    rvq_forward,
    write_token_file,
)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RPCC"
CKPT_VERSION = 1
CKPT_SUFFIX = ".rpcc"
_CKPT_HEADER = struct.Struct("<4sI6IQQ")

# rng stream ids
_STREAM_INIT = 0
_STREAM_EPOCH = 1
_STREAM_CODEBOOK = 2
_STREAM_RESET = 3


@dataclass
class TrainingConfig:
    lambda_r: float = 45.0
    lambda_q: float = 1.0
    gamma: float = 0.99
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    steps: int = 200_000
    batch_size: int = 32
    segment_len: int = 96
    clusters: int = 1024
    rvq_layers: int = 1
    seed: int = 0
    dead_code_threshold: float = 0.01
    enc_blocks: int = 2
    dec_blocks: int = 2
    kernel: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not np.isfinite(v):
                raise ConfigurationError(f"{f.name} must be finite, got {v}")
        if self.lambda_r < 0 or self.lambda_q < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be non-negative, got {self.steps}")
        for name in ("batch_size", "segment_len", "clusters", "rvq_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.dead_code_threshold <= 0:
            raise ConfigurationError("dead_code_threshold must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")

    def arch(self, dim: int) -> ArchSpec:
        return ArchSpec(dim, self.enc_blocks, self.dec_blocks, self.kernel, self.clusters, self.rvq_layers)

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, typ, text: str):
    try:
        if typ in (int, "int"):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigurationError(f"config key {name!r}: cannot parse {text!r}") from None


def parse_config(text: str, base: TrainingConfig | None = None) -> TrainingConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainingConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        if key not in types:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], val)
    base = base or TrainingConfig()
    return dataclasses.replace(base, **values)


def read_config(path) -> TrainingConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainingConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)!r}\n" for f in dataclasses.fields(cfg))


@dataclass
class TrainerState:
    codec: CodecParameters
    quantizer: RvqStack
    adam: list[AdamState]  # one per conv block: w0, b0, w1, b1, ...
    step: int
    seed: int
    history: list[LossReport] = field(default_factory=list)

    def param_blocks(self) -> list[np.ndarray]:
        out = []
        for p in self.codec.layers():
            out += [p.weights, p.bias]
        return out

    def block_names(self) -> list[str]:
        out = []
        for name in self.codec.layer_names():
            out += [name + ".weight", name + ".bias"]
        return out


def _epoch_batches(segments: list[Segment], cfg: TrainingConfig, epoch: int):
    return make_batches(segments, cfg.batch_size, make_rng(cfg.seed, _STREAM_EPOCH, epoch))


class BatchSchedule:
    """Step-indexed batches: epoch ``e`` is a fresh shuffle keyed by ``(seed, e)``."""

    def __init__(self, segments: list[Segment], cfg: TrainingConfig):
        if len(segments) < cfg.batch_size:
            raise ConfigurationError(
                f"corpus yields {len(segments)} segments of {cfg.segment_len} frames, "
                f"fewer than one batch of {cfg.batch_size}"
            )
        self.segments = segments
        self.cfg = cfg
        self.per_epoch = len(segments) // cfg.batch_size
        self._epoch = -1
        self._batches = None

    def __getitem__(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._batches = _epoch_batches(self.segments, self.cfg, epoch)
            self._epoch = epoch
        return self._batches[pos].array(np.float32)


def init_state(first_batch: np.ndarray, cfg: TrainingConfig) -> TrainerState:
    """Fresh codec plus codebooks seeded from the first batch's latents."""
    dim = first_batch.shape[-1]
    arch = cfg.arch(dim)
    codec = build_codec(arch, make_rng(cfg.seed, _STREAM_INIT), np.float32)
    z = encode(codec, first_batch).reshape(-1, dim)
    rng = make_rng(cfg.seed, _STREAM_CODEBOOK)
    layers = []
    residual = z
    for _ in range(cfg.rvq_layers):
        cb = init_codebook(residual, cfg.clusters, rng, gamma=cfg.gamma)
        _, q, _ = quantize_vq(cb, residual)
        residual = residual - q
        layers.append(cb)
    state = TrainerState(codec, RvqStack(layers), [], 0, cfg.seed)
    state.adam = [AdamState.zeros_like(b) for b in state.param_blocks()]
    return state


def train_step(state: TrainerState, batch, cfg: TrainingConfig) -> tuple[TrainerState, LossReport]:
    """One optimization step; ``state`` itself is left untouched."""
    X = batch.array(np.float32) if hasattr(batch, "array") else np.asarray(batch, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    step = state.step
    try:
        res = forward_and_grads(state.codec, state.quantizer, X, cfg.lambda_r, cfg.lambda_q)
    except NumericFault as exc:
        raise NumericFault(f"step {step}: {exc}") from None

    # Adam on every conv block
    names = state.block_names()
    new_blocks, new_adam = [], []
    grads = []
    for g in res.grads:
        grads += [g.weights, g.bias]
    for name, p, g, st in zip(names, state.param_blocks(), grads, state.adam):
        try:
            p2, st2 = adam_step(p, g, st, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, name=name)
        except NumericFault as exc:
            raise NumericFault(f"step {step}: {exc}") from None
        new_blocks.append(p2)
        new_adam.append(st2)
    layers = [ConvLayerParams(new_blocks[2 * i], new_blocks[2 * i + 1]) for i in range(len(new_blocks) // 2)]
    n_enc = len(state.codec.encoder_layers)
    codec = CodecParameters(state.codec.arch, layers[:n_enc], layers[n_enc:])

    # EMA on the forward pass's residuals and assignments, then dead-code resets
    rng = make_rng(state.seed, _STREAM_RESET, step)
    books = []
    for i, cb in enumerate(state.quantizer.layers):
        cb = ema_update(dataclasses.replace(cb, gamma=cfg.gamma), res.rvq.residuals[i], res.rvq.indices[i])
        cb = reset_dead_codes(cb, res.rvq.residuals[i], rng, cfg.dead_code_threshold)
        books.append(cb)

    report = dataclasses.replace(res.report, step=step + 1)
    new = TrainerState(codec, RvqStack(books), new_adam, step + 1, state.seed, state.history + [report])
    return new, report


def loss_log_path(checkpoint) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.stem + ".loss.tsv")


def format_loss_line(r: LossReport) -> str:
    return f"{r.step}\t{r.l_r!r}\t{r.l_q!r}\t{r.l_total!r}\n"


def fit(
    sequences: list[RepresentationSequence],
    cfg: TrainingConfig,
    state: TrainerState | None = None,
    log_file=None,
    callback=None,
) -> TrainerState:
    """Run ``cfg.steps`` total steps, starting from ``state`` if given."""
    segments = [s for seq in sequences for s in segment_sequence(seq, cfg.segment_len)]
    dims = {seq.dim for seq in sequences}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dimensions {sorted(dims)}")
    sched = BatchSchedule(segments, cfg)
    if state is None:
        state = init_state(sched[0], cfg)
    elif state.seed != cfg.seed:
        raise ConfigurationError(f"checkpoint seed {state.seed} differs from config seed {cfg.seed}")
    else:
        state.quantizer = RvqStack(
            [dataclasses.replace(cb, gamma=cfg.gamma) for cb in state.quantizer.layers]
        )
    if state.codec.arch.dim != dims.pop():
        raise DataError("feature dimension does not match the checkpoint")
    while state.step < cfg.steps:
        state, report = train_step(state, sched[state.step], cfg)
        if log_file is not None:
            log_file.write(format_loss_line(report))
        if callback is not None:
            callback(state, report)
    return state


def train(manifest, cfg: TrainingConfig, out, resume=None) -> Path:
    """Train on every feature file of ``manifest``; write checkpoint and loss log."""
    sequences = load_corpus(manifest)
    out = Path(out)
    state = load_checkpoint(resume) if resume is not None else None
    mode = "a" if resume is not None and Path(resume) == out else "w"
    with open(loss_log_path(out), mode, encoding="utf-8", newline="\n") as fh:
        state = fit(sequences, cfg, state, fh)
    save_checkpoint(state, out)
    return out


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(state: TrainerState, path) -> None:
    arch = state.codec.arch
    q = state.quantizer
    parts = [
        _CKPT_HEADER.pack(
            CKPT_MAGIC, CKPT_VERSION, arch.dim, arch.kernel, arch.enc_blocks, arch.dec_blocks,
            q.size, q.n_layers, state.step, state.seed,
        )
    ]
    parts += [_f32(b) for b in state.param_blocks()]
    for cb in q.layers:
        parts += [_f32(cb.entries), _f32(cb.ema_counts), _f32(cb.ema_sums)]
    parts += [_f32(s.first_moment) for s in state.adam]
    parts += [_f32(s.second_moment) for s in state.adam]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        for p in parts:
            fh.write(p)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainerState:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        if raw[:4] != CKPT_MAGIC[: len(raw)]:
            raise FormatError(f"{path}: not a checkpoint")
        raise CorruptionError(f"{path}: truncated header")
    magic, version, H, kernel, enc_b, dec_b, K, M, step, seed = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        arch = ArchSpec(H, enc_b, dec_b, kernel, K, M)
    except ConfigurationError as exc:
        raise CorruptionError(f"{path}: inconsistent header: {exc}") from None
    n_conv = arch.n_encoder_convs + arch.n_decoder_convs
    per_conv = arch.conv_spec.n_params
    n_floats = n_conv * per_conv * 3 + M * (2 * K * H + K)
    if len(raw) != _CKPT_HEADER.size + 4 * n_floats:
        raise CorruptionError(
            f"{path}: payload is {len(raw) - _CKPT_HEADER.size} bytes, header implies {4 * n_floats}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_CKPT_HEADER.size).astype(np.float32)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = flat[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    w_shape, b_shape = (H, H, kernel), (H,)
    layers = [ConvLayerParams(take(w_shape), take(b_shape)) for _ in range(n_conv)]
    books = []
    for _ in range(M):
        e, c, s = take((K, H)), take((K,)), take((K, H))
        books.append(Codebook(e, c, s))
    shapes = [s for _ in range(n_conv) for s in (w_shape, b_shape)]
    m1 = [take(s) for s in shapes]
    m2 = [take(s) for s in shapes]
    if not np.all(np.isfinite(flat)):
        raise CorruptionError(f"{path}: non-finite values in payload")
    codec = CodecParameters(arch, layers[: arch.n_encoder_convs], layers[arch.n_encoder_convs:])
    adam = [AdamState(a, b, step) for a, b in zip(m1, m2)]
    return TrainerState(codec, RvqStack(books), adam, step, seed)


def kmeans_state(centers: np.ndarray, counts: np.ndarray, iterations: int, seed: int) -> TrainerState:
    """Wrap k-means centers in a zero-conv trainer state for checkpointing."""
    centers = np.asarray(centers, dtype=np.float32)
    K, H = centers.shape
    arch = ArchSpec(H, 0, 0, 3, K, 1)
    cb = Codebook.from_entries(centers, counts=np.asarray(counts, dtype=np.float32))
    return TrainerState(CodecParameters(arch, [], []), RvqStack([cb]), [], iterations, seed)


def tokenize_sequence(state: TrainerState, frames: np.ndarray) -> TokenSequence:
    """Encoder plus quantizer on a whole utterance; the decoder is not run."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.shape[-1] != state.codec.arch.dim:
        raise DataError(
            f"feature dimension {frames.shape[-1]} does not match checkpoint dimension {state.codec.arch.dim}"
        )
    z = encode(state.codec, frames)
    return TokenSequence(rvq_forward(state.quantizer, z).indices)


def tokenize(checkpoint, features, out, state: TrainerState | None = None) -> Path:
    state = state or load_checkpoint(checkpoint)
    seq = read_feature_file(features)
    tokens = tokenize_sequence(state, seq.frames)
    write_token_file(out, tokens, state.quantizer.size)
    return Path(out)


def token_path_for(features, out_dir) -> Path:
    return Path(out_dir) / (Path(features).stem + TOKEN_SUFFIX)
