"""Vector quantization with EMA codebooks, residual VQ and Lloyd's k-means.

VQ and k-means are scored by one functional,

    distortion(Z, E) = 1/N * sum_t 1/H * min_k ||z_t - e_k||^2,

which is the quantization loss of a single VQ layer. Residual VQ sums it over
layers, each layer seeing what the previous layers left behind.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, CorruptionError, FormatError

DEFAULT_GAMMA = 0.99
DEFAULT_EPSILON = 1e-9
DEFAULT_DEAD_THRESHOLD = 0.01
KMEANS_TOL = 1e-7


@dataclass
class Codebook:
    entries: np.ndarray  # (K, H)
    ema_counts: np.ndarray  # (K,)
    ema_sums: np.ndarray  # (K, H)
    gamma: float = DEFAULT_GAMMA
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def from_entries(cls, entries, gamma=DEFAULT_GAMMA, epsilon=DEFAULT_EPSILON, counts=None):
        """Wrap fixed entries; counts default to 1 and sums to ``counts * entries``."""
        entries = np.array(entries, copy=True)
        if entries.ndim != 2:
            raise ContractError(f"codebook entries must be (K, H), got {entries.shape}")
        if counts is None:
            counts = np.ones(entries.shape[0], dtype=entries.dtype)
        counts = np.asarray(counts, dtype=entries.dtype)
        return cls(entries, counts.copy(), entries * counts[:, None], gamma, epsilon)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def copy(self) -> "Codebook":
        return replace(
            self,
            entries=self.entries.copy(),
            ema_counts=self.ema_counts.copy(),
            ema_sums=self.ema_sums.copy(),
        )


@dataclass
class RvqStack:
    layers: list[Codebook]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an RVQ stack needs at least one layer")
        shapes = {cb.entries.shape for cb in self.layers}
        if len(shapes) != 1:
            raise ConfigurationError(f"RVQ layers disagree on (K, H): {sorted(shapes)}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def size(self) -> int:
        return self.layers[0].size

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def copy(self) -> "RvqStack":
        return RvqStack([cb.copy() for cb in self.layers])


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (M, T) integer

    @property
    def layers(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class RvqResult:
    indices: np.ndarray  # (M, N)
    quantized_sum: np.ndarray  # (N, H)
    layer_losses: list[float]
    residuals: list[np.ndarray] = field(repr=False)  # input of each layer, (N, H)

    @property
    def loss(self) -> float:
        return float(sum(self.layer_losses))


def _as_matrix(z, dim: int, what: str = "Z") -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != dim:
        raise ContractError(f"{what} has shape {z.shape}, expected (N, {dim})")
    return z


def nearest(entries: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-entry indices and squared distances, lowest index on ties."""
    z = _as_matrix(z, entries.shape[1])
    e = np.asarray(entries, dtype=z.dtype)
    return kernels.nearest(np.ascontiguousarray(z), np.ascontiguousarray(e))


def distortion(data: np.ndarray, centers: np.ndarray) -> float:
    """Mean dimension-normalized squared distance to the nearest center."""
    _, dist = nearest(centers, data)
    return float(np.sum(dist, dtype=np.float64) / (data.shape[0] * data.shape[1]))


def assign(codebook: Codebook, z) -> int:
    z = np.asarray(z)
    if z.shape != (codebook.dim,):
        raise ContractError(f"vector of shape {z.shape} does not match codebook dim {codebook.dim}")
    idx, _ = nearest(codebook.entries, z[None, :])
    return int(idx[0])


def quantize_vq(codebook: Codebook, Z) -> tuple[np.ndarray, np.ndarray, float]:
    """Returns ``(indices, quantized, l_q)`` for a ``(T, H)`` latent matrix."""
    Z = _as_matrix(Z, codebook.dim)
    idx, dist = nearest(codebook.entries, Z)
    quantized = codebook.entries[idx].astype(Z.dtype, copy=False)
    l_q = float(np.sum(dist, dtype=np.float64) / (Z.shape[0] * Z.shape[1]))
    return idx, quantized, l_q


def rvq_forward(stack: RvqStack, Z) -> RvqResult:
    """Quantize layer by layer on the running residual."""
    Z = _as_matrix(Z, stack.dim)
    residual = Z
    total = np.zeros_like(Z)
    indices, losses, residuals = [], [], []
    for cb in stack.layers:
        residuals.append(residual)
        idx, q, l_q = quantize_vq(cb, residual)
        indices.append(idx)
        losses.append(l_q)
        total = total + q
        residual = residual - q
    return RvqResult(np.stack(indices), total, losses, residuals)


def quantize_rvq(stack: RvqStack, Z) -> tuple[TokenSequence, np.ndarray, float]:
    res = rvq_forward(stack, Z)
    return TokenSequence(res.indices), res.quantized_sum, res.loss


def ema_update(codebook: Codebook, Z, indices) -> Codebook:
    """Decay running counts and sums toward this batch's cluster statistics.

    ``counts <- g*counts + (1-g)*n_k``, ``sums <- g*sums + (1-g)*sum_k`` and
    ``entries = sums / max(counts, eps)``. Returns a new codebook.
    """
    g = codebook.gamma
    if not 0.0 <= g <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {g}")
    Z = _as_matrix(Z, codebook.dim)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (Z.shape[0],):
        raise ContractError(f"{indices.shape[0]} indices for {Z.shape[0]} vectors")
    dt = codebook.entries.dtype.type
    n, s = kernels.cluster_stats(np.ascontiguousarray(Z, dtype=codebook.entries.dtype), indices, codebook.size)
    gd, og = dt(g), dt(1.0 - g)
    counts = gd * codebook.ema_counts + og * n
    sums = gd * codebook.ema_sums + og * s
    entries = sums / np.maximum(counts, dt(codebook.epsilon))[:, None]
    return replace(codebook, entries=entries, ema_counts=counts, ema_sums=sums)


def straight_through(grad_wrt_quantized: np.ndarray) -> np.ndarray:
    """Backward rule of the quantizer: identity onto the latents."""
    return grad_wrt_quantized


def reset_dead_codes(
    codebook: Codebook, batch_latents, rng: np.random.Generator, threshold: float = DEFAULT_DEAD_THRESHOLD
) -> Codebook:
    """Re-seed entries whose EMA count fell below ``threshold``.

    Each dead entry (in index order) takes a uniformly drawn batch vector,
    with count 1 and sum equal to that vector. One ``integers`` call per reset,
    none if nothing is dead.
    """
    if threshold <= 0:
        raise ConfigurationError(f"dead-code threshold must be positive, got {threshold}")
    Z = _as_matrix(batch_latents, codebook.dim)
    if Z.shape[0] == 0:
        raise ConfigurationError("cannot reset dead codes from an empty batch")
    dead = np.flatnonzero(codebook.ema_counts < threshold)
    if dead.size == 0:
        return codebook
    pick = rng.integers(0, Z.shape[0], size=dead.size)
    out = codebook.copy()
    vecs = Z[pick].astype(out.entries.dtype)
    out.entries[dead] = vecs
    out.ema_sums[dead] = vecs
    out.ema_counts[dead] = 1
    return out


def kmeans_plusplus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` distinct rows picked by D^2 sampling.

    Falls back to uniform choice among unpicked rows once every remaining row
    coincides with a picked one.
    """
    n = data.shape[0]
    if n < k:
        raise ConfigurationError(f"cannot pick {k} distinct rows from {n}")
    x = np.asarray(data, dtype=np.float64)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    d2[chosen[0]] = 0.0
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        w = np.where(taken, 0.0, d2)
        total = w.sum()
        if total > 0:
            c = int(np.searchsorted(np.cumsum(w), rng.random() * total, side="right"))
            c = min(c, n - 1)
            # guard against landing on a zero-weight row through rounding
            if w[c] == 0:
                c = int(np.flatnonzero(w > 0)[-1])
        else:
            free = np.flatnonzero(~taken)
            c = int(free[rng.integers(free.size)])
        chosen.append(c)
        taken[c] = True
        d2 = np.minimum(d2, np.sum((x - x[c]) ** 2, axis=1))
    return np.array(chosen, dtype=np.int64)


def init_codebook(
    latents, k: int, rng: np.random.Generator, gamma: float = DEFAULT_GAMMA, dtype=np.float32
) -> Codebook:
    """Codebook whose entries are ``k`` distinct latent frames (k-means++ picks)."""
    latents = np.asarray(latents)
    if latents.shape[0] < k:
        raise ConfigurationError(
            f"first batch has {latents.shape[0]} frames, need at least {k} to seed the codebook"
        )
    idx = kmeans_plusplus(latents, k, rng)
    return Codebook.from_entries(latents[idx].astype(dtype), gamma=gamma)


def kmeans_fit(
    data,
    k: int,
    max_iters: int = 100,
    tol: float = KMEANS_TOL,
    rng: np.random.Generator | None = None,
    history: list | None = None,
) -> tuple[np.ndarray, float]:
    """Lloyd's algorithm from k-means++ seeds.

    Stops when the relative distortion improvement drops below ``tol`` or after
    ``max_iters`` update rounds. Empty clusters move to the point currently
    farthest from its center. If ``history`` is given, the distortion before
    the first update and after every round is appended to it.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"data must be (N, H), got {x.shape}")
    n, h = x.shape
    if k < 1 or n < k:
        raise ConfigurationError(f"k-means needs 1 <= K <= N, got K={k}, N={n}")
    if max_iters < 1:
        raise ConfigurationError(f"max_iters must be positive, got {max_iters}")
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = x[kmeans_plusplus(x, k, rng)].copy()
    idx, dist = kernels.nearest(x, centers)
    cur = float(dist.sum() / (n * h))
    if history is not None:
        history.append(cur)
    for _ in range(max_iters):
        counts, sums = kernels.cluster_stats(x, idx, k)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
        if not live.all():
            d = dist.copy()
            for c in np.flatnonzero(~live):
                far = int(np.argmax(d))
                centers[c] = x[far]
                d[far] = -1.0
        idx, dist = kernels.nearest(x, centers)
        new = float(dist.sum() / (n * h))
        if history is not None:
            history.append(new)
        done = cur - new <= tol * cur
        cur = new
        if done:
            break
    return centers, cur


def kmeans_predict(centers, Z) -> TokenSequence:
    centers = np.asarray(centers)
    idx, _ = nearest(centers, np.asarray(Z, dtype=centers.dtype))
    return TokenSequence(idx[None, :])


# token file: b"RPCT" | u32 version=1 | u32 K | u32 M | u32 T | M*T u32, layer-major
TOKEN_MAGIC = b"RPCT"
TOKEN_VERSION = 1
TOKEN_SUFFIX = ".rpct"
_TOKEN_HEADER = struct.Struct("<4sIIII")


def write_token_file(path, tokens: TokenSequence, k: int) -> None:
    t = np.asarray(tokens.tokens)
    if t.ndim != 2:
        raise ContractError(f"tokens must be (M, T), got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ContractError(f"token index outside [0, {k})")
    with open(path, "wb") as fh:
        fh.write(_TOKEN_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, k, t.shape[0], t.shape[1]))
        fh.write(np.ascontiguousarray(t, dtype="<u4").tobytes())


def read_token_file(path) -> tuple[TokenSequence, int]:
    """Returns ``(tokens, K)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _TOKEN_HEADER.size:
        if raw[:4] != TOKEN_MAGIC[: len(raw)]:
            raise FormatError(f"{path}: not a token file")
        raise CorruptionError(f"{path}: truncated header")
    magic, version, k, m, t = _TOKEN_HEADER.unpack_from(raw)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TOKEN_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) != _TOKEN_HEADER.size + 4 * m * t:
        raise CorruptionError(f"{path}: payload length does not match M={m}, T={t}")
    arr = np.frombuffer(raw, dtype="<u4", offset=_TOKEN_HEADER.size).reshape(m, t).astype(np.int64)
    if arr.size and arr.max() >= k:
        raise CorruptionError(f"{path}: token index {int(arr.max())} >= K={k}")
    return TokenSequence(arr), k
