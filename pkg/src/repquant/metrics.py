"""Token quality: n-gram phone-normalized mutual information, codebook use, distortion."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codec import decode, encode, reconstruction_loss
from .errors import ContractError, DataError, UndefinedMetricError
from .featureio import FrameLabels, load_corpus
from .quantizer import TokenSequence, rvq_forward
from .trainer import TrainerState, load_checkpoint


@dataclass
class NgramJointCounts:
    n: int
    counts: Counter = field(default_factory=Counter)  # (phone n-gram, token n-gram) -> count
    total: int = 0

    def merge(self, other: "NgramJointCounts") -> "NgramJointCounts":
        if other.n != self.n:
            raise ContractError(f"cannot merge {other.n}-gram counts into {self.n}-gram counts")
        merged = Counter(self.counts)
        merged.update(other.counts)
        return NgramJointCounts(self.n, merged, self.total + other.total)


@dataclass
class PnmiReport:
    # None marks an order that is unavailable (longer than the shortest utterance)
    per_n: dict[int, float | None]
    mutual_information: dict[int, float | None]
    phoneme_entropy: dict[int, float | None]


def _layer0(tokens) -> np.ndarray:
    if isinstance(tokens, TokenSequence):
        return tokens.tokens[0]
    arr = np.asarray(tokens)
    return arr[0] if arr.ndim == 2 else arr


def _labels(labels) -> np.ndarray:
    return labels.labels if isinstance(labels, FrameLabels) else np.asarray(labels)


def _is_single(x) -> bool:
    if isinstance(x, (TokenSequence, np.ndarray)):
        return True
    return len(x) > 0 and np.isscalar(x[0])


def _windows(seq: np.ndarray, n: int) -> np.ndarray:
    return sliding_window_view(np.asarray(seq, dtype=np.int64), n)


def _count_one(tok: np.ndarray, lab: np.ndarray, n: int) -> NgramJointCounts:
    out = NgramJointCounts(n)
    if tok.shape[0] < n:
        return out
    rows = np.concatenate([_windows(lab, n), _windows(tok, n)], axis=1)
    uniq, cnt = np.unique(rows, axis=0, return_counts=True)
    for row, c in zip(uniq.tolist(), cnt.tolist()):
        out.counts[(tuple(row[:n]), tuple(row[n:]))] = c
    out.total = int(cnt.sum())
    return out


def ngram_joint_counts(tokens, phonemes, n: int, utterance_ids=None) -> NgramJointCounts:
    """Joint counts of aligned phone and token n-grams.

    ``tokens`` and ``phonemes`` are either one utterance each or equal-length
    lists of utterances. Windows slide one frame at a time and never cross an
    utterance boundary; counts are pooled over the corpus. Only the first token
    layer is used.
    """
    if n < 1:
        raise ContractError(f"n must be positive, got {n}")
    if _is_single(tokens):
        tokens, phonemes = [tokens], [phonemes]
    if len(tokens) != len(phonemes):
        raise DataError(f"{len(tokens)} token streams but {len(phonemes)} label streams")
    ids = list(utterance_ids) if utterance_ids is not None else [f"#{i}" for i in range(len(tokens))]
    acc = NgramJointCounts(n)
    longest = 0
    for uid, t, p in zip(ids, tokens, phonemes):
        tok, lab = _layer0(t), _labels(p)
        if tok.shape[0] != lab.shape[0]:
            raise DataError(f"utterance {uid}: {tok.shape[0]} tokens but {lab.shape[0]} labels")
        longest = max(longest, tok.shape[0])
        part = _count_one(tok, lab, n)
        acc.counts.update(part.counts)
        acc.total += part.total
    if acc.total == 0:
        raise ContractError(f"n = {n} exceeds every utterance length (longest is {longest})")
    return acc


def _entropy(counts, total: int) -> float:
    return -math.fsum(c / total * math.log(c / total) for c in counts if c)


def mutual_information(counts: NgramJointCounts) -> tuple[float, float]:
    """Plug-in ``(I(S;Z), H(S))`` in nats."""
    if counts.total <= 0:
        raise ContractError("empty count table")
    total = counts.total
    ps: Counter = Counter()
    pz: Counter = Counter()
    for (s, z), c in counts.counts.items():
        ps[s] += c
        pz[z] += c
    mi = math.fsum(
        c / total * math.log(c * total / (ps[s] * pz[z])) for (s, z), c in counts.counts.items() if c
    )
    return mi, _entropy(ps.values(), total)


def pnmi_n(counts: NgramJointCounts) -> float:
    mi, h = mutual_information(counts)
    if h == 0.0:
        raise UndefinedMetricError(f"phone {counts.n}-gram entropy is zero; the normalized score is undefined")
    return mi / h


def pnmi_report(tokens, phonemes, max_n: int, utterance_ids=None) -> PnmiReport:
    """Scores for every order up to ``max_n``.

    Orders longer than the shortest utterance are reported as unavailable.
    """
    if max_n < 1:
        raise ContractError(f"max_n must be positive, got {max_n}")
    if not len(tokens):
        raise DataError("no utterances to score")
    shortest = min(_labels(p).shape[0] for p in phonemes)
    per, mis, hs = {}, {}, {}
    for n in range(1, max_n + 1):
        if n > shortest:
            per[n] = mis[n] = hs[n] = None
            continue
        c = ngram_joint_counts(tokens, phonemes, n, utterance_ids)
        mis[n], hs[n] = mutual_information(c)
        per[n] = pnmi_n(c)
    return PnmiReport(per, mis, hs)


def format_metric_lines(name: str, values: dict[int, float | None]) -> list[str]:
    return [f"{name}\t{n}\t{'unavailable' if v is None else repr(float(v))}" for n, v in sorted(values.items())]


def utilization_from_counts(counts, k: int | None = None, threshold: float = 0.0) -> tuple[float, float]:
    """``(fraction used, perplexity)`` from per-code weights.

    A code counts as used when its weight exceeds ``threshold``. Perplexity is
    the exponential of the entropy of the normalized weights.
    """
    w = np.asarray(counts, dtype=np.float64)
    k = w.shape[0] if k is None else k
    if k < 1:
        raise ContractError("codebook size must be at least 1")
    total = w.sum()
    if total <= 0:
        raise DataError("no code usage to summarize")
    p = w[w > 0] / total
    frac = float(np.count_nonzero(w > threshold)) / k
    return frac, float(np.exp(-np.sum(p * np.log(p))))


def codebook_utilization(tokens, k: int) -> tuple[float, float]:
    """Fraction of the ``k`` codes that occur, and the perplexity of their use."""
    if isinstance(tokens, TokenSequence):
        flat = tokens.tokens[0]
    elif isinstance(tokens, np.ndarray):
        flat = tokens.ravel()
    else:
        parts = [_layer0(t).ravel() for t in tokens]
        flat = np.concatenate(parts) if parts else np.empty(0, np.int64)
    if flat.size == 0:
        raise DataError("empty token stream")
    if flat.min() < 0 or flat.max() >= k:
        raise DataError(f"token out of range for codebook size {k}")
    return utilization_from_counts(np.bincount(flat.astype(np.int64), minlength=k), k)


@dataclass
class DistortionReport:
    l_r: float
    l_q: float
    frames: int


def distortion_report(checkpoint, manifest) -> DistortionReport:
    """Frame-weighted corpus means of reconstruction and quantization loss.

    Each utterance is run whole, as at tokenization time.
    """
    state = checkpoint if isinstance(checkpoint, TrainerState) else load_checkpoint(checkpoint)
    seqs = manifest if isinstance(manifest, list) else load_corpus(Path(manifest))
    dim = state.codec.arch.dim
    sum_r = sum_q = 0.0
    frames = 0
    for seq in seqs:
        if seq.dim != dim:
            raise DataError(f"{seq.utterance_id}: feature dimension {seq.dim} != checkpoint dimension {dim}")
        X = seq.frames.astype(np.float32)
        rvq = rvq_forward(state.quantizer, encode(state.codec, X))
        X_hat = decode(state.codec, rvq.quantized_sum)
        T = X.shape[0]
        sum_r += reconstruction_loss(X, X_hat) * T
        sum_q += rvq.loss * T
        frames += T
    if frames == 0:
        raise DataError("corpus has no frames")
    return DistortionReport(sum_r / frames, sum_q / frames, frames)
