"""Synthetic clustered corpora with known frame labels, for tests and demos."""
from __future__ import annotations

import numpy as np

from .featureio import RepresentationSequence


def cluster_centers(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` standard-normal centers in ``dim`` dimensions."""
    return rng.standard_normal((k, dim))


def cluster_corpus(
    centers: np.ndarray,
    n_segments: int,
    segment_len: int,
    sigma: float,
    rng: np.random.Generator,
    mean_run: float | None = None,
) -> tuple[list[RepresentationSequence], list[np.ndarray]]:
    """Sequences whose frames are ``center[label] + N(0, sigma^2 I)``.

    By default each segment is drawn from a single center. With ``mean_run``
    set, labels instead come in runs of geometric length with that mean
    (``mean_run=1`` gives i.i.d. labels). Returns float32 sequences and their
    per-frame labels.
    """
    k, dim = centers.shape
    seqs, labels = [], []
    p = None if mean_run is None else 1.0 / mean_run
    for i in range(n_segments):
        lab = np.empty(segment_len, dtype=np.int64)
        if p is None:
            lab[:] = rng.integers(k)
        t = 0 if p is not None else segment_len
        while t < segment_len:
            run = int(rng.geometric(p))
            lab[t:t + run] = rng.integers(k)
            t += run
        frames = centers[lab] + sigma * rng.standard_normal((segment_len, dim))
        seqs.append(RepresentationSequence(frames.astype(np.float32), f"syn{i:05d}"))
        labels.append(lab)
    return seqs, labels
