"""Feature/label/manifest files, fixed-length segmentation and batching.

Feature file layout (little-endian)::

    b"RPCF" | u32 version=1 | u32 H | u32 T | T*H float32, frame-major

Label file: UTF-8 text, one utterance per line, ``<utt_id> <int> <int> ...``.

Manifest: one feature path per line, optionally followed by a TAB and a label
file path. Relative paths resolve against the manifest's directory. Blank lines
and lines starting with ``#`` are skipped.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptionError, DataError, FormatError

FEATURE_MAGIC = b"RPCF"
FEATURE_VERSION = 1
FEATURE_SUFFIX = ".rpcf"
_HEADER = struct.Struct("<4sIII")

SEGMENT_LEN = 96
BATCH_SIZE = 32


@dataclass
class RepresentationSequence:
    frames: np.ndarray  # (T, H) float32
    utterance_id: str = ""

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class FrameLabels:
    labels: np.ndarray  # (T,) int64
    alphabet_size: int

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Segment:
    source_id: str
    start_frame: int
    frames: np.ndarray  # (len, H)


@dataclass
class Batch:
    segments: list[Segment]

    def array(self, dtype=np.float32) -> np.ndarray:
        """Stack into a ``(B, T, H)`` array."""
        return np.stack([s.frames for s in self.segments]).astype(dtype, copy=False)


def _validate_frames(frames: np.ndarray, where: str) -> None:
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise DataError(f"{where}: expected a non-empty (T, H) matrix, got shape {frames.shape}")
    bad = ~np.isfinite(frames).all(axis=1)
    if bad.any():
        raise DataError(f"{where}: non-finite value in frame {int(np.argmax(bad))}")


def write_feature_file(path, seq: RepresentationSequence) -> None:
    frames = np.asarray(seq.frames)
    _validate_frames(frames, str(path))
    T, H = frames.shape
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, H, T))
        fh.write(payload)


def read_feature_file(path) -> RepresentationSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != FEATURE_MAGIC[: len(raw)]:
            raise FormatError(f"{path}: not a feature file")
        raise CorruptionError(f"{path}: truncated header")
    magic, version, H, T = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    want = _HEADER.size + 4 * H * T
    if len(raw) != want:
        raise CorruptionError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {want - _HEADER.size}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, H).astype(np.float32)
    _validate_frames(frames, str(path))
    return RepresentationSequence(frames, utterance_id=path.stem)


def read_label_table(path, alphabet_size: int | None = None) -> dict[str, FrameLabels]:
    """Parse every line of a label file.

    With ``alphabet_size=None`` the alphabet is inferred as ``max label + 1``
    over the whole file.
    """
    rows: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            utt, vals = parts[0], parts[1:]
            try:
                arr = np.array([int(v) for v in vals], dtype=np.int64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if (arr < 0).any():
                raise DataError(f"{path}:{lineno}: negative label")
            if utt in rows:
                raise DataError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
            rows[utt] = arr
    if alphabet_size is None:
        alphabet_size = 1 + max((int(a.max()) for a in rows.values() if a.size), default=0)
    out = {}
    for utt, arr in rows.items():
        if arr.size and arr.max() >= alphabet_size:
            raise DataError(f"{path}: utterance {utt!r} has label {int(arr.max())} >= alphabet size {alphabet_size}")
        out[utt] = FrameLabels(arr, alphabet_size)
    return out


def read_label_file(path, utterance_id: str, alphabet_size: int | None = None) -> FrameLabels:
    table = read_label_table(path, alphabet_size)
    try:
        return table[utterance_id]
    except KeyError:
        raise DataError(f"{path}: no labels for utterance {utterance_id!r}") from None


def write_label_file(path, table: dict[str, FrameLabels | np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt, labels in table.items():
            arr = labels.labels if isinstance(labels, FrameLabels) else np.asarray(labels)
            fh.write(" ".join([utt, *(str(int(v)) for v in arr)]) + "\n")


@dataclass
class ManifestEntry:
    features: Path
    labels: Path | None = None


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        feat, _, lab = line.rstrip("\n").partition("\t")
        feat_path = Path(feat.strip())
        if not feat_path.is_absolute():
            feat_path = base / feat_path
        lab_path = None
        if lab.strip():
            lab_path = Path(lab.strip())
            if not lab_path.is_absolute():
                lab_path = base / lab_path
        entries.append(ManifestEntry(feat_path, lab_path))
    return entries


def write_manifest(path, entries) -> None:
    lines = []
    for e in entries:
        if isinstance(e, ManifestEntry):
            lines.append(str(e.features) + (f"\t{e.labels}" if e.labels else ""))
        else:
            lines.append(os.fspath(e))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_corpus(manifest) -> list[RepresentationSequence]:
    """Read every feature file of a manifest; all must share one dimension."""
    entries = read_manifest(manifest)
    if not entries:
        raise ConfigurationError(f"{manifest}: manifest lists no feature files")
    seqs = [read_feature_file(e.features) for e in entries]
    dims = {s.dim for s in seqs}
    if len(dims) != 1:
        raise DataError(f"{manifest}: inconsistent feature dimensions {sorted(dims)}")
    return seqs


def segment_sequence(seq: RepresentationSequence, length: int = SEGMENT_LEN) -> list[Segment]:
    """Cut into consecutive non-overlapping windows; a short tail is dropped."""
    if length < 1:
        raise ConfigurationError(f"segment length must be positive, got {length}")
    n = len(seq) // length
    return [
        Segment(seq.utterance_id, i * length, seq.frames[i * length:(i + 1) * length])
        for i in range(n)
    ]


def make_batches(
    segments: list[Segment], batch_size: int, rng: np.random.Generator
) -> list[Batch]:
    """Shuffle with ``rng`` and cut into full batches; the remainder is dropped."""
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be positive, got {batch_size}")
    if len(segments) < batch_size:
        raise ConfigurationError(
            f"need at least {batch_size} segments for one batch, have {len(segments)}"
        )
    order = rng.permutation(len(segments))
    n = len(segments) // batch_size
    return [
        Batch([segments[i] for i in order[b * batch_size:(b + 1) * batch_size]])
        for b in range(n)
    ]
