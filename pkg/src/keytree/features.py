"""Per-frame embedding storage: loading, validation and l2 normalization.

Two on-disk formats are supported:

binary (``.vtrf``)
    ``b"VTRF"``, u32 version (=1), u32 n, u32 d, f64 fps, then ``n*d``
    little-endian f32 components (row-major by frame), then ``n``
    little-endian f64 timestamps. Frame indices are implicitly ``0..n-1``.

lines (``.jsonl``)
    one JSON object per line, ``{"frame": int, "t": float, "v": [float, ...]}``;
    ``t`` is optional and defaults to ``frame / fps``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from keytree.errors import FeatureIOError, FormatError

log = logging.getLogger(__name__)

MAGIC = b"VTRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIId")

# vectors whose norm is this close to 1 are left untouched, which makes normalize idempotent
_UNIT_TOL = 1e-12


@dataclass(frozen=True)
class FrameEmbedding:
    frame_index: int
    timestamp: float
    vector: np.ndarray


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Ordered frame embeddings of one video.

    ``vectors`` is an ``(n, d)`` float64 array; ``frame_indices`` and
    ``timestamps`` are length-``n``. All arrays are read-only.
    """

    video_id: str
    fps: float
    frame_indices: np.ndarray
    timestamps: np.ndarray
    vectors: np.ndarray
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        for name in ("frame_indices", "timestamps", "vectors"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.frame_indices)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def frames(self) -> list[FrameEmbedding]:
        return [
            FrameEmbedding(int(i), float(t), v)
            for i, t, v in zip(self.frame_indices, self.timestamps, self.vectors)
        ]

    def rows_of(self, frame_indices: Iterable[int]) -> np.ndarray:
        """Row positions of the given frame indices."""
        idx = np.asarray(list(frame_indices), dtype=np.int64)
        pos = np.searchsorted(self.frame_indices, idx)
        if np.any(pos >= self.n) or np.any(self.frame_indices[np.minimum(pos, self.n - 1)] != idx):
            raise KeyError(f"unknown frame index in {idx.tolist()}")
        return pos

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.fps == other.fps
            and np.array_equal(self.frame_indices, other.frame_indices)
            and self.timestamps.tobytes() == other.timestamps.tobytes()
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    __hash__ = None


@dataclass
class ValidationReport:
    n_frames: int
    duplicate_groups: list[list[int]]
    zero_vectors: list[int]


def make_feature_set(
    video_id: str,
    vectors,
    fps: float = 1.0,
    frame_indices=None,
    timestamps=None,
) -> FeatureSet:
    """Build a FeatureSet from in-memory arrays, checking every invariant."""
    vecs = np.asarray(vectors, dtype=np.float64)
    if vecs.ndim != 2 or vecs.shape[0] == 0 or vecs.shape[1] == 0:
        raise FormatError(f"expected a non-empty (n, d) array, got shape {vecs.shape}")
    n = vecs.shape[0]
    idx = np.arange(n, dtype=np.int64) if frame_indices is None else np.asarray(frame_indices, dtype=np.int64)
    ts = idx / fps if timestamps is None else np.asarray(timestamps, dtype=np.float64)
    if not (fps > 0 and math.isfinite(fps)):
        raise FormatError(f"fps must be positive, got {fps}")
    _check_records(idx, ts, vecs)
    return FeatureSet(video_id, float(fps), idx, ts.astype(np.float64), vecs)


def _check_records(idx: np.ndarray, ts: np.ndarray, vecs: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(vecs).all(axis=1))
    if bad.size:
        raise FormatError("non-finite vector component", int(bad[0]))
    bad = np.flatnonzero(~np.isfinite(ts) | (ts < 0))
    if bad.size:
        raise FormatError("timestamp must be finite and non-negative", int(bad[0]))
    if idx[0] < 0:
        raise FormatError("negative frame index", 0)
    bad = np.flatnonzero(np.diff(idx) <= 0)
    if bad.size:
        raise FormatError("frame indices must be strictly increasing", int(bad[0]) + 1)
    bad = np.flatnonzero(np.diff(ts) < 0)
    if bad.size:
        raise FormatError("timestamps must be non-decreasing", int(bad[0]) + 1)


def _video_id_from_path(path: Path) -> str:
    name = path.name
    for suffix in (".vtrf", ".jsonl", ".features"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def load_features(path, format: str | None = None, fps: float = 1.0, video_id: str | None = None) -> FeatureSet:
    """Read a feature file. ``format`` is ``"binary"`` or ``"lines"``; sniffed from the magic if omitted.

    ``fps`` only applies to the lines format (the binary header carries its own).
    Files named ``*.vtrf`` are always read as binary.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FeatureIOError(f"cannot read features file {path}: {e.strerror or e}") from e
    if format is None:
        format = "binary" if data[:4] == MAGIC or path.suffix == ".vtrf" else "lines"
    vid = video_id or _video_id_from_path(path)
    if format == "binary":
        return _parse_binary(data, vid)
    if format == "lines":
        return _parse_lines(data, vid, fps)
    raise ValueError(f"unknown feature format {format!r}")


def _parse_binary(data: bytes, video_id: str) -> FeatureSet:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, n, d, fps = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if n == 0:
        raise FormatError("feature file holds no frames")
    if d == 0:
        raise FormatError("dimension must be positive")
    if not (math.isfinite(fps) and fps > 0):
        raise FormatError(f"fps must be positive, got {fps}")
    payload = len(data) - _HEADER.size
    expected = n * d * 4 + n * 8
    if payload != expected:
        # assume the timestamp block is intact and locate the first vector that cannot be complete
        record = max(0, min(n - 1, (payload - n * 8) // (4 * d)))
        if payload > expected:
            raise FormatError(f"{payload - expected} trailing bytes after timestamps", n - 1)
        raise FormatError(f"vector data truncated: expected {n}x{d} components", record)
    vecs = np.frombuffer(data, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    ts = np.frombuffer(data, dtype="<f8", count=n, offset=_HEADER.size + n * d * 4)
    idx = np.arange(n, dtype=np.int64)
    vecs = vecs.astype(np.float64)
    ts = ts.astype(np.float64)
    _check_records(idx, ts, vecs)
    return FeatureSet(video_id, float(fps), idx, ts, vecs)


def _parse_lines(data: bytes, video_id: str, fps: float) -> FeatureSet:
    idx, ts, vecs = [], [], []
    dim = None
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"not a feature file: bad magic and not UTF-8 text ({e.reason} at byte {e.start})") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("feature file holds no frames")
    for rec, line in enumerate(lines):
        try:
            obj = json.loads(line)
            frame = obj["frame"]
            v = obj["v"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"malformed record ({e})", rec) from None
        if not isinstance(frame, int) or isinstance(frame, bool) or not isinstance(v, list):
            raise FormatError("'frame' must be an int and 'v' a list", rec)
        if dim is None:
            dim = len(v)
            if dim == 0:
                raise FormatError("empty vector", rec)
        if len(v) != dim:
            raise FormatError(f"vector has {len(v)} components, expected {dim}", rec)
        try:
            vecs.append([float(x) for x in v])
        except (TypeError, ValueError):
            raise FormatError("vector components must be numbers", rec) from None
        idx.append(frame)
        t = obj.get("t")
        ts.append(frame / fps if t is None else float(t))
    idx_a = np.asarray(idx, dtype=np.int64)
    ts_a = np.asarray(ts, dtype=np.float64)
    vec_a = np.asarray(vecs, dtype=np.float64)
    _check_records(idx_a, ts_a, vec_a)
    return FeatureSet(video_id, float(fps), idx_a, ts_a, vec_a)


def write_features(fs: FeatureSet, path, format: str = "binary") -> None:
    """Inverse of load_features. The binary format stores f32, so vectors are rounded on write."""
    path = Path(path)
    if format == "binary":
        if not np.array_equal(fs.frame_indices, np.arange(fs.n)):
            raise FormatError("binary format requires frame indices 0..n-1")
        buf = _HEADER.pack(MAGIC, VERSION, fs.n, fs.dim, fs.fps)
        buf += fs.vectors.astype("<f4").tobytes()
        buf += fs.timestamps.astype("<f8").tobytes()
        path.write_bytes(buf)
    elif format == "lines":
        with path.open("w", encoding="utf-8") as f:
            for i, t, v in zip(fs.frame_indices, fs.timestamps, fs.vectors):
                f.write(json.dumps({"frame": int(i), "t": float(t), "v": [float(x) for x in v]}) + "\n")
    else:
        raise ValueError(f"unknown feature format {format!r}")


def normalize(fs: FeatureSet) -> FeatureSet:
    """Scale every non-zero vector to unit l2 norm.

    Zero vectors pass through unchanged; each one adds a message to the
    returned set's ``warnings``.
    """
    norms = np.linalg.norm(fs.vectors, axis=1)
    zero = norms == 0
    rescale = ~zero & (np.abs(norms - 1.0) > _UNIT_TOL)
    vecs = fs.vectors.copy()
    vecs[rescale] /= norms[rescale, None]
    warnings = tuple(f"zero vector at frame {int(i)}" for i in fs.frame_indices[zero])
    for w in warnings:
        log.warning("%s: %s", fs.video_id, w)
    return FeatureSet(fs.video_id, fs.fps, fs.frame_indices, fs.timestamps, vecs, warnings)


def validate(fs: FeatureSet) -> ValidationReport:
    """Report exact-duplicate vector groups and zero vectors (by frame index)."""
    groups: dict[bytes, list[int]] = {}
    for i, v in zip(fs.frame_indices, fs.vectors):
        # + 0.0 folds -0.0 into 0.0 so byte keys follow numeric equality
        groups.setdefault((v + 0.0).tobytes(), []).append(int(i))
    dups = sorted(g for g in groups.values() if len(g) > 1)
    zeros = [int(i) for i in fs.frame_indices[~fs.vectors.any(axis=1)]]
    return ValidationReport(fs.n, dups, zeros)
