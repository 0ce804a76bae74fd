"""Streamlines, fixed-step resampling, training sequences and the TRX1 format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binary import Reader
from .errors import FormatError, InvalidArgument, OutOfBounds
from .shcore import Volume

UNLABELED = 0xFFFFFFFF
BLOCK_SIZE = 96


@dataclass
class Streamline:
    vertices: np.ndarray
    label: int | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.vertices = v

    def __len__(self):
        return self.vertices.shape[0]

    @property
    def length(self) -> float:
        return polyline_length(self.vertices)

    def reversed(self) -> "Streamline":
        return Streamline(self.vertices[::-1].copy(), self.label)


@dataclass
class Tractogram:
    streamlines: list[Streamline] = field(default_factory=list)

    def __len__(self):
        return len(self.streamlines)

    def __iter__(self):
        return iter(self.streamlines)

    def __getitem__(self, i):
        return self.streamlines[i]

    @property
    def labels(self) -> list[int | None]:
        return [s.label for s in self.streamlines]


def polyline_length(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    if v.shape[0] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(v, axis=0), axis=1).sum())


def resample(s: Streamline | np.ndarray, alpha: float) -> Streamline:
    """Walk the polyline emitting vertices exactly ``alpha`` apart (chord length).

    Each new vertex is the first point further along the polyline whose
    Euclidean distance to the previous vertex equals ``alpha``. The leftover
    tail shorter than ``alpha`` is dropped, the first vertex is kept.
    """
    if isinstance(s, Streamline):
        verts, label = s.vertices, s.label
    else:
        verts, label = np.asarray(s, dtype=float).reshape(-1, 3), None
    if alpha <= 0:
        raise InvalidArgument("alpha must be positive")
    if verts.shape[0] < 2:
        raise InvalidArgument("streamline needs at least two vertices")
    if polyline_length(verts) <= 0:
        raise InvalidArgument("zero-length streamline")

    out = [verts[0]]
    cur = verts[0]
    seg, t0 = 0, 0.0
    nseg = verts.shape[0] - 1
    while seg < nseg:
        # The ball around ``cur`` is convex, so the first exit lies on the
        # segment ending at the first vertex at distance >= alpha.
        dist = np.linalg.norm(verts[seg + 1 :] - cur, axis=1)
        far = np.nonzero(dist >= alpha)[0]
        if far.size == 0:
            break
        seg_hit = seg + int(far[0])
        a, b = verts[seg_hit], verts[seg_hit + 1]
        d = b - a
        dd = d @ d
        w = a - cur
        bq = 2.0 * (d @ w)
        cq = w @ w - alpha * alpha
        disc = max(bq * bq - 4.0 * dd * cq, 0.0)
        t = (-bq + np.sqrt(disc)) / (2.0 * dd)  # larger root: leaving the ball
        lo = t0 if seg_hit == seg else 0.0
        t = min(max(t, lo), 1.0)
        p = a + t * d
        # tiny correction so that |p - cur| == alpha up to rounding
        step = p - cur
        p = cur + step * (alpha / np.linalg.norm(step))
        out.append(p)
        cur = p
        seg, t0 = seg_hit, t
    return Streamline(np.array(out), label)


def densify(vertices, step: float) -> np.ndarray:
    """Points every ``step`` mm of arc length plus the final vertex.

    Used for voxel visits; unlike :func:`resample` it follows arc length and
    always includes both endpoints.
    """
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    if v.shape[0] < 2:
        return v.copy()
    seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
    cum = np.r_[0.0, np.cumsum(seg)]
    total = cum[-1]
    if total == 0:
        return v[:1].copy()
    s = np.arange(0.0, total, step)
    s = np.r_[s, total]
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(seg[idx] > 0, (s - cum[idx]) / seg[idx], 0.0)
    return v[idx] + t[:, None] * (v[idx + 1] - v[idx])


@dataclass
class TrainSequence:
    features: np.ndarray  # (T, 3, 3, 3, C)
    targets: np.ndarray  # (T, 3)
    valid_mask: np.ndarray  # (T,)
    bundle_label: int | None

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


def make_train_sequence(s: Streamline, volume: Volume, T: int = BLOCK_SIZE, alpha: float = 1.0) -> TrainSequence:
    """Features at vertices ``1..min(n-1, T)`` and unit steps to their successors.

    Raises :class:`OutOfBounds` if any used vertex has a neighbourhood outside
    the grid; callers skip such streamlines.
    """
    v = s.vertices
    if v.shape[0] < 2:
        raise InvalidArgument("streamline needs at least two vertices")
    n = min(v.shape[0] - 1, T)
    patches, ok = volume.neighborhoods(v[:n])
    if not ok.all():
        raise OutOfBounds(f"vertex {int(np.argmin(ok))} of streamline leaves the grid")
    C = volume.n_channels
    feats = np.zeros((T, 3, 3, 3, C), dtype=np.float32)
    targets = np.zeros((T, 3), dtype=np.float32)
    mask = np.zeros(T, dtype=bool)
    feats[:n] = patches
    targets[:n] = (v[1 : n + 1] - v[:n]) / alpha
    mask[:n] = True
    return TrainSequence(feats, targets, mask, s.label)


@dataclass
class SequenceBatch:
    """Stacked sequences: features flattened to ``(N, T, 27*C)``."""

    features: np.ndarray
    targets: np.ndarray
    valid_mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.features.shape[0]


def stack_sequences(seqs: list[TrainSequence]) -> SequenceBatch:
    if not seqs:
        raise InvalidArgument("no sequences to stack")
    feats = np.stack([q.features.reshape(q.features.shape[0], -1) for q in seqs])
    labels = np.array([-1 if q.bundle_label is None else q.bundle_label for q in seqs], dtype=np.int64)
    return SequenceBatch(
        feats,
        np.stack([q.targets for q in seqs]),
        np.stack([q.valid_mask for q in seqs]),
        labels,
    )


def build_dataset(tractogram: Tractogram, volume: Volume, T: int = BLOCK_SIZE, alpha: float = 1.0) -> SequenceBatch:
    """Resample every streamline and stack its training sequence; skips out-of-grid ones."""
    seqs = []
    for s in tractogram:
        if len(s) < 2:
            continue
        r = resample(s, alpha)
        if len(r) < 2:
            continue
        try:
            seqs.append(make_train_sequence(r, volume, T, alpha))
        except OutOfBounds:
            continue
    return stack_sequences(seqs)


TRX_MAGIC = b"TRX1"
TRX_VERSION = 1


def write_tracts(path, tractogram: Tractogram) -> None:
    parts = [TRX_MAGIC, struct.pack("<IQ", TRX_VERSION, len(tractogram))]
    for s in tractogram:
        label = UNLABELED if s.label is None else int(s.label)
        parts.append(struct.pack("<II", label, len(s)))
        parts.append(np.asarray(s.vertices, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tracts(path) -> Tractogram:
    r = Reader(Path(path).read_bytes())
    r.magic(TRX_MAGIC)
    version = r.u32("version")
    if version != TRX_VERSION:
        raise FormatError(f"unsupported TRX version {version}", 4)
    count = r.u64("streamline count")
    out = []
    for i in range(count):
        label = r.u32(f"label of streamline {i}")
        n = r.u32(f"vertex count of streamline {i}")
        start = r.pos
        if start + 12 * n > len(r.buf):
            raise FormatError(f"streamline {i} declares {n} vertices but the file is too short", start)
        verts = r.f32_array(3 * n, f"vertices of streamline {i}").reshape(n, 3).astype(float)
        out.append(Streamline(verts, None if label == UNLABELED else label))
    r.expect_end()
    return Tractogram(out)
