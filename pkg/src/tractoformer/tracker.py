"""Seeding and iterative streamline propagation.

All seeds advance together in one batch. Each step asks a direction field for
a raw direction at every live streamline, then::

    |y| < stop_norm_tau          -> stop (low_norm)
    y <- y / |y|, flipped if it points against the previous step
    p <- p + step_size * y
    p outside grid/neighbourhood -> stop (out_of_bounds), p dropped
    p outside mask               -> stop (left_mask), p dropped
    length >= max_length         -> stop (max_length), p kept

With ``bidirectional`` a second pass restarts from the seed, using the
reversed first pass as context, and the result runs end to end through the
seed.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidConfig
from .grid import Grid
from .model import IncrementalDecoder, ModelParams, forward
from .shcore import Volume
from .streamlines import Streamline, Tractogram

log = logging.getLogger(__name__)

STOP_REASONS = ("left_mask", "out_of_bounds", "low_norm", "max_length")


@dataclass
class TrackConfig:
    step_size: float = 1.0
    seeds_per_voxel: int = 5
    min_length: float = 20.0
    max_length: float = 200.0
    stop_norm_tau: float = 0.1
    bidirectional: bool = True
    rng_seed: int = 0
    batch_size: int = 4096

    def __post_init__(self):
        if self.step_size <= 0:
            raise InvalidConfig("step_size must be positive")
        if not 0 <= self.min_length < self.max_length:
            raise InvalidConfig("need 0 <= min_length < max_length")
        if not 0 <= self.stop_norm_tau < 1:
            raise InvalidConfig("stop_norm_tau must lie in [0, 1)")
        if self.seeds_per_voxel < 0:
            raise InvalidConfig("seeds_per_voxel must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")


def generate_seeds(mask: np.ndarray, grid: Grid, seeds_per_voxel: int, rng: np.random.Generator) -> np.ndarray:
    """``seeds_per_voxel`` uniform points inside every set voxel, in world mm."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.dims:
        raise InvalidArgument("mask shape does not match grid")
    vox = np.argwhere(mask)
    if len(vox) == 0:
        raise InvalidArgument("seed mask is empty")
    if seeds_per_voxel == 0:
        return np.zeros((0, 3))
    centers = np.repeat(vox, seeds_per_voxel, axis=0).astype(float)
    # voxel cube is [c - 0.5, c + 0.5); draw from [-0.5, 0.5)
    jitter = rng.random(centers.shape) - 0.5
    return grid.voxel_to_world(centers + jitter)


class ModelField:
    """Direction field backed by a trained network and an SH volume.

    Keeps every row's feature history so the context can slide once it
    exceeds the block size.
    """

    def __init__(self, params: ModelParams, volume: Volume):
        self.params = params
        self.volume = volume
        self.block = params.config.block_size

    def begin(self, n_rows: int) -> None:
        self.decoder = IncrementalDecoder(self.params, n_rows)
        self.history: list[list[np.ndarray]] = [[] for _ in range(n_rows)]

    def advance(self, rows, points, prev_dirs) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        patches, _ = self.volume.neighborhoods(points)
        feats = patches.reshape(len(rows), -1).astype(self.params.dtype)
        for r, f in zip(rows, feats):
            self.history[r].append(f)
        out = np.empty((len(rows), 3), dtype=float)
        full = self.decoder.lengths[rows] >= self.block
        if np.any(~full):
            out[~full] = self.decoder.step(rows[~full], feats[~full])
        if np.any(full):
            windows = np.stack([np.stack(self.history[r][-self.block :]) for r in rows[full]])
            out[full] = forward(self.params, windows).predictions[:, -1]
        return out


class TangentField:
    """Reference field: nearest-voxel ground-truth fibre directions.

    ``directions[v]`` holds up to ``k`` unit vectors per voxel (zeros for
    absent populations). The population most aligned with the previous step
    is followed; at the first step the first population is used.
    """

    def __init__(self, grid: Grid, directions: np.ndarray):
        self.grid = grid
        self.directions = directions  # (nx, ny, nz, k, 3)

    @classmethod
    def from_tractogram(cls, grid: Grid, tractogram: Tractogram, step: float = 0.5) -> "TangentField":
        from .streamlines import densify

        labels = sorted({s.label for s in tractogram}, key=lambda x: -1 if x is None else x)
        li = {lab: i for i, lab in enumerate(labels)}
        acc = np.zeros((grid.n_voxels, len(labels), 3))
        for s in tractogram:
            pts = densify(s.vertices, step)
            if len(pts) < 2:
                continue
            tang = np.gradient(pts, axis=0)
            tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-12)
            idx, inside = grid.voxel_index(pts)
            flat = np.ravel_multi_index(idx[inside].T, grid.dims)
            np.add.at(acc[:, li[s.label]], flat, tang[inside])
        norm = np.linalg.norm(acc, axis=-1, keepdims=True)
        dirs = np.where(norm > 0, acc / np.maximum(norm, 1e-12), 0.0)
        return cls(grid, dirs.reshape(*grid.dims, len(labels), 3))

    def begin(self, n_rows: int) -> None:
        pass

    def advance(self, rows, points, prev_dirs) -> np.ndarray:
        idx, inside = self.grid.voxel_index(points)
        idx = np.clip(idx, 0, np.asarray(self.grid.dims) - 1)
        cand = self.directions[idx[:, 0], idx[:, 1], idx[:, 2]]  # (r, k, 3)
        present = np.linalg.norm(cand, axis=-1) > 0
        score = np.abs(np.einsum("rkd,rd->rk", cand, prev_dirs))
        score = np.where(present, score, -1.0)
        first = np.argmax(present, axis=1)
        has_prev = np.linalg.norm(prev_dirs, axis=1) > 0
        pick = np.where(has_prev, np.argmax(score, axis=1), first)
        out = cand[np.arange(len(pick)), pick]
        out[~inside] = 0.0
        return out


def _in_mask(grid: Grid, mask: np.ndarray, points) -> np.ndarray:
    idx, inside = grid.voxel_index(points)
    ok = inside.copy()
    ok[inside] = mask[tuple(idx[inside].T)]
    return ok


def _run_pass(field, volume: Volume, mask, grid: Grid, contexts: list[np.ndarray], ref_dirs, budget, cfg: TrackConfig):
    """Grow every context until it stops; returns (vertex lists, reasons, first raw dirs)."""
    n = len(contexts)
    field.begin(n)
    paths = [list(c) for c in contexts]
    reasons = [""] * n
    first_dir = np.zeros((n, 3))
    prev = np.array(ref_dirs, dtype=float).reshape(n, 3)
    steps = np.zeros(n, dtype=np.int64)
    max_steps = budget

    # feed all but the last context vertex to warm the field up
    lens = np.array([len(c) for c in contexts])
    for k in range(int(lens.max()) - 1):
        rows = np.nonzero(lens - 1 > k)[0]
        pts = np.array([contexts[r][k] for r in rows])
        field.advance(rows, pts, np.zeros((len(rows), 3)))

    alive = np.nonzero(max_steps > 0)[0]
    for r in np.nonzero(max_steps <= 0)[0]:
        reasons[r] = "max_length"
    fresh = np.ones(n, dtype=bool)
    while alive.size:
        cur = np.array([paths[r][-1] for r in alive])
        raw = np.asarray(field.advance(alive, cur, prev[alive]), dtype=float)
        norm = np.linalg.norm(raw, axis=1)
        low = norm < cfg.stop_norm_tau
        if cfg.stop_norm_tau == 0:
            low = norm == 0
        unit = raw / np.where(norm > 0, norm, 1.0)[:, None]
        rec = fresh[alive]
        first_dir[alive[rec]] = unit[rec]
        fresh[alive] = False
        flip = np.einsum("rd,rd->r", unit, prev[alive]) < 0
        unit[flip] *= -1.0
        nxt = cur + cfg.step_size * unit
        _, ok_nb = volume.neighborhoods(nxt)
        in_mask = _in_mask(grid, mask, nxt)
        keep = []
        for i, r in enumerate(alive):
            if low[i]:
                reasons[r] = "low_norm"
            elif not ok_nb[i]:
                reasons[r] = "out_of_bounds"
            elif not in_mask[i]:
                reasons[r] = "left_mask"
            else:
                paths[r].append(nxt[i])
                prev[r] = unit[i]
                steps[r] += 1
                if steps[r] >= max_steps[r]:
                    reasons[r] = "max_length"
                else:
                    keep.append(r)
        alive = np.array(keep, dtype=np.int64)
    return paths, reasons, first_dir


def _steps_for(length_mm: float, cfg: TrackConfig) -> int:
    return int(np.ceil(length_mm / cfg.step_size - 1e-9))


def propagate_many(field, volume: Volume, mask, seeds, cfg: TrackConfig, grid: Grid | None = None):
    """Propagate from each seed; returns a list of ``(vertices, reason)``."""
    grid = grid or volume.grid
    if isinstance(field, ModelParams):
        field = ModelField(field, volume)
    mask = np.asarray(mask, dtype=bool)
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 3)
    n = len(seeds)
    if n == 0:
        return []
    if not np.all(_in_mask(grid, mask, seeds)):
        raise InvalidArgument("every seed must lie inside the tracking mask")
    total = _steps_for(cfg.max_length, cfg)
    _, seed_ok = volume.neighborhoods(seeds)
    budget = np.where(seed_ok, total, 0)
    paths, reasons, first = _run_pass(
        field, volume, mask, grid, [s[None] for s in seeds], np.zeros((n, 3)), budget, cfg
    )
    for i in np.nonzero(~seed_ok)[0]:
        reasons[i] = "out_of_bounds"
    if not cfg.bidirectional:
        return [(np.array(p), why) for p, why in zip(paths, reasons)]

    todo = [i for i in range(n) if seed_ok[i] and reasons[i] != "max_length"]
    out = [(np.array(p), why) for p, why in zip(paths, reasons)]
    if not todo:
        return out
    contexts = [np.array(paths[i][::-1]) for i in todo]
    ref = np.zeros((len(todo), 3))
    for j, i in enumerate(todo):
        c = contexts[j]
        ref[j] = c[-1] - c[-2] if len(c) > 1 else -first[i]
        nrm = np.linalg.norm(ref[j])
        ref[j] = ref[j] / nrm if nrm > 0 else 0.0
    budget = np.array([total - (len(paths[i]) - 1) for i in todo])
    paths2, reasons2, _ = _run_pass(field, volume, mask, grid, list(contexts), ref, budget, cfg)
    for j, i in enumerate(todo):
        out[i] = (np.array(paths2[j]), reasons2[j])
    return out


def propagate(field, volume: Volume, seed, mask, cfg: TrackConfig, grid: Grid | None = None):
    """Single-seed propagation: ``(Streamline, stop_reason)``."""
    ((verts, reason),) = propagate_many(field, volume, mask, np.asarray(seed, float)[None], cfg, grid)
    return Streamline(verts), reason


@dataclass
class TrackResult:
    tractogram: Tractogram
    histogram: Counter
    n_seeds: int


def track(field, volume: Volume, mask, cfg: TrackConfig, grid: Grid | None = None, seeds=None) -> TrackResult:
    """Seed the mask, propagate in batches of ``cfg.batch_size`` and filter by length.

    ``field`` is a :class:`ModelField`, a :class:`TangentField` or
    ``ModelParams`` (wrapped in a :class:`ModelField`). Output order follows
    seed order.
    """
    grid = grid or volume.grid
    if isinstance(field, ModelParams):
        field = ModelField(field, volume)  # wrap once, not per batch
    if seeds is None:
        rng = np.random.default_rng(cfg.rng_seed)
        seeds = generate_seeds(mask, grid, cfg.seeds_per_voxel, rng)
    hist: Counter = Counter({r: 0 for r in STOP_REASONS})
    kept = []
    for start in range(0, len(seeds), cfg.batch_size):
        for verts, reason in propagate_many(field, volume, mask, seeds[start : start + cfg.batch_size], cfg, grid):
            hist[reason] += 1
            length = (len(verts) - 1) * cfg.step_size
            if length + 1e-9 >= cfg.min_length and len(verts) >= 2:
                kept.append(Streamline(verts))
        log.info("tracked %d/%d seeds, kept %d", min(start + cfg.batch_size, len(seeds)), len(seeds), len(kept))
    return TrackResult(Tractogram(kept), hist, len(seeds))


def write_histogram(path, hist: Counter) -> None:
    with open(path, "w") as fh:
        for reason in STOP_REASONS:
            fh.write(f"{reason} {hist.get(reason, 0)}\n")
