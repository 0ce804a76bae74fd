"""Tractometer-style scoring against a phantom's ground truth.

Voxel coverage (Dice, overlap, overreach) compares voxelised tractograms;
connection classes come from which endpoint ROIs a streamline joins.
Overreach is normalised by the ground-truth voxel count, so it can exceed 100.

As in Tractometer, the headline coverage scores use only streamlines that
form valid connections (the recognised bundles); the same scores over every
reconstructed streamline are kept as ``raw_*`` fields.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .grid import Grid
from .streamlines import Tractogram, densify

log = logging.getLogger(__name__)

DEFAULT_STEP = 0.5


def voxel_visits(grid: Grid, vertices, step: float = DEFAULT_STEP) -> np.ndarray:
    """Flat indices of in-grid voxels hit by points every ``step`` mm along a polyline."""
    pts = densify(vertices, step)
    idx, inside = grid.voxel_index(pts)
    return np.ravel_multi_index(idx[inside].T, grid.dims)


def voxelize(tractogram: Tractogram | list, grid: Grid, step: float = DEFAULT_STEP) -> np.ndarray:
    """Boolean mask of every voxel visited by any streamline."""
    flat = np.zeros(grid.n_voxels, dtype=bool)
    for s in tractogram:
        verts = getattr(s, "vertices", s)
        flat[voxel_visits(grid, verts, step)] = True
    return flat.reshape(grid.dims)


def coverage_scores(rec: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """``(dice, overlap, overreach)`` in percent."""
    rec = np.asarray(rec, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if rec.shape != gt.shape:
        raise InvalidArgument(f"mask shapes differ: {rec.shape} vs {gt.shape}")
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise InvalidArgument("ground-truth mask is empty")
    n_rec = int(rec.sum())
    inter = int((rec & gt).sum())
    dice = 200.0 * inter / (n_rec + n_gt)
    overlap = 100.0 * inter / n_gt
    overreach = 100.0 * (n_rec - inter) / n_gt
    return dice, overlap, overreach


@dataclass
class Connections:
    vc: float
    ic: float
    nc: float
    vb: int
    ib: int
    assignment: list  # bundle label for valid connections, else None
    kinds: list  # "vc" | "ic" | "nc" per streamline
    invalid_pairs: set = field(default_factory=set)


def classify_connections(tractogram: Tractogram, rois: dict, grid: Grid) -> Connections:
    """Classify each streamline by the endpoint ROIs it joins.

    ``rois`` maps bundle label -> (start mask, end mask). ROI index ``2k`` and
    ``2k + 1`` belong to the k-th bundle in sorted label order. When several
    bundles or pairs match, the smallest index wins.
    """
    if not rois:
        raise InvalidArgument("at least one bundle ROI pair is required")
    labels = sorted(rois)
    stack = np.stack([m for lab in labels for m in rois[lab]]).reshape(len(labels) * 2, -1)
    kinds, assign = [], []
    valid_bundles: set = set()
    invalid_pairs: set = set()
    for s in tractogram:
        v = s.vertices
        idx, inside = grid.voxel_index(np.stack([v[0], v[-1]]))
        if not inside.all():
            kinds.append("nc")
            assign.append(None)
            continue
        flat = np.ravel_multi_index(idx.T, grid.dims)
        r0 = set(np.nonzero(stack[:, flat[0]])[0].tolist())
        r1 = set(np.nonzero(stack[:, flat[1]])[0].tolist())
        hits = [k for k in range(len(labels)) if ({2 * k} <= r0 and {2 * k + 1} <= r1) or ({2 * k + 1} <= r0 and {2 * k} <= r1)]
        if hits:
            if len(hits) > 1:
                log.debug("streamline joins ROI pairs of bundles %s; using the first", hits)
            kinds.append("vc")
            assign.append(labels[hits[0]])
            valid_bundles.add(labels[hits[0]])
            continue
        pairs = sorted({tuple(sorted((a, b))) for a in r0 for b in r1 if a != b})
        if pairs:
            if len(pairs) > 1:
                log.debug("streamline matches several invalid ROI pairs %s; using %s", pairs, pairs[0])
            kinds.append("ic")
            invalid_pairs.add(pairs[0])
        else:
            kinds.append("nc")
        assign.append(None)
    n = len(kinds)
    if n == 0:
        return Connections(0.0, 0.0, 100.0, 0, 0, [], [], set())
    count = {k: kinds.count(k) for k in ("vc", "ic", "nc")}
    return Connections(
        100.0 * count["vc"] / n,
        100.0 * count["ic"] / n,
        100.0 * count["nc"] / n,
        len(valid_bundles),
        len(invalid_pairs),
        assign,
        kinds,
        invalid_pairs,
    )


@dataclass
class BundleScore:
    label: int
    name: str
    dice: float
    overlap: float
    overreach: float
    vc: float
    n_streamlines: int


@dataclass
class ScoreReport:
    dice: float
    overlap: float
    overreach: float
    vc: float
    ic: float
    nc: float
    vb: int
    ib: int
    n_streamlines: int
    bundles: list[BundleScore] = field(default_factory=list)
    raw_dice: float = 0.0
    raw_overlap: float = 0.0
    raw_overreach: float = 0.0

    COLUMNS = (
        "scope", "dice", "overlap", "overreach", "vc", "ic", "nc", "vb", "ib", "n_streamlines",
        "raw_dice", "raw_overlap", "raw_overreach",
    )

    def rows(self) -> list[list[str]]:
        out = [
            [
                "all",
                *(f"{x:.4f}" for x in (self.dice, self.overlap, self.overreach, self.vc, self.ic, self.nc)),
                str(self.vb),
                str(self.ib),
                str(self.n_streamlines),
                *(f"{x:.4f}" for x in (self.raw_dice, self.raw_overlap, self.raw_overreach)),
            ]
        ]
        for b in self.bundles:
            out.append(
                [
                    b.name,
                    *(f"{x:.4f}" for x in (b.dice, b.overlap, b.overreach, b.vc)),
                    "",
                    "",
                    "",
                    "",
                    str(b.n_streamlines),
                    "",
                    "",
                    "",
                ]
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        w.writerows(self.rows())
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [list(self.COLUMNS)] + self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(self.COLUMNS))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def score_tractogram(
    rec: Tractogram,
    gt: Tractogram,
    rois: dict,
    grid: Grid,
    names: dict | None = None,
    step: float = DEFAULT_STEP,
) -> ScoreReport:
    """Whole-tractogram and per-bundle scores of ``rec`` against labelled ``gt``."""
    names = names or {}
    gt_mask = voxelize(gt, grid, step)
    raw = coverage_scores(voxelize(rec, grid, step), gt_mask)
    conn = classify_connections(rec, rois, grid)
    valid = [s for s, a in zip(rec, conn.assignment) if a is not None]
    dice, ol, orr = coverage_scores(voxelize(valid, grid, step), gt_mask)
    per = []
    for lab in sorted(rois):
        members = [s for s, a in zip(rec, conn.assignment) if a == lab]
        gmask = voxelize([s for s in gt if s.label == lab], grid, step)
        if not gmask.any():
            continue
        d, o, r = coverage_scores(voxelize(members, grid, step), gmask)
        vc = 100.0 * len(members) / len(rec) if len(rec) else 0.0
        per.append(BundleScore(lab, names.get(lab, str(lab)), d, o, r, vc, len(members)))
    return ScoreReport(dice, ol, orr, conn.vc, conn.ic, conn.nc, conn.vb, conn.ib, len(rec), per, *raw)
