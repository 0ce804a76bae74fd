"""Shared experiment helpers for the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from oracles import central_difference, rel_error
from tractoformer.model import ModelConfig, backward, forward, init_params
from tractoformer.train import weighted_loss

TINY = dict(n_layers=2, d_model=8, n_heads=2, block_size=5, in_channels=2)


def tiny_problem(variant: str, seed: int = 0, T: int = 5, batch: int = 3):
    """Double-precision tiny model, random patches, targets, mask, labels and weights."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant=variant, **TINY)
    params = init_params(cfg, seed, dtype=np.float64)
    # larger weights than the training init so every path carries signal
    for name, t in params.tensors.items():
        t += rng.normal(0.0, 0.3, t.shape)
    feats = rng.normal(size=(batch, T, 3, 3, 3, cfg.in_channels))
    targets = rng.normal(size=(batch, T, 3))
    mask = np.ones((batch, T), dtype=bool)
    mask[1, 3:] = False
    mask[2, 1:] = False
    labels = np.array([0, 1, 1])
    weights = np.array([0.3, 0.7])
    return params, feats, targets, mask, labels, weights


def gradient_errors(variant: str, seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Relative error of every parameter gradient of the weighted loss against central differences."""
    params, feats, targets, mask, labels, weights = tiny_problem(variant, seed)

    def loss():
        return weighted_loss(forward(params, feats).predictions, targets, mask, labels, weights)[0]

    trace = forward(params, feats)
    _, dpred = weighted_loss(trace.predictions, targets, mask, labels, weights)
    grads = backward(trace, dpred, params)
    errors = {}
    for name, tensor in params.tensors.items():
        fd = central_difference(loss, tensor, eps)
        errors[name] = rel_error(grads[name], fd)
    return errors


def random_metric_instance(rng: np.random.Generator):
    """Small random grid, ground truth, reconstruction and ROI pairs for metric cross-checks."""
    from tractoformer.grid import Grid
    from tractoformer.streamlines import Streamline

    dims = tuple(int(d) for d in rng.integers(2, 7, size=3))
    vs = tuple(float(v) for v in rng.choice([0.5, 1.0, 2.0], size=3))
    grid = Grid.regular(dims, vs)
    hi = np.array(dims) * np.array(vs)

    def lines(n):
        out = []
        for _ in range(n):
            k = int(rng.integers(2, 6))
            # a little outside the grid too, so out-of-grid handling is exercised
            out.append(rng.uniform(-0.8, 1.1, size=(k, 3)) * hi)
        return out

    gt = lines(int(rng.integers(1, 6)))
    rec = lines(int(rng.integers(0, 21)))
    n_bundles = int(rng.integers(1, 4))
    roi_sets = []
    for _ in range(2 * n_bundles):
        m = rng.random(dims) < 0.25
        roi_sets.append(m)
    rois = {b: (roi_sets[2 * b], roi_sets[2 * b + 1]) for b in range(n_bundles)}
    return dict(
        grid=grid,
        dims=dims,
        voxel_size=vs,
        gt=[Streamline(v, 0) for v in gt],
        rec=[Streamline(v, 0) for v in rec],
        rois=rois,
        roi_voxel_sets=[set(map(tuple, np.argwhere(m).tolist())) for m in roi_sets],
    )


def metric_instance_agrees(inst, step: float = 0.5, tol: float = 1e-9) -> bool:
    """Whether the library's voxelisation, coverage and connection classes match the brute-force oracles."""
    from oracles import brute_classify, brute_coverage, brute_voxel_set
    from tractoformer.metrics import classify_connections, coverage_scores, voxelize

    grid, dims, vs = inst["grid"], inst["dims"], inst["voxel_size"]
    rec_v = [s.vertices for s in inst["rec"]]
    gt_v = [s.vertices for s in inst["gt"]]
    rec_mask = voxelize(inst["rec"], grid, step)
    gt_mask = voxelize(inst["gt"], grid, step)
    rec_set = brute_voxel_set(rec_v, dims, vs, step)
    gt_set = brute_voxel_set(gt_v, dims, vs, step)
    if set(map(tuple, np.argwhere(rec_mask).tolist())) != rec_set:
        return False
    if set(map(tuple, np.argwhere(gt_mask).tolist())) != gt_set:
        return False
    if gt_set:
        got = coverage_scores(rec_mask, gt_mask)
        want = brute_coverage(rec_set, gt_set)
        if not np.allclose(got, want, rtol=0, atol=tol):
            return False
    conn = classify_connections(inst["rec"], inst["rois"], grid)
    kinds, vb, ib = brute_classify(rec_v, inst["roi_voxel_sets"], dims, vs)
    return conn.kinds == kinds and conn.vb == vb and conn.ib == ib
