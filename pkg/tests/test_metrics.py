import csv
import io

import numpy as np
import pytest

from helpers import metric_instance_agrees, random_metric_instance
from tractoformer.errors import InvalidArgument
from tractoformer.grid import Grid
from tractoformer.metrics import (
    ScoreReport,
    classify_connections,
    coverage_scores,
    score_tractogram,
    voxelize,
)
from tractoformer.phantom import BundleSpec, PhantomConfig, make_phantom
from tractoformer.streamlines import Streamline, Tractogram


def _masks(shape, rec_idx, gt_idx):
    rec = np.zeros(shape, bool)
    gt = np.zeros(shape, bool)
    rec.flat[list(rec_idx)] = True
    gt.flat[list(gt_idx)] = True
    return rec, gt


# -- coverage -------------------------------------------------------------------------


def test_identical_masks():
    rec, gt = _masks((4, 4, 4), range(10), range(10))
    assert coverage_scores(rec, gt) == (100.0, 100.0, 0.0)


def test_disjoint_masks():
    rec, gt = _masks((4, 4, 4), range(10), range(10, 20))
    assert coverage_scores(rec, gt) == (0.0, 0.0, 100.0)


def test_half_overlap():
    rec, gt = _masks((4, 4, 4), range(5, 15), range(10))
    assert coverage_scores(rec, gt) == pytest.approx((50.0, 50.0, 50.0))


def test_overreach_can_exceed_100():
    rec, gt = _masks((4, 4, 4), range(30), range(10))
    assert coverage_scores(rec, gt)[2] == pytest.approx(200.0)


def test_empty_ground_truth_rejected():
    with pytest.raises(InvalidArgument):
        coverage_scores(np.ones((2, 2, 2), bool), np.zeros((2, 2, 2), bool))


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        coverage_scores(np.ones((2, 2, 2), bool), np.ones((2, 2, 3), bool))


# -- voxelisation ---------------------------------------------------------------------


def test_fine_sampling_catches_corner_clips():
    grid = Grid.regular((4, 4, 4), (1.0, 1.0, 1.0))
    s = Streamline(np.array([[0.0, 0.0, 0.0], [1.4, 0.0, 0.0]]), 0)
    mask = voxelize([s], grid)
    assert mask[0, 0, 0] and mask[1, 0, 0] and mask.sum() == 2


def test_points_outside_are_ignored():
    grid = Grid.regular((3, 3, 3), (1.0, 1.0, 1.0))
    s = Streamline(np.array([[-5.0, 1.0, 1.0], [5.0, 1.0, 1.0]]), 0)
    mask = voxelize([s], grid)
    assert mask.sum() == 3 and mask[:, 1, 1].all()


@pytest.mark.parametrize("seed", range(40))
def test_metrics_match_brute_force(seed):
    assert metric_instance_agrees(random_metric_instance(np.random.default_rng(seed)))


# -- connections ------------------------------------------------------------------------


def _roi_grid():
    grid = Grid.regular((10, 10, 3), (1.0, 1.0, 1.0))
    masks = []
    for x, y in [(0, 0), (9, 0), (0, 9), (9, 9)]:
        m = np.zeros(grid.dims, bool)
        m[x, y, 1] = True
        masks.append(m)
    rois = {0: (masks[0], masks[1]), 1: (masks[2], masks[3])}
    return grid, rois


def _line(a, b):
    return Streamline(np.array([[*a, 1.0], [*b, 1.0]], float), 0)


def test_three_streamline_example():
    grid, rois = _roi_grid()
    tg = [_line((0, 0), (9, 0)), _line((9, 9), (0, 9)), _line((0, 0), (0, 9))]
    conn = classify_connections(tg, rois, grid)
    assert conn.vc == pytest.approx(66.6667, abs=1e-3)
    assert conn.ic == pytest.approx(33.3333, abs=1e-3)
    assert conn.nc == 0.0
    assert (conn.vb, conn.ib) == (2, 1)
    assert conn.assignment == [0, 1, None]


def test_one_bundle_valid_one_invalid():
    grid, rois = _roi_grid()
    tg = [_line((0, 0), (9, 0)), _line((0, 0), (9, 9)), _line((5, 5), (9, 0))]
    conn = classify_connections(tg, rois, grid)
    assert [round(x, 1) for x in (conn.vc, conn.ic, conn.nc)] == [33.3, 33.3, 33.3]
    assert (conn.vb, conn.ib) == (1, 1)


def test_same_roi_at_both_ends_is_no_connection():
    grid, rois = _roi_grid()
    conn = classify_connections([Streamline(np.array([[0.0, 0, 1], [0.2, 0.3, 1]]), 0)], rois, grid)
    assert conn.kinds == ["nc"]


def test_endpoint_outside_grid_is_no_connection():
    grid, rois = _roi_grid()
    conn = classify_connections([_line((0, 0), (20, 0))], rois, grid)
    assert conn.kinds == ["nc"]


def test_empty_tractogram():
    grid, rois = _roi_grid()
    conn = classify_connections([], rois, grid)
    assert (conn.vc, conn.ic, conn.nc, conn.vb, conn.ib) == (0.0, 0.0, 100.0, 0, 0)


def test_no_rois_rejected():
    grid, _ = _roi_grid()
    with pytest.raises(InvalidArgument):
        classify_connections([], {}, grid)


# -- full scoring -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def phantom():
    bundles = [
        BundleSpec("x", "straight", 0, 2.0, 20, start=(4, 16, 16), end=(28, 16, 16)),
        BundleSpec("y", "straight", 1, 2.0, 20, start=(16, 4, 16), end=(16, 28, 16)),
    ]
    return make_phantom(PhantomConfig(dims=(16, 16, 16), voxel_size=(2.0, 2.0, 2.0), bundles=bundles))


def test_ground_truth_scores_itself_perfectly(phantom):
    r = score_tractogram(phantom.gt, phantom.gt, phantom.rois, phantom.grid, {0: "x", 1: "y"})
    assert r.dice == pytest.approx(100.0) and r.raw_dice == pytest.approx(100.0)
    assert (r.vc, r.ic, r.nc, r.vb, r.ib) == (100.0, 0.0, 0.0, 2, 0)
    assert [b.name for b in r.bundles] == ["x", "y"]
    assert all(b.dice == pytest.approx(100.0) for b in r.bundles)


def test_headline_coverage_counts_only_valid_streamlines(phantom):
    stray = Streamline(np.array([[2.0, 2.0, 2.0], [2.0, 28.0, 28.0]]), 0)
    rec = Tractogram(list(phantom.gt) + [stray])
    r = score_tractogram(rec, phantom.gt, phantom.rois, phantom.grid)
    assert r.dice == pytest.approx(100.0)
    assert r.raw_dice < 100.0 and r.raw_overreach > 0.0
    assert r.nc == pytest.approx(100.0 / len(rec))


def test_empty_reconstruction(phantom):
    r = score_tractogram(Tractogram([]), phantom.gt, phantom.rois, phantom.grid)
    assert (r.dice, r.overlap, r.vc, r.nc, r.n_streamlines) == (0.0, 0.0, 0.0, 100.0, 0)


def test_csv_and_table(phantom):
    r = score_tractogram(phantom.gt, phantom.gt, phantom.rois, phantom.grid, {0: "x", 1: "y"})
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert tuple(rows[0]) == ScoreReport.COLUMNS
    assert [row[0] for row in rows[1:]] == ["all", "x", "y"]
    assert all(len(row) == len(ScoreReport.COLUMNS) for row in rows)
    assert float(rows[1][1]) == pytest.approx(100.0)
    table = r.to_table().splitlines()
    assert len(table) == 4 and "dice" in table[0]
