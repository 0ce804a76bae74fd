import numpy as np
import pytest

from tractoformer.errors import InvalidArgument, InvalidConfig
from tractoformer.grid import Grid
from tractoformer.model import ModelConfig, forward, init_params
from tractoformer.shcore import Volume
from tractoformer.streamlines import Streamline, Tractogram
from tractoformer.tracker import (
    ModelField,
    TangentField,
    TrackConfig,
    generate_seeds,
    propagate,
    propagate_many,
    track,
    write_histogram,
)


class ConstantField:
    """Always points the same way; optionally goes silent after ``stop_at`` calls per row."""

    def __init__(self, direction, stop_at=None):
        self.direction = np.asarray(direction, float)
        self.stop_at = stop_at

    def begin(self, n_rows):
        self.calls = np.zeros(n_rows, dtype=int)

    def advance(self, rows, points, prev_dirs):
        self.calls[rows] += 1
        out = np.tile(self.direction, (len(rows), 1))
        if self.stop_at is not None:
            out[self.calls[rows] >= self.stop_at] = 0.0
        return out


def _slab(nx=41, ny=7, nz=7, c=2):
    grid = Grid.regular((nx + 4, ny, nz), (1.0, 1.0, 1.0), origin=(-2.0, 0.0, 0.0))
    vol = Volume(grid, np.ones((nx + 4, ny, nz, c)))
    mask = np.zeros(grid.dims, bool)
    mask[2 : 2 + nx, 1:-1, 1:-1] = True  # world x in [-0.5, nx - 0.5)
    return grid, vol, mask


ONE_WAY = TrackConfig(bidirectional=False, min_length=0.0)


# -- seeding --------------------------------------------------------------------------


def test_seed_count_and_containment():
    grid = Grid.regular((6, 6, 6), (2.0, 2.0, 2.0))
    mask = np.zeros(grid.dims, bool)
    mask.flat[np.random.default_rng(0).choice(216, 10, replace=False)] = True
    seeds = generate_seeds(mask, grid, 5, np.random.default_rng(1))
    assert seeds.shape == (50, 3)
    idx, inside = grid.voxel_index(seeds)
    assert inside.all() and mask[tuple(idx.T)].all()


def test_seeds_are_deterministic():
    grid = Grid.regular((4, 4, 4), (1.0, 1.0, 1.0))
    mask = np.ones(grid.dims, bool)
    a = generate_seeds(mask, grid, 3, np.random.default_rng(7))
    b = generate_seeds(mask, grid, 3, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_empty_mask_rejected():
    grid = Grid.regular((4, 4, 4), (1.0, 1.0, 1.0))
    with pytest.raises(InvalidArgument):
        generate_seeds(np.zeros(grid.dims, bool), grid, 3, np.random.default_rng(0))


# -- single-seed rules -------------------------------------------------------------------


def test_constant_field_crosses_the_slab():
    grid, vol, mask = _slab()
    s, why = propagate(ConstantField([1, 0, 0]), vol, np.array([0.0, 3.0, 3.0]), mask, ONE_WAY)
    assert why == "left_mask"
    assert len(s) == 41  # 40 one-millimetre steps from x=0 to x=40
    np.testing.assert_allclose(s.vertices[:, 0], np.arange(41), atol=1e-9)


def test_zero_output_at_step_k_stops_with_low_norm():
    grid, vol, mask = _slab()
    for k in (1, 4, 9):
        s, why = propagate(ConstantField([1, 0, 0], stop_at=k), vol, np.array([0.0, 3.0, 3.0]), mask, ONE_WAY)
        assert why == "low_norm"
        assert len(s) == k


def test_max_length_stops_at_exactly_200_mm():
    grid, vol, mask = _slab(nx=260)
    s, why = propagate(ConstantField([1, 0, 0]), vol, np.array([0.0, 3.0, 3.0]), mask, ONE_WAY)
    assert why == "max_length"
    assert s.length == pytest.approx(200.0)
    assert len(s) == 201


def test_output_is_normalised_before_stepping():
    grid, vol, mask = _slab()
    s, _ = propagate(ConstantField([7.0, 0, 0]), vol, np.array([0.0, 3.0, 3.0]), mask, ONE_WAY)
    np.testing.assert_allclose(np.linalg.norm(np.diff(s.vertices, axis=0), axis=1), 1.0, atol=1e-9)


def test_neighbourhood_leaving_the_grid_stops_out_of_bounds():
    grid, vol, _ = _slab()
    mask = np.ones(grid.dims, bool)
    s, why = propagate(ConstantField([1, 0, 0]), vol, np.array([0.0, 3.0, 3.0]), mask, ONE_WAY)
    assert why == "out_of_bounds"
    assert np.all(vol.neighborhoods(s.vertices)[1])


def test_seed_outside_mask_rejected():
    grid, vol, mask = _slab()
    with pytest.raises(InvalidArgument):
        propagate(ConstantField([1, 0, 0]), vol, np.array([0.0, 0.0, 0.0]), mask, ONE_WAY)


def test_bidirectional_joins_both_halves():
    grid, vol, mask = _slab()
    cfg = TrackConfig(min_length=0.0)
    s, why = propagate(ConstantField([1, 0, 0]), vol, np.array([20.0, 3.0, 3.0]), mask, cfg)
    assert why == "left_mask"
    xs = s.vertices[:, 0]
    assert xs[0] == pytest.approx(40.0) and xs[-1] == pytest.approx(0.0)
    np.testing.assert_allclose(np.abs(np.diff(xs)), 1.0, atol=1e-9)


def test_bidirectional_respects_total_length():
    grid, vol, mask = _slab(nx=300)
    s, why = propagate(ConstantField([1, 0, 0]), vol, np.array([150.0, 3.0, 3.0]), mask, TrackConfig(min_length=0.0))
    assert why == "max_length"
    assert s.length == pytest.approx(200.0)


def test_track_config_validation():
    with pytest.raises(InvalidConfig):
        TrackConfig(step_size=0)
    with pytest.raises(InvalidConfig):
        TrackConfig(min_length=50, max_length=40)


# -- tractograms -------------------------------------------------------------------------


def test_zero_seeds_per_voxel_gives_empty_tractogram():
    grid, vol, mask = _slab()
    res = track(ConstantField([1, 0, 0]), vol, mask, TrackConfig(seeds_per_voxel=0), grid)
    assert len(res.tractogram) == 0 and res.n_seeds == 0


def test_length_filter_and_step_law():
    grid, vol, mask = _slab()
    cfg = TrackConfig(seeds_per_voxel=1, min_length=20.0, rng_seed=3)
    res = track(ConstantField([1, 0, 1e-3]), vol, mask, cfg, grid)
    assert len(res.tractogram) > 0
    for s in res.tractogram:
        assert cfg.min_length <= s.length <= cfg.max_length + cfg.step_size
        np.testing.assert_allclose(np.linalg.norm(np.diff(s.vertices, axis=0), axis=1), 1.0, atol=1e-6)
        idx, inside = grid.voxel_index(s.vertices)
        assert inside.all() and mask[tuple(idx.T)].all()
    assert sum(res.histogram.values()) == res.n_seeds


def test_batching_does_not_change_the_result():
    grid, vol, mask = _slab()
    a = track(ConstantField([1, 0.2, 0]), vol, mask, TrackConfig(seeds_per_voxel=1, batch_size=7), grid)
    b = track(ConstantField([1, 0.2, 0]), vol, mask, TrackConfig(seeds_per_voxel=1, batch_size=4096), grid)
    assert len(a.tractogram) == len(b.tractogram)
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a.tractogram, b.tractogram))


def test_histogram_file(tmp_path):
    from collections import Counter

    write_histogram(tmp_path / "h.txt", Counter(left_mask=3, low_norm=1))
    assert (tmp_path / "h.txt").read_text() == "left_mask 3\nout_of_bounds 0\nlow_norm 1\nmax_length 0\n"


# -- learned field -------------------------------------------------------------------------


def _model_setup(block=8):
    rng = np.random.default_rng(0)
    grid = Grid.regular((20, 20, 20), (1.0, 1.0, 1.0))
    vol = Volume(grid, rng.normal(size=(20, 20, 20, 2)).astype(np.float32))
    params = init_params(ModelConfig(n_layers=2, n_heads=2, d_model=8, block_size=block, in_channels=2), 1, np.float64)
    params.tensors["head.bias"][:] = [1.0, 0.3, 0.1]  # keep outputs well above the stop threshold
    return grid, vol, params


def test_model_tracking_matches_full_forward_on_short_tracks():
    grid, vol, params = _model_setup(block=32)
    mask = np.ones(grid.dims, bool)
    seed = np.array([4.2, 5.1, 6.3])
    s, _ = propagate(ModelField(params, vol), vol, seed, mask, TrackConfig(bidirectional=False, min_length=0.0))
    assert 2 < len(s) <= 32
    patches, _ = vol.neighborhoods(s.vertices[:-1])
    pred = forward(params, patches.reshape(len(s) - 1, -1)).predictions
    unit = pred / np.linalg.norm(pred, axis=1, keepdims=True)
    np.testing.assert_allclose(np.diff(s.vertices, axis=0), unit, atol=1e-9)


def test_sliding_window_uses_the_last_block():
    grid, vol, params = _model_setup(block=4)
    mask = np.ones(grid.dims, bool)
    s, _ = propagate(ModelField(params, vol), vol, np.array([3.0, 4.0, 5.0]), mask, TrackConfig(bidirectional=False, min_length=0.0))
    assert len(s) > 6
    t = 6  # prediction made at vertex t sees vertices t-3..t
    patches, _ = vol.neighborhoods(s.vertices[t - 3 : t + 1])
    pred = forward(params, patches.reshape(4, -1)).predictions[-1]
    np.testing.assert_allclose(s.vertices[t + 1] - s.vertices[t], pred / np.linalg.norm(pred), atol=1e-9)


def test_model_tracking_is_deterministic():
    grid, vol, params = _model_setup()
    mask = np.zeros(grid.dims, bool)
    mask[3:17, 3:17, 3:17] = True
    cfg = TrackConfig(seeds_per_voxel=1, min_length=2.0)
    a = track(params, vol, mask, cfg, grid)
    b = track(params, vol, mask, cfg, grid)
    assert len(a.tractogram) == len(b.tractogram) > 0
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a.tractogram, b.tractogram))


# -- reference field -------------------------------------------------------------------------


def test_tangent_field_follows_the_ground_truth():
    grid = Grid.regular((30, 9, 9), (1.0, 1.0, 1.0))
    line = np.stack([np.arange(2.0, 28.0), np.full(26, 4.0), np.full(26, 4.0)], axis=1)
    field = TangentField.from_tractogram(grid, Tractogram([Streamline(line, 0)]))
    mask = np.zeros(grid.dims, bool)
    mask[2:28, 4, 4] = True
    vol = Volume(grid, np.zeros((*grid.dims, 1)))
    s, why = propagate(field, vol, np.array([10.0, 4.0, 4.0]), mask, TrackConfig(min_length=0.0))
    assert why == "left_mask"
    assert s.length == pytest.approx(25.0)


def test_tangent_field_picks_the_aligned_population():
    grid = Grid.regular((21, 21, 5), (1.0, 1.0, 1.0))
    x = np.stack([np.arange(1.0, 20.0), np.full(19, 10.0), np.full(19, 2.0)], axis=1)
    y = x[:, [1, 0, 2]]
    field = TangentField.from_tractogram(grid, Tractogram([Streamline(x, 0), Streamline(y, 1)]))
    out = field.advance(np.array([0, 1]), np.array([[10.0, 10.0, 2.0]] * 2), np.array([[0, 1.0, 0], [1.0, 0, 0]]))
    np.testing.assert_allclose(np.abs(out), [[0, 1, 0], [1, 0, 0]], atol=1e-12)
