"""Synthetic bundle phantoms with a multi-tensor DWI forward model.

Each bundle is a tube of parallel streamlines around a parametric centreline.
Voxels are filled with one axially symmetric tensor per bundle that passes
through them (equal volume fractions); empty voxels get an isotropic tensor
with the same mean diffusivity.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import parse_floats, read_kv
from .errors import InvalidConfig, InvalidSpec
from .grid import Grid
from .shcore import GradientScheme, Volume, read_volume, write_volume
from .streamlines import Streamline, Tractogram, densify, read_tracts, resample, write_tracts

log = logging.getLogger(__name__)

MIN_LENGTH = 20.0
MAX_LENGTH = 200.0
ROI_LENGTH = 3.0
ROI_DILATION = 2
VOXEL_STEP = 0.5


@dataclass
class BundleSpec:
    name: str
    kind: str  # straight | arc | helix
    label: int
    tube_radius: float = 3.0
    streamline_count: int = 100
    start: tuple = (0.0, 0.0, 0.0)
    end: tuple = (0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 10.0
    start_angle: float = 0.0  # degrees
    sweep: float = 90.0  # degrees
    axis_u: tuple = (1.0, 0.0, 0.0)
    axis_v: tuple = (0.0, 1.0, 0.0)
    turns: float = 1.0
    pitch: float = 10.0  # mm per turn, along axis_u x axis_v

    def __post_init__(self):
        if self.kind not in ("straight", "arc", "helix"):
            raise InvalidSpec(f"bundle {self.name}: unknown kind {self.kind!r}")
        if self.tube_radius < 0:
            raise InvalidSpec(f"bundle {self.name}: tube_radius must be >= 0")
        if self.streamline_count < 1:
            raise InvalidSpec(f"bundle {self.name}: streamline_count must be >= 1")

    def centerline(self, n: int = 4001) -> np.ndarray:
        """Densely sampled centreline, ``(n, 3)``."""
        t = np.linspace(0.0, 1.0, n)[:, None]
        if self.kind == "straight":
            a, b = np.asarray(self.start, float), np.asarray(self.end, float)
            return a + t * (b - a)
        u, v = _plane_axes(self.axis_u, self.axis_v)
        theta = np.deg2rad(self.start_angle + t[:, 0] * self.sweep)
        if self.kind == "arc":
            turns, rise = self.sweep / 360.0, 0.0
        else:
            theta = np.deg2rad(self.start_angle) + 2 * math.pi * self.turns * t[:, 0]
            turns, rise = self.turns, self.pitch
        w = np.cross(u, v)
        c = np.asarray(self.center, float)
        return (
            c
            + self.radius * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)
            + (rise * turns * t) * w
        )


def _plane_axes(u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, float)
    u = u / np.linalg.norm(u)
    v = np.asarray(v, float)
    v = v - (v @ u) * u
    return u, v / np.linalg.norm(v)


def _transport_frame(curve: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation-minimising normal frame along a dense curve."""
    tang = np.gradient(curve, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    seed = np.eye(3)[np.argmin(np.abs(tang[0]))]
    n1 = np.empty_like(tang)
    n1[0] = seed - (seed @ tang[0]) * tang[0]
    n1[0] /= np.linalg.norm(n1[0])
    for i in range(1, len(tang)):
        v = n1[i - 1] - (n1[i - 1] @ tang[i]) * tang[i]
        n1[i] = v / np.linalg.norm(v)
    n2 = np.cross(tang, n1)
    return n1, n2


def generate_streamlines(spec: BundleSpec, rng: np.random.Generator, alpha: float = 1.0) -> list[Streamline]:
    """Jitter the centreline laterally (uniform disc offset) and resample at ``alpha``.

    Streamlines run from the centreline start to its end.
    """
    curve = spec.centerline()
    length = float(np.linalg.norm(np.diff(curve, axis=0), axis=1).sum())
    if length < MIN_LENGTH:
        raise InvalidSpec(f"bundle {spec.name}: centreline is {length:.2f} mm, below {MIN_LENGTH} mm")
    if length > MAX_LENGTH:
        raise InvalidSpec(f"bundle {spec.name}: centreline is {length:.2f} mm, above {MAX_LENGTH} mm")
    n1, n2 = _transport_frame(curve)
    out = []
    for _ in range(spec.streamline_count):
        r = spec.tube_radius * math.sqrt(rng.random())
        phi = 2 * math.pi * rng.random()
        offset = r * math.cos(phi) * n1 + r * math.sin(phi) * n2
        out.append(resample(Streamline(curve + offset, spec.label), alpha))
    return out


@dataclass
class PhantomConfig:
    dims: tuple = (40, 40, 40)
    voxel_size: tuple = (2.0, 2.0, 2.0)
    bundles: list = field(default_factory=list)
    diffusivities: tuple = (1.7e-3, 0.3e-3, 0.3e-3)
    s0: float = 100.0
    snr: float | None = None
    scheme: GradientScheme = field(default_factory=GradientScheme.uniform)
    rng_seed: int = 0
    step_size: float = 1.0

    def __post_init__(self):
        if not self.bundles:
            raise InvalidConfig("phantom needs at least one bundle")
        lam = self.diffusivities
        if len(lam) != 3 or min(lam) <= 0 or not (lam[0] >= lam[1] >= lam[2]):
            raise InvalidConfig("diffusivities must be positive with l1 >= l2 >= l3")
        labels = [b.label for b in self.bundles]
        if len(set(labels)) != len(labels):
            raise InvalidConfig("bundle labels must be unique")
        if self.snr is not None and self.snr <= 0:
            raise InvalidConfig("snr must be positive")

    @property
    def grid(self) -> Grid:
        return Grid.regular(self.dims, self.voxel_size)


def default_config(snr: float | None = None, rng_seed: int = 0) -> PhantomConfig:
    """40^3 grid at 2 mm: a straight bundle, an orthogonal crossing bundle, a 90 degree arc."""
    bundles = [
        BundleSpec("straight_x", "straight", 0, 4.0, 200, start=(10, 40, 40), end=(70, 40, 40)),
        BundleSpec("cross_y", "straight", 1, 4.0, 120, start=(40, 10, 40), end=(40, 70, 40)),
        BundleSpec("arc", "arc", 2, 4.0, 60, center=(10, 10, 22), radius=30.0, start_angle=0.0, sweep=90.0),
    ]
    return PhantomConfig(bundles=bundles, snr=snr, rng_seed=rng_seed)


@dataclass
class Phantom:
    config: PhantomConfig
    gt: Tractogram
    dwi: Volume
    wm_mask: np.ndarray
    bundle_masks: dict
    rois: dict  # label -> (start_mask, end_mask)
    populations: np.ndarray  # per-voxel fibre population count

    @property
    def grid(self) -> Grid:
        return self.dwi.grid

    @property
    def names(self) -> dict:
        return {b.label: b.name for b in self.config.bundles}


def _tangent_tensors(grid: Grid, tractogram: Tractogram, labels: list[int], step: float):
    """Per voxel and bundle, the summed outer product of unit tangents."""
    lab_index = {lab: i for i, lab in enumerate(labels)}
    acc = np.zeros((grid.n_voxels, len(labels), 3, 3))
    for s in tractogram:
        pts = densify(s.vertices, step)
        if len(pts) < 2:
            continue
        tang = np.gradient(pts, axis=0)
        tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-12)
        idx, inside = grid.voxel_index(pts)
        flat = np.ravel_multi_index(idx[inside].T, grid.dims)
        t = tang[inside]
        np.add.at(acc[:, lab_index[s.label]], flat, t[:, :, None] * t[:, None, :])
    return acc


def tensor_signal(directions, bvalues, axis, l_par: float, l_perp: float) -> np.ndarray:
    """``exp(-b g^T D g)`` for an axially symmetric tensor along ``axis``."""
    g = np.asarray(directions, float)
    cos2 = (g @ np.asarray(axis, float)) ** 2
    return np.exp(-np.asarray(bvalues, float) * (l_perp + (l_par - l_perp) * cos2))


def simulate_dwi(gt: Tractogram, config: PhantomConfig, rng: np.random.Generator):
    """Raw DWI volume, wm mask, per-bundle masks and per-voxel population counts."""
    grid = config.grid
    labels = [b.label for b in config.bundles]
    acc = _tangent_tensors(grid, gt, labels, VOXEL_STEP)
    present = np.trace(acc, axis1=2, axis2=3) > 0  # (V, J)
    counts = present.sum(axis=1)

    sch = config.scheme
    l1, l2, l3 = config.diffusivities
    l_perp = 0.5 * (l2 + l3)
    md = (l1 + l2 + l3) / 3.0
    iso = np.exp(-sch.bvalues * md)
    signal = np.tile(iso, (grid.n_voxels, 1))
    occupied = np.nonzero(counts)[0]
    if occupied.size:
        _, vecs = np.linalg.eigh(acc[occupied])  # ascending eigenvalues
        axes = vecs[..., :, 2]  # (n, J, 3)
        cos2 = np.einsum("nd,vjd->vjn", sch.directions, axes) ** 2
        per_pop = np.exp(-sch.bvalues * (l_perp + (l1 - l_perp) * cos2))
        weights = present[occupied] / counts[occupied, None]
        signal[occupied] = np.einsum("vj,vjn->vn", weights, per_pop)
    signal *= config.s0
    if config.snr is not None:
        sigma = config.s0 / config.snr
        n1 = rng.normal(0.0, sigma, signal.shape)
        n2 = rng.normal(0.0, sigma, signal.shape)
        signal = np.sqrt((signal + n1) ** 2 + n2**2)
    dwi = Volume(grid, signal.reshape(*grid.dims, len(sch)))
    wm = (counts > 0).reshape(grid.dims)
    masks = {lab: present[:, j].reshape(grid.dims) for j, lab in enumerate(labels)}
    return dwi, wm, masks, counts.reshape(grid.dims)


def endpoint_rois(spec: BundleSpec, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Voxelised first/last 3 mm of the centreline, dilated by two voxels (26-connected)."""
    curve = spec.centerline()
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    cum = np.r_[0.0, np.cumsum(seg)]
    head = curve[cum <= ROI_LENGTH]
    tail = curve[cum >= cum[-1] - ROI_LENGTH]
    struct = np.ones((3, 3, 3), dtype=bool)
    out = []
    for part in (head, tail):
        m = np.zeros(grid.dims, dtype=bool)
        idx, inside = grid.voxel_index(part)
        m[tuple(idx[inside].T)] = True
        out.append(ndimage.binary_dilation(m, structure=struct, iterations=ROI_DILATION))
    return out[0], out[1]


def make_phantom(config: PhantomConfig) -> Phantom:
    rng = np.random.default_rng(config.rng_seed)
    streamlines = []
    for spec in config.bundles:
        streamlines.extend(generate_streamlines(spec, rng, config.step_size))
    gt = Tractogram(streamlines)
    dwi, wm, masks, counts = simulate_dwi(gt, config, rng)
    rois = {spec.label: endpoint_rois(spec, config.grid) for spec in config.bundles}
    log.info("phantom: %d streamlines, %d wm voxels, %d crossing voxels", len(gt), int(wm.sum()), int((counts >= 2).sum()))
    return Phantom(config, gt, dwi, wm, masks, rois, counts)


# -- on-disk layout ----------------------------------------------------------


def save_phantom(ph: Phantom, out_dir) -> list[Path]:
    """Write DWI, scheme, masks, ROIs and ground truth; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = ph.grid
    written = []

    def vol(name, data):
        path = out / name
        write_volume(path, Volume(grid, np.asarray(data, dtype=np.float32)))
        written.append(path)

    vol("dwi.vol", ph.dwi.data)
    vol("wm_mask.vol", ph.wm_mask)
    vol("populations.vol", ph.populations)
    for lab, m in sorted(ph.bundle_masks.items()):
        vol(f"bundle_{lab}.vol", m)
    for lab, (a, b) in sorted(ph.rois.items()):
        vol(f"roi_{lab}_start.vol", a)
        vol(f"roi_{lab}_end.vol", b)
    ph.config.scheme.save(out / "scheme.txt")
    write_tracts(out / "gt.trx", ph.gt)
    with open(out / "bundles.txt", "w") as fh:
        for spec in ph.config.bundles:
            fh.write(f"{spec.label} {spec.name}\n")
    written += [out / "scheme.txt", out / "gt.trx", out / "bundles.txt"]
    return written


@dataclass
class GroundTruth:
    """What scoring and tracking need from a phantom directory."""

    grid: Grid
    gt: Tractogram
    wm_mask: np.ndarray
    bundle_masks: dict
    rois: dict
    names: dict


def load_ground_truth(phantom_dir) -> GroundTruth:
    d = Path(phantom_dir)
    names = {}
    for line in (d / "bundles.txt").read_text().splitlines():
        if line.strip():
            lab, name = line.split(None, 1)
            names[int(lab)] = name.strip()
    wm = read_volume(d / "wm_mask.vol")
    masks = {lab: read_volume(d / f"bundle_{lab}.vol").data[..., 0] > 0.5 for lab in names}
    rois = {
        lab: (
            read_volume(d / f"roi_{lab}_start.vol").data[..., 0] > 0.5,
            read_volume(d / f"roi_{lab}_end.vol").data[..., 0] > 0.5,
        )
        for lab in names
    }
    return GroundTruth(wm.grid, read_tracts(d / "gt.trx"), wm.data[..., 0] > 0.5, masks, rois, names)


# -- config file -------------------------------------------------------------

_BUNDLE_FLOATS = {"tube_radius", "radius", "start_angle", "sweep", "turns", "pitch"}
_BUNDLE_VECS = {"start", "end", "center", "axis_u", "axis_v"}


def config_from_mapping(kv: dict[str, str]) -> PhantomConfig:
    """Build a config from flat ``key = value`` pairs.

    Top-level keys: ``dims``, ``voxel_size``, ``diffusivities``, ``s0``, ``snr``
    (``none`` for noiseless), ``rng_seed``, ``step_size``, ``n_directions``,
    ``bvalue``, ``n_b0`` and ``bundles`` (space separated names). Each bundle
    ``NAME`` reads ``bundle.NAME.kind``, ``.label``, ``.count``,
    ``.tube_radius`` and the geometry keys of its kind.
    """
    kv = dict(kv)
    used = set()

    def take(key, default=None):
        used.add(key)
        return kv.get(key, default)

    names = (take("bundles") or "").split()
    if not names:
        raise InvalidConfig("phantom config needs a 'bundles' key listing bundle names")
    bundles = []
    for i, name in enumerate(names):
        pre = f"bundle.{name}."
        args = {"name": name, "kind": take(pre + "kind", "straight"), "label": int(take(pre + "label", i))}
        if (c := take(pre + "count")) is not None:
            args["streamline_count"] = int(c)
        for key in _BUNDLE_FLOATS:
            if (val := take(pre + key)) is not None:
                args[key] = float(val)
        for key in _BUNDLE_VECS:
            if (val := take(pre + key)) is not None:
                args[key] = tuple(parse_floats(val, 3, pre + key))
        bundles.append(BundleSpec(**args))
    snr = take("snr", "none")
    scheme = GradientScheme.uniform(
        int(take("n_directions", 64)), float(take("bvalue", 1000.0)), int(take("n_b0", 1))
    )
    cfg = PhantomConfig(
        dims=tuple(int(x) for x in parse_floats(take("dims", "40 40 40"), 3, "dims")),
        voxel_size=tuple(parse_floats(take("voxel_size", "2 2 2"), 3, "voxel_size")),
        bundles=bundles,
        diffusivities=tuple(parse_floats(take("diffusivities", "1.7e-3 0.3e-3 0.3e-3"), 3, "diffusivities")),
        s0=float(take("s0", 100.0)),
        snr=None if str(snr).lower() == "none" else float(snr),
        scheme=scheme,
        rng_seed=int(take("rng_seed", 0)),
        step_size=float(take("step_size", 1.0)),
    )
    unknown = sorted(set(kv) - used)
    if unknown:
        raise InvalidConfig(f"unknown phantom config keys: {', '.join(unknown)}")
    return cfg


def load_config(path) -> PhantomConfig:
    return config_from_mapping(read_kv(path))
