"""Real symmetric spherical harmonics, signal fitting and volume sampling.

The basis is the real, even-order, orthonormal basis ordered by ``(l, m)``
with ``l = 0, 2, ..., l_max`` and ``m = -l..l``::

    Y_lm = sqrt(2) * N_l|m| * P_l^|m|(cos theta) * sin(|m| phi)   m < 0
    Y_l0 = N_l0 * P_l(cos theta)
    Y_lm = sqrt(2) * N_lm * P_l^m(cos theta) * cos(m phi)         m > 0

without the Condon-Shortley phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import lpmv

from ._binary import Reader
from .errors import FitSingularError, FormatError, InvalidArgument, OutOfBounds
from .grid import Grid

DEFAULT_LMAX = 6
DEFAULT_LAMBDA = 0.006
B0_THRESHOLD = 50.0


def n_coefficients(l_max: int) -> int:
    return (l_max + 1) * (l_max + 2) // 2


def _check_lmax(l_max) -> int:
    if int(l_max) != l_max or l_max < 0 or l_max % 2:
        raise InvalidArgument(f"l_max must be a non-negative even integer, got {l_max}")
    if l_max > 8:
        raise InvalidArgument(f"l_max above 8 is not supported, got {l_max}")
    return int(l_max)


def sh_orders(l_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree and order of every basis column."""
    l_max = _check_lmax(l_max)
    ls, ms = [], []
    for l in range(0, l_max + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    return np.array(ls), np.array(ms)


def sh_basis_matrix(l_max: int, directions) -> np.ndarray:
    """Evaluate the basis at each row of ``directions`` (shape ``(N, 3)``)."""
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms < 1e-12):
        raise InvalidArgument("zero-norm direction")
    d = d / norms[:, None]
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    ls, ms = sh_orders(l_max)
    out = np.empty((d.shape[0], ls.size))
    cos_t = np.cos(theta)
    for col, (l, m) in enumerate(zip(ls, ms)):
        am = abs(m)
        norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
        # lpmv carries the (-1)^m Condon-Shortley factor; strip it.
        leg = (-1) ** am * lpmv(am, l, cos_t)
        if m == 0:
            out[:, col] = norm * leg
        elif m > 0:
            out[:, col] = math.sqrt(2) * norm * leg * np.cos(am * phi)
        else:
            out[:, col] = math.sqrt(2) * norm * leg * np.sin(am * phi)
    return out


def sh_basis(l_max: int, direction) -> np.ndarray:
    """Basis row for a single unit direction."""
    d = np.asarray(direction, dtype=float)
    if d.shape != (3,):
        raise InvalidArgument("direction must be a 3-vector")
    return sh_basis_matrix(l_max, d[None, :])[0]


def laplace_beltrami(l_max: int) -> np.ndarray:
    ls, _ = sh_orders(l_max)
    return (ls * (ls + 1)).astype(float)


@dataclass(frozen=True)
class GradientScheme:
    directions: np.ndarray
    bvalues: np.ndarray

    def __post_init__(self):
        dirs = np.asarray(self.directions, dtype=float).reshape(-1, 3)
        bvals = np.asarray(self.bvalues, dtype=float).reshape(-1)
        if dirs.shape[0] != bvals.shape[0]:
            raise InvalidArgument("directions and bvalues differ in length")
        dw = bvals > B0_THRESHOLD
        if dw.any() and not np.allclose(np.linalg.norm(dirs[dw], axis=1), 1.0, atol=1e-6):
            raise InvalidArgument("diffusion-weighted directions must have unit norm")
        if dw.all():
            raise InvalidArgument("scheme needs at least one b0 volume")
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "bvalues", bvals)

    def __len__(self):
        return self.bvalues.shape[0]

    @property
    def dw_mask(self) -> np.ndarray:
        return self.bvalues > B0_THRESHOLD

    @classmethod
    def uniform(cls, n_directions: int = 64, bvalue: float = 1000.0, n_b0: int = 1) -> "GradientScheme":
        dirs = fibonacci_hemisphere(n_directions)
        zeros = np.tile([0.0, 0.0, 1.0], (n_b0, 1))
        return cls(np.vstack([zeros, dirs]), np.r_[np.zeros(n_b0), np.full(n_directions, bvalue)])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for d, b in zip(self.directions, self.bvalues):
                fh.write(f"{d[0]:.17g} {d[1]:.17g} {d[2]:.17g} {b:.17g}\n")

    @classmethod
    def load(cls, path) -> "GradientScheme":
        rows = np.loadtxt(path, ndmin=2)
        if rows.shape[1] != 4:
            raise InvalidArgument(f"{path}: expected 4 columns (gx gy gz b)")
        return cls(rows[:, :3], rows[:, 3])


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the upper hemisphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z * z)
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def fit_matrix(scheme: GradientScheme, l_max: int = DEFAULT_LMAX, lambda_reg: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Matrix ``M`` with ``c = M @ s_dw`` for b0-normalised DW signals."""
    if lambda_reg < 0:
        raise InvalidArgument("lambda_reg must be >= 0")
    B = sh_basis_matrix(l_max, scheme.directions[scheme.dw_mask])
    ncoef = B.shape[1]
    if lambda_reg == 0:
        if B.shape[0] < ncoef or np.linalg.matrix_rank(B) < ncoef:
            raise FitSingularError(
                f"{B.shape[0]} DW directions cannot determine {ncoef} coefficients without regularisation"
            )
        return np.linalg.pinv(B)
    L = laplace_beltrami(l_max)
    lhs = B.T @ B + lambda_reg * np.diag(L * L)
    if np.linalg.cond(lhs) > 1e12:
        raise FitSingularError("regularised normal equations are singular")
    return np.linalg.solve(lhs, B.T)


def fit_sh(signals, scheme: GradientScheme, l_max: int = DEFAULT_LMAX, lambda_reg: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Fit SH coefficients to raw signals of shape ``(..., len(scheme))``.

    Signals are divided by the mean b0 before the fit; voxels whose b0 is not
    positive get all-zero coefficients.
    """
    s = np.asarray(signals, dtype=float)
    if s.shape[-1] != len(scheme):
        raise InvalidArgument(f"signal length {s.shape[-1]} != scheme length {len(scheme)}")
    M = fit_matrix(scheme, l_max, lambda_reg)
    b0 = s[..., ~scheme.dw_mask].mean(axis=-1)
    safe = np.where(b0 > 0, b0, 1.0)
    norm = s[..., scheme.dw_mask] / safe[..., None]
    coeffs = norm @ M.T
    coeffs[b0 <= 0] = 0.0
    return coeffs


@dataclass(frozen=True)
class Volume:
    """Multi-channel voxel volume; ``data`` has shape ``(nx, ny, nz, C)``."""

    grid: Grid
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.shape[:3] != self.grid.dims:
            raise InvalidArgument(f"data shape {data.shape[:3]} does not match grid {self.grid.dims}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return self.data.shape[3]

    @property
    def voxel_size(self) -> np.ndarray:
        return self.grid.voxel_size

    def sample_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear samples ``(N, C)`` and an in-grid flag ``(N,)``.

        Rows that fall outside the grid are returned as zeros.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        x = self.grid.world_to_voxel(pts)
        dims = np.asarray(self.grid.dims)
        inside = np.all((x >= 0) & (x <= dims - 1), axis=1)
        x = np.clip(x, 0, dims - 1)
        i0 = np.minimum(np.floor(x).astype(np.int64), np.maximum(dims - 2, 0))
        f = x - i0
        i1 = np.minimum(i0 + 1, dims - 1)
        d = self.data
        out = np.zeros((pts.shape[0], d.shape[3]), dtype=np.result_type(d.dtype, np.float64))
        for cx in (0, 1):
            wx = f[:, 0] if cx else 1.0 - f[:, 0]
            ix = i1[:, 0] if cx else i0[:, 0]
            for cy in (0, 1):
                wy = f[:, 1] if cy else 1.0 - f[:, 1]
                iy = i1[:, 1] if cy else i0[:, 1]
                for cz in (0, 1):
                    wz = f[:, 2] if cz else 1.0 - f[:, 2]
                    iz = i1[:, 2] if cz else i0[:, 2]
                    out += (wx * wy * wz)[:, None] * d[ix, iy, iz]
        out[~inside] = 0.0
        return out, inside

    def sample(self, point) -> np.ndarray:
        vals, inside = self.sample_many(np.asarray(point, dtype=float)[None, :])
        if not inside[0]:
            raise OutOfBounds(f"point {tuple(point)} is outside the voxel grid")
        return vals[0]

    def neighborhood_offsets(self) -> np.ndarray:
        """World-frame offsets of the 27 patch cells, ``(27, 3)`` in (i, j, k) order."""
        vs = self.voxel_size
        steps = np.array([-1.0, 0.0, 1.0])
        ii, jj, kk = np.meshgrid(steps, steps, steps, indexing="ij")
        return np.stack([ii.ravel() * vs[0], jj.ravel() * vs[1], kk.ravel() * vs[2]], axis=1)

    def neighborhoods(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Patches ``(N, 3, 3, 3, C)`` and a flag that all 27 cells are in-grid."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        cells = (pts[:, None, :] + self.neighborhood_offsets()[None]).reshape(-1, 3)
        vals, inside = self.sample_many(cells)
        n = pts.shape[0]
        patches = vals.reshape(n, 3, 3, 3, self.n_channels)
        ok = inside.reshape(n, 27).all(axis=1)
        patches[~ok] = 0.0
        return patches, ok

    def neighborhood(self, point) -> np.ndarray:
        patches, ok = self.neighborhoods(np.asarray(point, dtype=float)[None, :])
        if not ok[0]:
            raise OutOfBounds(f"3x3x3 neighbourhood of {tuple(point)} leaves the voxel grid")
        return patches[0]


def sample_volume(volume: Volume, point_world) -> np.ndarray:
    return volume.sample(point_world)


def extract_neighborhood(volume: Volume, point_world) -> np.ndarray:
    return volume.neighborhood(point_world)


VOL_MAGIC = b"VOL1"
VOL_VERSION = 1


def write_volume(path, volume: Volume) -> None:
    nx, ny, nz = volume.grid.dims
    c = volume.n_channels
    header = bytearray(VOL_MAGIC)
    header += np.array([VOL_VERSION, nx, ny, nz, c], dtype="<u4").tobytes()
    header += np.asarray(volume.voxel_size, dtype="<f4").tobytes()
    header += np.asarray(volume.grid.affine, dtype="<f4").reshape(16).tobytes()
    # channel fastest, then x, y, z
    payload = np.ascontiguousarray(np.asarray(volume.data, dtype="<f4").transpose(2, 1, 0, 3))
    Path(path).write_bytes(bytes(header) + payload.tobytes())


def read_volume(path) -> Volume:
    r = Reader(Path(path).read_bytes())
    r.magic(VOL_MAGIC)
    version = r.u32("version")
    if version != VOL_VERSION:
        raise FormatError(f"unsupported VOL version {version}", 4)
    nx, ny, nz, c = (r.u32(n) for n in ("nx", "ny", "nz", "nchannels"))
    r.f32_array(3, "voxel size")
    affine = r.f32_array(16, "affine").reshape(4, 4).astype(float)
    start = r.pos
    count = nx * ny * nz * c
    if len(r.buf) - start != 4 * count:
        raise FormatError(f"payload holds {len(r.buf) - start} bytes, expected {4 * count}", start)
    data = r.f32_array(count, "voxel data").reshape(nz, ny, nx, c).transpose(2, 1, 0, 3)
    try:
        grid = Grid((nx, ny, nz), affine)
    except InvalidArgument as exc:
        raise FormatError(str(exc), 32) from exc
    return Volume(grid, np.ascontiguousarray(data))
