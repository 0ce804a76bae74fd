"""Voxel grid geometry: voxel-to-world affines and nearest-voxel lookup.

Voxel centres sit at integer voxel coordinates. A world point belongs to the
voxel whose half-open cube ``[c - 0.5, c + 0.5)`` contains its voxel
coordinate, i.e. index ``floor(x + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


def diagonal_affine(voxel_size, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    aff = np.eye(4)
    aff[:3, :3] = np.diag(np.asarray(voxel_size, dtype=float))
    aff[:3, 3] = origin
    return aff


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int]
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidArgument(f"grid dims must be three positive ints, got {self.dims}")
        aff = np.asarray(self.affine, dtype=float)
        if aff.shape != (4, 4) or abs(np.linalg.det(aff[:3, :3])) < 1e-12:
            raise InvalidArgument("affine must be an invertible 4x4 matrix")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "affine", aff)
        object.__setattr__(self, "_inv", np.linalg.inv(aff))

    @classmethod
    def regular(cls, dims, voxel_size, origin=(0.0, 0.0, 0.0)) -> "Grid":
        return cls(tuple(dims), diagonal_affine(voxel_size, origin))

    @property
    def voxel_size(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def world_to_voxel(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self._inv[:3, :3].T + self._inv[:3, 3]

    def voxel_to_world(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=float)
        return c @ self.affine[:3, :3].T + self.affine[:3, 3]

    def voxel_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-voxel indices ``(N, 3)`` and an in-grid flag ``(N,)``."""
        idx = np.floor(self.world_to_voxel(points) + 0.5).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        return idx, inside

    def same_as(self, other: "Grid") -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine)
