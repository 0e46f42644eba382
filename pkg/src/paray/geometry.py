"""Detector arrays and reconstruction grids.

All lengths are in millimetres. Arrays are centred on the origin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class DetectorArray:
    """Point detectors on a sphere of ``radius`` with inward unit normals.

    ``patch_area`` is the surface area attributed to each element; it is a
    single value shared by all elements.
    """

    positions: np.ndarray
    normals: np.ndarray
    patch_area: float
    radius: float

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if positions.shape != normals.shape:
            raise ValueError("positions and normals must have the same shape")
        positions.setflags(write=False)
        normals.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "patch_area", float(self.patch_area))
        object.__setattr__(self, "radius", float(self.radius))

    def __len__(self):
        return self.positions.shape[0]

    def take(self, indices, patch_area=None):
        """Return the elements at ``indices`` (order preserved)."""
        indices = np.asarray(indices, dtype=np.intp)
        return DetectorArray(
            self.positions[indices],
            self.normals[indices],
            self.patch_area if patch_area is None else patch_area,
            self.radius,
        )

    def to_dict(self):
        return {
            "radius": self.radius,
            "patch_area": self.patch_area,
            "positions": self.positions.tolist(),
            "normals": self.normals.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            np.array(doc["positions"], dtype=np.float64),
            np.array(doc["normals"], dtype=np.float64),
            doc["patch_area"],
            doc["radius"],
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class VolumeGrid:
    """Regular cubic-voxel grid; voxel ``(i, j, k)`` sits at ``origin + spacing*(i, j, k)``."""

    origin: tuple
    spacing: float
    dims: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        dims = tuple(int(d) for d in self.dims)
        if len(origin) != 3 or len(dims) != 3:
            raise ValueError("origin and dims must have three components")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if min(dims) < 1:
            raise ValueError(f"dims must be >= 1 in every axis, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "dims", dims)

    @property
    def voxel_volume(self):
        return self.spacing ** 3

    def axis_coords(self, axis):
        """World coordinates of voxel centres along one axis (0, 1 or 2)."""
        return self.origin[axis] + self.spacing * np.arange(self.dims[axis], dtype=np.float64)

    def world(self, index):
        index = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + self.spacing * index

    def corners(self):
        """The 8 extreme voxel centres, shape (8, 3)."""
        lo = np.asarray(self.origin)
        hi = lo + self.spacing * (np.asarray(self.dims) - 1)
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def to_dict(self):
        return {"origin": list(self.origin), "spacing": self.spacing, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["origin"]), doc["spacing"], tuple(doc["dims"]))


def fibonacci_sphere_array(n, radius):
    """Spherical Fibonacci lattice of ``n`` detectors covering the full sphere.

    Heights are spaced ``(i + 0.5) / n`` apart and azimuths advance by the
    golden angle ``2*pi/phi**2``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    n = int(n)
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    azimuth = 2.0 * np.pi * i / GOLDEN_RATIO ** 2
    unit = np.column_stack([rho * np.cos(azimuth), rho * np.sin(azimuth), z])
    # renormalise so |position| == radius to rounding
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return DetectorArray(radius * unit, -unit, 4.0 * np.pi * radius ** 2 / n, radius)


def uniform_indices(n_total, k):
    """Indices ``round(j*N/k)`` for ``j = 0..k-1`` with halves rounded up."""
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    if k > n_total:
        raise ValueError(f"cannot keep {k} of {n_total} detectors")
    j = np.arange(int(k), dtype=np.int64)
    # floor(j*N/k + 1/2) in exact integer arithmetic
    idx = (2 * j * n_total + k) // (2 * k)
    return np.unique(idx)


def subsample_uniform(array, k):
    """Keep ``k`` evenly spread elements and rescale the patch area to ``4*pi*R**2/k``."""
    idx = uniform_indices(len(array), k)
    return array.take(idx, patch_area=4.0 * np.pi * array.radius ** 2 / k)


def hemisphere(array):
    """Elements with ``z <= 0``: a bowl opening upward, as in limited-view scanners."""
    keep = np.flatnonzero(array.positions[:, 2] <= 0.0)
    return array.take(keep)


def make_grid(center, half_extent, spacing):
    """Cubic grid covering ``center +/- half_extent`` with voxel-centred sampling."""
    if not half_extent > 0:
        raise ValueError(f"half_extent must be positive, got {half_extent}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    center = np.broadcast_to(np.asarray(center, dtype=np.float64), (3,))
    n = max(1, int(round(2.0 * half_extent / spacing)))
    origin = center - half_extent + spacing / 2.0
    return VolumeGrid(tuple(origin), spacing, (n, n, n))
