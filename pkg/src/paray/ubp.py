"""Universal back-projection.

Each voxel value is the solid-angle weighted mean of the back-projection term
``b = 2p - 2 tbar dp/dtbar`` (``tbar = c t``) sampled at the voxel-detector
distance. Weights are the solid angles the detector patches subtend at the
voxel; detectors facing away from the voxel are skipped and the weights are
normalised per voxel.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .geometry import VolumeGrid

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Volume:
    grid: VolumeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.grid.dims:
            raise ValueError(f"values shape {values.shape} does not match grid dims {self.grid.dims}")
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class Image2D:
    values: np.ndarray
    pixel_spacing: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("Image2D values must be 2-D")
        object.__setattr__(self, "values", values)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def axis_index(axis):
    if isinstance(axis, str):
        try:
            return AXES[axis.lower()]
        except KeyError:
            raise ValueError(f"axis must be one of x, y, z; got {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2; got {axis!r}")
    return int(axis)


def backprojection_term(trace, dt, c, t0=0.0):
    """``b(k) = 2 p(k) - 2 tbar_k dp/dtbar`` with central differences inside.

    Works along the last axis, so a whole (channel x sample) matrix can be
    passed at once.
    """
    p = np.asarray(trace, dtype=np.float64)
    if p.shape[-1] < 3:
        raise ValueError("trace must have at least 3 samples")
    tbar = c * (t0 + dt * np.arange(p.shape[-1]))
    dp = np.gradient(p, c * dt, axis=-1)
    return 2.0 * p - 2.0 * tbar * dp


def _backproject(points, b_terms, array, dt, t0, c):
    """Evaluate the back-projection at ``points`` (n, 3); detectors summed in index order."""
    n_samples = b_terms.shape[1]
    num = np.zeros(len(points))
    den = np.zeros(len(points))
    px, py, pz = points[:, 0], points[:, 1], points[:, 2]
    last = n_samples - 1
    for i in range(len(array)):
        (qx, qy, qz), (nx, ny, nz) = array.positions[i], array.normals[i]
        dx, dy, dz = px - qx, py - qy, pz - qz
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        facing = nx * dx + ny * dy + nz * dz
        weight = array.patch_area * facing / (dist * dist * dist)
        pos = (dist / c - t0) / dt
        if pos.min() < 0 or pos.max() > last:
            raise PreconditionError(
                f"voxel distances {dist.min():.4g}..{dist.max():.4g} mm fall outside the "
                f"recorded window of detector {i}"
            )
        k = np.minimum(np.floor(pos).astype(np.intp), last - 1)
        frac = pos - k
        b = b_terms[i]
        sample = b[k] * (1.0 - frac) + b[k + 1] * frac
        weight = np.where(weight > 0, weight, 0.0)
        num += weight * sample
        den += weight
    out = np.zeros(len(points))
    np.divide(num, den, out=out, where=den > 0)
    return out


def _check(raw, array):
    if raw.n_channels != len(array):
        raise ValueError(f"raw data has {raw.n_channels} channels but the array has {len(array)} elements")


def reconstruct_points(raw, array, points, threads=1, chunk=32768):
    """Back-project ``raw`` onto arbitrary points (n, 3)."""
    _check(raw, array)
    b_terms = backprojection_term(raw.channels, raw.dt, raw.sound_speed, raw.t0)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    starts = range(0, len(points), chunk)
    out = np.empty(len(points))

    def run(s):
        out[s:s + chunk] = _backproject(points[s:s + chunk], b_terms, array, raw.dt, raw.t0, raw.sound_speed)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return out


def _grid_points(grid, fixed_axis=None, fixed_index=None):
    coords = [grid.axis_coords(ax) for ax in range(3)]
    if fixed_axis is not None:
        coords[fixed_axis] = coords[fixed_axis][fixed_index:fixed_index + 1]
    x, y, z = np.meshgrid(*coords, indexing="ij")
    return np.column_stack([x.ravel(), y.ravel(), z.ravel()])


def reconstruct(raw, array, grid, threads=1):
    """Reconstruct the whole grid."""
    values = reconstruct_points(raw, array, _grid_points(grid), threads=threads)
    return Volume(grid, values.reshape(grid.dims))


def reconstruct_slice(raw, array, grid, axis, index, threads=1):
    """Reconstruct one grid plane; identical to the matching plane of :func:`reconstruct`."""
    ax = axis_index(axis)
    if not 0 <= index < grid.dims[ax]:
        raise ValueError(f"slice index {index} out of range for axis of length {grid.dims[ax]}")
    values = reconstruct_points(raw, array, _grid_points(grid, ax, index), threads=threads)
    shape = [d for a, d in enumerate(grid.dims) if a != ax]
    return Image2D(values.reshape(shape), grid.spacing)


def map_projection(volume, axis):
    """Maximum amplitude projection: keeps the signed value with the largest magnitude."""
    ax = axis_index(axis)
    values = np.asarray(volume.values if isinstance(volume, Volume) else volume)
    idx = np.expand_dims(np.abs(values).argmax(axis=ax), ax)
    image = np.take_along_axis(values, idx, axis=ax).squeeze(ax)
    spacing = volume.grid.spacing if isinstance(volume, Volume) else 1.0
    return Image2D(image, spacing)
