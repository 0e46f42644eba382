"""Phantoms and ideal photoacoustic signal simulation.

The simulator evaluates the delta-excitation solution of the lossless wave
equation: each detector sees the time derivative of the spherical-shell mean
of the initial pressure, ``p(t) = d/dt [ (1/(4 pi c^2 t)) * surface integral ]``.
Shell integrals are accumulated in bins of width ``c*dt``, each voxel spread
over the bins its cube actually spans along the line of sight.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .geometry import VolumeGrid

SOUND_SPEED_WATER = 1.5e6  # mm/s


@dataclass(frozen=True)
class SourceVolume:
    grid: VolumeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.dims:
            raise ValueError(f"values shape {values.shape} does not match grid dims {self.grid.dims}")
        if not np.all(np.isfinite(values)):
            raise ValueError("source values must be finite")
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class RawPAData:
    """Detector traces, shape (n_channels, n_samples); sample k is at ``t0 + k*dt``."""

    channels: np.ndarray
    dt: float
    t0: float = 0.0
    sound_speed: float = SOUND_SPEED_WATER

    def __post_init__(self):
        channels = np.asarray(self.channels)
        if channels.ndim != 2:
            raise ValueError("channels must be a 2-D (detector x sample) matrix")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(channels)):
            raise ValueError("raw samples must be finite")
        object.__setattr__(self, "channels", channels)

    @property
    def n_channels(self):
        return self.channels.shape[0]

    @property
    def n_samples(self):
        return self.channels.shape[1]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.n_samples)

    def sidecar(self):
        return {
            "n_channels": self.n_channels,
            "n_samples": self.n_samples,
            "dt": self.dt,
            "t0": self.t0,
            "sound_speed": self.sound_speed,
        }

    def scaled(self, factor):
        return RawPAData(self.channels * factor, self.dt, self.t0, self.sound_speed)


@dataclass
class PhantomSpec:
    """Sphere primitives are ``(center, radius, amplitude)``; tube primitives are
    ``(end_a, end_b, radius, amplitude)`` capsules around a segment."""

    kind: str
    primitives: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("spheres", "tubes"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        prims = []
        for p in self.primitives:
            if self.kind == "spheres":
                center, radius, amp = p
                prims.append((tuple(map(float, center)), float(radius), float(amp)))
            else:
                a, b, radius, amp = p
                prims.append((tuple(map(float, a)), tuple(map(float, b)), float(radius), float(amp)))
            if prims[-1][-2] <= 0 or prims[-1][-1] <= 0:
                raise ValueError(f"primitive radius and amplitude must be positive: {p}")
        self.primitives = prims

    def to_dict(self):
        return {"kind": self.kind, "primitives": [list(map(_listify, p)) for p in self.primitives]}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["kind"], doc.get("primitives", []))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _listify(v):
    return list(v) if isinstance(v, tuple) else v


def _box_slices(grid, lo, hi):
    sl = []
    for ax in range(3):
        i0 = max(0, int(math.floor((lo[ax] - grid.origin[ax]) / grid.spacing)))
        i1 = min(grid.dims[ax], int(math.ceil((hi[ax] - grid.origin[ax]) / grid.spacing)) + 1)
        if i1 <= i0:
            return None
        sl.append(slice(i0, i1))
    return tuple(sl)


def rasterize_phantom(spec, grid):
    """Voxel value = sum of amplitudes of primitives containing the voxel centre."""
    values = np.zeros(grid.dims)
    for prim in spec.primitives:
        if spec.kind == "spheres":
            center, radius, amp = prim
            lo = np.subtract(center, radius)
            hi = np.add(center, radius)
        else:
            a, b, radius, amp = prim
            lo = np.minimum(a, b) - radius
            hi = np.maximum(a, b) + radius
        box = _box_slices(grid, lo, hi)
        if box is None:
            continue
        x, y, z = np.meshgrid(*(grid.axis_coords(ax)[box[ax]] for ax in range(3)), indexing="ij")
        if spec.kind == "spheres":
            d2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
        else:
            a = np.asarray(a)
            seg = np.asarray(b) - a
            length2 = float(seg @ seg)
            px, py, pz = x - a[0], y - a[1], z - a[2]
            if length2 > 0:
                s = np.clip((px * seg[0] + py * seg[1] + pz * seg[2]) / length2, 0.0, 1.0)
            else:
                s = 0.0
            d2 = (px - s * seg[0]) ** 2 + (py - s * seg[1]) ** 2 + (pz - s * seg[2]) ** 2
        values[box] += np.where(d2 <= radius * radius, amp, 0.0)
    return SourceVolume(grid, values)


def vessel_tree(seed, half_extent=5.5, n_generations=4, root_radius=0.45, z_spread=0.4,
                segment_length=1.6, amplitude=1.0):
    """Random branching tube tree confined to a cube of ``half_extent``.

    Procedure: a root vessel enters from the -x face and walks inward in
    straight segments whose heading turns by up to 35 degrees per segment.
    At the end of each generation's walk the vessel forks into two children
    with headings rotated +/-(20..55) degrees and radius scaled by 0.75.
    Vertical excursion is kept within ``z_spread`` of the mid-plane so the
    central z-slice cuts through most of the tree. All draws come from
    ``numpy.random.default_rng(seed)``.
    """
    rng = np.random.default_rng(seed)
    prims = []
    limit = half_extent

    def walk(start, heading, radius, generation):
        pos = np.asarray(start, dtype=np.float64)
        n_seg = int(rng.integers(2, 5))
        for _ in range(n_seg):
            heading = heading + np.deg2rad(rng.uniform(-35.0, 35.0))
            dz = rng.uniform(-0.25, 0.25) * segment_length
            step = segment_length * rng.uniform(0.7, 1.3)
            nxt = pos + np.array([step * np.cos(heading), step * np.sin(heading), dz])
            nxt[2] = np.clip(nxt[2], -z_spread, z_spread)
            out = np.abs(nxt[:2]) > limit - radius
            if np.any(out):
                nxt[:2] = np.clip(nxt[:2], -(limit - radius), limit - radius)
                prims.append((tuple(pos), tuple(nxt), radius, amplitude))
                return
            prims.append((tuple(pos), tuple(nxt), radius, amplitude))
            pos = nxt
        if generation + 1 < n_generations:
            for sign in (-1.0, 1.0):
                turn = np.deg2rad(rng.uniform(20.0, 55.0))
                walk(pos, heading + sign * turn, max(0.15, radius * 0.75), generation + 1)

    start = np.array([-limit + root_radius, rng.uniform(-0.3, 0.3) * limit, 0.0])
    walk(start, rng.uniform(-0.3, 0.3), root_radius, 0)
    return PhantomSpec("tubes", prims)


def required_samples(grid, array, dt, c, t0=0.0):
    """Smallest ``t_count`` whose window reaches every voxel of ``grid`` from every detector."""
    corners = grid.corners()
    d = np.linalg.norm(array.positions[:, None, :] - corners[None, :, :], axis=2).max()
    d += math.sqrt(3.0) * grid.spacing / 2.0  # far edge of the outermost voxel
    # +2: bin rounding plus the forward neighbour used by the derivative
    return int(math.floor((d / c - t0) / dt + 0.5)) + 2


def _cube_cdf(s, w):
    """CDF of a sum of three uniforms on ``[0, w_i]`` evaluated at ``s`` (rows = voxels)."""
    total = np.zeros_like(s)
    for e0 in (0.0, 1.0):
        for e1 in (0.0, 1.0):
            for e2 in (0.0, 1.0):
                shift = (e0 * w[:, 0] + e1 * w[:, 1] + e2 * w[:, 2])[:, None]
                sign = -1.0 if (e0 + e1 + e2) % 2 else 1.0
                total += sign * np.maximum(s - shift, 0.0) ** 3
    return total / (6.0 * np.prod(w, axis=1))[:, None]


def _shell_sums(pos, coords, weights, spacing, dt, t0, c, t_count, chunk=65536):
    """Voxel mass per time bin, each voxel spread over its exact radial footprint.

    A voxel is a uniform cube; seen from ``pos`` its extent along the line of
    sight is the sum of three uniforms of widths ``spacing*|u_x|`` etc.
    Shell curvature across one voxel is ignored.
    """
    cd = c * dt
    out = np.zeros(t_count + 1)
    n_bins = int(math.ceil(math.sqrt(3.0) * spacing / cd)) + 2
    offsets = np.arange(n_bins + 1)
    for s0 in range(0, len(coords), chunk):
        diff = coords[s0:s0 + chunk] - pos
        d = np.sqrt((diff * diff).sum(axis=1))
        # widths floored so the cubic CDF never divides by zero on axis-aligned lines
        w = np.maximum(np.abs(diff / d[:, None]) * spacing, 1e-2 * spacing)
        width = w.sum(axis=1)
        lo = d - c * t0 - width / 2.0
        k0 = np.floor(lo / cd + 0.5).astype(np.intp)
        edges = (k0[:, None] + offsets[None, :] - 0.5) * cd - lo[:, None]
        cdf = _cube_cdf(np.clip(edges, 0.0, None), w)
        cdf = np.where(edges >= width[:, None], 1.0, cdf)
        frac = np.diff(cdf, axis=1) * weights[s0:s0 + chunk, None]
        bins = k0[:, None] + offsets[None, :-1]
        np.clip(bins, 0, t_count, out=bins)
        out += np.bincount(bins.ravel(), weights=frac.ravel(), minlength=t_count + 1)[: t_count + 1]
    return out[:t_count]


def simulate_signals(source, array, dt, t_count, c=SOUND_SPEED_WATER, t0=0.0, threads=1):
    """Ideal point-detector traces for an initial-pressure volume.

    ``g_i(t_k) = sum(p0 * dV) / (4 pi c^2 t_k * c dt)`` over the voxel mass
    falling in shell k (the ``c*dt`` divisor turns a shell volume into a
    surface integral), then ``p_i = dg_i/dt`` by central differences.
    """
    if not dt > 0 or not c > 0:
        raise ValueError("dt and c must be positive")
    need = required_samples(source.grid, array, dt, c, t0)
    if t_count < need:
        raise PreconditionError(f"time window too short: t_count={t_count}, need at least {need}")
    grid = source.grid
    nz = np.nonzero(source.values)
    channels = np.zeros((len(array), t_count))
    if nz[0].size == 0:
        return RawPAData(channels, dt, t0, c)
    coords = np.column_stack([grid.axis_coords(ax)[nz[ax]] for ax in range(3)])
    weights = source.values[nz] * grid.voxel_volume
    if t0 > 0:
        near = np.sqrt(((array.positions[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)).min()
        if near - math.sqrt(3.0) * grid.spacing / 2.0 < c * t0:
            raise PreconditionError(f"t0={t0} starts after the first arrival at {near / c:.6g} s")
    t = t0 + dt * np.arange(t_count)
    inv_shell = np.zeros(t_count)
    inv_shell[t > 0] = 1.0 / (4.0 * np.pi * c ** 3 * t[t > 0] * dt)

    def run(i):
        g = _shell_sums(array.positions[i], coords, weights, grid.spacing, dt, t0, c, t_count)
        channels[i] = np.gradient(g * inv_shell, dt)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, range(len(array))))
    else:
        for i in range(len(array)):
            run(i)
    return RawPAData(channels, dt, t0, c)
    coords = np.column_stack([grid.axis_coords(ax)[nz[ax]] for ax in range(3)])
    weights = source.values[nz] * grid.voxel_volume
    if t0 > 0:
        near = np.sqrt(((array.positions[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)).min()
        if near - math.sqrt(3.0) * grid.spacing / 2.0 < c * t0:
            raise PreconditionError(f"t0={t0} starts after the first arrival at {near / c:.6g} s")
    t = t0 + dt * np.arange(t_count)
    with np.errstate(divide="ignore"):
        inv_shell = np.where(t > 0, 1.0 / (4.0 * np.pi * c * c * t * c * dt), 0.0)

    def run(i):
        channels[i] = _shell_trace(array.positions[i], coords, weights, dt, t0, c, t_count, inv_shell)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, range(len(array))))
    else:
        for i in range(len(array)):
            run(i)
    return RawPAData(channels, dt, t0, c)

