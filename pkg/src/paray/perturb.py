"""Random detector subsets and coefficient-of-variation maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import RawPAData
from .geometry import VolumeGrid
from .ubp import axis_index, map_projection, reconstruct, reconstruct_slice


@dataclass(frozen=True)
class SubsetIndices:
    indices: np.ndarray
    n_total: int
    seed: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        if idx.ndim != 1 or idx.size > self.n_total:
            raise ValueError("indices must be a 1-D sequence no longer than n_total")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n_total or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be strictly increasing within [0, n_total)")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.indices.size


def random_subset(n_total, m, seed):
    """Draw ``m`` of ``n_total`` indices without replacement (partial Fisher-Yates)."""
    if not 1 <= m <= n_total:
        raise ValueError(f"need 1 <= m <= n_total, got m={m}, n_total={n_total}")
    rng = np.random.default_rng(seed)
    pool = np.arange(n_total)
    picks = rng.integers(np.arange(m), n_total)
    for i, j in enumerate(picks):
        pool[i], pool[j] = pool[j], pool[i]
    return SubsetIndices(np.sort(pool[:m]), n_total, seed)


def subset_raw(raw, array, subset):
    """Restrict raw data and array to ``subset`` (patch area is left unchanged)."""
    if subset.n_total != raw.n_channels or subset.n_total != len(array):
        raise ValueError(
            f"subset drawn from {subset.n_total} detectors, data has {raw.n_channels} "
            f"channels and array has {len(array)} elements"
        )
    sub = RawPAData(raw.channels[subset.indices], raw.dt, raw.t0, raw.sound_speed)
    return sub, array.take(subset.indices)


@dataclass(frozen=True)
class Plane:
    """One grid plane, e.g. ``Plane(grid, 'z', 64)``."""

    grid: VolumeGrid
    axis: object
    index: int


@dataclass(frozen=True)
class MapTarget:
    """Maximum amplitude projection of the whole grid along ``axis``."""

    grid: VolumeGrid
    axis: object


def reconstruct_target(raw, array, target, threads=1):
    """Reconstruct onto a :class:`Plane` or :class:`MapTarget` (2-D) or a grid (3-D)."""
    if isinstance(target, MapTarget):
        return map_projection(reconstruct(raw, array, target.grid, threads), target.axis).values
    if isinstance(target, Plane):
        return reconstruct_slice(raw, array, target.grid, axis_index(target.axis), target.index, threads).values
    return reconstruct(raw, array, target, threads).values


@dataclass
class CVMap:
    cv: np.ndarray  # percent, NaN where undefined
    mean: np.ndarray
    valid: np.ndarray
    n_samples: int
    target: object = None


class CVAccumulator:
    """Streaming mean / population variance (Welford) over reconstructions."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.n == 0:
            self.mean = np.zeros_like(x)
            self.m2 = np.zeros_like(x)
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def result(self, rel_eps=1e-6):
        if self.n < 2:
            raise ValueError("need at least two samples")
        sigma = np.sqrt(np.maximum(self.m2 / self.n, 0.0))
        amp = np.abs(self.mean)
        valid = amp >= rel_eps * amp.max() if amp.max() > 0 else np.zeros(amp.shape, bool)
        cv = np.full(amp.shape, np.nan)
        cv[valid] = sigma[valid] / amp[valid] * 100.0
        return CVMap(cv, self.mean.copy(), valid, self.n)


def cv_analysis(raw, array, target, m, n_trials, seed, threads=1):
    """CV of reconstructed values over ``n_trials`` random ``m``-detector subsets.

    Trial ``t`` uses subset seed ``seed + t``; trials are folded in index order.
    """
    if n_trials < 2:
        raise ValueError("n_trials must be at least 2")
    acc = CVAccumulator()
    for trial in range(n_trials):
        subset = random_subset(raw.n_channels, m, seed + trial)
        sub_raw, sub_array = subset_raw(raw, array, subset)
        acc.update(reconstruct_target(sub_raw, sub_array, target, threads))
    result = acc.result()
    result.target = target
    return result


def region_masks(truth, recon, artifact_fraction=0.1):
    """Signal = truth support dilated by one voxel; artifact = strong response elsewhere."""
    from scipy import ndimage

    truth = np.asarray(truth)
    recon = np.asarray(recon)
    structure = ndimage.generate_binary_structure(truth.ndim, truth.ndim)
    signal = ndimage.binary_dilation(truth > 0, structure=structure)
    artifact = (np.abs(recon) > artifact_fraction * np.abs(recon).max()) & ~signal
    return signal, artifact
