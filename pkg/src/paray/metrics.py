"""PSNR / CNR image-quality metrics."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError

PSNR_CAP_DB = 200.0


def psnr(reference, test):
    """PSNR in dB after mapping both images through the reference's [min, max] -> [0, 1].

    Not symmetric: swapping the arguments changes the normalisation.
    Returns ``inf`` for identical images.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {tst.shape}")
    lo, hi = ref.min(), ref.max()
    if hi <= lo:
        raise ValueError("reference image is constant")
    mse = np.mean(((tst - lo) / (hi - lo) - (ref - lo) / (hi - lo)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def cnr(image, signal, background):
    """``|mean_s - mean_b| / std_b`` with population standard deviation."""
    image = np.asarray(image, dtype=np.float64)
    signal = np.asarray(signal, dtype=bool)
    background = np.asarray(background, dtype=bool)
    if signal.shape != image.shape or background.shape != image.shape:
        raise ValueError("masks must match the image shape")
    if not signal.any() or not background.any():
        raise ValueError("signal and background masks must be non-empty")
    if np.any(signal & background):
        raise ValueError("signal and background masks overlap")
    sigma_b = image[background].std()
    if sigma_b == 0:
        raise UndefinedMetricError("background standard deviation is zero")
    return abs(image[signal].mean() - image[background].mean()) / sigma_b


def default_masks(truth, guard=2):
    """Signal = support of ``truth`` dilated by one voxel; background = everything
    farther than ``guard`` voxels from the signal mask."""
    truth = np.asarray(truth)
    structure = ndimage.generate_binary_structure(truth.ndim, truth.ndim)
    signal = ndimage.binary_dilation(truth > 0, structure=structure)
    if not signal.any():
        raise ValueError("ground truth has empty support")
    # iterations=0 would mean "dilate until nothing changes" in scipy
    near = ndimage.binary_dilation(signal, structure=structure, iterations=guard) if guard > 0 else signal
    background = ~near
    if not background.any():
        raise ValueError("background mask is empty")
    return signal, background


@dataclass
class MetricsReport:
    label: str
    reference: str
    psnr_db: float
    mse: float
    cnr: float | None = None

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = PSNR_CAP_DB
        return d

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def append_csv(self, path):
        row = self.to_dict()
        new = not os.path.exists(path)
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                writer.writeheader()
            writer.writerow(row)


def evaluate(reference, test, label="test", reference_label="reference", masks=None):
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    value = psnr(ref, tst)
    mse = 0.0 if math.isinf(value) else 10.0 ** (-value / 10.0)
    contrast = cnr(tst, *masks) if masks is not None else None
    return MetricsReport(label, reference_label, value, mse, contrast)
