"""On-disk formats.

Every array is written as ``<base>.f32`` (little-endian float32, C order) next
to a ``<base>.json`` sidecar that is enough to load it back. 2-D images can
also be exported as 16-bit PGM with the min/max scaling kept in the sidecar.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

try:
    import fcntl
except ImportError:  # non-POSIX: no locking
    fcntl = None

from .forward import RawPAData, SourceVolume
from .geometry import VolumeGrid
from .ubp import Image2D, Volume

F32 = np.dtype("<f4")


def _base(path):
    path = os.fspath(path)
    for ext in (".f32", ".json"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_f32(base, values, sidecar):
    base = _base(base)
    values = np.ascontiguousarray(values, dtype=F32)
    values.tofile(base + ".f32")
    write_json(base + ".json", {**sidecar, "shape": list(values.shape), "dtype": "<f4"})
    return base


def read_f32(base):
    base = _base(base)
    sidecar = read_json(base + ".json")
    values = np.fromfile(base + ".f32", dtype=F32)
    return values.reshape(sidecar["shape"]), sidecar


def save_raw(base, raw):
    return write_f32(base, raw.channels, {"kind": "raw", **raw.sidecar()})


def load_raw(base):
    values, meta = read_f32(base)
    if values.shape != (meta["n_channels"], meta["n_samples"]):
        raise ValueError(f"{base}: sidecar dimensions do not match the data")
    return RawPAData(values.astype(np.float64), meta["dt"], meta["t0"], meta["sound_speed"])


def save_volume(base, volume, **extra):
    return write_f32(base, volume.values, {"kind": "volume", **volume.grid.to_dict(), **extra})


def load_volume(base):
    values, meta = read_f32(base)
    grid = VolumeGrid.from_dict(meta)
    return Volume(grid, values.astype(np.float64))


def load_source(base):
    vol = load_volume(base)
    return SourceVolume(vol.grid, vol.values)


def save_image(base, image, pgm=True, valid=None, **extra):
    """Write an image as f32 (+ sidecar) and optionally a 16-bit PGM.

    NaNs stay NaN in the f32 file; in the PGM they become 0 and ``valid``
    (default: finite pixels) is written as a PBM bitmask.
    """
    values = np.asarray(image.values if isinstance(image, Image2D) else image, dtype=np.float64)
    spacing = image.pixel_spacing if isinstance(image, Image2D) else extra.pop("pixel_spacing", 1.0)
    meta = {"kind": "image", "rows": values.shape[0], "cols": values.shape[1], "pixel_spacing": spacing, **extra}
    if pgm:
        mask = np.isfinite(values) if valid is None else np.asarray(valid, dtype=bool)
        lo, hi = write_pgm(_base(base) + ".pgm", values, mask)
        meta["pgm"] = {"min": lo, "max": hi}
        if valid is not None or not mask.all():
            write_pbm(_base(base) + ".valid.pbm", mask)
    return write_f32(base, values, meta)


def load_image(base):
    values, meta = read_f32(base)
    return Image2D(values.astype(np.float64), meta.get("pixel_spacing", 1.0))


def write_pgm(path, values, mask=None):
    """16-bit binary PGM, min-max scaled over ``mask``; returns (min, max)."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.isfinite(values) if mask is None else mask & np.isfinite(values)
    if mask.any():
        lo, hi = float(values[mask].min()), float(values[mask].max())
    else:
        lo, hi = 0.0, 0.0
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    scaled = np.where(mask, np.rint((np.where(mask, values, lo) - lo) * scale), 0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{values.shape[1]} {values.shape[0]}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return lo, hi


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    pixels = np.frombuffer(parts[4], dtype=dtype, count=rows * cols)
    return pixels.reshape(rows, cols)


def write_pbm(path, mask):
    mask = np.asarray(mask, dtype=bool)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{mask.shape[1]} {mask.shape[0]}\n".encode("ascii"))
        fh.write(np.packbits(mask, axis=1).tobytes())


def read_pbm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=3)
    cols, rows = int(parts[1]), int(parts[2])
    packed = np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, -1)
    return np.unpackbits(packed, axis=1)[:, :cols].astype(bool)


def save_model(base, model):
    """Network weights as flat f32 with a JSON header (shapes, normalisation, config)."""
    p = model.params
    header = {
        "kind": "zsa2a-network",
        "C": p.channels,
        "layers": {name: list(a.shape) for name, a in zip(("w1", "b1", "w2", "b2", "w3", "b3"), p.arrays())},
        "normalization": {"mean": model.mean, "std": model.std},
        "config": model.config.to_dict(),
    }
    return write_f32(base, p.flat(), header)


def load_model(base):
    from .zsa2a import NetworkParams, TrainConfig, TrainedModel

    flat, meta = read_f32(base)
    params = NetworkParams.from_flat(flat, meta["C"], np.float32)
    norm = meta["normalization"]
    return TrainedModel(params, norm["mean"], norm["std"], TrainConfig(**meta["config"]))


def write_loss_log(path, history):
    from .zsa2a import HISTORY_COLUMNS

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([int(row[0]), repr(float(row[1]))] + [repr(float(v)) for v in row[2:]])


def upsert_csv(path, row, key=("label", "reference")):
    """Append ``row`` to a CSV table, replacing an existing row with the same key.

    Replacing instead of duplicating keeps reruns byte-identical. The file is
    rewritten under an exclusive lock so concurrent writers serialise.
    """
    ident = tuple(str(row[k]) for k in key)
    with open(path, "a+", newline="") as fh:
        if fcntl is not None:
            fcntl.flock(fh, fcntl.LOCK_EX)
        fh.seek(0)
        rows = [r for r in csv.DictReader(fh) if tuple(r.get(k) for k in key) != ident]
        rows.append({k: "" if v is None else v for k, v in row.items()})
        fieldnames = list(dict.fromkeys(k for r in rows for k in r))
        fh.seek(0)
        fh.truncate()
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
