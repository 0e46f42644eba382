"""Experiment configuration: one JSON document per experiment.

Every validation failure raises :class:`ConfigError` carrying the dotted path
of the offending field (``zsa2a.lr``, ``array.subsample`` ...).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .forward import SOUND_SPEED_WATER, PhantomSpec, vessel_tree
from .geometry import fibonacci_sphere_array, hemisphere, make_grid, subsample_uniform
from .zsa2a import TrainConfig

TARGET_MODES = ("slice", "map", "map_from_slices", "volume")


def _num(doc, key, path, kind=float, minimum=None, strict=False, default=None, optional=False):
    value = doc.get(key, default)
    where = f"{path}.{key}" if path else key
    if value is None:
        if optional:
            return None
        raise ConfigError(where, "is required")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(where, f"must be a number, got {value!r}")
    if kind is int and value != int(value):
        raise ConfigError(where, f"must be an integer, got {value!r}")
    value = kind(value)
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(where, f"must be {'>' if strict else '>='} {minimum}, got {value}")
    return value


def _section(doc, key):
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(key, "must be an object")
    return value


def _unknown(doc, allowed, path):
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


@dataclass(frozen=True)
class PhantomConfig:
    file: str | None = None
    generator: str | None = None
    seed: int = 0
    inline: dict | None = None

    def load(self):
        if self.file is not None:
            return PhantomSpec.load(self.file)
        if self.inline is not None:
            return PhantomSpec.from_dict(self.inline)
        return vessel_tree(self.seed)


@dataclass(frozen=True)
class ArrayConfig:
    n: int = 256
    radius: float = 60.0
    subsample: int = 64
    hemisphere: bool = False

    def full(self):
        arr = fibonacci_sphere_array(self.n, self.radius)
        return hemisphere(arr) if self.hemisphere else arr

    def sparse(self, full=None):
        full = self.full() if full is None else full
        return subsample_uniform(full, self.subsample)


@dataclass(frozen=True)
class GridConfig:
    center: tuple = (0.0, 0.0, 0.0)
    half_extent: float = 6.4
    spacing: float = 0.1

    def grid(self):
        return make_grid(self.center, self.half_extent, self.spacing)


@dataclass(frozen=True)
class ForwardConfig:
    sound_speed: float = SOUND_SPEED_WATER
    dt: float | None = None  # default: one voxel of travel per sample
    t0: float = 0.0
    t_count: int | None = None  # default: just enough to cover the grid


@dataclass(frozen=True)
class TargetConfig:
    mode: str = "slice"
    axis: str = "z"
    index: int | None = None  # default: central plane


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    array: ArrayConfig = field(default_factory=ArrayConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    forward: ForwardConfig = field(default_factory=ForwardConfig)
    zsa2a: TrainConfig = field(default_factory=TrainConfig)
    subset_size: int = 50
    target: TargetConfig = field(default_factory=TargetConfig)
    cv_trials: int = 200
    metrics: dict = field(default_factory=lambda: {"psnr": True, "cnr": True})
    output_dir: str = "out"
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    def with_seed(self, seed):
        return replace(self, seed=seed, zsa2a=replace(self.zsa2a, seed=seed))


def parse_config(doc, base_dir="."):
    """Validate a config mapping; relative file paths resolve against ``base_dir``."""
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    _unknown(doc, ("phantom", "array", "grid", "forward", "zsa2a", "target", "cv_trials", "metrics",
                   "output_dir", "seed"), "")

    ph = _section(doc, "phantom")
    _unknown(ph, ("file", "generator", "seed", "kind", "primitives"), "phantom")
    if "file" in ph:
        path = ph["file"]
        if not isinstance(path, str):
            raise ConfigError("phantom.file", "must be a path string")
        path = os.path.join(base_dir, path)
        if not os.path.isfile(path):
            raise ConfigError("phantom.file", f"file not found: {path}")
        phantom = PhantomConfig(file=path)
    elif "primitives" in ph:
        try:
            PhantomSpec.from_dict(ph)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError("phantom.primitives", str(exc)) from None
        phantom = PhantomConfig(inline=dict(ph))
    else:
        gen = ph.get("generator", "vessel_tree")
        if gen != "vessel_tree":
            raise ConfigError("phantom.generator", f"unknown generator {gen!r}")
        phantom = PhantomConfig(generator=gen, seed=_num(ph, "seed", "phantom", int, 0, default=doc.get("seed", 0)))

    ar = _section(doc, "array")
    _unknown(ar, [f.name for f in fields(ArrayConfig)], "array")
    n = _num(ar, "n", "array", int, 1, default=256)
    hemi = ar.get("hemisphere", False)
    if not isinstance(hemi, bool):
        raise ConfigError("array.hemisphere", "must be true or false")
    n_eff = len(ArrayConfig(n, 1.0, 1, hemi).full()) if hemi else n
    sub = _num(ar, "subsample", "array", int, 1, default=min(64, n_eff))
    if sub > n_eff:
        raise ConfigError("array.subsample", f"must be <= {n_eff} (detectors in the array), got {sub}")
    array = ArrayConfig(n, _num(ar, "radius", "array", float, 0, strict=True, default=60.0), sub, hemi)

    gr = _section(doc, "grid")
    _unknown(gr, [f.name for f in fields(GridConfig)], "grid")
    center = gr.get("center", [0.0, 0.0, 0.0])
    if isinstance(center, (int, float)) and not isinstance(center, bool):
        center = [center] * 3
    if not (isinstance(center, list) and len(center) == 3 and all(isinstance(v, (int, float)) for v in center)):
        raise ConfigError("grid.center", "must be a number or a list of three numbers")
    grid = GridConfig(
        tuple(float(v) for v in center),
        _num(gr, "half_extent", "grid", float, 0, strict=True, default=6.4),
        _num(gr, "spacing", "grid", float, 0, strict=True, default=0.1),
    )
    try:
        g = grid.grid()
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from None
    if max(abs(v) for v in grid.center) + grid.half_extent * 3 ** 0.5 >= array.radius:
        raise ConfigError("grid.half_extent", "grid must lie strictly inside the detector sphere")

    fw = _section(doc, "forward")
    _unknown(fw, [f.name for f in fields(ForwardConfig)], "forward")
    forward = ForwardConfig(
        _num(fw, "sound_speed", "forward", float, 0, strict=True, default=SOUND_SPEED_WATER),
        _num(fw, "dt", "forward", float, 0, strict=True, optional=True),
        _num(fw, "t0", "forward", float, 0, default=0.0),
        _num(fw, "t_count", "forward", int, 3, optional=True),
    )

    zs = _section(doc, "zsa2a")
    _unknown(zs, ("iterations", "lr", "step_size", "gamma", "k_subsets", "channels", "subset_size", "seed"), "zsa2a")
    seed = _num(doc, "seed", "", int, 0, default=0)
    train = {
        "iterations": _num(zs, "iterations", "zsa2a", int, 1, default=3000),
        "lr": _num(zs, "lr", "zsa2a", float, 0, strict=True, default=0.01),
        "step_size": _num(zs, "step_size", "zsa2a", int, 1, default=1000),
        "gamma": _num(zs, "gamma", "zsa2a", float, 0, strict=True, default=0.6),
        "k_subsets": _num(zs, "k_subsets", "zsa2a", int, 2, default=2),
        "channels": _num(zs, "channels", "zsa2a", int, 1, default=48),
        "seed": _num(zs, "seed", "zsa2a", int, 0, default=seed),
    }
    if train["gamma"] > 1:
        raise ConfigError("zsa2a.gamma", f"must be <= 1, got {train['gamma']}")
    m = _num(zs, "subset_size", "zsa2a", int, 1, default=round(0.78 * sub))
    if m > sub:
        raise ConfigError("zsa2a.subset_size", f"must be <= {sub} (sparse array size), got {m}")

    tg = _section(doc, "target")
    _unknown(tg, [f.name for f in fields(TargetConfig)], "target")
    mode = tg.get("mode", "slice")
    if mode not in TARGET_MODES:
        raise ConfigError("target.mode", f"must be one of {', '.join(TARGET_MODES)}, got {mode!r}")
    axis = tg.get("axis", "z")
    if axis not in ("x", "y", "z"):
        raise ConfigError("target.axis", f"must be x, y or z, got {axis!r}")
    index = _num(tg, "index", "target", int, 0, optional=True)
    length = g.dims["xyz".index(axis)]
    if index is not None and index >= length:
        raise ConfigError("target.index", f"must be < {length}, got {index}")
    target = TargetConfig(mode, axis, index)

    cv_trials = _num(doc, "cv_trials", "", int, 2, default=200)
    metrics = doc.get("metrics", {"psnr": True, "cnr": True})
    if not isinstance(metrics, dict) or any(k not in ("psnr", "cnr") or not isinstance(v, bool) for k, v in metrics.items()):
        raise ConfigError("metrics", "must map 'psnr'/'cnr' to true or false")
    out = doc.get("output_dir", "out")
    if not isinstance(out, str):
        raise ConfigError("output_dir", "must be a path string")

    return ExperimentConfig(
        phantom, array, grid, forward, TrainConfig(**train), m, target, cv_trials,
        {"psnr": True, "cnr": True, **metrics}, os.path.join(base_dir, out), seed,
    )


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return parse_config(doc, os.path.dirname(os.path.abspath(path)))
