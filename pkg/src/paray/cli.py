"""Command-line pipeline: simulate | reconstruct | cvmap | clean | metrics.

All commands read one JSON experiment config (``--config``; built-in desk
defaults otherwise) and write into its output directory. Flags override
config fields. Exit codes: 0 ok, 2 config error, 3 precondition error,
4 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import io, plotting
from .config import load_config, parse_config
from .errors import ConfigError, PreconditionError, TrainingDivergedError, UndefinedMetricError
from .forward import RawPAData, rasterize_phantom, required_samples, simulate_signals
from .geometry import uniform_indices
from .metrics import default_masks, evaluate
from .perturb import MapTarget, Plane, cv_analysis, random_subset, reconstruct_target, region_masks, subset_raw
from .ubp import Volume, axis_index, map_projection
from .zsa2a import run_zsa2a

log = logging.getLogger("paray")

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_DIVERGED = 0, 2, 3, 4


# --- shared plumbing -----------------------------------------------------------

def _slice_arg(text):
    axis, _, index = text.partition(":")
    if axis not in ("x", "y", "z") or not index.isdigit():
        raise argparse.ArgumentTypeError(f"expected AXIS:INDEX such as z:64, got {text!r}")
    return axis, int(index)


def _axis_arg(text):
    if text not in ("x", "y", "z"):
        raise argparse.ArgumentTypeError(f"axis must be x, y or z, got {text!r}")
    return text


def _default_threads():
    value = os.environ.get("PARAY_THREADS", "1")
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError("PARAY_THREADS", f"must be an integer, got {value!r}") from None
    if threads < 1:
        raise ConfigError("PARAY_THREADS", f"must be >= 1, got {threads}")
    return threads


def resolve_config(args):
    """Load the config and apply flag overrides (re-validated as a whole)."""
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config({}, os.getcwd())
    doc = cfg.to_dict()
    doc["phantom"] = _phantom_doc(cfg)
    doc["zsa2a"]["subset_size"] = cfg.subset_size
    del doc["subset_size"]
    if args.seed is not None:
        doc["seed"] = args.seed
        doc["zsa2a"]["seed"] = args.seed
    if args.out is not None:
        doc["output_dir"] = os.path.abspath(args.out)
    # reconstruct takes its subset size straight from the flag; it may exceed the sparse array
    subset_size = getattr(args, "subset_size", None) if args.command != "reconstruct" else None
    if getattr(args, "k", None) is not None:
        doc["array"]["subsample"] = args.k
        if subset_size is None:
            doc["zsa2a"]["subset_size"] = max(1, min(round(0.78 * args.k), args.k - 1))
    if subset_size is not None:
        doc["zsa2a"]["subset_size"] = subset_size
    if getattr(args, "trials", None) is not None:
        doc["cv_trials"] = args.trials
    if getattr(args, "iterations", None) is not None:
        doc["zsa2a"]["iterations"] = args.iterations
    if getattr(args, "subsets", None) is not None:
        doc["zsa2a"]["k_subsets"] = args.subsets
    target = doc["target"]
    if getattr(args, "slice", None) is not None:
        target.update(mode="slice", axis=args.slice[0], index=args.slice[1])
    elif getattr(args, "map", None) is not None:
        target.update(mode="map_from_slices" if getattr(args, "from_slices", False) else "map", axis=args.map)
    elif getattr(args, "volume", False):
        target.update(mode="volume")
    doc["grid"]["center"] = list(doc["grid"]["center"])
    doc["forward"] = {k: v for k, v in doc["forward"].items() if v is not None}
    doc["target"] = {k: v for k, v in target.items() if v is not None}
    return parse_config(doc, os.getcwd())


def _phantom_doc(cfg):
    ph = cfg.phantom
    if ph.file is not None:
        return {"file": os.path.abspath(ph.file)}
    if ph.inline is not None:
        return dict(ph.inline)
    return {"generator": ph.generator or "vessel_tree", "seed": ph.seed}


def _forward_params(cfg, grid, array):
    c = cfg.forward.sound_speed
    dt = cfg.forward.dt if cfg.forward.dt is not None else grid.spacing / c
    t_count = cfg.forward.t_count
    if t_count is None:
        t_count = required_samples(grid, array, dt, c, cfg.forward.t0)
    return dt, c, t_count


def make_target(cfg, grid):
    t = cfg.target
    if t.mode == "slice":
        ax = axis_index(t.axis)
        return Plane(grid, t.axis, grid.dims[ax] // 2 if t.index is None else t.index)
    if t.mode == "map":
        return MapTarget(grid, t.axis)
    return grid


def target_tag(cfg, target):
    if isinstance(target, Plane):
        return f"{target.axis}{target.index}"
    if isinstance(target, MapTarget):
        return f"map{target.axis}"
    if cfg.target.mode == "map_from_slices":
        return f"map{cfg.target.axis}_slices"
    return "volume"


def _target_meta(cfg, target):
    meta = {"mode": cfg.target.mode, "axis": cfg.target.axis}
    if isinstance(target, Plane):
        meta["index"] = target.index
    return meta


def _out_dir(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _load_inputs(cfg):
    """Raw data written by ``simulate`` plus the arrays rebuilt from the config."""
    out = cfg.output_dir
    base = os.path.join(out, "raw")
    if not os.path.exists(base + ".f32"):
        raise PreconditionError(f"no raw data at {base}.f32; run 'paray simulate' with this config first")
    raw = io.load_raw(base)
    full = cfg.array.full()
    if raw.n_channels != len(full):
        raise PreconditionError(
            f"raw data has {raw.n_channels} channels but the configured array has {len(full)} detectors"
        )
    return raw, full, cfg.grid.grid()


def _sparse(cfg, raw, full):
    idx = uniform_indices(len(full), cfg.array.subsample)
    return RawPAData(raw.channels[idx], raw.dt, raw.t0, raw.sound_speed), cfg.array.sparse(full)


def _truth_for(cfg, target):
    path = os.path.join(cfg.output_dir, "truth")
    if not os.path.exists(path + ".f32"):
        return None
    truth = io.load_volume(path).values
    if isinstance(target, Plane):
        return np.take(truth, target.index, axis=axis_index(target.axis))
    if isinstance(target, MapTarget) or cfg.target.mode == "map_from_slices":
        return map_projection(truth, cfg.target.axis).values
    return truth


def _save_array(out, name, values, cfg, target, grid, figure=True, **extra):
    base = os.path.join(out, name)
    values = np.asarray(values)
    if values.ndim == 2:
        io.save_image(base, values, pixel_spacing=grid.spacing, target=_target_meta(cfg, target), **extra)
        if figure:
            plotting.plot_panels({name: values}, base + ".png")
    else:
        io.save_volume(base, Volume(grid, values), **extra)
        if figure:
            plotting.plot_panels({f"{name} (MAP {cfg.target.axis})": map_projection(values, cfg.target.axis).values},
                                 base + ".png")
    return base


# --- commands --------------------------------------------------------------------

def cmd_simulate(cfg, threads=1):
    out = _out_dir(cfg)
    grid = cfg.grid.grid()
    spec = cfg.phantom.load()
    full = cfg.array.full()
    source = rasterize_phantom(spec, grid)
    dt, c, t_count = _forward_params(cfg, grid, full)
    log.info("simulating %d detectors x %d samples", len(full), t_count)
    raw = simulate_signals(source, full, dt, t_count, c, cfg.forward.t0, threads=threads)
    spec.save(os.path.join(out, "phantom.json"))
    full.save(os.path.join(out, "array.json"))
    io.save_raw(os.path.join(out, "raw"), raw)
    io.save_volume(os.path.join(out, "truth"), Volume(grid, source.values))
    plotting.plot_panels({f"ground truth (MAP {cfg.target.axis})": map_projection(source.values, cfg.target.axis).values},
                         os.path.join(out, "truth.png"))
    io.write_json(os.path.join(out, "config.json"), cfg.to_dict())
    return raw


def cmd_reconstruct(cfg, threads=1, sparse=False, subset_size=None):
    """Reference (full array), sparse (``--k``) or random-subset reconstruction."""
    out = _out_dir(cfg)
    raw, array, grid = _load_inputs(cfg)
    name = "full"
    if sparse:
        raw, array = _sparse(cfg, raw, array)
        name = f"k{len(array)}"
    extra = {}
    if subset_size is not None:
        if not 1 <= subset_size <= raw.n_channels:
            raise PreconditionError(f"subset size {subset_size} outside 1..{raw.n_channels}")
        s = random_subset(raw.n_channels, subset_size, cfg.seed)
        raw, array = subset_raw(raw, array, s)
        name += f"_m{subset_size}_s{cfg.seed}"
        extra["subset"] = {"indices": s.indices.tolist(), "n_total": s.n_total, "seed": s.seed}
    target = make_target(cfg, grid)
    values = reconstruct_target(raw, array, target, threads)
    if cfg.target.mode == "map_from_slices":
        values = map_projection(values, cfg.target.axis).values
    base = _save_array(out, f"recon_{name}_{target_tag(cfg, target)}", values, cfg, target, grid, **extra)
    return base, values


def cmd_cvmap(cfg, threads=1):
    out = _out_dir(cfg)
    raw, full, grid = _load_inputs(cfg)
    raw, array = _sparse(cfg, raw, full)
    if not 1 <= cfg.subset_size <= raw.n_channels:
        raise PreconditionError(f"subset size {cfg.subset_size} exceeds the {raw.n_channels} available detectors")
    if cfg.target.mode == "map_from_slices":
        raise ConfigError("target.mode", "CV maps are computed on slices, MAP images or volumes")
    target = make_target(cfg, grid)
    result = cv_analysis(raw, array, target, cfg.subset_size, cfg.cv_trials, cfg.seed, threads)
    cv, mean = result.cv, result.mean
    tag = f"cv_{target_tag(cfg, target)}"
    meta = {"trials": cfg.cv_trials, "subset_size": cfg.subset_size, "n_detectors": raw.n_channels, "seed": cfg.seed}
    base = os.path.join(out, tag)
    if cv.ndim == 2:
        io.save_image(base, cv, valid=result.valid, pixel_spacing=grid.spacing, target=_target_meta(cfg, target),
                      units="percent", **meta)
        io.save_image(base + "_mean", mean, pixel_spacing=grid.spacing, target=_target_meta(cfg, target), **meta)
        plotting.plot_cv_map(result, base + ".png")
    else:
        io.save_volume(base, Volume(grid, cv), units="percent", **meta)
        io.save_volume(base + "_mean", Volume(grid, mean), **meta)
    summary = {"trials": cfg.cv_trials, "subset_size": cfg.subset_size, "valid_fraction": float(result.valid.mean())}
    truth = _truth_for(cfg, target)
    if truth is not None:
        signal, artifact = region_masks(truth, mean)
        for label, mask in (("signal", signal), ("artifact", artifact)):
            vals = cv[mask & result.valid]
            summary[f"median_cv_{label}"] = float(np.median(vals)) if vals.size else None
        if summary.get("median_cv_signal") and summary.get("median_cv_artifact") is not None:
            summary["ratio"] = summary["median_cv_artifact"] / summary["median_cv_signal"]
    io.write_json(base + "_summary.json", summary)
    return result, summary


def _metric_row(cfg, reference, test, label, ref_label, masks):
    report = evaluate(reference, test, label, ref_label, masks if cfg.metrics.get("cnr", True) else None)
    row = report.to_dict()
    if not cfg.metrics.get("psnr", True):
        row.pop("psnr_db")
        row.pop("mse")
    return row


def cmd_clean(cfg, threads=1):
    out = _out_dir(cfg)
    raw, full, grid = _load_inputs(cfg)
    target = make_target(cfg, grid)
    slice_axis = cfg.target.axis
    sp_raw, sp_array = _sparse(cfg, raw, full)
    if cfg.subset_size >= len(sp_array):
        raise ConfigError("zsa2a.subset_size", f"training subsets must be smaller than the {len(sp_array)}-detector array")
    log.info("training on %d-detector subsets of the %d-detector array", cfg.subset_size, len(sp_array))
    result = run_zsa2a(sp_raw, sp_array, target, cfg.subset_size, cfg.zsa2a, threads, slice_axis=slice_axis)
    reference = reconstruct_target(raw, full, target, threads)
    recon, clean, artifact = result.recon, result.clean, result.artifact
    if cfg.target.mode == "map_from_slices":
        reference, recon, clean = (map_projection(v, slice_axis).values for v in (reference, recon, clean))
        artifact = None
    tag = target_tag(cfg, target)
    subsets = [{"seed": s.seed, "indices": s.indices.tolist()} for s in result.subsets]
    _save_array(out, f"reference_{tag}", reference, cfg, target, grid, figure=False)
    _save_array(out, f"recon_{tag}", recon, cfg, target, grid, figure=False)
    _save_array(out, f"clean_{tag}", clean, cfg, target, grid, figure=False, subsets=subsets)
    if artifact is not None:
        _save_array(out, f"artifact_{tag}", artifact, cfg, target, grid, figure=False)

    if len(result.models) == 1:
        model = result.models[0]
        io.save_model(os.path.join(out, f"model_{tag}"), model)
        io.write_loss_log(os.path.join(out, f"loss_{tag}.csv"), model.history)
        plotting.plot_loss(model.history, os.path.join(out, f"loss_{tag}.png"))
    else:
        model_dir = os.path.join(out, f"models_{tag}")
        os.makedirs(model_dir, exist_ok=True)
        for i, model in enumerate(result.models):
            io.save_model(os.path.join(model_dir, f"slice_{i:03d}"), model)
            io.write_loss_log(os.path.join(model_dir, f"slice_{i:03d}_loss.csv"), model.history)

    panels = {"reference": reference, "unprocessed": recon, "clean": clean}
    if artifact is not None:
        panels["artifact"] = artifact
    if np.ndim(recon) == 3:
        panels = {k: map_projection(v, slice_axis).values for k, v in panels.items()}
    plotting.plot_panels(panels, os.path.join(out, f"clean_{tag}.png"), shared_scale=False)

    truth = _truth_for(cfg, target)
    masks = default_masks(truth) if truth is not None else None
    rows = [
        _metric_row(cfg, reference, recon, f"unprocessed_{tag}", "reference", masks),
        _metric_row(cfg, reference, clean, f"clean_{tag}", "reference", masks),
    ]
    io.write_json(os.path.join(out, f"metrics_{tag}.json"), rows)
    for row in rows:
        io.upsert_csv(os.path.join(out, "results.csv"), row)
    return result, rows


def cmd_metrics(cfg, reference, test, truth=None, label=None):
    out = _out_dir(cfg)
    ref_vals, _ = io.read_f32(reference)
    test_vals, _ = io.read_f32(test)
    masks = None
    if truth is not None:
        truth_vals, _ = io.read_f32(truth)
        if truth_vals.ndim == 3 and np.ndim(ref_vals) == 2:
            t = cfg.target
            if t.mode == "slice":
                ax = axis_index(t.axis)
                index = truth_vals.shape[ax] // 2 if t.index is None else t.index
                truth_vals = np.take(truth_vals, index, axis=ax)
            else:
                truth_vals = map_projection(truth_vals, t.axis).values
        masks = default_masks(truth_vals)
    label = label or os.path.basename(io._base(test))
    row = _metric_row(cfg, ref_vals, test_vals, label, os.path.basename(io._base(reference)), masks)
    io.write_json(os.path.join(out, f"metrics_{label}.json"), row)
    io.upsert_csv(os.path.join(out, "results.csv"), row)
    return row


# --- argument parsing ------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment JSON (default: built-in desk setup)")
    common.add_argument("--seed", type=int, help="master seed (subsets, CV trials, network init)")
    common.add_argument("--threads", type=int, help="worker threads (default: $PARAY_THREADS or 1)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")

    def target_flags(p, volume=True):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--slice", type=_slice_arg, metavar="AXIS:INDEX", help="one grid plane, e.g. z:64")
        g.add_argument("--map", type=_axis_arg, metavar="AXIS", help="maximum amplitude projection along AXIS")
        if volume:
            g.add_argument("--volume", action="store_true", help="whole volume")

    parser = argparse.ArgumentParser(prog="paray", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="rasterise the phantom and simulate detector traces")

    p = sub.add_parser("reconstruct", parents=[common], help="back-project full, sparse or subset data")
    target_flags(p)
    p.add_argument("--k", type=int, help="use K uniformly spaced detectors (sparse array)")
    p.add_argument("--sparse", action="store_true", help="use the config's sparse array")
    p.add_argument("--subset-size", type=int, help="random subset of this size, drawn with --seed")

    p = sub.add_parser("cvmap", parents=[common], help="CV map over random detector subsets")
    target_flags(p)
    p.add_argument("--trials", type=int, help="number of random subsets (>= 2)")
    p.add_argument("--subset-size", type=int, help="detectors kept per trial")
    p.add_argument("--k", type=int, help="sparse array size")

    p = sub.add_parser("clean", parents=[common], help="train ZS-A2A and remove artifacts")
    target_flags(p)
    p.add_argument("--from-slices", action="store_true", help="with --map: MAP of per-slice cleaned volume")
    p.add_argument("--subset-size", type=int, help="detectors per training subset")
    p.add_argument("--subsets", type=int, help="number of subsets K (>= 2)")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.add_argument("--k", type=int, help="sparse array size")

    p = sub.add_parser("metrics", parents=[common], help="PSNR / CNR of a test image against a reference")
    target_flags(p, volume=False)
    p.add_argument("--reference", required=True, metavar="BASE", help="reference .f32 (with sidecar)")
    p.add_argument("--test", required=True, metavar="BASE", help="test .f32 (with sidecar)")
    p.add_argument("--truth", metavar="BASE", help="ground truth for CNR masks (volume is sliced/projected)")
    p.add_argument("--label", help="row label in the results table")
    return parser


def run(args):
    cfg = resolve_config(args)
    threads = args.threads if args.threads is not None else _default_threads()
    if threads < 1:
        raise ConfigError("--threads", f"must be >= 1, got {threads}")
    if args.command == "simulate":
        cmd_simulate(cfg, threads)
    elif args.command == "reconstruct":
        sparse = args.sparse or args.k is not None
        cmd_reconstruct(cfg, threads, sparse=sparse, subset_size=args.subset_size)
    elif args.command == "cvmap":
        cmd_cvmap(cfg, threads)
    elif args.command == "clean":
        if args.from_slices and args.map is None:
            raise ConfigError("--from-slices", "requires --map AXIS")
        cmd_clean(cfg, threads)
    else:
        cmd_metrics(cfg, args.reference, args.test, args.truth, args.label)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, FileNotFoundError, UndefinedMetricError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
