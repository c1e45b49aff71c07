"""Command-line pipeline: learn operators, synthesize inputs, reconstruct, score.

Subcommands
-----------
learn       train a coupled operator pair from a manifest of image pairs
downsample  blur + decimate a ground-truth depth map (optionally punch holes)
upscale     guided super-resolution / inpainting of a low-resolution depth map
evaluate    bad-pixel percentage and 8-bit RMSE of an estimate vs ground truth

Every option may also come from a plain-text config file of `key=value`
lines (`--config`); explicit flags win, unknown keys are rejected.  The
effective settings are echoed to stderr at startup for provenance.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import imaging, learning, operators, reconstruction
from .manifold import CgConfig, OptimizationError

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="guideddepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    common = dict(default=None, help=argparse.SUPPRESS)

    learn_p = sub.add_parser("learn", help="train a coupled operator pair")
    learn_p.add_argument("--pairs", type=Path, required=True,
                         help="manifest: one 'intensity_path depth_path' pair per line")
    learn_p.add_argument("--out", type=Path, required=True,
                         help="output operator file (.jido)")
    learn_p.add_argument("--patch-side", type=int, **common)
    learn_p.add_argument("--redundancy", type=int, **common)
    learn_p.add_argument("--samples", type=int, **common)
    learn_p.add_argument("--nu", type=float, **common)
    learn_p.add_argument("--kappa", type=float, **common)
    learn_p.add_argument("--mu", type=float, **common)
    learn_p.add_argument("--iterations", type=int, **common)
    learn_p.add_argument("--seed", type=int, **common)
    learn_p.add_argument("--trace", type=Path, default=None,
                         help="learning trace CSV (default: <out>.trace.csv)")

    down_p = sub.add_parser("downsample", help="make a low-resolution depth map")
    down_p.add_argument("--input", type=Path, required=True, help="HR depth map")
    down_p.add_argument("--out", type=Path, required=True)
    down_p.add_argument("--factor", type=int, **common)
    down_p.add_argument("--mask", type=Path, default=None,
                        help="hole image: nonzero pixels are removed from the output")

    up_p = sub.add_parser("upscale", help="guided depth super-resolution")
    up_p.add_argument("--depth", type=Path, required=True, help="LR depth map")
    up_p.add_argument("--intensity", type=Path, required=True,
                      help="registered HR intensity image")
    up_p.add_argument("--ops", type=Path, required=True, help="operator file")
    up_p.add_argument("--out", type=Path, required=True)
    up_p.add_argument("--factor", type=int, **common)
    up_p.add_argument("--fidelity", choices=("iid", "mahalanobis"), **common)
    up_p.add_argument("--lambda-stages", type=int, **common)
    up_p.add_argument("--iters", type=int, **common)
    up_p.add_argument("--bit-depth", type=int, choices=(8, 16), **common)
    up_p.add_argument("--gt", type=Path, default=None,
                      help="ground truth for the rel_rmse trace column")
    up_p.add_argument("--trace", type=Path, default=None, help="solver trace CSV")

    eval_p = sub.add_parser("evaluate", help="score an estimate against ground truth")
    eval_p.add_argument("--estimate", type=Path, required=True)
    eval_p.add_argument("--gt", type=Path, required=True)
    eval_p.add_argument("--delta", type=float, **common)

    for p in (learn_p, down_p, up_p, eval_p):
        p.add_argument("--config", type=Path, default=None,
                       help="key=value settings file (flags override)")
        p.add_argument("--threads", type=int, default=None,
                       help="cap the BLAS thread pool")
    return parser


_DEFAULTS = {
    "learn": {
        "patch_side": 5,
        "redundancy": 2,
        "samples": 15000,
        "nu": 10.0,
        "kappa": 9.0e4,
        "mu": 1.0e2,
        "iterations": 3000,
        "seed": 0,
    },
    "downsample": {"factor": 2},
    "upscale": {
        "factor": 2,
        "fidelity": "iid",
        "lambda_stages": 5,
        "iters": 100,
        "bit_depth": 8,
    },
    "evaluate": {"delta": 1.0},
}

_CASTS = {
    "patch_side": int, "redundancy": int, "samples": int, "iterations": int,
    "seed": int, "factor": int, "lambda_stages": int, "iters": int,
    "bit_depth": int, "threads": int,
    "nu": float, "kappa": float, "mu": float, "delta": float,
    "fidelity": str,
}


def _read_config(path: Path) -> dict:
    values = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _settle(ns: argparse.Namespace, command: str) -> dict:
    """Merge flags over config-file values over defaults; print the result."""
    settings = dict(_DEFAULTS[command])
    if ns.config is not None:
        for key, raw in _read_config(ns.config).items():
            if key not in settings:
                raise UsageError(f"unknown config key '{key}' for '{command}'")
            try:
                settings[key] = _CASTS[key](raw)
            except ValueError:
                raise UsageError(f"bad value for config key '{key}': '{raw}'") from None
    for key in settings:
        flag_value = getattr(ns, key, None)
        if flag_value is not None:
            settings[key] = flag_value
    for key, value in sorted(settings.items()):
        print(f"# {command}.{key} = {value}", file=sys.stderr)
    return settings


def _limit_threads(ns: argparse.Namespace):
    if ns.threads is None:
        return None
    if ns.threads < 1:
        raise UsageError("--threads must be positive")
    try:
        import threadpoolctl
    except ImportError:  # pragma: no cover - optional dependency
        print("# --threads ignored (threadpoolctl unavailable)", file=sys.stderr)
        return None
    return threadpoolctl.threadpool_limits(ns.threads)


def _load_manifest(path: Path):
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ValueError(f"cannot read manifest: {exc}") from None
    pairs, ids = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(
                f"{path}:{lineno}: expected 'intensity_path depth_path'"
            )
        ipath, dpath = (Path(p) for p in parts)
        if not ipath.is_absolute():
            ipath = path.parent / ipath
        if not dpath.is_absolute():
            dpath = path.parent / dpath
        pairs.append((imaging.load_image(ipath), imaging.load_depth(dpath)))
        ids.append(f"{parts[0]}|{parts[1]}")
    if not pairs:
        raise ValueError(f"{path}: manifest lists no image pairs")
    return pairs, ids


def cmd_learn(ns: argparse.Namespace) -> int:
    settings = _settle(ns, "learn")
    pairs, ids = _load_manifest(ns.pairs)
    training_set = learning.extract_training_pairs(
        pairs, settings["samples"], settings["patch_side"], settings["seed"], ids
    )
    n = training_set.patch_dim
    config = learning.LearnConfig(
        nu=settings["nu"],
        kappa=settings["kappa"],
        mu=settings["mu"],
        k=settings["redundancy"] * n,
        rng_seed=settings["seed"],
        cg=CgConfig(max_iterations=settings["iterations"]),
    )
    rows = []

    def on_iteration(iteration, point, cost, grad_norm, step):
        rows.append((iteration, cost, grad_norm, step))

    pair = learning.learn_operator_pair(training_set, config, callback=on_iteration)
    operators.save_pair(pair, ns.out)
    trace_path = ns.trace if ns.trace is not None else ns.out.with_suffix(
        ns.out.suffix + ".trace.csv"
    )
    with Path(trace_path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "objective", "grad_norm", "step"])
        for iteration, cost, grad_norm, step in rows:
            writer.writerow(
                [iteration, f"{cost:.10g}", f"{grad_norm:.10g}", f"{step:.10g}"]
            )
    print(f"wrote {ns.out} ({len(rows)} iterations)")
    return 0


def cmd_downsample(ns: argparse.Namespace) -> int:
    settings = _settle(ns, "downsample")
    depth = imaging.load_depth(ns.input)
    lr = imaging.gaussian_downsample(depth, settings["factor"])
    pixels = lr.pixels.copy()
    if ns.mask is not None:
        holes = imaging.load_image(ns.mask)
        if holes.shape != pixels.shape:
            raise ValueError(
                f"hole mask {holes.shape} does not match the LR grid {pixels.shape}"
            )
        pixels[holes.pixels > 0.0] = 0.0
    imaging.save_image(
        imaging.GrayImage(pixels, lr.image.bit_depth), ns.out
    )
    print(f"wrote {ns.out} ({pixels.shape[1]}x{pixels.shape[0]})")
    return 0


def cmd_upscale(ns: argparse.Namespace) -> int:
    settings = _settle(ns, "upscale")
    lr_depth = imaging.load_depth(ns.depth)
    guide = imaging.load_image(ns.intensity)
    pair = operators.load_pair(ns.ops)
    factor = settings["factor"]
    expected_lr = reconstruction.lr_shape_for(guide.shape, factor)
    if lr_depth.shape != expected_lr:
        raise ValueError(
            f"{ns.depth}: LR depth {lr_depth.shape} does not match intensity "
            f"{guide.shape} at factor {factor} (expected {expected_lr})"
        )
    if not lr_depth.mask.any():
        raise ValueError(f"{ns.depth}: depth map has no valid samples")
    model = reconstruction.MeasurementModel(factor, guide.shape, lr_depth.mask)
    if settings["fidelity"] == "mahalanobis":
        fidelity = reconstruction.FidelityTerm.mahalanobis(
            lr_depth.pixels[lr_depth.mask]
        )
    else:
        fidelity = reconstruction.FidelityTerm.iid()
    schedule = tuple(np.logspace(0.0, -2.0, settings["lambda_stages"]))
    config = reconstruction.SolveConfig(
        lambda_schedule=schedule,
        iterations_per_stage=settings["iters"],
        trace_enabled=ns.trace is not None,
    )
    gt_pixels = gt_mask = None
    if ns.gt is not None:
        gt = imaging.load_depth(ns.gt)
        if gt.shape != guide.shape:
            raise ValueError(
                f"{ns.gt}: ground truth {gt.shape} does not match the HR grid"
            )
        gt_pixels, gt_mask = gt.pixels, gt.mask
    result, trace = reconstruction.super_resolve(
        lr_depth.pixels, guide.pixels, pair, model, fidelity, config,
        ground_truth=gt_pixels, ground_truth_mask=gt_mask,
    )
    imaging.save_image(imaging.GrayImage(result, settings["bit_depth"]), ns.out)
    if ns.trace is not None:
        trace.to_csv(ns.trace)
    print(f"wrote {ns.out} ({result.shape[1]}x{result.shape[0]})")
    return 0


def cmd_evaluate(ns: argparse.Namespace) -> int:
    settings = _settle(ns, "evaluate")
    estimate = imaging.load_image(ns.estimate)
    truth = imaging.load_depth(ns.gt)
    bad = imaging.bad_pixel_rate(estimate, truth, settings["delta"])
    rmse = imaging.rmse_8bit(estimate, truth)
    print(f"bad={bad:.2f}% rmse={rmse:.3f}")
    return 0


_COMMANDS = {
    "learn": cmd_learn,
    "downsample": cmd_downsample,
    "upscale": cmd_upscale,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    limiter = None
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("missing command (learn, downsample, upscale, evaluate)")
        limiter = _limit_threads(ns)
        return _COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OptimizationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())
