"""Command-line front end: register, warp, eval, synth, sweep.

Exit codes: 0 success, 1 invalid input or usage, 2 I/O failure, 3 numerical
abort. Every failure prints one line to stderr starting with an error token
such as ``E_VALIDATION:``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .control_points import load_checkpoint, random_prune, save_checkpoint
from .errors import GcregError, NumericalError, ValidationError
from .metrics import evaluation_report, export_dense_dvf, tre, warp_landmarks, warp_mask, warp_volume
from .synthetic import load_case, make_case, make_phantom, make_warp
from .trainer import PRESETS, TrainConfig, train, write_log_csv
from .volume import Geometry, load_landmarks, load_mask, load_volume, save_volume

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("gcreg")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_COLUMNS = ("param", "value", "seed", "mean_tre", "std_tre", "n_gaussians", "wall_s")


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default, which would collide with the I/O code
    def error(self, message):
        raise _UsageExit(message)


# ---------------------------------------------------------------------------
# config resolution

def read_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ValidationError(f"{path}: invalid TOML ({e})") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a table of key/value pairs")
    return data


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ValidationError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def resolve_config(preset: str | None = None, config_path=None, overrides: dict | None = None) -> TrainConfig:
    """Built-in defaults < preset < config file < command-line flags."""
    merged: dict = {}
    file_cfg = read_config_file(config_path) if config_path else {}
    preset = preset or file_cfg.pop("preset", None)
    file_cfg.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(file_cfg)
    merged.update(overrides or {})
    return TrainConfig.from_dict(merged)


def _flag_overrides(args) -> dict:
    out = parse_overrides(getattr(args, "set", None))
    for name in ("seed", "iterations", "k", "batch_size", "dof"):
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


# ---------------------------------------------------------------------------
# commands

def _landmark_pair(fixed_path, moving_path, units, fixed_geom, moving_geom):
    if (fixed_path is None) != (moving_path is None):
        raise ValidationError("--landmarks-fixed and --landmarks-moving must be given together")
    if fixed_path is None:
        return None, None
    lf = load_landmarks(fixed_path, units, fixed_geom)
    lm = load_landmarks(moving_path, units, moving_geom)
    if len(lf) != len(lm):
        raise ValidationError(f"landmark files hold {len(lf)} and {len(lm)} points")
    return lf, lm


def cmd_register(args) -> int:
    cfg = resolve_config(args.preset, args.config, _flag_overrides(args))
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    mask = load_mask(args.mask) if args.mask else None
    lf, lm = _landmark_pair(args.landmarks_fixed, args.landmarks_moving, args.landmark_units,
                            fixed.geometry, moving.geometry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"geometry": fixed.geometry.to_json(), "k": cfg.k, "train_config": cfg.to_dict()}

    on_step = None
    if args.checkpoint_every:
        def on_step(step, g):
            if (step + 1) % args.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{step + 1:06d}.gck", g, step=step + 1, **meta)

    result = train(fixed, moving, cfg, mask=mask, on_step=on_step)
    save_checkpoint(out / "checkpoint.gck", result.gaussians, step=cfg.iterations, **meta)
    # report on the stored float32 parameters so eval/sweep reproduce these numbers exactly
    g, _ = load_checkpoint(out / "checkpoint.gck")
    write_log_csv(result.log, out / "convergence.csv")
    export_dense_dvf(g, fixed.geometry, out / "dvf.json", cfg.k)

    report = {"n_gaussians": g.n, "num_parameters": g.num_parameters(),
              "wall_clock_s": result.wall_clock_s,
              "final_loss": result.log[-1].loss if result.log else None,
              "length_scale_mm": result.length_scale, "densify_events": result.densify_events,
              "config": cfg.to_dict()}
    if lf is not None:
        report.update(evaluation_report(g, cfg.k, lf, lm, wall_clock_s=result.wall_clock_s))
    _write_json(out / "report.json", report)
    print(out / "report.json")
    return EXIT_OK


def _checkpoint_geometry(header, path) -> Geometry:
    if "geometry" not in header:
        raise ValidationError(f"{path}: checkpoint has no geometry metadata")
    return Geometry.from_json(header["geometry"])


def cmd_warp(args) -> int:
    g, header = load_checkpoint(args.checkpoint)
    geom = _checkpoint_geometry(header, args.checkpoint)
    k = int(header.get("k", 10))
    if args.mask_mode == "nearest":
        warped = warp_mask(g, load_mask(args.moving), geom, k)
    else:
        warped = warp_volume(g, load_volume(args.moving), geom, k)
    print(save_volume(warped, args.out))
    return EXIT_OK


def cmd_eval(args) -> int:
    g, header = load_checkpoint(args.checkpoint)
    k = int(header.get("k", 10))
    geom = Geometry.from_json(header["geometry"]) if "geometry" in header else None
    lf, lm = _landmark_pair(args.landmarks_fixed, args.landmarks_moving, args.landmark_units, geom, geom)
    if (args.seg_fixed is None) != (args.seg_moving is None):
        raise ValidationError("--seg-fixed and --seg-moving must be given together")
    seg_f = load_mask(args.seg_fixed) if args.seg_fixed else None
    seg_m = load_mask(args.seg_moving) if args.seg_moving else None
    if lf is None and seg_f is None:
        raise ValidationError("eval needs --landmarks-fixed/--landmarks-moving or --seg-fixed/--seg-moving")
    report = evaluation_report(g, k, lf, lm, seg_f, seg_m)
    _write_json(args.out, report)
    print(args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    dims = _dims(args.dims)
    spacing = _dims(args.spacing, cast=float)
    phantom = make_phantom(dims, spacing, seed=args.seed)
    bounds = phantom.geometry.bounds()
    field = make_warp(args.kind, args.magnitude, seed=args.seed, bounds=bounds, n_bumps=args.n_bumps)
    generator = {"kind": args.kind, "magnitude": args.magnitude, "dims": list(dims),
                 "spacing": list(spacing), "seed": args.seed, "n_bumps": args.n_bumps,
                 "phantom_seed": args.seed, "version": __version__}
    case = make_case(phantom, field, args.n_landmarks, seed=args.seed + 1,
                     manifest={"generator": generator})
    print(case.save(args.out) / "manifest.json")
    return EXIT_OK


def _dims(values, cast=int):
    vals = [cast(v) for v in values]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ValidationError(f"expected 1 or 3 values, got {len(vals)}")
    return tuple(vals)


def _sweep_entry(task):
    """One (value, seed) grid cell; module-level so it can run in a worker process."""
    param, value, seed, case_dir, cfg_dict, checkpoint = task
    case = load_case(case_dir)
    lf, lm = case.landmarks_fixed, case.landmarks_moving
    t0 = time.perf_counter()
    if param == "prune_ratio":
        g, header = load_checkpoint(checkpoint)
        k = int(header.get("k", cfg_dict["k"]))
        g = random_prune(g, float(value), np.random.default_rng(seed))
    else:
        cfg = TrainConfig.from_dict(cfg_dict | {param: value, "seed": seed})
        g, k = train(case.fixed, case.moving, cfg).gaussians, cfg.k
    mean, std, _ = tre(warp_landmarks(g, lf, k), lm)
    return [param, value, seed, repr(mean), repr(std), g.n, f"{time.perf_counter() - t0:.3f}"]


def cmd_sweep(args) -> int:
    cfg = resolve_config(args.preset, args.config, parse_overrides(args.set))
    cast = float if args.param == "prune_ratio" else int
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise ValidationError(f"bad --values/--seeds list ({e})") from None
    if not values or not seeds:
        raise ValidationError("--values and --seeds must be non-empty")
    case = load_case(args.case)  # fail fast on a bad case dir
    checkpoint = args.checkpoint
    if args.param == "prune_ratio" and checkpoint is None:
        res = train(case.fixed, case.moving, cfg)
        checkpoint = Path(args.out).with_suffix(".gck")
        save_checkpoint(checkpoint, res.gaussians, geometry=case.fixed.geometry.to_json(), k=cfg.k,
                        train_config=cfg.to_dict())
    base = cfg.to_dict()
    for v in values:  # validate every grid value before spending time on training
        if args.param != "prune_ratio":
            TrainConfig.from_dict(base | {args.param: v})
        elif not 0.0 <= v < 1.0:
            raise ValidationError(f"prune ratio must be in [0, 1), got {v}")
    tasks = [(args.param, v, s, str(args.case), base, checkpoint and str(checkpoint))
             for v in values for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_entry, tasks))
    else:
        rows = [_sweep_entry(t) for t in tasks]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)
    print(out)
    return EXIT_OK


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcreg", description="Gaussian control-point deformable registration")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp):
        sp.add_argument("--config", help="JSON or TOML file of TrainConfig fields")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any TrainConfig field (repeatable)")

    def landmark_flags(sp):
        sp.add_argument("--landmarks-fixed")
        sp.add_argument("--landmarks-moving")
        sp.add_argument("--landmark-units", choices=("mm", "voxel"), default="mm")

    r = sub.add_parser("register", help="optimise a Gaussian control-point field")
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--mask")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--iterations", type=int)
    r.add_argument("--k", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--dof", choices=("I", "II", "III", "IV", "V", "VI"))
    r.add_argument("--checkpoint-every", type=int, default=0, metavar="N")
    config_flags(r)
    landmark_flags(r)
    r.set_defaults(func=cmd_register)

    w = sub.add_parser("warp", help="resample a moving volume onto the fixed grid")
    w.add_argument("--moving", required=True)
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--mask-mode", choices=("linear", "nearest"), default="linear")
    w.set_defaults(func=cmd_warp)

    e = sub.add_parser("eval", help="landmark TRE and/or label Dice")
    e.add_argument("--checkpoint", required=True)
    landmark_flags(e)
    e.add_argument("--seg-fixed")
    e.add_argument("--seg-moving")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic case with known deformation")
    s.add_argument("--kind", required=True, choices=("constant_shift", "affine", "gaussian_bumps"))
    s.add_argument("--magnitude", required=True, type=float, help="peak displacement in mm")
    s.add_argument("--dims", nargs="+", default=["64"])
    s.add_argument("--spacing", nargs="+", default=["1.0"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-landmarks", type=int, default=100)
    s.add_argument("--n-bumps", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    sw = sub.add_parser("sweep", help="ablation grid over k, iterations or prune ratio")
    sw.add_argument("--param", required=True, choices=("k", "iterations", "prune_ratio"))
    sw.add_argument("--values", required=True, help="comma-separated list")
    sw.add_argument("--case", required=True, help="directory written by 'synth'")
    sw.add_argument("--out", required=True)
    sw.add_argument("--seeds", default="0", help="comma-separated list")
    sw.add_argument("--checkpoint", help="trained model for prune_ratio sweeps")
    sw.add_argument("--jobs", type=int, default=1, help="worker processes")
    config_flags(sw)
    sw.set_defaults(func=cmd_sweep)
    return p


def _fail(code: int, token: str, message) -> int:
    text = " ".join(str(message).split())
    print(f"{token}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as e:
        return _fail(EXIT_VALIDATION, "E_USAGE", e)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        return _fail(EXIT_VALIDATION, e.code, e)
    except NumericalError as e:
        return _fail(EXIT_NUMERIC, e.code, e)
    except FileNotFoundError as e:
        return _fail(EXIT_IO, "E_IO", f"{e.strerror}: {e.filename}")
    except OSError as e:
        return _fail(EXIT_IO, "E_IO", e)
    except GcregError as e:
        return _fail(EXIT_VALIDATION, e.code, e)


if __name__ == "__main__":
    sys.exit(main())
