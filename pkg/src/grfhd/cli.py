"""Command-line front end: ``grfhd <command> [options]``.

Every option has a flag ``--some-name`` and an identical config key
``some_name``. Values resolve as flag, then ``--config`` JSON, then built-in
default. Exit status: 0 ok, 1 usage, 2 format, 3 numerical, 4 capacity.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .errors import GrfhdError, ParameterError
from .evaluation import ExperimentConfig, KGrid, optimize_raising_factors, run_experiment
from .grf import GrfModel, fit_hyperparameters, load_model, save_model
from .lander import LanderGeometry
from .safety import (RaisingFactors, SafetyThresholds, baseline_map, load_safety_map, mc_safety_map,
                     save_safety_map, shd_map)
from .terrain import (GridSpec, generate_fractal_terrain, load_dem, load_pcd, save_dem, save_pcd,
                      simulate_lidar)

log = logging.getLogger("grfhd")


def _float_list(v) -> list[float]:
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).split(",") if x.strip()]


def _k_range(v):
    """``start:stop:step`` or a comma list (or the JSON equivalents)."""
    if isinstance(v, dict):
        return {k: float(v[k]) for k in ("start", "stop", "step")}
    if isinstance(v, str) and ":" in v:
        start, stop, step = (float(x) for x in v.split(":"))
        return {"start": start, "stop": stop, "step": step}
    return _float_list(v)


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    raise ParameterError(f"expected true/false, got {v!r}")


@dataclass(frozen=True)
class Opt:
    type: Callable
    default: Any
    help: str
    commands: tuple
    choices: Optional[tuple] = None
    flag_only_true: bool = False


TERRAIN = ("gen-terrain", "eval")
GEOM = ("detect", "eval")
OPTIONS: dict[str, Opt] = {
    # paths
    "out": Opt(str, None, "output file (grid, point cloud, model, image or k-fit JSON)",
               ("gen-terrain", "sim-lidar", "fit", "optimize-k", "render")),
    "out_dir": Opt(str, None, "output directory (safety map or experiment run)", ("detect", "eval")),
    "dem": Opt(str, None, "terrain grid file; for detect it fixes the target grid", ("sim-lidar", "detect", "eval")),
    "pcd": Opt(str, None, "point-cloud CSV", ("fit", "detect")),
    "model": Opt(str, None, "fitted model JSON", ("detect",)),
    "raw": Opt(str, None, "unraised SHD map directory", ("optimize-k",)),
    "oracle": Opt(str, None, "Monte-Carlo map directory", ("optimize-k",)),
    "input": Opt(str, None, "grid file to render", ("render",)),
    # terrain generator
    "seed": Opt(int, 0, "terrain seed", TERRAIN),
    "n_rows": Opt(int, 32, "grid rows", TERRAIN),
    "n_cols": Opt(int, 32, "grid columns", TERRAIN),
    "resolution": Opt(float, 1.0, "grid spacing in metres (detect: target grid when --dem is absent)",
                      TERRAIN + ("detect",)),
    "hurst": Opt(float, 0.8, "Hurst exponent in (0, 1]", TERRAIN),
    "amplitude": Opt(float, 0.15, "fractal RMS amplitude in metres", TERRAIN),
    "tilt_deg": Opt(float, 8.5, "regional tilt in degrees", TERRAIN),
    "tilt_azimuth_deg": Opt(float, 30.0, "downhill azimuth of the tilt in degrees", TERRAIN),
    "rock_count": Opt(int, 4, "number of rocks", TERRAIN),
    "rock_height_min": Opt(float, 0.3, "minimum rock height in metres", TERRAIN),
    "rock_height_max": Opt(float, 0.8, "maximum rock height in metres", TERRAIN),
    "rock_radius_min": Opt(float, 0.5, "minimum rock radius in metres", TERRAIN),
    "rock_radius_max": Opt(float, 1.5, "maximum rock radius in metres", TERRAIN),
    # sensor
    "gsd": Opt(float, 2.0, "LiDAR ground sample distance in metres", ("sim-lidar",)),
    "gsds": Opt(_float_list, [1.5, 2.0, 3.0, 4.0], "comma-separated GSD list", ("eval",)),
    "noise_3sigma": Opt(float, 0.05, "LiDAR noise, three standard deviations, metres", ("sim-lidar", "eval")),
    "hole_fraction": Opt(float, 0.0, "fraction of dropped LiDAR returns", ("sim-lidar", "eval")),
    "lidar_seed": Opt(int, 0, "LiDAR noise seed", ("sim-lidar", "eval")),
    # fit
    "fit_seed": Opt(int, 0, "seed for random optimizer restarts", ("fit", "eval")),
    "n_starts": Opt(int, 5, "random optimizer restarts", ("fit",)),
    "max_iter": Opt(int, 200, "Nelder-Mead iteration cap per start", ("fit",)),
    "u_min": Opt(float, None, "lower bound on the kernel variance", ("fit",)),
    "u_max": Opt(float, None, "upper bound on the kernel variance", ("fit",)),
    "ell_min": Opt(float, None, "lower bound on the length scale", ("fit",)),
    "ell_max": Opt(float, None, "upper bound on the length scale", ("fit",)),
    "free_sigma": Opt(_bool, False, "optimise the noise level instead of fixing it", ("fit",),
                      flag_only_true=True),
    # geometry and thresholds
    "n_pads": Opt(int, 3, "number of landing pads (3 or 4)", GEOM),
    "pad_radius": Opt(float, 5.0, "pad circle radius in metres", GEOM),
    "footprint_radius": Opt(float, None, "footprint circumradius in metres (default pad radius)", GEOM),
    "n_orientations": Opt(int, 24, "orientations per pad period", GEOM),
    "footprint_step": Opt(float, 1.0, "footprint lattice pitch in metres", GEOM),
    "slope_max_deg": Opt(float, 10.0, "slope threshold in degrees", GEOM),
    "roughness_max_m": Opt(float, 0.3, "roughness threshold in metres", GEOM),
    # detection
    "mode": Opt(str, "shd", "detector", ("detect",), choices=("shd", "mc", "baseline")),
    "denom_mode": Opt(str, "paper", "Gaussian tail denominator: sqrt(2)*sd ('paper') or sd ('standard')",
                      GEOM, choices=("paper", "standard")),
    "k1": Opt(float, 1.0, "slope raising factor", ("detect",)),
    "k2": Opt(float, 1.0, "roughness raising factor (applied as k1*k2)", ("detect",)),
    "mc_samples": Opt(int, 100, "Monte-Carlo terrain draws", GEOM),
    "mc_seed": Opt(int, 0, "Monte-Carlo seed", GEOM),
    "conservative_fourth_pad": Opt(_bool, False, "shift the fourth pad down by 3 sd in the contact test",
                                   ("detect",), flag_only_true=True),
    "window_ells": Opt(float, 5.0, "conditioning window in length scales above the dense cap", ("detect",)),
    "k1_grid": Opt(_k_range, "0.25:8:0.25", "k1 search grid, start:stop:step or comma list", ("optimize-k", "eval")),
    "k2_grid": Opt(_k_range, None, "k2 search grid (default: fine near 0.3-1.2)", ("optimize-k", "eval")),
    # render
    "scale": Opt(str, "unit", "grey-level mapping: [0,1] ('unit') or the data range ('data')", ("render",),
                 choices=("unit", "data")),
}

COMMANDS = ("gen-terrain", "sim-lidar", "fit", "detect", "eval", "optimize-k", "render")
REQUIRED = {
    "gen-terrain": ("out",), "sim-lidar": ("dem", "out"), "fit": ("pcd", "out"), "detect": ("out_dir",),
    "eval": ("out_dir",), "optimize-k": ("raw", "oracle", "out"), "render": ("input", "out"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grfhd", description="Stochastic landing-hazard detection.")
    parser.add_argument("--version", action="version", version=f"grfhd {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON with flat keys matching the long flags")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads, 0 = all cores (env GRFHD_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, parents=[common], help=_HELP[cmd], description=_HELP[cmd])
        for key, opt in OPTIONS.items():
            if cmd not in opt.commands:
                continue
            flag = "--" + key.replace("_", "-")
            if opt.flag_only_true:
                p.add_argument(flag, action="store_const", const=True, default=None, help=opt.help)
            else:
                req = " (required)" if key in REQUIRED[cmd] else ""
                dflt = "" if opt.default is None else f" [default {opt.default}]"
                p.add_argument(flag, default=None, choices=opt.choices, help=opt.help + req + dflt)
    return parser


_HELP = {
    "gen-terrain": "generate a fractal terrain grid",
    "sim-lidar": "sample a noisy LiDAR lattice from a terrain grid",
    "fit": "fit GRF hyperparameters to a point cloud",
    "detect": "build a safety map (shd, mc or baseline)",
    "eval": "run the GSD sweep experiment",
    "optimize-k": "fit raising factors of an SHD map against a Monte-Carlo map",
    "render": "render a grid file as an 8-bit PGM image",
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags, config file and defaults for the chosen command."""
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise ParameterError(f"{args.config}: top level must be an object")
        unknown = sorted(set(cfg) - set(OPTIONS) - {"threads"})
        if unknown:
            raise ParameterError(f"{args.config}: unknown config keys {unknown}")
    out = {}
    for key, opt in OPTIONS.items():
        if args.command not in opt.commands:
            continue
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            raw, source = flag_val, "flag"
        elif key in cfg:
            raw, source = cfg[key], "config"
        else:
            raw, source = opt.default, "default"
        try:
            val = raw if raw is None else opt.type(raw)
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"bad value for {key}: {raw!r} ({exc})") from None
        if opt.choices and val not in opt.choices:
            raise ParameterError(f"{key} must be one of {opt.choices}, got {val!r}")
        out[key] = val
        log.info("%s = %r (%s)", key, val, source)
    for key in REQUIRED[args.command]:
        if out.get(key) is None:
            raise ParameterError(f"{args.command} needs --{key.replace('_', '-')}")
    threads = args.threads if args.threads is not None else cfg.get("threads")
    out["threads"] = threads
    log.info("threads = %r (%s)", threads, "flag" if args.threads is not None else
             ("config" if "threads" in cfg else "environment/default"))
    return out


# ---------------------------------------------------------------------------
# commands


def _generator(o: dict) -> dict:
    return {"seed": o["seed"], "n_rows": o["n_rows"], "n_cols": o["n_cols"], "resolution": o["resolution"],
            "hurst": o["hurst"], "amplitude": o["amplitude"], "tilt_deg": o["tilt_deg"],
            "tilt_azimuth_deg": o["tilt_azimuth_deg"],
            "rock_spec": {"count": o["rock_count"],
                          "height_range": [o["rock_height_min"], o["rock_height_max"]],
                          "radius_range": [o["rock_radius_min"], o["rock_radius_max"]]}}


def _geometry(o: dict) -> LanderGeometry:
    return LanderGeometry(o["n_pads"], o["pad_radius"], o["footprint_radius"], o["n_orientations"],
                          o["footprint_step"])


def _thresholds(o: dict) -> SafetyThresholds:
    return SafetyThresholds.from_degrees(o["slope_max_deg"], o["roughness_max_m"])


def _k_spec(o: dict) -> dict:
    return {k: o[f"{k}_grid"] for k in ("k1", "k2") if o.get(f"{k}_grid") is not None}


def cmd_gen_terrain(o):
    g = _generator(o)
    dem = generate_fractal_terrain(**g)
    save_dem(dem, o["out"])
    return {"out": o["out"], "shape": list(dem.spec.shape)}


def cmd_sim_lidar(o):
    pcd = simulate_lidar(load_dem(o["dem"]), o["gsd"], o["noise_3sigma"] / 3.0, o["lidar_seed"],
                         o["hole_fraction"])
    save_pcd(pcd, o["out"])
    return {"out": o["out"], "n_points": len(pcd)}


def cmd_fit(o):
    pcd = load_pcd(o["pcd"])
    bounds = {}
    for name in ("u", "ell"):
        lo, hi = o[f"{name}_min"], o[f"{name}_max"]
        if lo is not None or hi is not None:
            from .grf import default_bounds

            d = default_bounds(pcd)[name]
            bounds[name] = (lo if lo is not None else d[0], hi if hi is not None else d[1])
    res = fit_hyperparameters(pcd, bounds=bounds or None, fix_sigma=not o["free_sigma"],
                              n_starts=o["n_starts"], seed=o["fit_seed"], max_iter=o["max_iter"])
    model = GrfModel.from_pcd(pcd, res.params, res.prior_mean)
    out = Path(o["out"])
    pcd_ref = Path(o["pcd"]).resolve()
    try:
        pcd_ref = pcd_ref.relative_to(out.resolve().parent)
    except ValueError:
        pass
    save_model(model, out, str(pcd_ref), res.lml)
    return {"out": str(out), "u": res.params.u, "ell": res.params.ell, "sigma": res.params.sigma,
            "lml": res.lml}


def _target_grid(o, xy) -> GridSpec:
    if o.get("dem"):
        return load_dem(o["dem"]).spec
    res = o["resolution"]
    lo = xy.min(axis=0)
    span = xy.max(axis=0) - lo
    n_cols, n_rows = (np.floor(span / res + 1e-9).astype(int) + 1).tolist()
    return GridSpec(n_rows, n_cols, res, float(lo[0]), float(lo[1]))


def cmd_detect(o):
    geom, th = _geometry(o), _thresholds(o)
    mode = o["mode"]
    extra = {}
    if mode == "baseline":
        if not o.get("pcd"):
            raise ParameterError("detect --mode baseline needs --pcd")
        pcd = load_pcd(o["pcd"])
        smap = baseline_map(pcd, geom, th, _target_grid(o, pcd.xy))
    else:
        if not o.get("model"):
            raise ParameterError(f"detect --mode {mode} needs --model (a fitted model JSON)")
        model = load_model(o["model"], load_pcd(o["pcd"]) if o.get("pcd") else None)
        grid = _target_grid(o, model.train_locations)
        extra["model"] = os.path.relpath(Path(o["model"]).resolve(), Path(o["out_dir"]).resolve())
        if mode == "shd":
            smap = shd_map(model, geom, th, RaisingFactors(o["k1"], o["k2"]), grid, o["denom_mode"],
                           o["conservative_fourth_pad"], o["threads"], o["window_ells"])
        else:
            smap = mc_safety_map(model, geom, th, o["mc_samples"], o["mc_seed"], grid, o["threads"])
    save_safety_map(smap, o["out_dir"], extra)
    v = smap.valid
    return {"out_dir": o["out_dir"], "mode": mode, "valid_pixels": int(v.sum()),
            "mean_p_safe": float(np.mean(smap.p_safe[v])) if v.any() else None}


def cmd_eval(o):
    terrain = {"file": o["dem"]} if o.get("dem") else {"generator": _generator(o)}
    cfg = ExperimentConfig(
        terrain=terrain, gsds=o["gsds"], noise_3sigma=o["noise_3sigma"], hole_fraction=o["hole_fraction"],
        geometry=_geometry(o).to_dict(), slope_max_deg=o["slope_max_deg"], roughness_max_m=o["roughness_max_m"],
        mc_samples=o["mc_samples"], k_grid=_k_spec(o) or None, denom_mode=o["denom_mode"],
        seeds={"lidar": o["lidar_seed"], "fit": o["fit_seed"], "mc": o["mc_seed"]},
        threads=o["threads"] if o["threads"] is not None else 1)
    report = run_experiment(cfg, o["out_dir"])
    summary = {}
    for tag, rec in report["records"].items():
        if rec.get("status") != "ok":
            summary[tag] = {"status": rec["status"], "error": rec.get("error")}
            continue
        summary[tag] = {k: rec[k] for k in ("k1", "k2", "slope_rmse", "roughness_rmse")}
        summary[tag]["missed_hazard_rate"] = {m: rec[m]["missed_hazard_rate"] for m in ("shd", "mc", "baseline")}
    return {"report": str(Path(o["out_dir"]) / "report.json"), "records": summary}


def cmd_optimize_k(o):
    raw = load_safety_map(o["raw"])
    oracle = load_safety_map(o["oracle"])
    fit = optimize_raising_factors(raw, oracle, KGrid.from_spec(_k_spec(o)))
    rec = {"k1": fit.k1, "k2": fit.k2, "slope_rmse": fit.slope_rmse, "roughness_rmse": fit.roughness_rmse}
    Path(o["out"]).write_text(json.dumps(rec, indent=2) + "\n")
    return rec


def render_pgm(values: np.ndarray, path, scale: str = "unit") -> dict:
    """Linear 8-bit grey levels with round-half-up; nodata renders as 0."""
    z = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(z)
    if scale == "unit":
        lo, hi = 0.0, 1.0
    else:
        lo, hi = (float(z[ok].min()), float(z[ok].max())) if ok.any() else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    frac = np.clip((np.where(ok, z, lo) - lo) / span, 0.0, 1.0)
    grey = np.floor(frac * 255.0 + 0.5).astype(np.uint8)
    grey[~ok] = 0
    rows, cols = grey.shape
    # row 0 sits at the grid origin (south); images are written north-up
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(grey[::-1].tobytes())
    note = {"image": str(path), "scale": scale, "range": [lo, hi], "nodata_pixels": int((~ok).sum()),
            "nodata_grey": 0, "orientation": "first image row is the last grid row (north up)"}
    if note["nodata_pixels"]:
        Path(str(path) + ".json").write_text(json.dumps(note, indent=2) + "\n")
    return note


def read_pgm(path) -> np.ndarray:
    """Grey levels of a P5 image as written by ``render_pgm`` (image row order)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    cols, rows = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def cmd_render(o):
    dem = load_dem(o["input"])
    return render_pgm(dem.elevations, o["out"], o["scale"])


HANDLERS = {"gen-terrain": cmd_gen_terrain, "sim-lidar": cmd_sim_lidar, "fit": cmd_fit, "detect": cmd_detect,
            "eval": cmd_eval, "optimize-k": cmd_optimize_k, "render": cmd_render}


def _setup_logging(verbose: bool) -> None:
    pkg = logging.getLogger("grfhd")
    pkg.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(getattr(h, "_grfhd_cli", False) for h in pkg.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        h._grfhd_cli = True
        pkg.addHandler(h)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        opts = resolve(args)
        result = HANDLERS[args.command](opts)
    except GrfhdError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        log.error("%s", exc)
        return 1
    print(json.dumps(result, indent=2, default=_json_default))
    return 0


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    raise TypeError(type(x))


if __name__ == "__main__":
    sys.exit(main())
