"""Experiment harness: probability-map RMSE, raising-factor search, detection metrics."""

from __future__ import annotations

import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyComparisonError, GrfhdError, ParameterError
from .grf import GrfModel, fit_hyperparameters, save_model
from .lander import LanderGeometry
from .safety import (RaisingFactors, SafetyMap, SafetyThresholds, SafetyTruth, apply_raising_factors,
                     baseline_map, deterministic_eval, load_safety_map, load_truth, mc_safety_map,
                     save_safety_map, save_truth, shd_map)
from .terrain import DemGrid, generate_fractal_terrain, load_dem, save_dem, save_pcd, simulate_lidar, load_pcd

log = logging.getLogger(__name__)


def rmse_probability(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"map shapes differ: {a.shape} vs {b.shape}")
    common = np.isfinite(a) & np.isfinite(b)
    if mask is not None:
        common &= mask
    if not common.any():
        raise EmptyComparisonError("no pixels valid in both maps")
    d = a[common] - b[common]
    return float(np.sqrt(np.mean(d * d)))


def _frange(start, stop, step):
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def default_k1_grid() -> list[float]:
    return _frange(0.25, 8.0, 0.25)


def default_k2_grid() -> list[float]:
    return [0.1, 0.2] + _frange(0.3, 1.2, 0.02) + _frange(1.3, 2.0, 0.1)


@dataclass(frozen=True)
class KGrid:
    k1: Sequence[float] = field(default_factory=default_k1_grid)
    k2: Sequence[float] = field(default_factory=default_k2_grid)

    def __post_init__(self):
        if not self.k1 or not self.k2:
            raise ParameterError("k grids must be non-empty")
        if min(self.k1) <= 0 or min(self.k2) <= 0:
            raise ParameterError("raising factors must be positive")

    @classmethod
    def from_spec(cls, spec: Optional[dict]) -> "KGrid":
        if not spec:
            return cls()
        out = {}
        for key in ("k1", "k2"):
            v = spec.get(key)
            if v is None:
                continue
            if isinstance(v, dict):
                out[key] = _frange(v["start"], v["stop"], v["step"])
            else:
                out[key] = [float(x) for x in v]
        return cls(**out)


@dataclass(frozen=True)
class RaisingFit:
    k1: float
    k2: float
    slope_rmse: float
    roughness_rmse: float


def optimize_raising_factors(raw: SafetyMap, oracle: SafetyMap, grid: KGrid = KGrid(),
                             mask: Optional[np.ndarray] = None) -> RaisingFit:
    """Exhaustive search: k1 on the slope channel, then k2 on roughness at that k1.

    Ties go to the smaller factor.
    """
    if raw.spec != oracle.spec:
        raise ParameterError("maps are on different grids")
    best_k1, best_s = None, math.inf
    for k1 in sorted(grid.k1):
        e = rmse_probability(np.power(raw.p_slope, k1), oracle.p_slope, mask)
        if e < best_s:
            best_k1, best_s = k1, e
    best_k2, best_r = None, math.inf
    for k2 in sorted(grid.k2):
        e = rmse_probability(np.power(raw.p_roughness, best_k1 * k2), oracle.p_roughness, mask)
        if e < best_r:
            best_k2, best_r = k2, e
    return RaisingFit(best_k1, best_k2, best_s, best_r)


@dataclass(frozen=True)
class DetectionMetrics:
    missed_hazard_rate: float
    false_alarm_rate: float
    precision: float
    recall: float
    tp: int
    fn: int
    fp: int
    tn: int


def detection_metrics(prob: np.ndarray, truth_safe: np.ndarray, valid: np.ndarray,
                      binarize_at: float = 0.5) -> DetectionMetrics:
    """Hazard-positive confusion counts; a pixel is predicted safe when prob >= binarize_at.

    Error rates with an empty denominator are 0; precision/recall are 1.
    """
    prob = np.asarray(prob, dtype=np.float64)
    use = valid & np.isfinite(prob)
    if not use.any():
        raise EmptyComparisonError("no valid pixels to score")
    hazard = ~truth_safe[use]
    pred_safe = prob[use] >= binarize_at
    tp = int(np.sum(hazard & ~pred_safe))
    fn = int(np.sum(hazard & pred_safe))
    fp = int(np.sum(~hazard & ~pred_safe))
    tn = int(np.sum(~hazard & pred_safe))

    def ratio(num, den, empty):
        return num / den if den else empty

    return DetectionMetrics(ratio(fn, tp + fn, 0.0), ratio(fp, fp + tn, 0.0), ratio(tp, tp + fp, 1.0),
                            ratio(tp, tp + fn, 1.0), tp, fn, fp, tn)


def map_detection(smap: SafetyMap, truth: SafetyTruth, channel: str = "safe",
                  binarize_at: float = 0.5) -> DetectionMetrics:
    truth_safe = {"safe": truth.is_safe, "slope": truth.slope_safe, "roughness": truth.roughness_safe}[channel]
    return detection_metrics(smap.channel(channel), truth_safe, smap.valid & truth.valid, binarize_at)


# ---------------------------------------------------------------------------
# experiment driver


@dataclass
class ExperimentConfig:
    terrain: dict = field(default_factory=lambda: {
        "generator": {"seed": 0, "n_rows": 32, "n_cols": 32, "resolution": 1.0, "hurst": 0.8,
                      "amplitude": 0.15, "tilt_deg": 8.5, "tilt_azimuth_deg": 30.0,
                      "rock_spec": {"count": 4, "height_range": [0.3, 0.8], "radius_range": [0.5, 1.5]}}})
    gsds: list = field(default_factory=lambda: [1.5, 2.0, 3.0, 4.0])
    noise_3sigma: float = 0.05
    hole_fraction: float = 0.0
    geometry: dict = field(default_factory=lambda: LanderGeometry().to_dict())
    slope_max_deg: float = 10.0
    roughness_max_m: float = 0.3
    mc_samples: int = 100
    k_grid: Optional[dict] = None
    denom_mode: str = "paper"
    seeds: dict = field(default_factory=lambda: {"lidar": 0, "fit": 0, "mc": 0})
    threads: int = 1

    def __post_init__(self):
        if not self.gsds:
            raise ParameterError("gsd list must be non-empty")
        if self.noise_3sigma < 0 or self.mc_samples < 1:
            raise ParameterError("invalid noise or sample count")
        if "file" not in self.terrain and "generator" not in self.terrain:
            raise ParameterError("terrain must name a 'file' or a 'generator' spec")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def thresholds(self) -> SafetyThresholds:
        return SafetyThresholds.from_degrees(self.slope_max_deg, self.roughness_max_m)

    @property
    def lander(self) -> LanderGeometry:
        return LanderGeometry.from_dict(self.geometry)

    def load_terrain(self) -> DemGrid:
        if "file" in self.terrain:
            return load_dem(self.terrain["file"])
        g = dict(self.terrain["generator"])
        if g.get("rock_spec"):
            g["rock_spec"] = dict(g["rock_spec"])
        return generate_fractal_terrain(**g)


def _class_means(smap: SafetyMap, truth: SafetyTruth) -> dict:
    use = smap.valid & truth.valid
    out = {}
    for cls_name, sel in (("truth_safe", use & truth.is_safe), ("truth_unsafe", use & ~truth.is_safe)):
        for ch in ("slope", "roughness"):
            vals = smap.channel(ch)[sel]
            out[f"mean_p_{ch}_{cls_name}"] = float(vals.mean()) if vals.size else None
    return out


def _gsd_tag(gsd: float) -> str:
    return f"gsd_{gsd:g}".replace(".", "p")


def evaluate_case(run_dir: Path, gsd: float, truth: SafetyTruth, raw: SafetyMap, mc: SafetyMap,
                  base: SafetyMap, k_grid: KGrid) -> dict:
    """Report record computed only from maps (as reloaded from disk)."""
    mask = raw.valid & mc.valid & base.valid & truth.valid
    fit = optimize_raising_factors(raw, mc, k_grid, mask)
    shd = apply_raising_factors(raw, RaisingFactors(fit.k1, fit.k2))
    rec = {"gsd": gsd, "k1": fit.k1, "k2": fit.k2, "k1k2": fit.k1 * fit.k2,
           "slope_rmse": fit.slope_rmse, "roughness_rmse": fit.roughness_rmse,
           "n_pixels": int(mask.sum()), "truth_safe_fraction": float(truth.is_safe[mask].mean())}
    masked = lambda m: SafetyMap(m.spec, m.p_slope, m.p_roughness, m.p_safe, m.valid & mask, m.meta)
    for name, m in (("shd", shd), ("mc", mc), ("baseline", base)):
        rec[name] = _class_means(masked(m), truth)
        rec[name]["missed_hazard_rate"] = map_detection(masked(m), truth).missed_hazard_rate
        rec[name]["false_alarm_rate"] = map_detection(masked(m), truth).false_alarm_rate
    return rec


def run_experiment(cfg: ExperimentConfig, run_dir) -> dict:
    """Full pipeline per GSD; writes artifacts under ``run_dir`` and returns the report."""
    run_dir = Path(run_dir)
    for sub in ("terrain", "pcd", "models", "maps"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    dem = cfg.load_terrain()
    save_dem(dem, run_dir / "terrain" / "truth.grd")
    dem = load_dem(run_dir / "terrain" / "truth.grd")
    geom, th = cfg.lander, cfg.thresholds
    save_truth(deterministic_eval(dem, geom, th), run_dir / "maps" / "truth")
    truth = load_truth(run_dir / "maps" / "truth")
    k_grid = KGrid.from_spec(cfg.k_grid)
    sigma = cfg.noise_3sigma / 3.0

    records = {}
    for gsd in cfg.gsds:
        tag = _gsd_tag(gsd)
        try:
            pcd_path = run_dir / "pcd" / f"{tag}.csv"
            save_pcd(simulate_lidar(dem, gsd, sigma, cfg.seeds.get("lidar", 0), cfg.hole_fraction), pcd_path)
            pcd = load_pcd(pcd_path)
            fit = fit_hyperparameters(pcd, seed=cfg.seeds.get("fit", 0))
            model = GrfModel.from_pcd(pcd, fit.params, fit.prior_mean)
            save_model(model, run_dir / "models" / f"{tag}.json", f"../pcd/{tag}.csv", fit.lml)
            maps = {
                "shd_raw": shd_map(model, geom, th, grid=dem.spec, denom_mode=cfg.denom_mode, threads=cfg.threads),
                "mc": mc_safety_map(model, geom, th, cfg.mc_samples, cfg.seeds.get("mc", 0), dem.spec,
                                    threads=cfg.threads),
                "baseline": baseline_map(pcd, geom, th, dem.spec),
            }
            model_ref = {"model": f"../../../models/{tag}.json"}
            for name, m in maps.items():
                save_safety_map(m, run_dir / "maps" / tag / name, model_ref if name != "baseline" else None)
            loaded = {name: load_safety_map(run_dir / "maps" / tag / name) for name in maps}
            rec = evaluate_case(run_dir, gsd, truth, loaded["shd_raw"], loaded["mc"], loaded["baseline"], k_grid)
            rec["fit"] = {"u": fit.params.u, "ell": fit.params.ell, "sigma": fit.params.sigma, "lml": fit.lml}
            save_safety_map(apply_raising_factors(loaded["shd_raw"], RaisingFactors(rec["k1"], rec["k2"])),
                            run_dir / "maps" / tag / "shd", model_ref)
            rec["status"] = "ok"
        except GrfhdError as exc:
            log.error("GSD %s failed: %s", gsd, exc)
            rec = {"gsd": gsd, "status": "error", "error": f"{type(exc).__name__}: {exc}",
                   "trace": traceback.format_exc(limit=3)}
        records[tag] = rec

    config = asdict(cfg)
    # execution setting only; kept out so reports match across thread counts
    log.info("threads = %s", config.pop("threads"))
    report = {"config": config, "records": records}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def report_from_disk(run_dir, k_grid: Optional[dict] = None) -> dict:
    """Recompute per-GSD records from the artifacts of a finished run."""
    run_dir = Path(run_dir)
    report = json.loads((run_dir / "report.json").read_text())
    truth = load_truth(run_dir / "maps" / "truth")
    grid = KGrid.from_spec(k_grid if k_grid is not None else report["config"]["k_grid"])
    out = {}
    for tag, rec in report["records"].items():
        if rec.get("status") != "ok":
            continue
        maps = {n: load_safety_map(run_dir / "maps" / tag / n) for n in ("shd_raw", "mc", "baseline")}
        out[tag] = evaluate_case(run_dir, rec["gsd"], truth, maps["shd_raw"], maps["mc"], maps["baseline"], grid)
    return out
