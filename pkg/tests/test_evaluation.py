import json
import math

import numpy as np
import pytest

from grfhd.errors import EmptyComparisonError, ParameterError
from grfhd.evaluation import (ExperimentConfig, KGrid, default_k1_grid, default_k2_grid, detection_metrics,
                              optimize_raising_factors, report_from_disk, rmse_probability, run_experiment)
from grfhd.safety import SafetyMap
from grfhd.terrain import GridSpec

SPEC = GridSpec(6, 6, 1.0)


def smap(ps, pr=None):
    ps = np.asarray(ps, float)
    pr = ps if pr is None else np.asarray(pr, float)
    return SafetyMap(GridSpec(*ps.shape, 1.0), ps, pr, ps * pr, np.isfinite(ps), {"factors": [1.0, 1.0]})


def test_rmse_examples():
    a = np.full((3, 3), 0.2)
    assert rmse_probability(a, a) == 0.0
    assert rmse_probability(a, np.full((3, 3), 0.5)) == pytest.approx(0.3, abs=1e-15)
    grid = np.arange(9).reshape(3, 3) / 10
    # differences -0.5 .. 0.3 in steps of 0.1: squares sum to 0.69
    assert rmse_probability(grid, np.full((3, 3), 0.5)) == pytest.approx(math.sqrt(0.69 / 9), rel=1e-12)


def test_rmse_restricts_to_common_valid():
    a = np.array([[0.0, np.nan], [1.0, 0.5]])
    b = np.array([[1.0, 0.3], [np.nan, 0.5]])
    assert rmse_probability(a, b) == pytest.approx(math.sqrt(0.5))
    with pytest.raises(EmptyComparisonError):
        rmse_probability(np.full((2, 2), np.nan), b)
    with pytest.raises(ParameterError):
        rmse_probability(np.zeros((2, 2)), np.zeros((3, 3)))


def test_default_k_grids():
    k1 = default_k1_grid()
    assert k1[0] == 0.25 and k1[-1] == 8.0 and len(k1) == 32 and 3.0 in k1
    k2 = default_k2_grid()
    assert k2[:2] == [0.1, 0.2] and 0.42 in k2 and k2[-1] == 2.0
    assert np.all(np.diff(k2) > 0)
    assert KGrid.from_spec({"k1": {"start": 1, "stop": 2, "step": 0.5}}).k1 == [1.0, 1.5, 2.0]


def random_raw(seed=0):
    rng = np.random.default_rng(seed)
    ps = rng.uniform(0.05, 1.0, (6, 6))
    pr = rng.uniform(0.05, 1.0, (6, 6))
    ps[0, 0] = np.nan
    pr[0, 0] = np.nan
    return smap(ps, pr)


def test_recovers_constructed_fixed_point():
    raw = random_raw()
    oracle = smap(raw.p_slope ** 3.0, raw.p_roughness ** (3.0 * 0.5))
    fit = optimize_raising_factors(raw, oracle)
    assert fit.k1 == 3.0 and fit.k2 == 0.5
    assert fit.slope_rmse == 0.0 and fit.roughness_rmse < 1e-15


def test_single_point_grid():
    raw = random_raw(1)
    oracle = smap(np.full((6, 6), 0.5))
    fit = optimize_raising_factors(raw, oracle, KGrid([2.0], [0.7]))
    assert (fit.k1, fit.k2) == (2.0, 0.7)
    assert fit.slope_rmse == rmse_probability(raw.p_slope ** 2.0, oracle.p_slope)


def test_result_is_grid_minimum():
    raw = random_raw(2)
    oracle = random_raw(3)
    grid = KGrid()
    fit = optimize_raising_factors(raw, oracle, grid)
    assert all(rmse_probability(raw.p_slope ** k, oracle.p_slope) >= fit.slope_rmse for k in grid.k1)
    assert all(rmse_probability(raw.p_roughness ** (fit.k1 * k), oracle.p_roughness) >= fit.roughness_rmse
               for k in grid.k2)


def test_ties_break_toward_smaller_factor():
    ones = smap(np.ones((3, 3)))
    fit = optimize_raising_factors(ones, ones, KGrid([4.0, 1.0, 2.0], [0.9, 0.3]))
    assert (fit.k1, fit.k2) == (1.0, 0.3)


def test_detection_perfect_and_all_safe():
    truth = np.array([[True, False], [False, True]])
    valid = np.ones((2, 2), bool)
    perfect = detection_metrics(truth.astype(float), truth, valid, 0.3)
    assert perfect.missed_hazard_rate == 0 and perfect.false_alarm_rate == 0
    assert detection_metrics(np.ones((2, 2)), truth, valid).missed_hazard_rate == 1.0
    with pytest.raises(EmptyComparisonError):
        detection_metrics(np.ones((2, 2)), truth, np.zeros((2, 2), bool))


def test_detection_hand_counted_fixture():
    prob = np.array([[1, .9, .2, .6],
                     [.4, .5, .49, 0],
                     [1, 1, 0, .7],
                     [.1, .8, .3, .5]])
    T, F = True, False
    truth = np.array([[T, T, F, F],
                      [T, F, T, F],
                      [F, T, F, T],
                      [T, T, F, F]])
    valid = np.ones((4, 4), bool)
    valid[3, 3] = False
    m = detection_metrics(prob, truth, valid)
    assert (m.tp, m.fn, m.fp, m.tn) == (4, 3, 3, 5)
    assert m.missed_hazard_rate == 3 / 7 and m.false_alarm_rate == 3 / 8
    assert m.precision == 4 / 7 and m.recall == 4 / 7
    assert m.tp + m.fn == int((~truth & valid).sum())


def tiny_config(**over):
    d = {
        "terrain": {"generator": {"seed": 3, "n_rows": 16, "n_cols": 16, "resolution": 1.0, "hurst": 0.8,
                                  "amplitude": 0.15, "tilt_deg": 6.0,
                                  "rock_spec": {"count": 1, "height_range": [0.4, 0.4]}}},
        "gsds": [2.0],
        "geometry": {"n_pads": 3, "pad_radius_m": 3.0, "footprint_radius_m": 3.0,
                     "n_orientations": 6, "footprint_step_m": 1.0},
        "mc_samples": 20,
    }
    d.update(over)
    return ExperimentConfig.from_dict(d)


REC_FIELDS = {"gsd", "k1", "k2", "k1k2", "slope_rmse", "roughness_rmse", "n_pixels", "truth_safe_fraction",
              "shd", "mc", "baseline", "fit", "status"}


def test_run_experiment_structure_and_reload(tmp_path):
    report = run_experiment(tiny_config(), tmp_path / "run")
    assert list(report["records"]) == ["gsd_2"]
    rec = report["records"]["gsd_2"]
    assert rec["status"] == "ok" and REC_FIELDS <= set(rec)
    for name in ("shd", "mc", "baseline"):
        assert 0 <= rec[name]["missed_hazard_rate"] <= 1
        assert set(rec[name]) >= {"mean_p_slope_truth_safe", "mean_p_roughness_truth_unsafe", "false_alarm_rate"}
    for sub in ("terrain/truth.grd", "pcd/gsd_2.csv", "models/gsd_2.json", "maps/truth/truth.json",
                "maps/gsd_2/shd/p_safe.grd", "maps/gsd_2/mc/map.json", "report.json"):
        assert (tmp_path / "run" / sub).exists(), sub
    again = report_from_disk(tmp_path / "run")["gsd_2"]
    for key in ("k1", "k2", "slope_rmse", "roughness_rmse", "shd", "mc", "baseline"):
        assert again[key] == rec[key]
    meta = json.loads((tmp_path / "run/maps/gsd_2/shd/map.json").read_text())
    assert meta["factors"] == [rec["k1"], rec["k2"]]
    assert (tmp_path / "run/maps/gsd_2/shd" / meta["model"]).resolve() == (tmp_path / "run/models/gsd_2.json").resolve()


def test_run_experiment_deterministic(tmp_path):
    a = run_experiment(tiny_config(), tmp_path / "a")
    b = run_experiment(tiny_config(), tmp_path / "b")
    assert a == b
    for rel in ("maps/gsd_2/mc/p_safe.grd", "maps/gsd_2/shd/p_slope.grd", "pcd/gsd_2.csv", "models/gsd_2.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_bad_gsd_recorded_and_others_proceed(tmp_path):
    report = run_experiment(tiny_config(gsds=[0.5, 2.0]), tmp_path / "r")
    assert report["records"]["gsd_0p5"]["status"] == "error"
    assert "ParameterError" in report["records"]["gsd_0p5"]["error"]
    assert report["records"]["gsd_2"]["status"] == "ok"


def test_config_rejects_unknown_keys():
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"gsd": [2.0]})
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"gsds": []})
