import json
import logging
from pathlib import Path

import numpy as np
import pytest

from grfhd import cli
from grfhd.cli import OPTIONS, build_parser, main, read_pgm, render_pgm
from grfhd.errors import ConditioningError
from grfhd.terrain import DemGrid, GridSpec, load_dem, save_dem

ROOT = Path(__file__).resolve().parents[1]


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, (json.loads(out) if code == 0 and out.strip() else None)


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    seen = set()
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        for action in sub._actions:
            seen.update(action.option_strings)
    for key in OPTIONS:
        assert "--" + key.replace("_", "-") in seen
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "--conservative-fourth-pad" in text and "--threads" in text


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-terrain", "--bogus"])
    assert exc.value.code == 1
    assert run(["gen-terrain"])[0] == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "t.grd"), "not_a_key": 1}))
    assert run(["gen-terrain", "--config", cfg])[0] == 1
    assert run(["detect", "--out-dir", tmp_path / "m", "--mode", "baseline"])[0] == 1


def test_format_error_exit_2(tmp_path):
    bad = tmp_path / "bad.grd"
    bad.write_bytes(b"GRFHD1\nn_rows 2\n")
    assert run(["render", "--input", bad, "--out", tmp_path / "x.pgm"])[0] == 2


def test_numerical_error_exit_3(tmp_path, monkeypatch):
    def boom(opts):
        raise ConditioningError("singular", jitter=1e-4)

    monkeypatch.setitem(cli.HANDLERS, "render", boom)
    assert run(["render", "--input", "x", "--out", "y"])[0] == 3


def test_capacity_error_exit_4(tmp_path, capsys):
    save_dem(DemGrid.from_array(np.zeros((70, 70))), tmp_path / "big.grd")
    assert run(["sim-lidar", "--dem", tmp_path / "big.grd", "--gsd", "10", "--noise-3sigma", "0",
                "--out", tmp_path / "p.csv"], capsys)[0] == 0
    assert run(["fit", "--pcd", tmp_path / "p.csv", "--out", tmp_path / "m.json"], capsys)[0] == 0
    code, _ = run(["detect", "--mode", "mc", "--model", tmp_path / "m.json", "--dem", tmp_path / "big.grd",
                   "--pad-radius", "3", "--out-dir", tmp_path / "mc"], capsys)
    assert code == 4


def test_precedence_flag_over_config_over_default(tmp_path, caplog, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_rows": 12, "n_cols": 14, "amplitude": 0.2}))
    with caplog.at_level(logging.INFO, logger="grfhd"):
        code, _ = run(["gen-terrain", "--config", cfg, "--n-cols", "10", "--out", tmp_path / "t.grd"], capsys)
    assert code == 0
    assert load_dem(tmp_path / "t.grd").spec.shape == (12, 10)
    log = caplog.text
    assert "n_cols = 10 (flag)" in log and "n_rows = 12 (config)" in log and "hurst = 0.8 (default)" in log


def test_render_half_rounds_up_and_nodata(tmp_path):
    z = np.full((4, 5), 0.5)
    note = render_pgm(z, tmp_path / "a.pgm")
    img = read_pgm(tmp_path / "a.pgm")
    assert img.shape == (4, 5) and np.all(img == 128)
    assert note["nodata_pixels"] == 0 and not (tmp_path / "a.pgm.json").exists()
    z[1, 2] = np.nan
    render_pgm(z, tmp_path / "b.pgm")
    img = read_pgm(tmp_path / "b.pgm")
    assert img[::-1][1, 2] == 0 and (img == 128).sum() == 19
    assert json.loads((tmp_path / "b.pgm.json").read_text())["nodata_pixels"] == 1


def test_render_unit_endpoints_and_data_scale(tmp_path):
    render_pgm(np.array([[0.0, 1.0], [0.25, 2.0]]), tmp_path / "u.pgm")
    assert read_pgm(tmp_path / "u.pgm")[::-1].tolist() == [[0, 255], [64, 255]]
    render_pgm(np.array([[10.0, 20.0], [15.0, 12.0]]), tmp_path / "d.pgm", scale="data")
    assert read_pgm(tmp_path / "d.pgm")[::-1].tolist() == [[0, 255], [128, 51]]


def test_flat_terrain_detect_renders_white(tmp_path, capsys):
    save_dem(DemGrid.from_array(np.zeros((20, 20))), tmp_path / "flat.grd")
    assert run(["sim-lidar", "--dem", tmp_path / "flat.grd", "--gsd", "1", "--noise-3sigma", "0",
                "--out", tmp_path / "p.csv"], capsys)[0] == 0
    assert run(["fit", "--pcd", tmp_path / "p.csv", "--out", tmp_path / "m.json"], capsys)[0] == 0
    code, res = run(["detect", "--mode", "shd", "--model", tmp_path / "m.json", "--dem", tmp_path / "flat.grd",
                     "--pad-radius", "3", "--n-orientations", "6", "--out-dir", tmp_path / "shd"], capsys)
    assert code == 0 and res["valid_pixels"] > 0
    assert run(["render", "--input", tmp_path / "shd/p_slope.grd", "--out", tmp_path / "s.pgm"], capsys)[0] == 0
    img = read_pgm(tmp_path / "s.pgm")[::-1]
    valid = np.isfinite(load_dem(tmp_path / "shd/p_slope.grd").elevations)
    assert img[valid].min() >= 252 and np.all(img[~valid] == 0)


def test_pipeline_commands_chain(tmp_path, capsys):
    t = tmp_path
    common = ["--pad-radius", "3", "--n-orientations", "6"]
    assert run(["gen-terrain", "--n-rows", "20", "--n-cols", "20", "--rock-count", "1", "--out", t / "t.grd"],
               capsys)[0] == 0
    assert run(["sim-lidar", "--dem", t / "t.grd", "--gsd", "2", "--out", t / "p.csv"], capsys)[0] == 0
    code, fit = run(["fit", "--pcd", t / "p.csv", "--out", t / "m.json"], capsys)
    assert code == 0 and fit["ell"] > 0
    for mode in ("shd", "mc", "baseline"):
        extra = ["--pcd", t / "p.csv"] if mode == "baseline" else ["--model", t / "m.json"]
        code, _ = run(["detect", "--mode", mode, "--dem", t / "t.grd", "--mc-samples", "20",
                       "--out-dir", t / mode] + extra + common, capsys)
        assert code == 0, mode
    code, k = run(["optimize-k", "--raw", t / "shd", "--oracle", t / "mc", "--out", t / "k.json"], capsys)
    assert code == 0 and json.loads((t / "k.json").read_text()) == k
    code, _ = run(["detect", "--mode", "shd", "--model", t / "m.json", "--dem", t / "t.grd", "--k1", k["k1"],
                   "--k2", k["k2"], "--out-dir", t / "shd_k"] + common, capsys)
    assert code == 0
    meta = json.loads((t / "shd_k/map.json").read_text())
    assert meta["factors"] == [k["k1"], k["k2"]] and meta["denom_mode"] == "paper"


def test_detect_grid_from_point_cloud_extent(tmp_path, capsys):
    save_dem(DemGrid(GridSpec(15, 15, 1.0, 100.0, 50.0), np.zeros((15, 15))), tmp_path / "t.grd")
    run(["sim-lidar", "--dem", tmp_path / "t.grd", "--gsd", "2", "--noise-3sigma", "0",
         "--out", tmp_path / "p.csv"], capsys)
    code, _ = run(["detect", "--mode", "baseline", "--pcd", tmp_path / "p.csv", "--pad-radius", "3",
                   "--n-orientations", "4", "--out-dir", tmp_path / "b"], capsys)
    assert code == 0
    spec = load_dem(tmp_path / "b/p_safe.grd").spec
    assert (spec.n_rows, spec.n_cols, spec.origin_x, spec.origin_y) == (15, 15, 100.0, 50.0)


def test_demo_config_end_to_end(tmp_path, capsys):
    code, res = run(["eval", "--config", ROOT / "configs/demo.json", "--out-dir", tmp_path / "demo"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "demo/report.json").read_text())
    assert all(r["status"] == "ok" for r in report["records"].values())
    assert set(res["records"]) == {"gsd_1p5", "gsd_2", "gsd_3", "gsd_4"}
