import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from nettwin import cli

TINY = ["--world-size", "small", "--num-objects", "6", "--stream-points", "8", "--seed", "1"]
FAST = ["--profile", "bench", "--pretrain-iterations", "40", "--steps-per-arrival", "2",
        "--tuning-budget", "6", "--warm-start", "3"]


def _run(argv, capsys):
    code = cli.main(argv)
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def onetwin_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "ot"
    assert cli.main(["run", *TINY, *FAST, "--output", str(out)]) == 0
    return out


def test_run_directory_contents(onetwin_dir):
    names = {p.name for p in onetwin_dir.iterdir()}
    assert {"run.json", "gaps.csv", "reports.json", "episodes.jsonl", "timing.json", "stream.csv",
            "report_IND.csv", "report_EXT.csv", "report_OOD.csv", "model.npz", "final_model.npz"} <= names
    meta = json.loads((onetwin_dir / "run.json").read_text())
    assert meta["seed"] == 1 and meta["config"]["mode"] == "onetwin" and meta["version"]
    rows = list(csv.DictReader(open(onetwin_dir / "gaps.csv")))
    assert [int(r["arrival_seq"]) for r in rows] == list(range(9))
    assert all(r["wall_ms_update"] == "" for r in rows)
    assert json.loads((onetwin_dir / "timing.json").read_text())["count"] == 8


def test_report_mean_equals_per_point_mean(onetwin_dir):
    summary = json.loads((onetwin_dir / "reports.json").read_text())
    for split in ("IND", "EXT", "OOD"):
        err = [float(r["abs_err_db"]) for r in csv.DictReader(open(onetwin_dir / f"report_{split}.csv"))]
        assert summary[split]["mean_gap_db"] == pytest.approx(np.mean(err), abs=1e-12)
    rows = list(csv.DictReader(open(onetwin_dir / "gaps.csv")))
    assert float(rows[-1]["gap_ind_db"]) == pytest.approx(summary["IND"]["mean_gap_db"], abs=1e-9)


def test_rerun_is_byte_identical(onetwin_dir, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["run", *TINY, *FAST, "--output", str(again)]) == 0
    for name in ("gaps.csv", "report_IND.csv", "report_OOD.csv", "stream.csv", "split_OOD.csv"):
        assert (again / name).read_bytes() == (onetwin_dir / name).read_bytes(), name


def test_baseline_curve_constant_and_report(tmp_path, onetwin_dir, capsys):
    out = tmp_path / "bs"
    code, _ = _run(["run", *TINY, "--mode", "baseline-sim", "--output", str(out)], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(out / "gaps.csv")))
    assert len({r["gap_ind_db"] for r in rows}) == 1 and len({r["gap_ood_db"] for r in rows}) == 1
    code, cap = _run(["report", str(onetwin_dir), str(out), "--out", str(tmp_path / "fig")], capsys)
    assert code == 0
    assert (tmp_path / "fig" / "gap_curves.png").stat().st_size > 1000
    assert (tmp_path / "fig" / "gap_curves.csv").exists()


def test_eval_truth_and_split_file(onetwin_dir, capsys):
    code, cap = _run(["eval", *TINY, "--predictor", "truth", "--split", "OOD"], capsys)
    assert code == 0 and json.loads(cap.out)["mean_gap_db"] == 0.0
    code, cap = _run(["eval", *TINY, "--checkpoint", str(onetwin_dir / "final_model.npz"),
                      "--split", str(onetwin_dir / "split_OOD.csv")], capsys)
    rep = json.loads(cap.out)
    assert code == 0 and rep["split_name"] == "split_OOD"
    want = json.loads((onetwin_dir / "reports.json").read_text())["OOD"]["mean_gap_db"]
    assert rep["mean_gap_db"] == pytest.approx(want, abs=1e-6)


def test_gen_world_and_reload(tmp_path, capsys):
    out = tmp_path / "w"
    code, cap = _run(["gen-world", *TINY, "--output", str(out)], capsys)
    assert code == 0 and json.loads(cap.out)["stream_points"] == 8
    code, cap = _run(["eval", "--world", str(out / "world.json"), "--stream", str(out / "stream.csv"),
                      "--predictor", "simulator", "--split", "EXT"], capsys)
    assert code == 0 and json.loads(cap.out)["num_points"] == 8


def test_tune_once_prints_episode(capsys):
    code, cap = _run(["tune-once", "--world-size", "small", "--seed", "0", "--stream-points", "6",
                      "--tuning-budget", "6", "--warm-start", "3"], capsys)
    assert code == 0
    summary = json.loads(cap.out.strip().splitlines()[-1])
    assert summary["evaluations"] <= 6
    if summary["focus_objects"]:
        assert summary["best_objective"] <= summary["initial_objective"]


@pytest.mark.parametrize("argv", [
    ["run", "--bogus", "1"],
    ["run", "--mode", "magic"],
    ["run", "--profile", "huge"],
    ["run", "--warm-start", "30"],
    ["eval", "--checkpoint", "/nonexistent.npz"],
    ["report", "/nonexistent-dir"],
])
def test_config_errors_exit_1(argv, capsys):
    code, cap = _run(argv, capsys)
    assert code == 1 and "config error" in cap.err


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "nerf2", "seed": 4, "mood": 1}))
    code, cap = _run(["run", "--config", str(cfg)], capsys)
    assert code == 1 and "mood" in cap.err
    cfg.write_text(json.dumps({"mode": "nerf2", "seed": 4}))
    got = cli.load_config(str(cfg), {"seed": 7})
    assert got.mode == "nerf2" and got.seed == 7 and got.online_config().mode == "nerf2-style"
    cfg.write_text("{not json")
    assert _run(["run", "--config", str(cfg)], capsys)[0] == 1


def test_runtime_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "world.json"
    bad.write_text(json.dumps({"scene": {}}))
    code, cap = _run(["eval", "--world", str(bad), "--predictor", "truth"], capsys)
    assert code == 2 and "error" in cap.err


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "nettwin.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
