import json
from pathlib import Path

import numpy as np
import pytest

from ddpclab.artifacts import (
    read_manifest,
    read_matrix_csv,
    read_table_csv,
    read_trajectory_csv,
    write_trajectory_csv,
)
from ddpclab.cli import main
from ddpclab.experiments import (
    ExperimentConfig,
    run_experiment,
    task_seed,
    verify_manifest,
)
from ddpclab.lti_sim import TrajectoryData


def tiny_config(experiment, out, **kw):
    defaults = dict(
        repeats=3,
        seed=7,
        t_train=300,
        n_grid=(80, 160),
        lambda_grid=(0.1, 1.0),
        t_sim=15,
    )
    defaults.update(kw)
    return ExperimentConfig(experiment, output_dir=str(out), **defaults)


def read_all_bytes(manifest_path):
    manifest = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    blobs = {"manifest.json": Path(manifest_path).read_bytes()}
    for role, entry in manifest["files"].items():
        blobs[entry["path"]] = (base / entry["path"]).read_bytes()
    return blobs


@pytest.mark.parametrize("experiment", ["fig1", "fig2", "fig3", "fig4"])
def test_experiments_are_byte_reproducible(experiment, tmp_path):
    first = run_experiment(tiny_config(experiment, tmp_path / "a"))
    second = run_experiment(tiny_config(experiment, tmp_path / "b"))
    blobs_a, blobs_b = read_all_bytes(first), read_all_bytes(second)
    assert blobs_a.keys() == blobs_b.keys()
    for name in blobs_a:
        assert blobs_a[name] == blobs_b[name], f"{experiment}/{name} differs"


def test_task_seed_deterministic_and_distinct():
    assert task_seed(3, 1, 2) == task_seed(3, 1, 2)
    seeds = {task_seed(0, a, b) for a in range(5) for b in range(20)}
    assert len(seeds) == 100


def test_manifest_lists_every_file_with_hash(tmp_path):
    manifest_path = run_experiment(tiny_config("fig3", tmp_path))
    manifest = read_manifest(manifest_path)
    assert manifest["experiment"] == "fig3"
    assert manifest["seeds"]
    assert manifest["config"]["repeats"] == 3
    for role, entry in manifest["files"].items():
        target = tmp_path / entry["path"]
        assert target.exists(), role
        assert len(entry["sha256"]) == 64
    ok, results = verify_manifest(manifest_path)
    assert all(r.passed for r in results if r.name.startswith("integrity"))


def test_verify_detects_tampering(tmp_path):
    manifest_path = run_experiment(tiny_config("fig1", tmp_path))
    manifest = read_manifest(manifest_path)
    victim = tmp_path / manifest["files"]["corr_open"]["path"]
    victim.write_text("0.0,0.0\n0.0,0.0\n" * 10)
    ok, results = verify_manifest(manifest_path)
    assert not ok
    failed = {r.name for r in results if not r.passed}
    assert "integrity_corr_open" in failed


def test_verify_missing_file_is_error_not_fail(tmp_path):
    manifest_path = run_experiment(tiny_config("fig1", tmp_path))
    manifest = read_manifest(manifest_path)
    (tmp_path / manifest["files"]["corr_closed"]["path"]).unlink()
    with pytest.raises(FileNotFoundError):
        verify_manifest(manifest_path)


def test_verify_empty_dir_is_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        verify_manifest(tmp_path / "manifest.json")


def test_workers_do_not_change_results(tmp_path):
    serial = run_experiment(tiny_config("fig2", tmp_path / "serial", workers=1))
    pooled = run_experiment(tiny_config("fig2", tmp_path / "pooled", workers=2))
    blobs_a, blobs_b = read_all_bytes(serial), read_all_bytes(pooled)
    for name in blobs_a:
        if name == "manifest.json":
            continue  # embedded config differs in the workers field only
        assert blobs_a[name] == blobs_b[name], name


def test_trajectory_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    data = TrajectoryData(
        rng.normal(size=(25, 1)), rng.normal(size=(25, 2)), 13, {"mode": "open", "dt": 1.0}
    )
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, data)
    assert path.with_suffix(".csv.meta").exists() or Path(str(path) + ".meta").exists()
    back = read_trajectory_csv(path)
    np.testing.assert_array_equal(back.u, data.u)
    np.testing.assert_array_equal(back.y, data.y)
    assert back.meta["mode"] == "open"
    header = path.read_text().splitlines()[0]
    assert header == "t,u_1,y_1,y_2"


def test_cli_simulate_fit_bias_control(tmp_path):
    traj = tmp_path / "traj.csv"
    assert main(["simulate", "--mode", "closed", "--t-steps", "400", "--seed", "3", "--out", str(traj)]) == 0
    assert traj.exists()

    fit_dir = tmp_path / "fit"
    assert main(["fit", "--data", str(traj), "--out", str(fit_dir)]) == 0
    meta = json.loads((fit_dir / "fit_meta.json").read_text())
    assert meta["rho"] == 10 and meta["n_cols"] == 381
    s_hat = read_matrix_csv(fit_dir / "subspace_predictor.csv")
    assert s_hat.shape == (20, 40)

    report_csv = tmp_path / "bias.csv"
    assert main(["bias-report", "--data", str(traj), "--out", str(report_csv)]) == 0
    rows = read_table_csv(report_csv)
    assert len(rows) == 1 and rows[0]["mode"] == "closed_loop"
    assert float(rows[0]["sigma_max_subspace"]) > 0

    ctl_dir = tmp_path / "ctl"
    assert main(["control", "--data", str(traj), "--method", "tpc", "--out", str(ctl_dir)]) == 0
    assert (ctl_dir / "planned.csv").exists() and (ctl_dir / "realized.csv").exists()
    summary = read_table_csv(ctl_dir / "summary.csv")
    assert summary[0]["method"] == "tpc"
    assert float(summary[0]["terminal_abs_error"]) < 0.2

    rec_dir = tmp_path / "rec"
    assert main([
        "control", "--data", str(traj), "--method", "2norm_ddpc", "--lam", "0.1",
        "--receding", "20", "--out", str(rec_dir),
    ]) == 0
    realized = read_trajectory_csv(rec_dir / "realized.csv")
    assert realized.length == 20


def test_cli_experiment_and_verify_roundtrip(tmp_path):
    out = tmp_path / "exp"
    code = main([
        "experiment", "fig1", "--out", str(out),
        "--repeats", "10", "--seed", "1", "--t-train", "400",
    ])
    assert code == 0
    assert main(["verify", "--manifest", str(out / "manifest.json")]) == 0
    # tamper: nonzero exit, not an exception
    grid_path = out / "corr_open.csv"
    grid = grid_path.read_text()
    grid_path.write_text(grid.replace(grid.splitlines()[0], "1.0," * 9 + "1.0", 1))
    assert main(["verify", "--manifest", str(out / "manifest.json")]) == 1


def test_cli_verify_missing_manifest_is_error(tmp_path):
    assert main(["verify", "--manifest", str(tmp_path / "none.json")]) == 2


def test_cli_config_file_with_flag_override(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("repeats=4\nseed=9\nn_grid=70,90\n# comment line\nt_sim=12\n")
    out = tmp_path / "run"
    code = main([
        "experiment", "fig2", "--out", str(out), "--config", str(cfg_file),
        "--repeats", "2",
    ])
    assert code == 0
    manifest = read_manifest(out / "manifest.json")
    assert manifest["config"]["repeats"] == 2  # flag wins
    assert manifest["config"]["seed"] == 9
    assert manifest["config"]["n_grid"] == [70, 90]


def test_cli_rejects_unknown_config_key(tmp_path):
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("postman=1\n")
    code = main(["experiment", "fig1", "--out", str(tmp_path / "x"), "--config", str(cfg_file)])
    assert code == 2


def test_custom_experiment_writes_bias_reports(tmp_path):
    cfg = ExperimentConfig("custom", output_dir=str(tmp_path), repeats=2, seed=3, t_train=300)
    manifest_path = run_experiment(cfg)
    rows = read_table_csv(tmp_path / "bias_reports.csv")
    modes = {r["mode"] for r in rows}
    assert modes == {"open", "closed"}
    ok, _ = verify_manifest(manifest_path)
    assert ok
