"""The livo command-line workflow, exercised in-process."""

import numpy as np
import pytest

from livo.cli import main
from livo.dataio import read_config, read_ply, read_tum


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    """One tiny simulate + run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "dataset"
    out = root / "run"
    assert main(["simulate", "-o", str(ds), "--duration", "2.0"]) == 0
    assert main(["run", str(ds), "-o", str(out)]) == 0
    return ds, out


def test_simulate_writes_dataset_layout(run_dirs):
    ds, _ = run_dirs
    for name in ("calib.txt", "imu.csv", "sweeps.csv", "images.csv", "gt.txt"):
        assert (ds / name).exists()
    calib = read_config(ds / "calib.txt")
    assert calib["lidar_sweep_hz"] == 10.0
    assert calib["camera_hz"] == 15.0
    assert len(list((ds / "sweeps").glob("*.bin"))) == 20
    assert len(list((ds / "images").glob("*.ppm"))) == 30


def test_run_writes_trajectory_map_and_stats(run_dirs):
    _, out = run_dirs
    stamps, positions, _ = read_tum(out / "trajectory.txt")
    assert len(stamps) > 20
    assert np.isfinite(positions).all()
    stats = read_config(out / "stats.txt")
    assert stats["n_packets"] == len(stamps)
    assert stats["n_aligned"] > 0
    assert stats["n_map_points"] > 100
    assert stats["mean_packet_s"] > 0
    camera = read_config(out / "camera.txt")
    assert camera["fx"] > 0
    data = np.load(out / "map_points.npz")
    assert len(data["positions"]) == stats["n_map_points"]


def test_eval_ate_against_ground_truth(run_dirs, capsys):
    ds, out = run_dirs
    code = main(["eval", "ate", str(out / "trajectory.txt"), str(ds / "gt.txt")])
    assert code == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("ate_rmse_m ")
    assert float(line.split()[1]) < 0.05


def test_eval_e2e_reports_drift(run_dirs, capsys):
    _, out = run_dirs
    assert main(["eval", "e2e", str(out / "trajectory.txt")]) == 0
    value = float(capsys.readouterr().out.split()[1])
    assert 0.0 <= value < 1.0


def test_export_ply_defaults_to_rendered_points(run_dirs):
    _, out = run_dirs
    assert main(["export-ply", str(out)]) == 0
    positions, colors = read_ply(out / "map.ply")
    assert len(positions) > 100
    assert colors.dtype == np.uint8
    data = np.load(out / "map_points.npz")
    assert len(positions) == int(data["rendered"].sum())


def test_export_ply_can_include_unrendered(run_dirs, tmp_path):
    _, out = run_dirs
    target = tmp_path / "full.ply"
    assert main(["export-ply", str(out), "-o", str(target),
                 "--include-unrendered"]) == 0
    positions, _ = read_ply(target)
    data = np.load(out / "map_points.npz")
    assert len(positions) == len(data["positions"])


def test_errors_exit_nonzero_with_one_line(tmp_path, capsys):
    code = main(["run", str(tmp_path / "missing"), "-o", str(tmp_path / "x")])
    assert code == 1
    captured = capsys.readouterr()
    assert captured.err.startswith("error: ")
    assert len(captured.err.strip().splitlines()) == 1
