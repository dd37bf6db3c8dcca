import csv

import numpy as np
import pytest

from posevote.cli import main
from posevote.cloud import mesh_vertex_normals
from posevote.geom3d import Pose
from posevote.io import write_ply
from posevote.synthetic import blob_mesh, random_pose


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    mesh = blob_mesh(0.25, subdivisions=5, seed=3)
    cloud = mesh_vertex_normals(mesh)
    truth = random_pose(np.random.default_rng(0), 0.3)
    write_ply(d / "object.ply", mesh)
    write_ply(d / "scene.ply", cloud.transformed(truth))
    far = cloud.transformed(Pose(np.eye(3), [5.0, 0, 0]))
    write_ply(d / "far.ply", far)
    (d / "broken.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n")
    return d, truth


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_estimate_transformed_copy(files, tmp_path):
    d, truth = files
    out = tmp_path / "det.csv"
    code = main(["estimate", str(d / "scene.ply"), str(d / "object.ply"), "--out", str(out),
                 "--feature-target", "2000", "--report", str(tmp_path / "r.txt")])
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 1
    R = np.array([float(rows[0][f"r{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
    t = np.array([float(rows[0][k]) for k in ("tx_m", "ty_m", "tz_m")])
    assert np.linalg.norm(t - truth.translation) <= 0.01
    assert np.degrees(np.arccos(np.clip((np.trace(R.T @ truth.rotation) - 1) / 2, -1, 1))) <= 22.5
    assert "object.ply" in (tmp_path / "r.txt").read_text()


def test_estimate_no_detection(files, tmp_path, capsys):
    d, _ = files
    code = main(["estimate", str(d / "far.ply"), str(d / "object.ply"), "--feature-target", "500",
                 "--density-threshold", "1e9"])
    assert code == 2
    assert "no detections" in capsys.readouterr().out


def test_estimate_multi_instance_cap(files, tmp_path):
    d, _ = files
    out = tmp_path / "det.csv"
    assert main(["estimate", str(d / "scene.ply"), str(d / "object.ply"), "--out", str(out),
                 "--feature-target", "1000", "--multi-instance", "10"]) == 0
    assert 1 <= len(read_rows(out)) <= 10


def test_parse_error_exit(files, capsys):
    d, _ = files
    assert main(["estimate", str(d / "broken.ply"), str(d / "object.ply")]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_file_exit(files, capsys):
    d, _ = files
    assert main(["estimate", str(d / "nope.ply"), str(d / "object.ply")]) == 1


def test_sensitivity_cli(files, tmp_path, monkeypatch):
    d, _ = files
    args = ["sensitivity", str(d / "object.ply"), "--noise-start", "0.001", "--noise-stop", "0.002",
            "--noise-step", "0.001", "--feature-target", "400", "--voxel-resolution", "0.005",
            "--normal-k", "20", "--ransac-iterations", "100", "--ransac-repeats", "2"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    monkeypatch.setenv("POSEVOTE_SEED", "3")
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_rows(a)
    assert len(rows) == 4
    assert "wall_time_s" not in rows[0]
    assert main(args + ["--out", str(b), "--timing", "--methods", "cluster"]) == 0
    rows = read_rows(b)
    assert len(rows) == 2 and "wall_time_s" in rows[0]


def test_bench_cli(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--out", str(out), "--inlier-rates", "1.0", "--trials", "2", "--pairs", "60",
                 "--ransac-iterations", "100"]) == 0
    rows = read_rows(out)
    assert [r["method"] for r in rows] == ["cluster", "ransac"]
    assert all(float(r["success_rate"]) == 1.0 for r in rows)
