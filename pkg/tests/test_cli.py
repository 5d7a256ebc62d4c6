import json
import subprocess
import sys

import numpy as np
import pytest

from facereg import autodiff as ad
from facereg.cli import main
from facereg.mesh import parse_mesh

TINY = ["levels=2", "kernels=8,4", "decoder_widths=4,4", "latent_id=8", "latent_exp=8",
        "encoder_widths=8,8,16", "encoder_group=4", "attention_widths=8,4", "attention_group=2",
        "decoder_seed_width=8", "n_points=64", "stage_epochs=1,1,1,1,1,1", "dtype=float64"]


def sets(items):
    return [a for kv in items for a in ("--set", kv)]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(root / "data"), "--n-scans", "4", "--nx", "21",
                 "--ny", "25", "--seed", "3"] + sets(TINY)) == 0
    assert main(["train", "--manifest", str(root / "data/scans/manifest.csv"),
                 "--bundle", str(root / "data/bundle.frgc"), "--out", str(root / "run"),
                 "--seed", "1"] + sets(TINY)) == 0
    return root


def model_args(ws):
    return ["--model", str(ws / "run/model.frgc"), "--bundle", str(ws / "data/bundle.frgc")]


def test_synth_data_outputs(workspace):
    d = workspace / "data"
    for name in ("config.txt", "bundle.frgc", "scans/manifest.csv", "scans/scan_0000.obj",
                 "scans/scan_0000.lmk", "template/template.obj", "template/pca_id.npy"):
        assert (d / name).exists(), name
    assert "levels = 2" in (d / "config.txt").read_text()


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "metrics.csv").exists() and (run / "checkpoint_stage6.frgc").exists()
    _, meta = ad.load_params(run / "model.frgc")
    assert "seed = 1" in meta["config"]


def test_register_is_deterministic(workspace, tmp_path):
    scan = str(workspace / "data/scans/scan_0001.obj")
    for name in ("a", "b"):
        assert main(["register"] + model_args(workspace) + ["--scan", scan, "--out",
                    str(tmp_path / name), "--seed", "4"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "scan_0001_registered.obj").read_bytes() == (b / "scan_0001_registered.obj").read_bytes()
    side = json.loads((a / "scan_0001_registered.json").read_text())
    assert len(side["z_id"]) == 8 and abs(np.linalg.norm(side["z_exp"]) - 1) < 1e-6
    assert side["seed"] == 4 and side["n_points"] == 64
    head = (a / "scan_0001_attention.ply").read_bytes().split(b"end_header")[0]
    assert b"property double attention" in head and b"element vertex 64" in head
    mesh = parse_mesh(a / "scan_0001_registered.obj")
    template = parse_mesh(workspace / "data/template/template.obj")
    assert np.array_equal(mesh.faces, template.faces)


def test_register_point_cloud_with_few_points(workspace, tmp_path):
    pts = parse_mesh(workspace / "data/scans/scan_0002.obj").vertices[:20]
    path = tmp_path / "cloud.xyz"
    np.savetxt(path, pts)
    assert main(["register"] + model_args(workspace) + ["--scan", str(path), "--out",
                str(tmp_path / "o"), "--format", "ply"]) == 0
    assert (tmp_path / "o/cloud_registered.ply").exists()


def test_generate(workspace, tmp_path):
    manifest = str(workspace / "data/scans/manifest.csv")
    stats = str(tmp_path / "stats.npz")
    assert main(["generate"] + model_args(workspace) + ["--stats", stats, "--n", "0",
                "--out", str(tmp_path / "none"), "--manifest", manifest]) == 0
    assert not list((tmp_path / "none").glob("sample_*"))
    for name in ("g1", "g2"):
        assert main(["generate"] + model_args(workspace) + ["--stats", stats, "--n", "3",
                    "--out", str(tmp_path / name), "--seed", "9", "--jobs", "2"]) == 0
    files = sorted(p.name for p in (tmp_path / "g1").glob("sample_*"))
    assert files == ["sample_00000.obj", "sample_00001.obj", "sample_00002.obj"]
    for f in files:
        assert (tmp_path / "g1" / f).read_bytes() == (tmp_path / "g2" / f).read_bytes()
        assert np.isfinite(parse_mesh(tmp_path / "g1" / f).vertices).all()


def test_generate_without_stats_explains(workspace, tmp_path, capsys):
    code = main(["generate"] + model_args(workspace) + ["--stats", str(tmp_path / "missing.npz"),
                "--n", "2", "--out", str(tmp_path / "x")])
    assert code == 2 and "compute them first" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["joint", "identity", "expression"])
def test_interpolate(workspace, tmp_path, mode):
    s = workspace / "data/scans"
    assert main(["interpolate"] + model_args(workspace) + ["--from", str(s / "scan_0000.obj"),
                "--to", str(s / "scan_0003.obj"), "--mode", mode, "--steps", "3",
                "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("interp_*.obj"))) == 3
    assert (tmp_path / "interpolation.csv").read_text().splitlines()[1:] == ["0,0.0", "1,0.5", "2,1.0"]


def test_interpolate_rejects_one_step(workspace, tmp_path):
    s = str(workspace / "data/scans/scan_0000.obj")
    assert main(["interpolate"] + model_args(workspace) + ["--from", s, "--to", s, "--steps", "1",
                "--out", str(tmp_path)]) == 1


def test_evaluate(workspace, tmp_path):
    assert main(["evaluate"] + model_args(workspace) + ["--manifest",
                str(workspace / "data/scans/manifest.csv"), "--out", str(tmp_path),
                "--stability-repeats", "2", "--specificity-samples", "5", "--jobs", "2"]) == 0
    for name in ("surface_errors.csv", "error_cdf.csv", "landmark_errors.csv", "latent_stats.npz",
                 "stability.csv", "specificity.csv", "config.txt"):
        assert (tmp_path / name).exists(), name
    # duplicated manifest rows are evaluated once
    assert len((tmp_path / "surface_errors.csv").read_text().splitlines()) == 5
    groups = [r.split(",")[0] for r in (tmp_path / "landmark_errors.csv").read_text().splitlines()[1:]]
    assert groups[-1] == "inner"


def test_param_count(workspace, capsys):
    assert main(["param-count"] + ["--model", str(workspace / "run/model.frgc")]) == 0
    lines = capsys.readouterr().out.splitlines()
    total = int(lines[0].split()[1])
    assert total == sum(int(line.split()[1]) for line in lines[1:])
    assert main(["param-count"]) == 0
    total = int(capsys.readouterr().out.splitlines()[0].split()[1])
    assert 12_000_000 <= total <= 19_000_000


def test_exit_codes(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["register", "--model", "x"])
    assert exc.value.code == 1
    assert main(["param-count", "--set", "nonsense=1"]) == 1
    assert main(["register"] + model_args(workspace) + ["--scan", str(tmp_path / "none.obj"),
                "--out", str(tmp_path)]) == 2
    # a mismatched config is refused with the shape diff
    assert main(["register"] + model_args(workspace) + ["--scan", str(tmp_path / "none.obj"),
                "--out", str(tmp_path), "--set", "latent_id=16"]) == 2
    params, meta = ad.load_params(workspace / "run/model.frgc")
    params["decoder_id/out/bias"].value[:] = np.nan
    ad.save_params(tmp_path / "nan.frgc", params, meta)
    assert main(["train", "--manifest", str(workspace / "data/scans/manifest.csv"),
                 "--bundle", str(workspace / "data/bundle.frgc"), "--out", str(tmp_path / "t"),
                 "--init", str(tmp_path / "nan.frgc")]) == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "facereg", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "param-count" in r.stdout
