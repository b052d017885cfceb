import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from aquasplat import io
from aquasplat.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main

SYNTH = ["--n-gaussians", "20", "--n-views", "3", "--resolution", "32", "--pointmap-resolution", "16"]


def files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--seed", "3"] + SYNTH) == EXIT_OK
    return d


def test_synth_layout(synth_dir):
    for name in ("scene.ply", "medium.json", "cameras.json", "manifest.json", "pointmaps/graph.json"):
        assert (synth_dir / name).exists(), name
    for sub in ("clean", "degraded"):
        assert len(list((synth_dir / sub).glob("view_*.png"))) == 3
        assert len(list((synth_dir / sub).glob("view_*.npy"))) == 3
    m = json.loads((synth_dir / "manifest.json").read_text())
    assert m["command"] == "synth" and m["spec"]["n_views"] == 3 and m["config"]["seed"] == 3
    assert m["version"].startswith("v")
    assert len(io.read_scene(synth_dir / "scene.ply")) == 20


def test_synth_idempotent(tmp_path, synth_dir):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3"] + SYNTH) == EXIT_OK
    assert files(tmp_path) == files(synth_dir)


def test_fit_outputs_and_idempotence(tmp_path, synth_dir):
    args = ["fit", "--scene", str(synth_dir / "scene.ply"), "--medium", str(synth_dir / "medium.json"),
            "--cameras", str(synth_dir / "cameras.json"), "--images", str(synth_dir / "degraded"),
            "--iterations", "3"]
    for run in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / run / "fit.ply")]) == EXIT_OK
    assert files(tmp_path / "a") == files(tmp_path / "b")
    rows = list(csv.DictReader(open(tmp_path / "a" / "fit_trace.csv")))
    assert len(rows) == 4 and set(rows[0]) == {"iteration", "l1", "dssim", "recon", "acc", "total", "lambda"}
    assert (tmp_path / "a" / "fit_medium.json").exists() and (tmp_path / "a" / "fit_cameras.json").exists()


def test_render_separate_writes_three_images(tmp_path, synth_dir):
    rc = main(["render", "--scene", str(synth_dir / "scene.ply"), "--medium", str(synth_dir / "medium.json"),
               "--cameras", str(synth_dir / "cameras.json"), "--view", "1", "--separate", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert sorted(p.name for p in tmp_path.glob("*.png")) == ["view_01_medium.png", "view_01_object.png",
                                                               "view_01_rgb.png"]
    rc = main(["render", "--scene", str(synth_dir / "scene.ply"), "--medium", str(synth_dir / "medium.json"),
               "--cameras", str(synth_dir / "cameras.json"), "--view", "9", "--out", str(tmp_path)])
    assert rc == EXIT_INPUT


def test_eval_identical_images(capsys, synth_dir):
    img = str(synth_dir / "clean" / "view_00.npy")
    assert main(["eval", img, img]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["psnr"] == "inf" and report["ssim"] == 1.0 and report["l1"] == 0.0
    other = str(synth_dir / "degraded" / "view_00.npy")
    assert main(["eval", img, other]) == EXIT_OK
    assert isinstance(json.loads(capsys.readouterr().out)["psnr"], float)


def test_downsample_then_align(tmp_path, synth_dir):
    ds = tmp_path / "ds"
    assert main(["downsample", str(synth_dir / "pointmaps"), "--voxel", "0.1", "--out", str(ds)]) == EXIT_OK
    g = io.read_graph(ds)
    assert all(e.map_a.shape[0] == 1 for e in g.edges)
    assert main(["align", str(ds), "--iters", "20", "--out", str(tmp_path / "al")]) == EXIT_OK
    report = json.loads((tmp_path / "al" / "alignment.json").read_text())
    assert report["objective_trace"][-1] <= report["objective_trace"][0]
    pts, conf, _ = io.read_cloud(tmp_path / "al" / "cloud.ply")
    assert len(pts) == len(conf) > 0


def test_downsample_cloud(tmp_path):
    rng = np.random.default_rng(0)
    io.write_cloud(tmp_path / "in.ply", rng.uniform(size=(500, 3)), rng.uniform(size=500))
    assert main(["downsample", str(tmp_path / "in.ply"), "--voxel", "0.25",
                 "--out", str(tmp_path / "out.ply")]) == EXIT_OK
    pts, _, _ = io.read_cloud(tmp_path / "out.ply")
    assert 0 < len(pts) <= 64


def test_pipeline_three_views(tmp_path, synth_dir):
    out = tmp_path / "run"
    assert main(["pipeline", str(synth_dir), "--preset", "M", "--out", str(out)]) == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["views"]) == 3 and metrics["gaussians"] > 0
    assert all("object_psnr" in v for v in metrics["views"])
    assert len(list((out / "renders").glob("*.png"))) == 9
    assert "timing_s" in json.loads((out / "manifest.json").read_text())


def test_config_file_and_environment(tmp_path, synth_dir, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# fit settings\niterations = 2\nlambda = 0.3\n")
    target = tmp_path / "env_out"
    monkeypatch.setenv("AQUASPLAT_OUT", str(target / "fit.ply"))
    rc = main(["fit", "--scene", str(synth_dir / "scene.ply"), "--medium", str(synth_dir / "medium.json"),
               "--cameras", str(synth_dir / "cameras.json"), "--images", str(synth_dir / "degraded"),
               "--config", str(cfg), "--lambda", "0.2"])
    assert rc == EXIT_OK
    m = json.loads((target / "manifest.json").read_text())
    assert m["config"]["iterations"] == 2 and m["config"]["lam"] == 0.2  # flag beats config
    cfg.write_text("bogus = 1\n")
    rc = main(["fit", "--scene", str(synth_dir / "scene.ply"), "--medium", str(synth_dir / "medium.json"),
               "--cameras", str(synth_dir / "cameras.json"), "--images", str(synth_dir / "degraded"),
               "--config", str(cfg)])
    assert rc == EXIT_INPUT


def test_input_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["pipeline", str(empty), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert main(["pipeline", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert main(["eval", str(tmp_path / "a.png"), str(tmp_path / "b.png")]) == EXIT_INPUT
    assert main(["synth", "--out", str(tmp_path / "s"), "--unknown-flag"]) == EXIT_INPUT
    assert main(["synth", "--out", str(tmp_path / "s"), "--resolution", "8"]) == EXIT_INPUT


def test_divergence_exit_code(tmp_path, synth_dir):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    for i in range(3):
        np.save(imgs / f"view_{i:02d}.npy", np.full((32, 32, 3), 1e7))
    rc = main(["fit", "--scene", str(synth_dir / "scene.ply"), "--medium", str(synth_dir / "medium.json"),
               "--cameras", str(synth_dir / "cameras.json"), "--images", str(imgs), "--iterations", "2",
               "--out", str(tmp_path / "f.ply")])
    assert rc == EXIT_NUMERIC


def test_console_help():
    out = subprocess.run([sys.executable, "-m", "aquasplat.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "downsample", "align", "fit", "render", "eval", "pipeline"):
        assert cmd in out.stdout
