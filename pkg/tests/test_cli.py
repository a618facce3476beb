import json
import subprocess
import sys

import numpy as np
import pytest

import refrax.train
from refrax.cli import main
from refrax.renderer import read_pfm

SMALL = ["--resolution", "16", "--n-train", "4", "--n-val", "2", "--n-test", "3"]
FAST = ["--iters", "20", "--batch", "64", "--config", "grid_resolution=8",
        "--config", "n_coarse=8", "--config", "n_fine=8", "--config", "log_every=0"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--preset", "convex-sphere", "--out", str(root / "ds"), "--seed", "1"]
                + SMALL) == 0
    return root / "ds"


@pytest.fixture(scope="module")
def checkpoint(dataset):
    out = dataset.parent / "run"
    assert main(["train", str(dataset), "--out", str(out), "--seed", "2"] + FAST) == 0
    return out / "checkpoint.rfx"


def test_gen_layout(dataset):
    for split in ("train", "val", "test"):
        assert (dataset / f"transforms_{split}.json").exists()
    names = set(tree(dataset))
    assert any(n.endswith(".png") for n in names) and any(n.endswith(".pfm") for n in names)
    manifest = json.loads((dataset.parent / "ds.manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 1
    assert "version" in manifest and "wall_seconds" in manifest["timings"]


def test_gen_is_reproducible(dataset, tmp_path):
    assert main(["gen", "--preset", "convex-sphere", "--out", str(tmp_path / "again"),
                 "--seed", "1"] + SMALL) == 0
    assert tree(tmp_path / "again") == tree(dataset)


def test_unknown_preset_lists_presets(tmp_path, capsys):
    assert main(["gen", "--preset", "teapot", "--out", str(tmp_path / "x")]) == 2
    assert "convex-sphere" in capsys.readouterr().err


def test_straight_with_ablation_is_a_usage_error(dataset, tmp_path):
    assert main(["train", str(dataset), "--mode", "straight", "--no-tir",
                 "--out", str(tmp_path / "r")]) == 2


def test_bad_override_and_missing_dataset(dataset, tmp_path):
    assert main(["train", str(dataset), "--config", "mode=warp", "--out", str(tmp_path)]) == 2
    assert main(["train", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == 2


def test_train_outputs(checkpoint):
    run = checkpoint.parent
    assert (run / "loss.csv").read_text().count("\n") == 21
    assert "grid_resolution = 8" in (run / "train_config.txt").read_text()
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["config"]["iterations"] == 20


def test_straight_mode_has_no_bends(dataset, tmp_path, monkeypatch):
    seen = []
    real = refrax.train.trace_for_mode

    def spy(*args, **kw):
        trace = real(*args, **kw)
        seen.append(trace)
        return trace

    monkeypatch.setattr(refrax.train, "trace_for_mode", spy)
    assert main(["train", str(dataset), "--mode", "straight", "--out", str(tmp_path)] + FAST) == 0
    assert seen and all(np.all(t.refraction.bends == 0) for t in seen)


def test_missing_checkpoint(dataset, tmp_path):
    assert main(["eval", str(tmp_path / "none.rfx"), str(dataset)]) == 2
    assert main(["render", str(tmp_path / "none.rfx"), str(dataset)]) == 2


def test_eval_twice_is_identical(checkpoint, dataset, tmp_path):
    for name in ("a", "b"):
        assert main(["eval", str(checkpoint), str(dataset), "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "report.csv").read_text()
    assert a == (tmp_path / "b" / "report.csv").read_text()
    assert a.count("\n") == 1 + 3 + 1


def test_render_index_and_depth(checkpoint, dataset, tmp_path):
    assert main(["render", str(checkpoint), str(dataset), "--index", "3",
                 "--out", str(tmp_path / "r")]) == 2
    assert main(["render", str(checkpoint), str(dataset), "--index", "1", "--depth",
                 "--out", str(tmp_path / "r")]) == 0
    depth = read_pfm(tmp_path / "r" / "frame_0000_depth.pfm")
    assert depth.shape == (16, 16) and np.all(np.isfinite(depth))


def test_render_helical(checkpoint, dataset, tmp_path):
    assert main(["render", str(checkpoint), str(dataset), "--helical", "3",
                 "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("frame_*.png")) == \
        ["frame_0000.png", "frame_0001.png", "frame_0002.png"]


def test_threads_env_validation(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("REFREF_THREADS", "lots")
    assert main(["train", str(dataset), "--out", str(tmp_path)] + FAST) == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "refrax.cli", "gen", "--preset", "nope",
                          "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert out.returncode == 2 and "available presets" in out.stderr
