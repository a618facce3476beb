import hashlib
import math

import numpy as np
import pytest

from refrax.geometry import make_box, make_sphere
from refrax.losses import TrainingError
from refrax.renderer import render_trace_chunked, trace_for_mode
from refrax.train import (ConfigError, TrainConfig, learning_rate, new_field, proxy_mesh, train)


def test_defaults_and_text_round_trip():
    cfg = TrainConfig()
    assert (cfg.lr_init, cfg.lr_final, cfg.batch_size) == (8e-3, 1e-3, 1024)
    assert (cfg.density_lr_scale, cfg.color_lr_scale) == (50.0, 10.0)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_parsing():
    cfg = TrainConfig.from_text("# comment\niterations = 7\n\ntir = false  # inline\nmode = r3f\n")
    assert cfg.iterations == 7 and cfg.tir is False and cfg.mode == "r3f"
    assert TrainConfig().override(["lambda_dist=0.5"]).lambda_dist == 0.5
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig().override(["colour=1"])
    with pytest.raises(ConfigError, match="bad value"):
        TrainConfig().override(["iterations=many"])
    with pytest.raises(ConfigError, match="line 2"):
        TrainConfig.from_text("iterations = 3\nnonsense\n")


@pytest.mark.parametrize("pairs", [["lambda_dist=-1"], ["near=2", "far=1"], ["mode=magic"],
                                   ["lambda_int=0.1"], ["batch_size=0"], ["lr_init=0"]])
def test_config_validation(pairs):
    with pytest.raises(ConfigError):
        TrainConfig().override(pairs)


def test_straight_mode_rejects_ablations():
    with pytest.raises(ConfigError, match="straight"):
        TrainConfig().override(["mode=straight", "tir=false"])
    with pytest.raises(ConfigError, match="straight"):
        TrainConfig().override(["mode=straight", "first_surface_reflection=false"])


def test_learning_rate_schedule():
    cfg = TrainConfig(iterations=1000, warmup_steps=100)
    assert learning_rate(0, cfg) == 0
    assert learning_rate(50, cfg) == pytest.approx(
        math.sin(math.pi / 4) * 8e-3 * (1e-3 / 8e-3) ** 0.05, rel=1e-12)
    assert learning_rate(1000, cfg) == pytest.approx(1e-3, rel=1e-12)
    assert learning_rate(500, cfg) == pytest.approx(math.sqrt(8e-3 * 1e-3), rel=1e-12)
    rates = [learning_rate(s, cfg) for s in range(100, 1001)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_proxy_mesh_keeps_volume_and_changes_shape():
    sphere = make_sphere(0.5, 3)
    proxy = proxy_mesh(sphere, seed=1)
    proxy.validate()
    assert proxy.signed_volume(1) == pytest.approx(sphere.signed_volume(1), rel=1e-9)
    assert not np.allclose(proxy.vertices, sphere.vertices, atol=1e-3)
    assert np.array_equal(proxy_mesh(sphere, 1).vertices, proxy.vertices)
    box = make_box((0.8, 0.8, 0.8), subdiv=3)
    assert proxy_mesh(box).signed_volume(1) == pytest.approx(0.512, rel=1e-9)


@pytest.fixture(scope="module")
def flat_rays():
    rng = np.random.default_rng(0)
    n = 2000
    o = np.c_[rng.uniform(-0.5, 0.5, (n, 2)), np.full(n, -1.9)]
    d = np.tile([0, 0, 1.0], (n, 1))
    return o, d, trace_for_mode(None, o, d, "straight")


def small_config(**kw):
    base = dict(batch_size=256, grid_resolution=8, sh_degree=0, n_coarse=16, n_fine=16,
                mode="straight", log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def test_constant_colour_converges(flat_rays):
    o, d, trace = flat_rays
    cfg = small_config(iterations=1000, lr_final=1e-4)
    target = np.tile([0.2, 0.6, 0.4], (len(o), 1))
    result = train(None, o, d, target, cfg, trace=trace)
    rgb, _, _ = render_trace_chunked(result.field, trace, cfg.render_config())
    assert np.max(np.abs(rgb - target)) < 2 / 255
    assert result.final_psnr > result.initial_psnr


def test_divergence_aborts(flat_rays):
    o, d, trace = flat_rays
    cfg = small_config(iterations=400, lr_init=50.0, lr_final=50.0, warmup_steps=0)
    near_start, _, _ = render_trace_chunked(new_field(cfg), trace, cfg.render_config())
    with pytest.raises(TrainingError, match="diverged at iteration"):
        train(None, o, d, near_start + 1e-3, cfg, trace=trace)


def test_seeded_runs_are_identical(flat_rays, tmp_path):
    o, d, trace = flat_rays
    target = np.random.default_rng(5).random((len(o), 3))

    def run(seed, out=None):
        hashes = []
        cfg = small_config(iterations=30, seed=seed, sh_degree=1)
        train(None, o, d, target, cfg, out_dir=out, trace=trace,
              callback=lambda s, f, r: hashes.append(hashlib.sha256(f.params.tobytes()).digest()))
        return hashes

    a, b = run(3, tmp_path / "a"), run(3, tmp_path / "b")
    assert a == b
    assert run(4) != a
    assert (tmp_path / "a" / "checkpoint.rfx").read_bytes() == \
        (tmp_path / "b" / "checkpoint.rfx").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_text() == (tmp_path / "b" / "loss.csv").read_text()


def test_callback_can_stop_early(flat_rays):
    o, d, trace = flat_rays
    seen = []
    result = train(None, o, d, np.zeros((len(o), 3)), small_config(iterations=50), trace=trace,
                   callback=lambda s, f, r: seen.append(s) or s == 5)
    assert seen == [1, 2, 3, 4, 5] and len(result.history) == 5
