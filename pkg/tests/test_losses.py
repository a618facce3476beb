import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refrax.field import SH_C0, VoxelField, sigmoid, softplus
from refrax.geometry import Medium, MediumMap, make_sphere
from refrax.lightpath import Scene
from refrax.losses import (TrainingError, backward, distortion_loss, distortion_loss_grad,
                           distortion_loss_reference, loss_and_grad, photometric_loss,
                           total_loss)
from refrax.renderer import RenderConfig, render_traced, srgb, srgb_grad, trace_for_mode


def pairwise_bruteforce(s_edges, w, keep):
    """Independent double loop over all sample pairs."""
    total = 0.0
    mids = [(s_edges[i] + s_edges[i + 1]) / 2 for i in range(len(w))]
    for i in range(len(w)):
        if not keep[i]:
            continue
        total += w[i] ** 2 * (s_edges[i + 1] - s_edges[i]) / 3
        for j in range(len(w)):
            if keep[j]:
                total += w[i] * w[j] * abs(mids[i] - mids[j])
    return total


def random_sets(rng, n, m):
    edges = np.sort(rng.random((n, m + 1)), axis=1)
    edges[:, 0], edges[:, -1] = 0.0, 1.0
    w = rng.random((n, m)) * (rng.random((n, m)) < 0.7)
    w /= np.maximum(w.sum(axis=1, keepdims=True), 1e-12) / rng.random((n, 1))
    inside = rng.random((n, m)) < 0.4
    return edges, w, inside


def test_photometric_cases():
    assert photometric_loss([0.3, 0.2, 0.1], [0.3, 0.2, 0.1]) == 0
    assert photometric_loss([1, 1, 1], [0, 0, 0]) == pytest.approx(1.0, abs=1e-15)
    assert photometric_loss([0.5, 0, 0], [0, 0, 0]) == pytest.approx(1 / 12, abs=1e-15)


def test_distortion_cases():
    edges = np.linspace(0, 1, 5)
    assert distortion_loss(edges, np.zeros(4)) == 0
    assert distortion_loss([0.3, 0.4], [1.0], [True]) == pytest.approx(1 / 30, abs=1e-15)
    w = np.array([0.6, 0.3])
    assert distortion_loss([0.1, 0.2, 0.3], w, outside=[False, False]) == 0
    assert distortion_loss([0.1, 0.2, 0.3], w) > 0


def test_two_sample_value():
    # w = (0.5, 0.5) with midpoints 0.25 and 0.75: pairs 2 * 0.25 * 0.5, self 2 * 0.25 * 0.5 / 3
    assert distortion_loss([0, 0.5, 1.0], [0.5, 0.5]) == pytest.approx(0.25 + 1 / 12, abs=1e-15)


@pytest.mark.parametrize("m", [1, 2, 7, 33, 64])
def test_linear_matches_quadratic(rng, m):
    edges, w, inside = random_sets(rng, 40, m)
    fast, _ = distortion_loss_grad(edges, w, ~inside)
    for k in range(40):
        ref = pairwise_bruteforce(edges[k], w[k], ~inside[k])
        assert abs(fast[k] - ref) <= 1e-12
        assert abs(distortion_loss_reference(edges[k], w[k], ~inside[k]) - ref) <= 1e-12


def test_corrected_never_exceeds_uncorrected(rng):
    edges, w, inside = random_sets(rng, 10_000, 32)
    corrected = distortion_loss(edges, w, ~inside)
    plain = distortion_loss(edges, w)
    assert np.all(corrected <= plain + 1e-15)
    assert np.all(corrected >= 0)


def test_zero_iff_outside_weights_zero(rng):
    edges, w, inside = random_sets(rng, 200, 16)
    w_in = np.where(inside, w, 0.0)
    assert np.all(distortion_loss(edges, w_in, ~inside) == 0)
    has_out = np.any(~inside & (w > 0), axis=1)
    assert np.all(distortion_loss(edges, w, ~inside)[has_out] > 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2 ** 32 - 1))
def test_order_does_not_matter(m, seed):
    rng = np.random.default_rng(seed)
    edges, w, inside = random_sets(rng, 1, m)
    fast = distortion_loss(edges, w, ~inside)[0]
    # the reference sums over pairs, so shuffling whole cells leaves it unchanged
    perm = rng.permutation(m)
    lo, hi = edges[0, :-1][perm], edges[0, 1:][perm]
    mids, widths, ww = (lo + hi) / 2, hi - lo, w[0][perm]
    keep = ~inside[0][perm]
    shuffled = sum(ww[i] * ww[j] * abs(mids[i] - mids[j]) for i in range(m) for j in range(m)
                   if keep[i] and keep[j]) + sum(ww[keep] ** 2 * widths[keep]) / 3
    assert abs(fast - shuffled) < 1e-12


def test_distortion_gradient_matches_differences(rng):
    edges, w, inside = random_sets(rng, 1, 12)
    _, g = distortion_loss_grad(edges, w, ~inside)
    h = 1e-6
    for k in range(12):
        wp, wm = w.copy(), w.copy()
        wp[0, k] += h
        wm[0, k] -= h
        fd = (distortion_loss(edges, wp, ~inside) - distortion_loss(edges, wm, ~inside)) / (2 * h)
        assert abs(fd[0] - g[0, k]) < 1e-7


# -- gradients through the renderer ---------------------------------------------

def test_single_voxel_hand_gradient():
    f = VoxelField(1, ((-1, -1, -1), (1, 1, 1)), 0, params=np.array([[[[0.3, 0.4, -0.2, 0.9]]]]))
    cfg = RenderConfig(1, 0, near=0.05, far=15.0)
    trace = trace_for_mode(None, [[0, 0, 0.0]], [[0, 0, 1.0]], "straight")
    target = np.array([[0.2, 0.5, 0.1]])
    report, grad = backward(f, trace, target, cfg, lambda_dist=0.0)

    delta = 1.0 - 0.05  # the single cell spans near .. the field box exit at t = 1
    sigma = softplus(0.3)
    w = 1 - math.exp(-sigma * delta)
    col = sigmoid(np.array([0.4, -0.2, 0.9]) * SH_C0)
    lin = w * col
    g = 2 / 3 * (srgb(lin) - target[0]) * srgb_grad(lin)
    d_p0 = float(np.sum(g * col)) * math.exp(-sigma * delta) * delta * sigmoid(0.3)
    d_coef = g * w * col * (1 - col) * SH_C0
    assert report.rgb == pytest.approx(float(np.sum((srgb(lin) - target[0]) ** 2) / 3), abs=1e-15)
    assert abs(grad[0, 0, 0, 0] - d_p0) < 1e-10
    assert np.allclose(grad[0, 0, 0, 1:], d_coef, rtol=0, atol=1e-10)


def test_empty_field_at_optimum_has_zero_gradient(sphere_scene):
    f = VoxelField(6, ((-1, -1, -1), (1, 1, 1)), 2)
    f.params[..., 0] = -1000.0  # softplus underflows to exactly zero
    rng = np.random.default_rng(0)
    o = np.tile([0.0, 0, -0.9], (8, 1))
    d = np.c_[rng.normal(0, 0.2, (8, 2)), np.ones(8)]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    trace = trace_for_mode(sphere_scene, o, d)
    cfg = RenderConfig(16, 16)
    target = render_traced(f, trace, cfg).srgb
    report, grad = backward(f, trace, target, cfg)
    assert report.total == 0
    assert np.all(grad == 0)


def test_non_finite_loss_names_the_ray(sphere_scene):
    f = VoxelField(4, ((-1, -1, -1), (1, 1, 1)), 0)
    f.params[0, 0, :, 0] = np.nan
    o = np.array([[0.9, 0.9, -0.9], [-0.8, -0.8, -0.9]])
    d = np.array([[0, 0, 1.0], [0, 0, 1.0]])
    trace = trace_for_mode(None, o, d, "straight")
    with pytest.raises(TrainingError, match="ray 7"):
        loss_and_grad(f, trace, np.zeros((2, 3)), RenderConfig(16, 0), ray_ids=np.array([3, 7]))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    f = VoxelField(6, ((-1, -1, -1), (1, 1, 1)), 1)
    f.params[:] = rng.normal(0, 1, f.params.shape)
    scene = Scene(make_sphere(0.5, 3), MediumMap({1: Medium(1.5)}))
    o = np.tile([0.0, 0, -0.95], (6, 1)) + rng.normal(0, 0.02, (6, 3))
    d = np.c_[rng.normal(0, 0.25, (6, 2)), np.ones(6)]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    trace = trace_for_mode(scene, o, d)
    assert np.all(trace.refraction.bends >= 2)
    cfg = RenderConfig(24, 0)
    target = rng.random((6, 3))
    _, grad = backward(f, trace, target, cfg, lambda_dist=0.05)
    h = 1e-4
    flat = f.params.reshape(-1)
    for k in np.argsort(-np.abs(grad.ravel()))[:20]:
        keep = flat[k]
        flat[k] = keep + h
        up = total_loss(f, trace, target, cfg, 0.05)
        flat[k] = keep - h
        down = total_loss(f, trace, target, cfg, 0.05)
        flat[k] = keep
        fd = (up - down) / (2 * h)
        assert abs(fd - grad.ravel()[k]) <= 1e-4 * abs(fd)
