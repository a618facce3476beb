"""Photometric and distortion losses and reverse-mode gradients through the renderer.

Path geometry and Fresnel weights are constants here: they depend on the mesh,
not on field parameters.  Resampled sample positions are treated as fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import VoxelField
from .lightpath import TraceResult
from .renderer import PathRender, RenderConfig, RenderedBatch, render_traced, srgb_grad


class TrainingError(RuntimeError):
    pass


@dataclass
class LossReport:
    rgb: float
    dist: float
    total: float
    psnr: float

    def as_row(self):
        return (self.rgb, self.dist, self.total, self.psnr)


def photometric_loss(c_hat, c):
    """One third of the squared color error, per ray for batched input."""
    diff = np.asarray(c_hat, dtype=float) - np.asarray(c, dtype=float)
    return np.sum(diff * diff, axis=-1) / 3.0


def _mids_widths(s_edges):
    s_edges = np.asarray(s_edges, dtype=float)
    return 0.5 * (s_edges[..., 1:] + s_edges[..., :-1]), np.diff(s_edges, axis=-1)


def distortion_loss_grad(s_edges, weights, outside=None):
    """Distortion loss and its gradient w.r.t. ``weights``.

    Only samples flagged in ``outside`` take part (all when None).  The pairwise
    term uses prefix sums over the sorted midpoints, so the cost is linear.
    """
    w = np.asarray(weights, dtype=float)
    if outside is not None:
        w = np.where(outside, w, 0.0)
    m, ds = _mids_widths(s_edges)
    wm = w * m
    w_below = np.cumsum(w, axis=-1) - w
    wm_below = np.cumsum(wm, axis=-1) - wm
    w_above = w.sum(axis=-1, keepdims=True) - w_below - w
    wm_above = wm.sum(axis=-1, keepdims=True) - wm_below - wm
    spread = m * w_below - wm_below + wm_above - m * w_above  # sum_j w_j |m_k - m_j|
    loss = np.sum(w * spread, axis=-1) + np.sum(w * w * ds, axis=-1) / 3.0
    grad = 2.0 * spread + (2.0 / 3.0) * w * ds
    if outside is not None:
        grad = np.where(outside, grad, 0.0)
    return loss, grad


def distortion_loss(s_edges, weights, outside=None):
    return distortion_loss_grad(s_edges, weights, outside)[0]


def distortion_loss_reference(s_edges, weights, outside=None):
    """Direct double-sum evaluation for a single ray (quadratic cost)."""
    w = np.asarray(weights, dtype=float)
    if outside is not None:
        w = np.where(outside, w, 0.0)
    m, ds = _mids_widths(s_edges)
    pair = sum(w[i] * w[j] * abs(m[i] - m[j]) for i in range(len(w)) for j in range(len(w)))
    return pair + sum(w[i] ** 2 * ds[i] for i in range(len(w))) / 3.0


def _path_backward(field: VoxelField, pr: PathRender, g_color, g_weights, grad):
    """Push d(loss)/d(path color) and d(loss)/d(weights) down to grid parameters."""
    G = np.einsum("nc,nmc->nm", g_color, pr.colors)
    if g_weights is not None:
        G = G + g_weights
    w, T = pr.weights, pr.transmittance
    gw = G * w
    after = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw  # sum over later samples
    d_tau = G * (T - w) - after
    d_sigma = d_tau * pr.samples.delta
    d_colors = w[:, :, None] * g_color[:, None, :]
    field.query_backward(pr.cache, d_colors, d_sigma, grad)


def loss_and_grad(field: VoxelField, trace: TraceResult, targets, cfg: RenderConfig,
                  lambda_dist=0.01, corrected=True, rng=None, grad=None, ray_ids=None):
    """Mean batch loss and its gradient, accumulated into ``grad`` (allocated if None)."""
    targets = np.asarray(targets, dtype=float)
    out: RenderedBatch = render_traced(field, trace, cfg, rng, keep_cache=True)
    n = len(targets)
    diff = out.srgb - targets
    l_rgb = photometric_loss(out.srgb, targets)
    refr = out.refraction
    outside = ~refr.samples.inside if corrected else None
    l_dist, g_dist = distortion_loss_grad(refr.samples.s_edges, refr.weights, outside)
    per_ray = l_rgb + lambda_dist * l_dist
    bad = np.nonzero(~np.isfinite(per_ray))[0]
    if bad.size:
        rid = bad[0] if ray_ids is None else ray_ids[bad[0]]
        raise TrainingError(f"non-finite loss at ray {int(rid)}")

    if grad is None:
        grad = np.zeros_like(field.params)
    g_lin = (2.0 / 3.0) * diff / n * srgb_grad(out.combined)
    g_refr = g_lin.copy()
    idx = out.reflect_idx
    if idx.size:
        R = out.reflectance[idx, None]
        g_refr[idx] *= 1.0 - R
        _path_backward(field, out.reflection, g_lin[idx] * R, None, grad)
    _path_backward(field, refr, g_refr, lambda_dist * g_dist / n, grad)

    rgb = float(l_rgb.mean())
    dist = float(l_dist.mean())
    report = LossReport(rgb, dist, rgb + lambda_dist * dist,
                        float(-10.0 * np.log10(max(rgb, 1e-12))))
    return report, grad, out


def backward(field: VoxelField, trace: TraceResult, targets, cfg: RenderConfig | None = None,
             lambda_dist=0.01, corrected=True, rng=None):
    """Loss report and parameter gradient for a ray batch."""
    report, grad, _ = loss_and_grad(field, trace, targets, cfg or RenderConfig(), lambda_dist,
                                    corrected, rng)
    return report, grad


def total_loss(field: VoxelField, trace: TraceResult, targets, cfg: RenderConfig,
               lambda_dist=0.01, corrected=True):
    """Forward-only loss value; used by finite-difference checks."""
    out = render_traced(field, trace, cfg, None)
    l_rgb = photometric_loss(out.srgb, targets)
    refr = out.refraction
    outside = ~refr.samples.inside if corrected else None
    l_dist = distortion_loss(refr.samples.s_edges, refr.weights, outside)
    return float(l_rgb.mean() + lambda_dist * l_dist.mean())
