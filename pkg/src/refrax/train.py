"""Training configuration, the optimization loop and evaluation helpers."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .field import VoxelField
from .geometry import TriMesh, jitter_vertices, laplacian_smooth, vertex_normals
from .lightpath import Scene
from .losses import TrainingError, loss_and_grad
from .metrics import EvalReport, dmae, psnr, ssim
from .renderer import (MODES, RenderConfig, render_trace_chunked, subset_trace, trace_for_mode)

logger = logging.getLogger(__name__)

R3F_JITTER = 0.02
R3F_SMOOTH_FACTOR = 1.0
R3F_SMOOTH_ITERS = 100
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 1024
    lr_init: float = 8e-3
    lr_final: float = 1e-3
    warmup_steps: int = 100
    density_lr_scale: float = 50.0
    color_lr_scale: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    lambda_int: float = 0.0
    lambda_dist: float = 0.01
    near: float = 0.05
    far: float = 15.0
    n_coarse: int = 64
    n_fine: int = 64
    grid_resolution: int = 64
    grid_extent: float = 2.0
    sh_degree: int = 2
    init_density: float = 0.1
    mode: str = "oracle"
    corrected_distortion: bool = True
    first_surface_reflection: bool = True
    tir: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def validate(self):
        if self.lambda_dist < 0:
            raise ConfigError("lambda_dist must be >= 0")
        if self.lambda_int != 0:
            raise ConfigError("lambda_int must be 0 (interlevel loss is not implemented)")
        if not 0 < self.near < self.far:
            raise ConfigError("need 0 < near < far")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.mode == "straight" and not (self.tir and self.first_surface_reflection):
            raise ConfigError("ablation switches do not apply to straight mode")
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive")
        return self

    def render_config(self):
        return RenderConfig(self.n_coarse, self.n_fine, self.near, self.far,
                            reflection=self.first_surface_reflection)

    def to_text(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n"
                       for f in dataclasses.fields(self))

    def override(self, pairs):
        """Return a copy with ``key=value`` strings (or a dict) applied."""
        items = pairs.items() if isinstance(pairs, dict) else (_split_pair(p) for p in pairs)
        types = {f.name: f.type for f in dataclasses.fields(self)}
        updates = {}
        for key, raw in items:
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _parse(types[key], raw, key)
        return dataclasses.replace(self, **updates).validate()

    @classmethod
    def from_text(cls, text):
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            pairs.append(line)
        return cls().override(pairs)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())


def _fmt(v):
    return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)


def _split_pair(p):
    key, _, value = p.partition("=")
    return key.strip(), value.strip()


def _parse(kind, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def learning_rate(step, cfg: TrainConfig):
    """Log-linear decay from lr_init to lr_final with a sine warm-up ramp."""
    frac = min(max(step / max(cfg.iterations, 1), 0.0), 1.0)
    lr = math.exp((1 - frac) * math.log(cfg.lr_init) + frac * math.log(cfg.lr_final))
    if cfg.warmup_steps > 0:
        lr *= math.sin(0.5 * math.pi * min(step / cfg.warmup_steps, 1.0))
    return lr


def proxy_mesh(mesh, seed=0):
    """Degraded stand-in geometry: seeded vertex jitter followed by Laplacian smoothing.

    Uniform Laplacian smoothing shrinks the surface a lot (a coarse box collapses
    to a point), so each region is rescaled about its centroid afterwards to keep
    its original enclosed volume.  The shape error stays; the size error does not.
    """
    smooth = laplacian_smooth(jitter_vertices(mesh, R3F_JITTER, seed), R3F_SMOOTH_FACTOR,
                              R3F_SMOOTH_ITERS)
    verts = smooth.vertices.copy()
    for region in mesh.regions():
        target = mesh.signed_volume(region)
        got = smooth.signed_volume(region)
        if got <= 1e-12 * max(target, 1e-12):
            raise ValueError(f"region {region} collapsed under smoothing; use a finer mesh")
        sel = np.unique(smooth.triangles[smooth.labels == region])
        centre = verts[sel].mean(axis=0)
        verts[sel] = centre + (verts[sel] - centre) * (target / got) ** (1.0 / 3.0)
    return TriMesh(verts, smooth.triangles, vertex_normals(verts, smooth.triangles),
                   smooth.labels)


def tracing_scene(scene: Scene | None, mode, seed=0, threads=1):
    if scene is None or scene.mesh is None or mode == "straight":
        return None
    if mode == "r3f":
        return Scene(proxy_mesh(scene.mesh, seed), scene.media, threads=threads)
    return scene


def new_field(cfg: TrainConfig):
    e = cfg.grid_extent
    return VoxelField(cfg.grid_resolution, ((-e, -e, -e), (e, e, e)), cfg.sh_degree,
                      cfg.init_density)


@dataclass
class TrainResult:
    field: VoxelField
    history: list  # (iteration, rgb, dist, total, lr)
    initial_psnr: float
    final_psnr: float


def train(scene: Scene | None, origins, dirs, targets, cfg: TrainConfig, out_dir=None,
          threads=1, trace=None, callback=None) -> TrainResult:
    """Fit a voxel field to posed pixels ``targets`` (sRGB) seen along ``(origins, dirs)``.

    ``callback(step, field, report)`` runs after every update; a truthy return
    value stops training early.
    """
    cfg.validate()
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    if trace is None:
        tscene = tracing_scene(scene, cfg.mode, cfg.seed, threads)
        trace = trace_for_mode(tscene, origins, dirs, cfg.mode, cfg.tir,
                               cfg.first_surface_reflection)
    n_rays = len(targets)
    rng = np.random.default_rng(cfg.seed)
    field = new_field(cfg)
    rcfg = cfg.render_config()
    n_chan = field.n_channels
    lr_scale = np.full(n_chan, cfg.color_lr_scale)
    lr_scale[0] = cfg.density_lr_scale
    flat = field.params.reshape(-1)
    grad = np.zeros_like(field.params)
    gflat = grad.reshape(-1)
    m1 = np.zeros_like(flat)
    m2 = np.zeros_like(flat)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "loss.csv", "w")
        log.write("iteration,loss_rgb,loss_dist,loss,lr\n")
    history = []
    initial = None
    bad_run = 0
    try:
        for step in range(1, cfg.iterations + 1):
            idx = rng.integers(0, n_rays, cfg.batch_size)
            report, _, _ = loss_and_grad(field, subset_trace(trace, idx), targets[idx], rcfg,
                                         cfg.lambda_dist, cfg.corrected_distortion, rng, grad,
                                         ray_ids=idx)
            lr = learning_rate(step, cfg)
            kernels.adam_step(flat, gflat, m1, m2, np.ascontiguousarray(lr * lr_scale), n_chan,
                              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, step)
            history.append((step, report.rgb, report.dist, report.total, lr))
            if out is not None:
                log.write(f"{step},{report.rgb!r},{report.dist!r},{report.total!r},{lr!r}\n")
            if initial is None:
                initial = report
            bad_run = bad_run + 1 if report.total > DIVERGENCE_FACTOR * initial.total else 0
            if bad_run >= DIVERGENCE_PATIENCE:
                raise TrainingError(
                    f"diverged at iteration {step}: loss {report.total:.4g} stayed above "
                    f"{DIVERGENCE_FACTOR:g}x the initial {initial.total:.4g} for "
                    f"{DIVERGENCE_PATIENCE} steps")
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info("iter %d loss %.5f psnr %.2f lr %.2e", step, report.total,
                            report.psnr, lr)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                field.save(out / f"checkpoint_{step:06d}.rfx")
            if callback is not None and callback(step, field, report):
                break
    finally:
        if out is not None:
            log.close()
    if out is not None:
        field.save(out / "checkpoint.rfx")
    first = history[0][1] if history else float("nan")
    last = history[-1][1] if history else float("nan")
    return TrainResult(field, history, -10 * math.log10(max(first, 1e-12)),
                       -10 * math.log10(max(last, 1e-12)))


def train_psnr(field, trace, targets, rcfg, chunk=8192):
    rgb, _, _ = render_trace_chunked(field, trace, rcfg, chunk)
    return psnr(rgb, targets)


def render_views(field, scene, cameras, cfg: TrainConfig, threads=1):
    """Render cameras with the training-time path model; returns (images, depths, opacity)."""
    tscene = tracing_scene(scene, cfg.mode, cfg.seed, threads)
    rcfg = cfg.render_config()
    imgs, depths, opac = [], [], []
    for cam in cameras:
        o, d = cam.rays()
        trace = trace_for_mode(tscene, o, d, cfg.mode, cfg.tir, cfg.first_surface_reflection)
        rgb, depth, a = render_trace_chunked(field, trace, rcfg)
        imgs.append(rgb.reshape(cam.height, cam.width, 3))
        depths.append(depth.reshape(cam.height, cam.width))
        opac.append(a.reshape(cam.height, cam.width))
    return np.array(imgs), np.array(depths), np.array(opac)


def evaluate(field, scene, cameras, images, depths, masks, cfg: TrainConfig, scene_name="scene",
             method="oracle", threads=1):
    """Per-view metrics against ground truth; PSNR_M and DMAE are masked to object pixels."""
    pred, pdepth, _ = render_views(field, scene, cameras, cfg, threads)
    report = EvalReport(scene_name, method)
    for k in range(len(cameras)):
        img = np.round(np.clip(pred[k], 0, 1) * 255) / 255
        m = masks[k]
        report.add(psnr(img, images[k]), psnr(img, images[k], m) if m.any() else None,
                   ssim(img, images[k]), dmae(pdepth[k], depths[k], m) if m.any() else None)
    return report, pred, pdepth
