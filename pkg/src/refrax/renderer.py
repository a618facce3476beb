"""Sampling along piecewise paths, volume integration, Fresnel combination and
the ground-truth forward renderer.

Everything here is batched: a :class:`~refrax.lightpath.PathBatch` of ``N``
paths yields sample arrays shaped ``(N, M)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .field import BackgroundModel, FieldCache, VoxelField, background_hit, background_radiance
from .geometry import AMBIENT
from .lightpath import PathBatch, Scene, TraceResult, straight_paths, trace_paths

REFLECTION_CUTOFF = 1e-4
MODES = ("oracle", "r3f", "straight")


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    near: float = 0.05
    far: float = 15.0
    pdf_floor: float = 0.01  # uniform share mixed into the resampling pdf
    reflection: bool = True


@dataclass
class SampleSet:
    """Ordered samples along each path, one cell ``[edges_i, edges_{i+1})`` per sample."""

    t: np.ndarray          # (N, M) sample arc distances
    edges: np.ndarray      # (N, M + 1)
    near: np.ndarray       # (N,)
    far: np.ndarray        # (N,)
    positions: np.ndarray  # (N, M, 3)
    directions: np.ndarray
    media: np.ndarray      # (N, M)

    @property
    def delta(self):
        return np.diff(self.edges, axis=1)

    @property
    def s_edges(self):
        span = (self.far - self.near)[:, None]
        return (self.edges - self.near[:, None]) / span

    @property
    def s(self):
        return (self.t - self.near[:, None]) / (self.far - self.near)[:, None]

    @property
    def inside(self):
        return self.media != AMBIENT

    def __len__(self):
        return self.t.shape[0]


def as_batch(path) -> PathBatch:
    if isinstance(path, PathBatch):
        return path
    k = len(path.vertices)
    codes = {name: i for i, name in enumerate(PathBatch.KIND_CODES)}
    tau = np.asarray(path.tau, dtype=float)[None, :k + 1].copy()
    tau[0, k] = np.inf
    return PathBatch(path.vertices[None].copy(), path.directions[None].copy(), tau,
                     np.asarray(path.media, dtype=np.int64)[None].copy(),
                     np.array([k]), np.array([[codes[c] for c in path.kinds]],
                                             dtype=np.int64).reshape(1, k - 1),
                     np.array([path.reflectance], dtype=float))


def _per_ray(value, n):
    return np.broadcast_to(np.asarray(value, dtype=float), (n,)).astype(float)


def _build(paths: PathBatch, t, edges, near, far) -> SampleSet:
    n, m = t.shape
    pos = np.empty((n, m, 3))
    d = np.empty((n, m, 3))
    media = np.empty((n, m), dtype=np.int64)
    c = np.ascontiguousarray
    kernels.path_samples(c(paths.vertices), c(paths.directions), c(paths.tau), c(paths.media),
                         c(t), pos, d, media)
    return SampleSet(t, edges, near, far, pos, d, media)


def sample_uniform(path, n, t_near, t_far, rng=None) -> SampleSet:
    """Stratified samples over ``[t_near, t_far]`` of arc length; midpoints when ``rng`` is None."""
    if n < 1:
        raise ValueError("need at least one sample")
    paths = as_batch(path)
    m = len(paths)
    near, far = _per_ray(t_near, m), _per_ray(t_far, m)
    if np.any(far <= near):
        raise ValueError("t_near must be below t_far")
    frac = np.linspace(0.0, 1.0, n + 1)
    edges = near[:, None] + (far - near)[:, None] * frac[None]
    u = 0.5 if rng is None else rng.random((m, n))
    t = edges[:, :-1] + u * np.diff(edges, axis=1)
    return _build(paths, t, edges, near, far)


def _strictly_increasing(t, eps):
    k = np.arange(t.shape[1])
    return np.maximum.accumulate(t - k * eps[:, None], axis=1) + k * eps[:, None]


def _midpoint_edges(t, near, far):
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    return np.concatenate([near[:, None], mid, far[:, None]], axis=1)


def resample_pdf(path, samples: SampleSet, weights, n, rng=None) -> SampleSet:
    """Inverse-CDF draw of ``n`` points from the piecewise-constant histogram ``weights``
    over the cells of ``samples``.  Rows with no positive weight fall back to uniform.
    """
    paths = as_batch(path)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    m = len(paths)
    total = w.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    if empty.any():
        w = np.where(empty[:, None], np.diff(samples.edges, axis=1), w)
        total = w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((m, 1)), np.cumsum(w / total, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = (np.arange(n) + (0.5 if rng is None else rng.random((m, n)))) / n
    u = np.broadcast_to(u, (m, n))
    # batched searchsorted: offset each row into its own unit interval
    rows = np.arange(m)[:, None] * 2.0
    flat = (cdf + rows).ravel()
    idx = np.searchsorted(flat, (u + rows).ravel(), side="right").reshape(m, n)
    idx -= np.arange(m)[:, None] * cdf.shape[1]
    idx = np.clip(idx - 1, 0, w.shape[1] - 1)
    r = np.arange(m)[:, None]
    c0, c1 = cdf[r, idx], cdf[r, idx + 1]
    e0, e1 = samples.edges[r, idx], samples.edges[r, idx + 1]
    frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.5)
    t = np.sort(e0 + np.clip(frac, 0.0, 1.0) * (e1 - e0), axis=1)
    near, far = samples.near, samples.far
    t = _strictly_increasing(t, 1e-9 * (far - near))
    return _build(paths, t, _midpoint_edges(t, near, far), near, far)


def merge_samples(path, a: SampleSet, b: SampleSet) -> SampleSet:
    """Sorted union of two sample sets on the same paths."""
    paths = as_batch(path)
    t = np.empty((len(a), a.t.shape[1] + b.t.shape[1]))
    kernels.merge_sorted(np.ascontiguousarray(a.t), np.ascontiguousarray(b.t), t)
    t = _strictly_increasing(t, 1e-9 * (a.far - a.near))
    return _build(paths, t, _midpoint_edges(t, a.near, a.far), a.near, a.far)


def integrate(samples, colors, densities):
    """Discrete volume rendering along each row; returns ``(color, weights, T)``.

    ``samples`` may be a :class:`SampleSet` or an array of interval widths.
    """
    delta = samples.delta if isinstance(samples, SampleSet) else np.asarray(samples, float)
    sigma = np.asarray(densities, dtype=float)
    tau = sigma * delta
    before = np.cumsum(tau, axis=-1)
    before = np.concatenate([np.zeros_like(tau[..., :1]), before[..., :-1]], axis=-1)
    T = np.exp(-before)
    w = T * -np.expm1(-tau)
    color = None if colors is None else np.einsum("...m,...mc->...c", w, colors)
    return color, w, T


def srgb(c):
    c = np.clip(np.asarray(c, dtype=float), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1 / 2.4) - 0.055)


def srgb_grad(c):
    """Derivative of :func:`srgb` with respect to linear ``c`` (zero where clipped)."""
    c = np.asarray(c, dtype=float)
    inner = (c >= 0.0) & (c <= 1.0)
    lin = c <= 0.0031308
    g = np.where(lin, 12.92, 1.055 / 2.4 * np.power(np.maximum(c, 0.0031308), 1 / 2.4 - 1))
    return np.where(inner, g, 0.0)


def linear_from_srgb(s):
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def median_depth(samples, weights, t_far=None):
    """Smallest sample distance where cumulative weight reaches half the total."""
    t = samples.t if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    if t_far is None:
        t_far = samples.far if isinstance(samples, SampleSet) else t[..., -1]
    cum = np.cumsum(w, axis=-1)
    total = cum[..., -1:]
    idx = np.argmax(cum >= 0.5 * total, axis=-1)
    depth = np.take_along_axis(t, idx[..., None], axis=-1)[..., 0]
    return np.where(total[..., 0] > 0, depth, t_far)


# -- rendering against a learned field ----------------------------------------

@dataclass
class PathRender:
    samples: SampleSet
    colors: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    color: np.ndarray
    cache: FieldCache | None = None


@dataclass
class RenderedBatch:
    refraction: PathRender
    reflection: PathRender | None
    reflect_idx: np.ndarray   # rays whose reflection path was evaluated
    reflectance: np.ndarray   # (N,)
    c_refr: np.ndarray
    c_refl: np.ndarray
    combined: np.ndarray      # linear
    srgb: np.ndarray

    @property
    def weights(self):
        return self.refraction.weights

    @property
    def opacity(self):
        return self.refraction.weights.sum(axis=1)

    @property
    def depth(self):
        return median_depth(self.refraction.samples, self.refraction.weights)


@dataclass
class RenderedPixel:
    c_refr: np.ndarray
    c_refl: np.ndarray
    combined: np.ndarray
    srgb: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    opacity: float
    median: float
    samples: SampleSet = dc_field(repr=False, default=None)


def path_bounds(paths: PathBatch, field: VoxelField, cfg: RenderConfig):
    """Per-ray ``(near, far)``: far is where the last segment leaves the field box, capped."""
    far = np.minimum(cfg.far, paths.exit_distance(field.lo, field.hi))
    near = np.full(len(paths), cfg.near)
    return near, np.maximum(far, near + 1e-3)


def render_path(field: VoxelField, paths: PathBatch, cfg: RenderConfig, rng=None,
                keep_cache=False) -> PathRender:
    """Two-pass sampling along ``paths``, then one field query and alpha compositing."""
    near, far = path_bounds(paths, field, cfg)
    coarse = sample_uniform(paths, cfg.n_coarse, near, far, rng)
    samples = coarse
    if cfg.n_fine > 0:
        _, w, _ = integrate(coarse, None, field.density(coarse.positions))
        total = w.sum(axis=1, keepdims=True)
        pdf = (1 - cfg.pdf_floor) * w / np.maximum(total, 1e-300) + cfg.pdf_floor / w.shape[1]
        pdf = np.where(total > 0, pdf, 0.0)
        fine = resample_pdf(paths, coarse, pdf, cfg.n_fine, rng)
        samples = merge_samples(paths, coarse, fine)
    out = field.query(samples.positions, samples.directions, keep_cache=keep_cache)
    colors, sigma = out[0], out[1]
    color, w, T = integrate(samples, colors, sigma)
    return PathRender(samples, colors, sigma, w, T, color, out[2] if keep_cache else None)


def render_traced(field: VoxelField, trace: TraceResult, cfg: RenderConfig, rng=None,
                  keep_cache=False) -> RenderedBatch:
    """Render refraction and reflection paths and combine them by their Fresnel weight."""
    refr = render_path(field, trace.refraction, cfg, rng, keep_cache)
    R = trace.refraction.reflectance if cfg.reflection else np.zeros(len(trace.refraction))
    c_refr = refr.color
    c_refl = c_refr.copy()
    idx = np.nonzero(R >= REFLECTION_CUTOFF)[0]
    refl = None
    if idx.size:
        refl = render_path(field, trace.reflection.subset(idx), cfg, rng, keep_cache)
        c_refl[idx] = refl.color
    combined = R[:, None] * (c_refl - c_refr) + c_refr
    return RenderedBatch(refr, refl, idx, R, c_refr, c_refl, combined, srgb(combined))


def trace_for_mode(scene: Scene | None, origins, dirs, mode="oracle", tir=True,
                   reflection=True) -> TraceResult:
    """Paths used for training/rendering: bent through ``scene`` or straight."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "straight" or scene is None:
        s = straight_paths(origins, dirs)
        return TraceResult(s, s, np.full(len(s), -1.0), np.zeros((len(s), 3)))
    res = trace_paths(scene, origins, dirs, tir=tir)
    if not reflection:
        res.refraction.reflectance[:] = 0.0
        res.reflection.reflectance[:] = 0.0
    return res


def render_pixel(scene, field: VoxelField, origin, direction, cfg: RenderConfig | None = None,
                 mode="oracle", tir=True, rng=None) -> RenderedPixel:
    cfg = cfg or RenderConfig()
    trace = trace_for_mode(scene, origin, direction, mode, tir, cfg.reflection)
    out = render_traced(field, trace, cfg, rng)
    return RenderedPixel(out.c_refr[0], out.c_refl[0], out.combined[0], out.srgb[0],
                         out.refraction.weights[0], out.refraction.transmittance[0],
                         float(out.opacity[0]), float(out.depth[0]),
                         out.refraction.samples)


def render_rays(scene, field: VoxelField, origins, dirs, cfg: RenderConfig | None = None,
                mode="oracle", tir=True, chunk=4096, rng=None):
    """Render many rays in chunks; returns ``(srgb, depth, opacity)``."""
    cfg = cfg or RenderConfig()
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    trace = trace_for_mode(scene, origins, dirs, mode, tir, cfg.reflection)
    return render_trace_chunked(field, trace, cfg, chunk, rng)


def subset_trace(trace: TraceResult, idx) -> TraceResult:
    return TraceResult(trace.refraction.subset(idx), trace.reflection.subset(idx),
                       trace.first_t[idx], trace.first_normal[idx])


def render_trace_chunked(field, trace: TraceResult, cfg: RenderConfig, chunk=4096, rng=None):
    n = len(trace.refraction)
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    opacity = np.empty(n)
    for s in range(0, n, chunk):
        idx = np.arange(s, min(n, s + chunk))
        out = render_traced(field, subset_trace(trace, idx), cfg, rng)
        rgb[idx], depth[idx], opacity[idx] = out.srgb, out.depth, out.opacity
    return rgb, depth, opacity


# -- ground truth -------------------------------------------------------------

def _path_radiance(scene: Scene, bg: BackgroundModel, paths: PathBatch):
    rows = np.arange(len(paths))
    last = paths.n_seg - 1
    p, d = paths.vertices[rows, last], paths.directions[rows, last]
    rgb, t_bg, _ = background_radiance(bg, p, d)
    absorb = scene.media.absorption_table()
    if np.any(absorb > 0):
        far = paths.tau[rows, last] + np.where(np.isfinite(t_bg), t_bg, 0.0)
        lengths = paths.medium_lengths(len(absorb), far)
        rgb = rgb * np.exp(-lengths @ absorb)
    return rgb


def shade_ground_truth(scene: Scene, bg: BackgroundModel, origins, dirs, tir=True):
    """Linear radiance, first-surface distance and object mask for each ray."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    trace = trace_for_mode(scene, origins, dirs, "oracle", tir=tir)
    c_refr = _path_radiance(scene, bg, trace.refraction)
    R = trace.refraction.reflectance
    c = c_refr
    idx = np.nonzero(R > 0)[0]
    if idx.size:
        c_refl = c_refr.copy()
        c_refl[idx] = _path_radiance(scene, bg, trace.reflection.subset(idx))
        c = R[:, None] * (c_refl - c_refr) + c_refr
    hit = trace.first_t >= 0
    t_bg, _ = background_hit(bg, origins, dirs)
    depth = np.where(hit, trace.first_t, t_bg)
    return c, depth, hit


def render_ground_truth(scene: Scene, bg: BackgroundModel, camera, spp=1, seed=0):
    """Forward render of a camera: ``(srgb image, depth map, object mask)``.

    Depth and mask come from the pixel-center ray; color averages ``spp``
    jittered rays (the first is the pixel center) in linear space.
    """
    h, w = camera.height, camera.width
    o, d = camera.rays()
    lin, depth, mask = shade_ground_truth(scene, bg, o, d)
    if spp > 1:
        rng = np.random.default_rng([seed, 0x5EED])
        acc = lin.copy()
        for _ in range(spp - 1):
            oj, dj = camera.rays(jitter=rng.random((h * w, 2)))
            acc += shade_ground_truth(scene, bg, oj, dj)[0]
        lin = acc / spp
    return (srgb(lin).reshape(h, w, 3), depth.reshape(h, w), mask.reshape(h, w))


# -- image files ----------------------------------------------------------------

def to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path, as_float=True):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image: {path}")
    arr = np.asarray(Image.open(path))
    return arr.astype(float) / 255.0 if as_float else arr


def write_mask(path, mask):
    write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path):
    return read_png(path, as_float=False) > 127


def write_pfm(path, data):
    """Little-endian float32 PFM; 2-D arrays are greyscale ('Pf'), (H, W, 3) color ('PF')."""
    arr = np.asarray(data, dtype="<f4")
    color = arr.ndim == 3
    if color and arr.shape[2] != 3:
        raise ValueError("color PFM needs 3 channels")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing PFM: {path}")
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        try:
            w, h = (int(v) for v in fh.readline().split())
            scale = float(fh.readline())
        except ValueError as exc:
            raise ValueError(f"{path}: malformed PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * ch:
        raise ValueError(f"{path}: truncated PFM")
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)
