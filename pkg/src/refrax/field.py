"""Voxel radiance field with spherical-harmonics color, and analytic backgrounds."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

MAGIC = b"RFXFIELD"
HEADER = struct.Struct("<8sI3I6dII")
VERSION = 1


class FieldError(ValueError):
    pass


def sh_basis(d, degree):
    """Real spherical-harmonics basis at unit directions ``d`` (..., 3)."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    if degree > 3:
        raise FieldError("spherical harmonics above degree 3 are not supported")
    return np.stack(out, axis=-1)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_softplus(y):
    out = np.log(np.expm1(y))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class FieldCache:
    points: np.ndarray
    dirs: np.ndarray
    color: np.ndarray
    sigma: np.ndarray


class VoxelField:
    """Density and SH color coefficients stored at the vertices of a regular grid.

    ``params[..., 0]`` is pre-activation density; ``params[..., 1 + c * n_sh + k]``
    is SH coefficient ``k`` of color channel ``c``.
    """

    def __init__(self, resolution=64, bounds=((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0)),
                 sh_degree=2, init_density=0.1, params=None):
        res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
        if np.any(res < 1):
            raise FieldError("resolution must be >= 1 per axis")
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        if np.any(hi <= lo):
            raise FieldError("bounds must have positive extent")
        self.resolution = res
        self.lo, self.hi = lo, hi
        self.sh_degree = int(sh_degree)
        self.n_sh = (self.sh_degree + 1) ** 2
        self.n_channels = 1 + 3 * self.n_sh
        shape = (*res.tolist(), self.n_channels)
        if params is None:
            params = np.zeros(shape)
            params[..., 0] = inverse_softplus(init_density)
        params = np.ascontiguousarray(params, dtype=float)
        if params.shape != shape:
            raise FieldError(f"params shape {params.shape} != {shape}")
        self.params = params

    def copy(self):
        return VoxelField(self.resolution, (self.lo, self.hi), self.sh_degree,
                          params=self.params.copy())

    def grid_coords(self, x):
        """Continuous vertex-index coordinates; points outside get -1."""
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=1)
        f = (x - self.lo) / (self.hi - self.lo) * (self.resolution - 1)
        f = np.where(inside[:, None], f, -1.0)
        return np.ascontiguousarray(f)

    def _forward(self, x, d, with_color):
        pts = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, 3))
        n = len(pts)
        dirs = (np.ascontiguousarray(np.asarray(d, dtype=float).reshape(-1, 3)) if with_color
                else np.zeros((0, 3)))
        rgb = np.empty((n if with_color else 0, 3))
        sigma = np.empty(n)
        valid = np.empty(n, dtype=np.uint8)
        kernels.field_forward(self.params, pts, dirs, self.lo, self.hi, self.sh_degree,
                              with_color, rgb, sigma, valid)
        return pts, dirs, rgb, sigma

    def density(self, x):
        """Post-activation density at points ``x`` (any leading shape)."""
        x = np.asarray(x, dtype=float)
        return self._forward(x, None, False)[3].reshape(x.shape[:-1])

    def query(self, x, d, keep_cache=False):
        """Color (linear RGB) and density at points ``x`` seen along directions ``d``."""
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        pts, dirs, rgb, sigma = self._forward(x, d, True)
        out = (rgb.reshape(*lead, 3), sigma.reshape(lead))
        if keep_cache:
            return (*out, FieldCache(pts, dirs, rgb, sigma))
        return out

    def query_backward(self, cache: FieldCache, grad_color, grad_sigma, grad_params):
        """Accumulate parameter gradients for a cached :meth:`query` into ``grad_params``."""
        n = len(cache.points)
        gc = np.ascontiguousarray(np.asarray(grad_color, dtype=float).reshape(n, 3))
        gs = np.ascontiguousarray(np.asarray(grad_sigma, dtype=float).reshape(n))
        kernels.field_backward(grad_params, cache.points, cache.dirs, self.lo, self.hi,
                               self.sh_degree, cache.color, cache.sigma, gc, gs)

    def save(self, path):
        header = HEADER.pack(MAGIC, VERSION, *self.resolution.tolist(), *self.lo.tolist(),
                             *self.hi.tolist(), self.sh_degree, self.n_channels)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FieldError(f"missing checkpoint: {path}")
        blob = path.read_bytes()
        if len(blob) < HEADER.size:
            raise FieldError("checkpoint truncated")
        magic, version, rx, ry, rz, *rest = HEADER.unpack_from(blob)
        if magic != MAGIC or version != VERSION:
            raise FieldError("not a field checkpoint")
        lo, hi, degree, n_ch = rest[:3], rest[3:6], rest[6], rest[7]
        count = rx * ry * rz * n_ch
        if len(blob) != HEADER.size + 8 * count:
            raise FieldError("checkpoint truncated" if len(blob) < HEADER.size + 8 * count
                             else "checkpoint has trailing data")
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=HEADER.size)
        return cls((rx, ry, rz), (lo, hi), degree,
                   params=data.reshape(rx, ry, rz, n_ch).astype(float))


def field_query(field: VoxelField, x, d):
    return field.query(x, d)


# -- backgrounds --------------------------------------------------------------

@dataclass
class BackgroundModel:
    """Enclosing textured surface used as the ground-truth emitter.

    ``kind`` is 'textured-cube' (half-size ``extent``), 'textured-sphere'
    (radius ``extent``) or 'constant'.  ``pattern`` is 'checker' or 'stripes';
    ``cell`` is the checker cell size (cube) or the band width in radians
    (sphere).
    """

    kind: str = "textured-cube"
    extent: float = 1.8
    pattern: str = "checker"
    cell: float = 0.45
    color_a: tuple = (0.9, 0.75, 0.2)
    color_b: tuple = (0.1, 0.25, 0.6)

    def __post_init__(self):
        if self.kind not in ("textured-cube", "textured-sphere", "constant"):
            raise FieldError(f"unknown background kind {self.kind!r}")
        if self.pattern not in ("checker", "stripes"):
            raise FieldError(f"unknown pattern {self.pattern!r}")
        for c in (self.color_a, self.color_b):
            if np.any(np.asarray(c) < 0) or np.any(np.asarray(c) > 1):
                raise FieldError("background colors must lie in [0, 1]")

    def to_dict(self):
        return {"kind": self.kind, "extent": self.extent, "pattern": self.pattern,
                "cell": self.cell, "color_a": list(self.color_a), "color_b": list(self.color_b)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d["extent"]), d["pattern"], float(d["cell"]),
                   tuple(d["color_a"]), tuple(d["color_b"]))


def _exit_box(x, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-half - x) / d
        t1 = (half - x) / d
    near = np.nanmax(np.where(np.isnan(np.minimum(t0, t1)), -np.inf, np.minimum(t0, t1)), axis=1)
    far = np.nanmin(np.where(np.isnan(np.maximum(t0, t1)), np.inf, np.maximum(t0, t1)), axis=1)
    hit = far >= np.maximum(near, 0.0)
    t = np.where(near > 0, near, far)
    return np.where(hit, t, np.inf), hit


def _exit_sphere(x, d, radius):
    b = np.sum(x * d, axis=1)
    c = np.sum(x * x, axis=1) - radius ** 2
    disc = b * b - c
    hit = disc >= 0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_far = -b + root
    t_near = -b - root
    t = np.where(t_near > 0, t_near, t_far)
    hit &= t > 0
    return np.where(hit, t, np.inf), hit


def _checker(u, v, cell):
    return (np.floor(u / cell).astype(np.int64) + np.floor(v / cell).astype(np.int64)) % 2


def background_hit(bg: BackgroundModel, x, d):
    """Distance to the background surface and whether the ray reaches it."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    if bg.kind == "constant":
        return np.full(len(x), np.inf), np.ones(len(x), dtype=bool)
    if bg.kind == "textured-cube":
        return _exit_box(x, d, bg.extent)
    return _exit_sphere(x, d, bg.extent)


def background_radiance(bg: BackgroundModel, x, d):
    """Linear radiance seen along rays ``(x, d)``; returns ``(rgb, t, escaped)``.

    ``escaped`` flags rays that miss a bounded background; they get black.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    a = np.asarray(bg.color_a, dtype=float)
    b = np.asarray(bg.color_b, dtype=float)
    t, hit = background_hit(bg, x, d)
    if bg.kind == "constant":
        return np.broadcast_to(a, x.shape).copy(), t, ~hit
    p = x + np.where(hit, t, 0.0)[:, None] * d
    if bg.kind == "textured-cube":
        axis = np.argmax(np.abs(p) / bg.extent, axis=1)
        u = p[np.arange(len(p)), (axis + 1) % 3]
        v = p[np.arange(len(p)), (axis + 2) % 3]
        if bg.pattern == "checker":
            parity = _checker(u, v, bg.cell)
        else:
            parity = np.floor(u / bg.cell).astype(np.int64) % 2
    else:
        r = np.linalg.norm(p, axis=1)
        lat = np.arcsin(np.clip(p[:, 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
        lon = np.arctan2(p[:, 1], p[:, 0])
        if bg.pattern == "stripes":
            parity = np.floor((lat + np.pi / 2) / bg.cell).astype(np.int64) % 2
        else:
            parity = _checker(lat + np.pi / 2, lon + np.pi, bg.cell)
    rgb = np.where(parity[:, None] == 0, a, b)
    rgb = np.where(hit[:, None], rgb, 0.0)
    return rgb, t, ~hit
