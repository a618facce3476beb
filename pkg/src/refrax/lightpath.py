"""Piecewise-linear refraction paths and single first-surface reflection paths.

A path is a polyline ``p_0 .. p_K`` with unit directions ``d_0 .. d_K``; the
point at arc length ``t`` lies on segment ``i`` when ``tau_i <= t < tau_{i+1}``
with ``tau_0 = 0`` and ``tau_{K+1} = inf``.  Interface events bend the path by
Snell's law, or mirror it when the transmitted direction does not exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import EPS, GRAZING, Accel, MediumMap, TriMesh

MAX_BENDS = 10
MAX_DEPTH = 16

REFRACTION = "refraction"
TIR = "tir"
PASS = "pass"  # TIR condition with TIR handling switched off: crossed unbent
REFLECTION = "reflection"


class OpticsError(ValueError):
    pass


def _check_unit(v, name, tol=1e-9):
    if abs(np.linalg.norm(v) - 1.0) > tol:
        raise OpticsError(f"{name} must be a unit vector")


@dataclass
class InterfaceEvent:
    position: np.ndarray
    direction: np.ndarray
    normal: np.ndarray
    ior_in: float
    ior_out: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        _check_unit(self.direction, "direction")
        _check_unit(self.normal, "normal")
        if self.ior_in <= 0 or self.ior_out <= 0:
            raise OpticsError("refractive indices must be positive")
        if self.beta <= 0:
            raise OpticsError("normal must be oriented against the incoming direction")

    @property
    def alpha(self):
        return self.ior_in / self.ior_out

    @property
    def beta(self):
        return -float(self.direction @ self.normal)

    @property
    def gamma_sq(self):
        return 1.0 - self.alpha ** 2 * (1.0 - self.beta ** 2)


@dataclass
class FresnelSplit:
    r_p: float
    r_s: float

    @property
    def r(self):
        return 0.5 * (self.r_p + self.r_s)


def refract_directions(d, n, alpha):
    """Vectorized Snell step; returns ``(new_d, tir)``.

    ``n`` must be oriented against ``d``.  Where ``tir`` is set the returned
    direction is the mirror reflection instead.
    """
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = -np.sum(d * n, axis=-1)
    gamma_sq = 1.0 - alpha ** 2 * (1.0 - beta ** 2)
    tir = gamma_sq < 0.0
    gamma = np.sqrt(np.where(tir, 0.0, gamma_sq))
    refracted = alpha[..., None] * d + (alpha * beta - gamma)[..., None] * n
    reflected = d + 2.0 * beta[..., None] * n
    out = np.where(tir[..., None], reflected, refracted)
    # renormalize to remove the O(1e-16) drift Snell's formula accumulates
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out, tir


def reflect_directions(d, n):
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def fresnel_reflectance(beta, gamma, ior_in, ior_out):
    """Unpolarized reflectance (R_p + R_s) / 2 for cosines ``beta`` and ``gamma``."""
    rp = ((ior_out * beta - ior_in * gamma) / (ior_out * beta + ior_in * gamma)) ** 2
    rs = ((ior_in * beta - ior_out * gamma) / (ior_in * beta + ior_out * gamma)) ** 2
    return rp, rs


def refract_or_tir(event: InterfaceEvent):
    new_d, tir = refract_directions(event.direction, event.normal, event.alpha)
    return new_d, (TIR if bool(tir) else REFRACTION)


def fresnel(event: InterfaceEvent) -> FresnelSplit:
    g2 = event.gamma_sq
    if g2 < 0:
        raise OpticsError("beyond the critical angle: reflectance is 1 (total internal reflection)")
    rp, rs = fresnel_reflectance(event.beta, np.sqrt(g2), event.ior_in, event.ior_out)
    return FresnelSplit(float(rp), float(rs))


@dataclass
class PiecewisePath:
    vertices: np.ndarray
    directions: np.ndarray
    tau: np.ndarray
    media: np.ndarray
    kinds: list
    reflectance: float = 0.0

    @property
    def bends(self):
        return len(self.vertices) - 1

    def point(self, t):
        return path_point(self, t)


def path_point(path: PiecewisePath, t: float):
    if t < 0:
        raise OpticsError("arc distance must be non-negative")
    i = int(np.searchsorted(path.tau[1:-1], t, side="right"))
    return path.vertices[i] + (t - path.tau[i]) * path.directions[i], path.directions[i]


@dataclass
class PathBatch:
    """Many paths padded to a common segment count.

    ``tau`` has shape ``(N, S + 1)`` and is ``inf`` from ``tau[n_seg]`` on, so
    unused segments are never selected.
    """

    vertices: np.ndarray     # (N, S, 3)
    directions: np.ndarray   # (N, S, 3)
    tau: np.ndarray          # (N, S + 1)
    media: np.ndarray        # (N, S)
    n_seg: np.ndarray        # (N,)
    kinds: np.ndarray        # (N, S - 1) int codes, -1 unused
    reflectance: np.ndarray  # (N,)

    KIND_CODES = (REFRACTION, TIR, PASS, REFLECTION)

    def __len__(self):
        return len(self.n_seg)

    @property
    def bends(self):
        return self.n_seg - 1

    def path(self, i) -> PiecewisePath:
        k = int(self.n_seg[i])
        tau = np.append(self.tau[i, :k], np.inf)
        kinds = [self.KIND_CODES[c] for c in self.kinds[i, :k - 1]]
        return PiecewisePath(self.vertices[i, :k].copy(), self.directions[i, :k].copy(), tau,
                             self.media[i, :k].copy(), kinds, float(self.reflectance[i]))

    def subset(self, idx):
        return PathBatch(self.vertices[idx], self.directions[idx], self.tau[idx],
                         self.media[idx], self.n_seg[idx], self.kinds[idx],
                         self.reflectance[idx])

    def segment_index(self, t):
        """Segment containing each arc distance; ``t`` has shape ``(N, M)``."""
        inner = self.tau[:, 1:-1]
        if inner.shape[1] == 0:
            return np.zeros(t.shape, dtype=np.int64)
        return (t[:, :, None] >= inner[:, None, :]).sum(axis=2)

    def points(self, t):
        """Positions, directions and segment ids at arc distances ``t`` (N, M)."""
        seg = self.segment_index(t)
        rows = np.arange(len(self))[:, None]
        base = self.vertices[rows, seg]
        d = self.directions[rows, seg]
        start = self.tau[rows, seg]
        return base + (t - start)[..., None] * d, d, seg

    def exit_distance(self, lo, hi):
        """Arc length at which each path's final segment leaves the box [lo, hi].

        Earlier segments are assumed to lie inside the box.
        """
        rows = np.arange(len(self))
        last = self.n_seg - 1
        p = self.vertices[rows, last]
        d = self.directions[rows, last]
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (np.asarray(lo) - p) / d
            t1 = (np.asarray(hi) - p) / d
        far = np.nanmin(np.where(np.isnan(np.maximum(t0, t1)), np.inf, np.maximum(t0, t1)), axis=1)
        return self.tau[rows, last] + np.maximum(far, 0.0)

    def medium_lengths(self, n_media, far):
        """Length travelled in each medium up to arc length ``far`` (N, n_media)."""
        n, s = self.media.shape
        ends = np.minimum(self.tau[:, 1:], far[:, None])
        starts = np.minimum(self.tau[:, :-1], far[:, None])
        lengths = np.where(np.arange(s)[None] < self.n_seg[:, None], ends - starts, 0.0)
        out = np.zeros((n, n_media))
        for m in range(n_media):
            out[:, m] = np.where(self.media == m, lengths, 0.0).sum(axis=1)
        return out


@dataclass
class TraceResult:
    refraction: PathBatch
    reflection: PathBatch
    first_t: np.ndarray      # distance to the first surface, -1 if none
    first_normal: np.ndarray


class Scene:
    """Dielectric geometry plus its medium map, with a cached BVH."""

    def __init__(self, mesh: TriMesh | None, media: MediumMap, threads: int = 1):
        self.mesh = mesh
        self.media = media
        self.accel = Accel(mesh, threads=threads) if mesh is not None and mesh.n_triangles else None
        self.ior = media.ior_table()
        if mesh is not None and mesh.n_triangles and mesh.labels.max() >= len(self.ior):
            raise OpticsError("mesh references a medium missing from the medium map")

    def initial_stacks(self, origins):
        """Medium stack (outermost first) for each origin, computed per unique origin."""
        stacks = np.zeros((len(origins), MAX_DEPTH), dtype=np.int64)
        depth = np.ones(len(origins), dtype=np.int64)
        if self.accel is None:
            return stacks, depth
        uniq, inverse = np.unique(origins, axis=0, return_inverse=True)
        for u, o in enumerate(uniq):
            inside = self.accel.enclosing_stack(o)
            if inside:
                sel = inverse.reshape(-1) == u
                stacks[sel, 1:1 + len(inside)] = inside
                depth[sel] = 1 + len(inside)
        return stacks, depth


def straight_paths(origins, dirs) -> PathBatch:
    n = len(origins)
    tau = np.zeros((n, 2))
    tau[:, 1] = np.inf
    return PathBatch(np.asarray(origins, float)[:, None].copy(),
                     np.asarray(dirs, float)[:, None].copy(), tau,
                     np.zeros((n, 1), dtype=np.int64), np.ones(n, dtype=np.int64),
                     np.zeros((n, 0), dtype=np.int64), np.zeros(n))


def trace_paths(scene: Scene, origins, dirs, max_bends=MAX_BENDS, tir=True) -> TraceResult:
    """Trace refraction and first-surface reflection paths for a batch of rays."""
    origins = np.ascontiguousarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3)
    n = len(origins)
    if scene.accel is None:
        s = straight_paths(origins, dirs)
        return TraceResult(s, s, np.full(n, -1.0), np.zeros((n, 3)))

    accel = scene.accel
    labels = accel.mesh.labels
    ior = scene.ior
    stacks, depth = scene.initial_stacks(origins)
    rows = np.arange(n)

    verts = np.zeros((n, max_bends + 1, 3))
    dvecs = np.zeros((n, max_bends + 1, 3))
    media = np.zeros((n, max_bends + 1), dtype=np.int64)
    kinds = np.full((n, max_bends), -1, dtype=np.int64)
    verts[:, 0] = origins
    dvecs[:, 0] = dirs
    media[:, 0] = stacks[rows, depth - 1]
    n_seg = np.ones(n, dtype=np.int64)
    reflectance = np.zeros(n)
    first_t = np.full(n, -1.0)
    first_normal = np.zeros((n, 3))
    refl_dir = dirs.copy()

    cur_o = origins.copy()
    cur_d = dirs.copy()
    travelled = np.zeros(n)  # arc length from p_0 to cur_o
    active = rows.copy()
    guard = 0
    while active.size and guard < 4 * max_bends + 4:
        guard += 1
        t, tri, u, v = accel.intersect_batch(cur_o[active], cur_d[active], 0.0)
        hit = tri >= 0
        active, t, tri, u, v = active[hit], t[hit], tri[hit], u[hit], v[hit]
        if not active.size:
            break
        d = cur_d[active]
        pos = cur_o[active] + t[:, None] * d
        nrm = accel.shading_normals(tri, u, v)
        cosv = np.sum(d * nrm, axis=1)
        nrm = np.where(cosv[:, None] > 0, -nrm, nrm)
        grazing = np.abs(cosv) < GRAZING
        if grazing.any():
            g = active[grazing]
            travelled[g] += t[grazing] + EPS
            cur_o[g] = pos[grazing] + EPS * d[grazing]
            keep = ~grazing
            active, t, tri, d, pos, nrm = (active[keep], t[keep], tri[keep], d[keep], pos[keep],
                                           nrm[keep])
            if not active.size:
                continue

        lab = labels[tri]
        entering = np.sum(d * accel.face_normals(tri), axis=1) < 0
        top = stacks[active, depth[active] - 1]
        new_stack = stacks[active].copy()
        new_depth = depth[active].copy()
        push = entering & (new_depth < MAX_DEPTH)
        new_stack[push, new_depth[push]] = lab[push]
        new_depth[push] += 1
        pop = ~entering
        top_match = pop & (top == lab)
        new_depth[top_match] -= 1
        for j in np.nonzero(pop & ~top_match)[0]:
            # exiting a region that is not innermost: inconsistent nesting, drop it anyway
            row = list(new_stack[j, 1:new_depth[j]])
            if lab[j] in row:
                row.remove(lab[j])
                new_stack[j, 1:1 + len(row)] = row
                new_depth[j] = 1 + len(row)
        after = new_stack[np.arange(len(active)), new_depth - 1]

        alpha = ior[top] / ior[after]
        new_d, is_tir = refract_directions(d, nrm, alpha)
        kind = np.where(is_tir, 1, 0)
        if not tir:
            new_d = np.where(is_tir[:, None], d, new_d)
            kind = np.where(is_tir, 2, 0)
        crossed = ~is_tir | (not tir)
        stacks[active[crossed]] = new_stack[crossed]
        depth[active[crossed]] = new_depth[crossed]
        seg_medium = np.where(crossed, after, top)

        first = first_t[active] < 0
        if first.any():
            f = active[first]
            beta = -np.sum(d[first] * nrm[first], axis=1)
            a = alpha[first]
            g2 = 1.0 - a ** 2 * (1.0 - beta ** 2)
            rp, rs = fresnel_reflectance(beta, np.sqrt(np.maximum(g2, 0.0)), ior[top[first]],
                                         ior[after[first]])
            reflectance[f] = np.where(g2 < 0, 1.0, 0.5 * (rp + rs))
            first_t[f] = travelled[f] + t[first]
            first_normal[f] = nrm[first]
            refl_dir[f] = reflect_directions(d[first], nrm[first])

        k = n_seg[active]
        can_bend = k <= max_bends
        a2 = active[can_bend]
        k2 = k[can_bend]
        verts[a2, k2] = pos[can_bend]
        dvecs[a2, k2] = new_d[can_bend]
        media[a2, k2] = seg_medium[can_bend]
        kinds[a2, k2 - 1] = kind[can_bend]
        n_seg[a2] += 1
        travelled[a2] += t[can_bend]
        cur_o[a2] = pos[can_bend] + EPS * new_d[can_bend]
        cur_d[a2] = new_d[can_bend]
        travelled[a2] += EPS
        active = a2[n_seg[a2] <= max_bends]

    s = int(n_seg.max())
    verts = verts[:, :s]
    dvecs = dvecs[:, :s]
    media = media[:, :s]
    kinds = kinds[:, :s - 1]
    seglen = np.linalg.norm(np.diff(verts, axis=1), axis=2)
    seglen = np.where(np.arange(s - 1)[None] < (n_seg - 1)[:, None], seglen, np.inf)
    tau = np.zeros((n, s + 1))
    tau[:, 1:s] = np.cumsum(seglen, axis=1)
    tau[:, s] = np.inf
    tau[rows, n_seg] = np.inf
    refraction = PathBatch(verts, dvecs, tau, media, n_seg, kinds, reflectance)

    has_hit = first_t >= 0
    rv = np.repeat(origins[:, None], 2, axis=1)
    rv[:, 1] = origins + np.maximum(first_t, 0.0)[:, None] * dirs
    rd = np.stack([dirs, refl_dir], axis=1)
    rtau = np.zeros((n, 3))
    rtau[:, 1] = np.where(has_hit, first_t, np.inf)
    rtau[:, 2] = np.inf
    rmedia = np.repeat(media[:, :1], 2, axis=1)
    rkinds = np.full((n, 1), 3, dtype=np.int64)
    reflection = PathBatch(rv, rd, rtau, rmedia, np.where(has_hit, 2, 1), rkinds,
                           reflectance.copy())
    return TraceResult(refraction, reflection, first_t, first_normal)


def trace_refraction_path(scene: Scene, origin, direction, max_bends=MAX_BENDS,
                          tir=True) -> PiecewisePath:
    _check_unit(np.asarray(direction, float), "direction")
    res = trace_paths(scene, np.asarray(origin, float)[None], np.asarray(direction, float)[None],
                      max_bends=max_bends, tir=tir)
    return res.refraction.path(0)


def trace_reflection_path(scene: Scene, origin, direction) -> PiecewisePath:
    _check_unit(np.asarray(direction, float), "direction")
    res = trace_paths(scene, np.asarray(origin, float)[None], np.asarray(direction, float)[None],
                      max_bends=1)
    return res.reflection.path(0)
