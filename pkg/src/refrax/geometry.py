"""Triangle meshes, BVH acceleration and ray queries for dielectric objects.

Meshes are labeled by region: every triangle carries the medium id of the
solid it bounds, and triangles are wound counter-clockwise seen from outside.
Medium id 0 is the ambient medium (air) and never labels a triangle.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kernels

AMBIENT = 0
EPS = 1e-4
GRAZING = 1e-7
LEAF_SIZE = 4

_PARITY_DIR = np.array([0.5377, 0.3128, 0.7830]) / np.linalg.norm([0.5377, 0.3128, 0.7830])


class GeometryError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.normals = np.ascontiguousarray(self.normals, dtype=float).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim == 0:
            labels = np.full(len(self.triangles), int(labels), dtype=np.int64)
        self.labels = labels

    @property
    def n_triangles(self):
        return len(self.triangles)

    def regions(self):
        return sorted(set(self.labels.tolist()))

    def validate(self):
        """Raise :class:`GeometryError` unless the mesh invariants hold."""
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")
        if len(self.normals) != len(self.vertices):
            raise GeometryError("one normal per vertex required")
        lengths = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            raise GeometryError("vertex normals must be unit length")
        if np.any(self.labels == AMBIENT):
            raise GeometryError("triangles cannot be labeled with the ambient medium")
        for region in self.regions():
            if not self.is_closed(region):
                raise GeometryError(f"region {region} is not closed")
        return self

    def welded(self, decimals=9):
        """Map each vertex to a canonical index shared by coincident positions."""
        key = np.round(self.vertices, decimals) + 0.0
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        return first, inverse.reshape(-1)

    def welded_triangles(self):
        _, inverse = self.welded()
        return inverse[self.triangles]

    def edges(self, region=None):
        tris = self.welded_triangles()
        if region is not None:
            tris = tris[self.labels == region]
        e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_closed(self, region=None):
        e = self.edges(region)
        if not len(e):
            return False
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self, region=None):
        tris = self.welded_triangles()
        if region is not None:
            tris = tris[self.labels == region]
        n_vertices = len(np.unique(tris))
        n_edges = len(np.unique(self.edges(region), axis=0))
        return n_vertices - n_edges + len(tris)

    def signed_volume(self, region=None):
        tris = self.triangles if region is None else self.triangles[self.labels == region]
        a, b, c = (self.vertices[tris[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def face_normals(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def copy(self):
        return TriMesh(self.vertices.copy(), self.triangles.copy(), self.normals.copy(),
                       self.labels.copy())

    def merged(self, other):
        offset = len(self.vertices)
        return TriMesh(np.vstack([self.vertices, other.vertices]),
                       np.vstack([self.triangles, other.triangles + offset]),
                       np.vstack([self.normals, other.normals]),
                       np.concatenate([self.labels, other.labels]))


@dataclass
class Medium:
    ior: float
    absorption: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.ior = float(self.ior)
        self.absorption = np.broadcast_to(np.asarray(self.absorption, dtype=float), (3,)).copy()


@dataclass
class MediumMap:
    """Refractive index and absorption for each medium id; id 0 is ambient air."""

    media: dict = field(default_factory=dict)

    def __post_init__(self):
        media = {int(k): (v if isinstance(v, Medium) else Medium(*v))
                 for k, v in self.media.items()}
        media.setdefault(AMBIENT, Medium(1.0))
        self.media = dict(sorted(media.items()))
        if self.media[AMBIENT].ior != 1.0:
            raise GeometryError("ambient medium must have index 1")
        for mid, m in self.media.items():
            if m.ior < 1.0:
                raise GeometryError(f"medium {mid}: refractive index below 1")
            if np.any(m.absorption < 0):
                raise GeometryError(f"medium {mid}: negative absorption")

    @property
    def ambient(self):
        return AMBIENT

    def ior(self, mid):
        return self.media[int(mid)].ior

    def ior_table(self):
        size = max(self.media) + 1
        table = np.ones(size)
        for mid, m in self.media.items():
            table[mid] = m.ior
        return table

    def absorption_table(self):
        size = max(self.media) + 1
        table = np.zeros((size, 3))
        for mid, m in self.media.items():
            table[mid] = m.absorption
        return table

    def to_text(self):
        lines = ["# medium_id ior absorption_r absorption_g absorption_b"]
        for mid, m in self.media.items():
            a = m.absorption
            lines.append(f"{mid} {m.ior!r} " + " ".join(repr(float(x)) for x in a))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        media = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise GeometryError(f"malformed medium line: {raw!r}")
            media[int(parts[0])] = Medium(float(parts[1]), [float(x) for x in parts[2:]])
        return cls(media)


@dataclass
class SurfaceHit:
    t: float
    position: np.ndarray
    normal: np.ndarray
    medium_in: int
    medium_out: int
    triangle: int


class Accel:
    """Median-split bounding volume hierarchy over a :class:`TriMesh`."""

    def __init__(self, mesh: TriMesh, threads: int = 1):
        if mesh.n_triangles == 0:
            raise GeometryError("empty mesh")
        self.mesh = mesh
        self.threads = max(1, int(threads))
        self._face_normals = mesh.face_normals()
        self._build()

    def _build(self):
        mesh = self.mesh
        tri_pts = mesh.vertices[mesh.triangles]
        centroids = tri_pts.mean(axis=1)
        tmin = tri_pts.min(axis=1)
        tmax = tri_pts.max(axis=1)

        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = []
        work = [(np.arange(mesh.n_triangles), -1, 0)]
        while work:
            idx, parent, side = work.pop()
            node = len(lo)
            if parent >= 0:
                (left if side == 0 else right)[parent] = node
            lo.append(tmin[idx].min(axis=0))
            hi.append(tmax[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            if len(idx) <= LEAF_SIZE:
                start.append(len(order))
                count.append(len(idx))
                order.extend(idx.tolist())
                continue
            start.append(0)
            count.append(0)
            c = centroids[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            half = len(idx) // 2
            part = np.argpartition(c[:, axis], half, kind="introselect")
            work.append((idx[part[half:]], node, 1))
            work.append((idx[part[:half]], node, 0))

        order = np.array(order, dtype=np.int64)
        self.node_lo = np.ascontiguousarray(lo, dtype=float)
        self.node_hi = np.ascontiguousarray(hi, dtype=float)
        self.node_left = np.array(left, dtype=np.int64)
        self.node_right = np.array(right, dtype=np.int64)
        self.node_start = np.array(start, dtype=np.int64)
        self.node_count = np.array(count, dtype=np.int64)
        pts = tri_pts[order]
        self.v0 = np.ascontiguousarray(pts[:, 0])
        self.e1 = np.ascontiguousarray(pts[:, 1] - pts[:, 0])
        self.e2 = np.ascontiguousarray(pts[:, 2] - pts[:, 0])
        self.tri_id = order

    @property
    def n_nodes(self):
        return len(self.node_lo)

    def _run(self, backend, o, d, t0, t1):
        n = len(o)
        out_t = np.empty(n)
        out_tri = np.empty(n, dtype=np.int64)
        out_u = np.empty(n)
        out_v = np.empty(n)
        backend.bvh_intersect(o, d, t0, t1, self.node_lo, self.node_hi, self.node_left,
                              self.node_right, self.node_start, self.node_count, self.v0,
                              self.e1, self.e2, self.tri_id, out_t, out_tri, out_u, out_v)
        return out_t, out_tri, out_u, out_v

    def intersect_batch(self, origins, dirs, tmin=0.0, tmax=np.inf, backend=None):
        """Nearest hits for a batch of rays.

        Returns ``(t, tri, u, v)``; ``tri`` is -1 and ``t`` is -1 for misses.
        """
        o = np.ascontiguousarray(origins, dtype=float).reshape(-1, 3)
        d = np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3)
        n = len(o)
        t0 = np.ascontiguousarray(np.broadcast_to(np.asarray(tmin, dtype=float), (n,)))
        t1 = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=float), (n,)))
        be = kernels if backend is None else kernels.get_backend(backend)
        if self.threads == 1 or n < 4096:
            return self._run(be, o, d, t0, t1)
        chunks = np.array_split(np.arange(n), self.threads)
        with ThreadPoolExecutor(self.threads) as pool:
            parts = list(pool.map(lambda c: self._run(be, o[c], d[c], t0[c], t1[c]), chunks))
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))

    def shading_normals(self, tri, u, v):
        """Interpolated, re-normalized vertex normals (not yet oriented)."""
        corners = self.mesh.triangles[tri]
        nrm = self.mesh.normals
        n = ((1.0 - u - v)[:, None] * nrm[corners[:, 0]] + u[:, None] * nrm[corners[:, 1]]
             + v[:, None] * nrm[corners[:, 2]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_normals(self, tri):
        return self._face_normals[tri]

    def intersect(self, origin, direction, t_min=0.0):
        """Nearest :class:`SurfaceHit` with ``t > t_min``, or None."""
        direction = np.asarray(direction, dtype=float)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise GeometryError("direction must be unit length")
        o = np.asarray(origin, dtype=float)[None]
        t, tri, u, v = self.intersect_batch(o, direction[None], t_min)
        if tri[0] < 0:
            return None
        pos = o[0] + t[0] * direction
        n = self.shading_normals(tri, u, v)[0]
        if direction @ n > 0:
            n = -n
        label = int(self.mesh.labels[tri[0]])
        face_n = self._face_normals[tri[0]]
        outside = self.medium_at(pos + EPS * face_n)
        if direction @ face_n < 0:
            med_in, med_out = outside, label
        else:
            med_in, med_out = label, outside
        return SurfaceHit(float(t[0]), pos, n, med_in, med_out, int(tri[0]))

    def all_hits(self, origins, dirs, max_hits=256):
        """Every crossing along each ray: list of ``(t, triangle)`` arrays per ray."""
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        n = len(o)
        ts = [[] for _ in range(n)]
        tris = [[] for _ in range(n)]
        active = np.arange(n)
        tmin = np.zeros(n)
        for _ in range(max_hits):
            if not active.size:
                break
            t, tri, _, _ = self.intersect_batch(o[active], d[active], tmin[active])
            hit = tri >= 0
            for r, tt, tr in zip(active[hit], t[hit], tri[hit]):
                ts[r].append(tt)
                tris[r].append(tr)
            tmin[active[hit]] = t[hit] * (1 + 1e-12) + 1e-12
            active = active[hit]
        return [(np.array(a), np.array(b, dtype=np.int64)) for a, b in zip(ts, tris)]

    def medium_at(self, x):
        """Innermost region containing ``x`` by parity counting, AMBIENT if none."""
        return int(self.media_at(np.asarray(x, dtype=float)[None])[0])

    def media_at(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        dirs = np.broadcast_to(_PARITY_DIR, points.shape)
        out = np.full(len(points), AMBIENT, dtype=np.int64)
        for i, (t, tri) in enumerate(self.all_hits(points, dirs)):
            if not len(t):
                continue
            labels = self.mesh.labels[tri]
            best_t = np.inf
            for region in np.unique(labels):
                sel = labels == region
                if sel.sum() % 2 == 1 and t[sel].min() < best_t:
                    best_t = t[sel].min()
                    out[i] = region
        return out

    def enclosing_stack(self, x):
        """Regions containing ``x`` ordered outermost first."""
        x = np.asarray(x, dtype=float)
        t, tri = self.all_hits(x[None], _PARITY_DIR[None])[0]
        if not len(t):
            return []
        labels = self.mesh.labels[tri]
        inside = []
        for region in np.unique(labels):
            sel = labels == region
            if sel.sum() % 2 == 1:
                inside.append((t[sel].min(), int(region)))
        return [r for _, r in sorted(inside, reverse=True)]


def build_accel(mesh: TriMesh, threads: int = 1) -> Accel:
    return Accel(mesh, threads=threads)


def medium_at(mesh, media: MediumMap, x):
    accel = mesh if isinstance(mesh, Accel) else Accel(mesh)
    mid = accel.medium_at(x)
    return mid if mid in media.media else media.ambient


def vertex_normals(vertices, triangles):
    """Area-weighted average of incident face normals, per vertex index."""
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    fn = np.cross(b - a, c - a)
    n = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(n, triangles[:, i], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return n / norm


def laplacian_smooth(mesh: TriMesh, factor: float, iterations: int) -> TriMesh:
    """Uniform-weight Laplacian smoothing over the welded vertex graph."""
    if not 0.0 <= factor <= 1.0:
        raise GeometryError("factor must lie in [0, 1]")
    if iterations < 0:
        raise GeometryError("iterations must be non-negative")
    if iterations == 0:
        return mesh.copy()
    first, inverse = mesh.welded()
    tris = inverse[mesh.triangles]
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    n = len(first)
    adj = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                        shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    deg[deg == 0] = 1.0
    avg = sp.diags(1.0 / deg) @ adj
    pts = mesh.vertices[first].copy()
    for _ in range(iterations):
        pts = pts + factor * (avg @ pts - pts)
    verts = pts[inverse]
    return TriMesh(verts, mesh.triangles.copy(), vertex_normals(verts, mesh.triangles),
                   mesh.labels.copy())


def jitter_vertices(mesh: TriMesh, sigma: float, seed: int) -> TriMesh:
    """Gaussian jitter applied consistently to welded vertices."""
    first, inverse = mesh.welded()
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, sigma, size=(len(first), 3))
    verts = mesh.vertices + offsets[inverse]
    return TriMesh(verts, mesh.triangles.copy(), vertex_normals(verts, mesh.triangles),
                   mesh.labels.copy())


# -- primitives -------------------------------------------------------------

def _icosphere(subdiv):
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdiv):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _check_positive(**dims):
    for name, value in dims.items():
        if not value > 0:
            raise GeometryError(f"{name} must be positive, got {value}")


def make_sphere(radius=0.5, subdiv=4, center=(0, 0, 0), label=1):
    _check_positive(radius=radius)
    if subdiv < 0:
        raise GeometryError("subdivision level must be >= 0")
    unit, faces = _icosphere(subdiv)
    return TriMesh(unit * radius + np.asarray(center, float), faces, unit, label)


def make_box(size=(1.0, 1.0, 1.0), subdiv=0, center=(0, 0, 0), label=1):
    sx, sy, sz = size
    _check_positive(sx=sx, sy=sy, sz=sz)
    half = np.array(size, dtype=float) / 2.0
    n = 2 ** subdiv
    grid = np.linspace(-1.0, 1.0, n + 1)
    verts, normals, faces = [], [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a1, a2 = (axis + 1) % 3, (axis + 2) % 3
            base = len(verts)
            for i in range(n + 1):
                for j in range(n + 1):
                    p = np.zeros(3)
                    p[axis] = sign
                    p[a1] = grid[i]
                    p[a2] = grid[j]
                    verts.append(p * half)
                    nn = np.zeros(3)
                    nn[axis] = sign
                    normals.append(nn)
            for i in range(n):
                for j in range(n):
                    q00 = base + i * (n + 1) + j
                    q10, q01, q11 = q00 + n + 1, q00 + 1, q00 + n + 2
                    # (a1, a2, axis) is right-handed, so CCW seen from +axis
                    if sign > 0:
                        faces += [(q00, q10, q11), (q00, q11, q01)]
                    else:
                        faces += [(q00, q11, q10), (q00, q01, q11)]
    return TriMesh(np.array(verts) + np.asarray(center, float), faces, normals, label)


def make_cylinder(radius=0.4, height=1.0, segments=64, center=(0, 0, 0), label=1):
    _check_positive(radius=radius, height=height)
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(ang), np.sin(ang), np.zeros(segments)], axis=1)
    h = height / 2.0
    verts, normals, faces = [], [], []
    # side: bottom ring 0..s-1, top ring s..2s-1
    for z in (-h, h):
        verts += list(ring * radius + [0, 0, z])
        normals += list(ring)
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i)]
    for z, sign in ((-h, -1.0), (h, 1.0)):
        base = len(verts)
        verts.append(np.array([0, 0, z]))
        normals.append(np.array([0, 0, sign]))
        verts += list(ring * radius + [0, 0, z])
        normals += [np.array([0, 0, sign])] * segments
        for i in range(segments):
            j = (i + 1) % segments
            a, b = base + 1 + i, base + 1 + j
            faces.append((base, b, a) if sign < 0 else (base, a, b))
    return TriMesh(np.array(verts, dtype=float) + np.asarray(center, float), faces, normals, label)


def make_torus(major=0.5, minor=0.2, major_segments=64, minor_segments=32, center=(0, 0, 0),
               label=1):
    _check_positive(major=major, minor=minor)
    if minor >= major:
        raise GeometryError("torus minor radius must be below major radius")
    u = 2 * np.pi * np.arange(major_segments) / major_segments
    v = 2 * np.pi * np.arange(minor_segments) / minor_segments
    uu, vv = np.meshgrid(u, v, indexing="ij")
    normals = np.stack([np.cos(vv) * np.cos(uu), np.cos(vv) * np.sin(uu), np.sin(vv)], axis=-1)
    ring_center = np.stack([np.cos(uu), np.sin(uu), np.zeros_like(uu)], axis=-1) * major
    verts = ring_center + minor * normals
    faces = []
    for i in range(major_segments):
        for j in range(minor_segments):
            i2, j2 = (i + 1) % major_segments, (j + 1) % minor_segments
            a, b = i * minor_segments + j, i2 * minor_segments + j
            c, d = i2 * minor_segments + j2, i * minor_segments + j2
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(verts.reshape(-1, 3) + np.asarray(center, float), faces,
                   normals.reshape(-1, 3), label)


def make_nested_spheres(outer=0.5, inner=0.3, subdiv=4, center=(0, 0, 0), labels=(1, 2)):
    _check_positive(outer=outer, inner=inner)
    if inner >= outer:
        raise GeometryError("inner radius must be below outer radius")
    return make_sphere(outer, subdiv, center, labels[0]).merged(
        make_sphere(inner, subdiv, center, labels[1]))


PRIMITIVES = {
    "sphere": make_sphere,
    "box": make_box,
    "cylinder": make_cylinder,
    "torus": make_torus,
    "nested-spheres": make_nested_spheres,
}


def make_primitive(kind, **params) -> TriMesh:
    try:
        builder = PRIMITIVES[kind]
    except KeyError:
        raise GeometryError(f"unknown primitive {kind!r}; choose from {sorted(PRIMITIVES)}")
    return builder(**params)


# -- OBJ --------------------------------------------------------------------

def write_obj(mesh: TriMesh, path):
    lines = ["# region groups are named medium_<id>"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.normals.tolist()]
    for region in mesh.regions():
        lines.append(f"g medium_{region}")
        for a, b, c in (mesh.triangles[mesh.labels == region] + 1).tolist():
            lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise GeometryError(f"missing OBJ file: {path}")
    positions, normals = [], []
    corner_keys, labels, group_ids = [], [], {}
    label = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif tag in ("g", "o"):
                name = parts[1] if len(parts) > 1 else "default"
                m = re.fullmatch(r"medium_(\d+)", name)
                if m:
                    label = int(m.group(1))
                else:
                    label = group_ids.setdefault(name, len(group_ids) + 1)
            elif tag == "f":
                corners = []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi = int(fields[0])
                    ni = int(fields[2]) if len(fields) > 2 and fields[2] else None
                    corners.append((vi, ni))
                for k in range(1, len(corners) - 1):
                    corner_keys.append((corners[0], corners[k], corners[k + 1]))
                    labels.append(1 if label is None else label)
        except (ValueError, IndexError) as exc:
            raise GeometryError(f"{path}:{lineno}: malformed line {raw!r}") from exc
    positions = np.array(positions, dtype=float).reshape(-1, 3)
    normals = np.array(normals, dtype=float).reshape(-1, 3)

    index = {}
    verts, vnorms, tris = [], [], []
    for tri in corner_keys:
        ids = []
        for vi, ni in tri:
            key = (vi, ni)
            if key not in index:
                index[key] = len(verts)
                verts.append(positions[vi - 1 if vi > 0 else vi])
                vnorms.append(normals[ni - 1 if ni > 0 else ni] if ni is not None else None)
            ids.append(index[key])
        tris.append(ids)
    verts = np.array(verts).reshape(-1, 3)
    tris = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if any(n is None for n in vnorms):
        vn = vertex_normals(verts, tris)
        vnorms = [vn[i] if n is None else n for i, n in enumerate(vnorms)]
    vnorms = np.array(vnorms, dtype=float).reshape(-1, 3)
    return TriMesh(verts, tris, vnorms, np.array(labels, dtype=np.int64))
