"""Pure numpy versions of the kernels in ``_core.pyx``.

Same signatures, same outputs (up to floating-point summation order).  The
BVH traversal here is breadth-first over (ray, node) pairs so that each tree
level is one vectorized step.
"""

import numpy as np


def _safe_inverse(d):
    with np.errstate(divide="ignore"):
        inv = np.where(d != 0.0, 1.0 / np.where(d != 0.0, d, 1.0), 1e300)
    return inv


def _moller_trumbore(o, d, v0, e1, e2):
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) >= 1e-14
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    s = o - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0)
    return t, u, v, ok


def bvh_intersect(origins, dirs, tmin, tmax, node_lo, node_hi, node_left, node_right,
                  node_start, node_count, v0, e1, e2, tri_id, out_t, out_tri, out_u, out_v):
    n = origins.shape[0]
    inv = _safe_inverse(dirs)
    best_t = np.array(tmax, dtype=float, copy=True)
    best_id = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    ray = np.arange(n)
    node = np.zeros(n, dtype=np.int64)
    while ray.size:
        o = origins[ray]
        iv = inv[ray]
        with np.errstate(invalid="ignore", over="ignore"):
            t0 = (node_lo[node] - o) * iv
            t1 = (node_hi[node] - o) * iv
        tnear = np.maximum(np.minimum(t0, t1).max(axis=1), tmin[ray])
        tfar = np.minimum(np.maximum(t0, t1).min(axis=1), best_t[ray])
        keep = tnear <= tfar
        ray, node = ray[keep], node[keep]
        leaf = node_count[node] > 0

        lr, ln = ray[leaf], node[leaf]
        if lr.size:
            counts = node_count[ln]
            total = int(counts.sum())
            offsets = np.repeat(np.cumsum(counts) - counts, counts)
            pr = np.repeat(lr, counts)
            pk = np.repeat(node_start[ln], counts) + (np.arange(total) - offsets)
            t, u, v, ok = _moller_trumbore(origins[pr], dirs[pr], v0[pk], e1[pk], e2[pk])
            ok &= t > tmin[pr]
            pr, pk, t, u, v = pr[ok], pk[ok], t[ok], u[ok], v[ok]
            tid = tri_id[pk]
            order = np.lexsort((tid, t, pr))
            pr, t, u, v, tid = pr[order], t[order], u[order], v[order], tid[order]
            first = np.ones(pr.size, dtype=bool)
            first[1:] = pr[1:] != pr[:-1]
            pr, t, u, v, tid = pr[first], t[first], u[first], v[first], tid[first]
            cur_t, cur_id = best_t[pr], best_id[pr]
            better = (t < cur_t) | ((t == cur_t) & (cur_id >= 0) & (tid < cur_id))
            pr = pr[better]
            best_t[pr] = t[better]
            best_id[pr] = tid[better]
            best_u[pr] = u[better]
            best_v[pr] = v[better]

        ir, inode = ray[~leaf], node[~leaf]
        ray = np.concatenate([ir, ir])
        node = np.concatenate([node_left[inode], node_right[inode]])

    hit = best_id >= 0
    out_tri[:] = best_id
    out_t[:] = np.where(hit, best_t, -1.0)
    out_u[:] = best_u
    out_v[:] = best_v


def _fractions(shape, coords):
    res = np.array(shape[:3])
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, np.maximum(res - 2, 0))
    return coords - i0


def _corners(shape, coords):
    rx, ry, rz = shape[:3]
    f = coords
    valid = ((f >= 0.0).all(axis=1) & (f[:, 0] <= rx - 1) & (f[:, 1] <= ry - 1)
             & (f[:, 2] <= rz - 1))
    res = np.array([rx, ry, rz])
    i0 = np.floor(f).astype(np.int64)
    i0 = np.clip(i0, 0, np.maximum(res - 2, 0))
    w = f - i0
    i1 = np.where(res > 1, i0 + 1, i0)
    corners = []
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                ix = i1[:, 0] if bx else i0[:, 0]
                iy = i1[:, 1] if by else i0[:, 1]
                iz = i1[:, 2] if bz else i0[:, 2]
                wt = ((w[:, 0] if bx else 1 - w[:, 0]) * (w[:, 1] if by else 1 - w[:, 1])
                      * (w[:, 2] if bz else 1 - w[:, 2]))
                corners.append((ix, iy, iz, wt))
    return valid, corners


def _lerp(a, b, t):
    return a + t[:, None] * (b - a)


def trilinear_gather(grid, coords, c0, c1, out, valid):
    ok, corners = _corners(grid.shape, coords)
    w = _fractions(grid.shape, coords)
    v = [grid[np.where(ok, ix, 0), np.where(ok, iy, 0), np.where(ok, iz, 0), c0:c1]
         for ix, iy, iz, _ in corners]  # corner order (x, y, z) bits, z fastest
    lo = _lerp(_lerp(v[0], v[1], w[:, 2]), _lerp(v[2], v[3], w[:, 2]), w[:, 1])
    hi = _lerp(_lerp(v[4], v[5], w[:, 2]), _lerp(v[6], v[7], w[:, 2]), w[:, 1])
    acc = _lerp(lo, hi, w[:, 0])
    acc[~ok] = 0.0
    out[:] = acc
    valid[:] = ok


def trilinear_scatter(grad_grid, coords, grad_out, c0):
    ok, corners = _corners(grad_grid.shape, coords)
    rx, ry, rz, nc_total = grad_grid.shape
    idx = []
    wts = []
    for ix, iy, iz, wt in corners:
        idx.append(((ix * ry + iy) * rz + iz)[ok])
        wts.append(wt[ok])
    idx = np.concatenate(idx)
    wts = np.concatenate(wts)
    g = grad_out[ok]
    flat = grad_grid.reshape(-1, nc_total)
    size = rx * ry * rz
    for c in range(grad_out.shape[1]):
        flat[:, c0 + c] += np.bincount(idx, weights=wts * np.tile(g[:, c], 8), minlength=size)


def adam_step(param, grad, m, v, lr, n_chan, beta1, beta2, eps, step):
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    update = (m / bc1) / (np.sqrt(v / bc2) + eps)
    param -= (update.reshape(-1, n_chan) * np.asarray(lr)[None, :]).reshape(-1)
    grad[:] = 0.0


def _world_to_grid(shape, pts, lo, hi):
    res = np.array(shape[:3], dtype=float)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    f = (pts - lo) / (hi - lo) * (res - 1)
    return np.ascontiguousarray(np.where(inside[:, None], f, -1.0)), inside


def field_forward(grid, pts, dirs, lo, hi, degree, with_color, rgb, sigma, valid):
    from .field import sh_basis

    coords, inside = _world_to_grid(grid.shape, pts, np.asarray(lo), np.asarray(hi))
    nsh = (degree + 1) ** 2
    nc = 1 + 3 * nsh if with_color else 1
    raw = np.empty((len(pts), nc))
    ok = np.empty(len(pts), dtype=np.uint8)
    trilinear_gather(grid, coords, 0, nc, raw, ok)
    ok = ok.astype(bool)
    sigma[:] = np.where(ok, np.logaddexp(0.0, raw[:, 0]), 0.0)
    valid[:] = ok
    if with_color:
        basis = sh_basis(np.asarray(dirs), degree)
        logit = np.einsum("nck,nk->nc", raw[:, 1:].reshape(-1, 3, nsh), basis)
        rgb[:] = np.where(ok[:, None], 0.5 * (1.0 + np.tanh(0.5 * logit)), 0.0)


def field_backward(grad_grid, pts, dirs, lo, hi, degree, rgb, sigma, g_rgb, g_sigma):
    from .field import sh_basis

    coords, inside = _world_to_grid(grad_grid.shape, pts, np.asarray(lo), np.asarray(hi))
    nsh = (degree + 1) ** 2
    n = len(pts)
    g = np.empty((n, 1 + 3 * nsh))
    g[:, 0] = np.asarray(g_sigma) * -np.expm1(-np.asarray(sigma))
    g_logit = np.asarray(g_rgb) * rgb * (1.0 - np.asarray(rgb))
    basis = sh_basis(np.asarray(dirs), degree)
    g[:, 1:] = (g_logit[:, :, None] * basis[:, None, :]).reshape(n, -1)
    g[~inside] = 0.0
    trilinear_scatter(grad_grid, coords, g, 0)


def path_samples(vertices, directions, tau, media, t, pos, dirs, med):
    inner = tau[:, 1:vertices.shape[1]]
    seg = (t[:, :, None] >= inner[:, None, :]).sum(axis=2)
    rows = np.arange(len(t))[:, None]
    start = tau[rows, seg]
    dirs[:] = directions[rows, seg]
    pos[:] = vertices[rows, seg] + (t - start)[..., None] * dirs
    med[:] = media[rows, seg]


def merge_sorted(a, b, out):
    out[:] = np.sort(np.concatenate([a, b], axis=1), axis=1, kind="stable")
