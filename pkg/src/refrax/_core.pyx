# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: BVH traversal, trilinear gather/scatter, the fused field
query and its adjoint, and the Adam step.

Every function here has a numpy twin in :mod:`refrax._fallback` with the same
signature and the same arithmetic order. Outputs are written into
caller-allocated arrays.
"""

from libc.math cimport exp, expm1, fabs, floor, log1p, sqrt, tanh

DEF STACK_SIZE = 128


cdef inline bint _slab(double ox, double oy, double oz,
                       double ix, double iy, double iz,
                       double lox, double loy, double loz,
                       double hix, double hiy, double hiz,
                       double tmin, double tmax) noexcept nogil:
    cdef double t0, t1, tnear = tmin, tfar = tmax, tmp
    t0 = (lox - ox) * ix
    t1 = (hix - ox) * ix
    if t0 > t1:
        tmp = t0; t0 = t1; t1 = tmp
    if t0 > tnear: tnear = t0
    if t1 < tfar: tfar = t1
    t0 = (loy - oy) * iy
    t1 = (hiy - oy) * iy
    if t0 > t1:
        tmp = t0; t0 = t1; t1 = tmp
    if t0 > tnear: tnear = t0
    if t1 < tfar: tfar = t1
    t0 = (loz - oz) * iz
    t1 = (hiz - oz) * iz
    if t0 > t1:
        tmp = t0; t0 = t1; t1 = tmp
    if t0 > tnear: tnear = t0
    if t1 < tfar: tfar = t1
    return tnear <= tfar


def bvh_intersect(const double[:, ::1] origins, const double[:, ::1] dirs,
                  const double[::1] tmin, const double[::1] tmax,
                  const double[:, ::1] node_lo, const double[:, ::1] node_hi,
                  const long[::1] node_left, const long[::1] node_right,
                  const long[::1] node_start, const long[::1] node_count,
                  const double[:, ::1] v0, const double[:, ::1] e1,
                  const double[:, ::1] e2, const long[::1] tri_id,
                  double[::1] out_t, long[::1] out_tri,
                  double[::1] out_u, double[::1] out_v):
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t r, k
    cdef long stack[STACK_SIZE]
    cdef long sp, node, start, cnt, best_id, tid
    cdef double ox, oy, oz, dx, dy, dz, ix, iy, iz, best_t, best_u, best_v, t_lo
    cdef double px, py, pz, det, inv, sx, sy, sz, u, v, qx, qy, qz, t
    cdef double ax, ay, az, bx, by, bz
    with nogil:
        for r in range(n_rays):
            ox = origins[r, 0]; oy = origins[r, 1]; oz = origins[r, 2]
            dx = dirs[r, 0]; dy = dirs[r, 1]; dz = dirs[r, 2]
            ix = 1.0 / dx if dx != 0.0 else 1e300
            iy = 1.0 / dy if dy != 0.0 else 1e300
            iz = 1.0 / dz if dz != 0.0 else 1e300
            t_lo = tmin[r]
            best_t = tmax[r]
            best_id = -1
            best_u = 0.0
            best_v = 0.0
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                if not _slab(ox, oy, oz, ix, iy, iz,
                             node_lo[node, 0], node_lo[node, 1], node_lo[node, 2],
                             node_hi[node, 0], node_hi[node, 1], node_hi[node, 2],
                             t_lo, best_t):
                    continue
                cnt = node_count[node]
                if cnt > 0:
                    start = node_start[node]
                    for k in range(start, start + cnt):
                        ax = e1[k, 0]; ay = e1[k, 1]; az = e1[k, 2]
                        bx = e2[k, 0]; by = e2[k, 1]; bz = e2[k, 2]
                        px = dy * bz - dz * by
                        py = dz * bx - dx * bz
                        pz = dx * by - dy * bx
                        det = ax * px + ay * py + az * pz
                        if fabs(det) < 1e-14:
                            continue
                        inv = 1.0 / det
                        sx = ox - v0[k, 0]; sy = oy - v0[k, 1]; sz = oz - v0[k, 2]
                        u = (sx * px + sy * py + sz * pz) * inv
                        if u < 0.0 or u > 1.0:
                            continue
                        qx = sy * az - sz * ay
                        qy = sz * ax - sx * az
                        qz = sx * ay - sy * ax
                        v = (dx * qx + dy * qy + dz * qz) * inv
                        if v < 0.0 or u + v > 1.0:
                            continue
                        t = (bx * qx + by * qy + bz * qz) * inv
                        if t <= t_lo:
                            continue
                        tid = tri_id[k]
                        # ties resolved toward the smaller triangle id, like brute force
                        if t < best_t or (t == best_t and best_id >= 0 and tid < best_id):
                            best_t = t
                            best_id = tid
                            best_u = u
                            best_v = v
                elif sp + 2 <= STACK_SIZE:
                    # build caps depth well below STACK_SIZE / 2
                    stack[sp] = node_right[node]
                    stack[sp + 1] = node_left[node]
                    sp += 2
            out_tri[r] = best_id
            out_t[r] = best_t if best_id >= 0 else -1.0
            out_u[r] = best_u
            out_v[r] = best_v


def trilinear_gather(const double[:, :, :, ::1] grid, const double[:, ::1] coords,
                     long c0, long c1, double[:, ::1] out, unsigned char[::1] valid):
    """Gather channels [c0, c1) at continuous grid-index coordinates."""
    cdef Py_ssize_t n = coords.shape[0]
    cdef long rx = grid.shape[0], ry = grid.shape[1], rz = grid.shape[2]
    cdef Py_ssize_t p, c
    cdef long i0, j0, k0, i1, j1, k1
    cdef double fx, fy, fz, wx, wy, wz
    cdef double fr[3]
    with nogil:
        for p in range(n):
            fx = coords[p, 0]; fy = coords[p, 1]; fz = coords[p, 2]
            if (fx < 0.0 or fy < 0.0 or fz < 0.0 or fx > rx - 1 or fy > ry - 1
                    or fz > rz - 1):
                valid[p] = 0
                for c in range(c0, c1):
                    out[p, c - c0] = 0.0
                continue
            valid[p] = 1
            i0 = <long>floor(fx); j0 = <long>floor(fy); k0 = <long>floor(fz)
            if i0 > rx - 2: i0 = rx - 2
            if j0 > ry - 2: j0 = ry - 2
            if k0 > rz - 2: k0 = rz - 2
            if i0 < 0: i0 = 0
            if j0 < 0: j0 = 0
            if k0 < 0: k0 = 0
            wx = fx - i0; wy = fy - j0; wz = fz - k0
            i1 = i0 + 1 if rx > 1 else i0
            j1 = j0 + 1 if ry > 1 else j0
            k1 = k0 + 1 if rz > 1 else k0
            fr[0] = wx; fr[1] = wy; fr[2] = wz
            for c in range(c0, c1):
                out[p, c - c0] = _trilerp(grid, i0, j0, k0, i1, j1, k1, c, fr)


def trilinear_scatter(double[:, :, :, ::1] grad_grid, const double[:, ::1] coords,
                      const double[:, ::1] grad_out, long c0):
    """Adjoint of :func:`trilinear_gather`; accumulates into ``grad_grid`` in point order."""
    cdef Py_ssize_t n = coords.shape[0]
    cdef long nc = grad_out.shape[1]
    cdef long rx = grad_grid.shape[0], ry = grad_grid.shape[1], rz = grad_grid.shape[2]
    cdef Py_ssize_t p, c
    cdef long i0, j0, k0, i1, j1, k1, cc
    cdef double fx, fy, fz, wx, wy, wz, g
    cdef double w000, w001, w010, w011, w100, w101, w110, w111
    with nogil:
        for p in range(n):
            fx = coords[p, 0]; fy = coords[p, 1]; fz = coords[p, 2]
            if (fx < 0.0 or fy < 0.0 or fz < 0.0 or fx > rx - 1 or fy > ry - 1
                    or fz > rz - 1):
                continue
            i0 = <long>floor(fx); j0 = <long>floor(fy); k0 = <long>floor(fz)
            if i0 > rx - 2: i0 = rx - 2
            if j0 > ry - 2: j0 = ry - 2
            if k0 > rz - 2: k0 = rz - 2
            if i0 < 0: i0 = 0
            if j0 < 0: j0 = 0
            if k0 < 0: k0 = 0
            wx = fx - i0; wy = fy - j0; wz = fz - k0
            i1 = i0 + 1 if rx > 1 else i0
            j1 = j0 + 1 if ry > 1 else j0
            k1 = k0 + 1 if rz > 1 else k0
            w000 = (1 - wx) * (1 - wy) * (1 - wz)
            w001 = (1 - wx) * (1 - wy) * wz
            w010 = (1 - wx) * wy * (1 - wz)
            w011 = (1 - wx) * wy * wz
            w100 = wx * (1 - wy) * (1 - wz)
            w101 = wx * (1 - wy) * wz
            w110 = wx * wy * (1 - wz)
            w111 = wx * wy * wz
            for c in range(nc):
                g = grad_out[p, c]
                if g == 0.0:
                    continue
                cc = c + c0
                grad_grid[i0, j0, k0, cc] += w000 * g
                grad_grid[i0, j0, k1, cc] += w001 * g
                grad_grid[i0, j1, k0, cc] += w010 * g
                grad_grid[i0, j1, k1, cc] += w011 * g
                grad_grid[i1, j0, k0, cc] += w100 * g
                grad_grid[i1, j0, k1, cc] += w101 * g
                grad_grid[i1, j1, k0, cc] += w110 * g
                grad_grid[i1, j1, k1, cc] += w111 * g


def adam_step(double[::1] param, double[::1] grad, double[::1] m, double[::1] v,
              const double[::1] lr, long n_chan, double beta1, double beta2,
              double eps, long step):
    """In-place Adam update; ``lr`` holds one rate per trailing channel. Zeroes ``grad``."""
    cdef Py_ssize_t n = param.shape[0] // n_chan
    cdef Py_ssize_t i, c, j
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double g, mh, vh
    with nogil:
        for i in range(n):
            for c in range(n_chan):
                j = i * n_chan + c
                g = grad[j]
                m[j] = beta1 * m[j] + (1.0 - beta1) * g
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g
                mh = m[j] / bc1
                vh = v[j] / bc2
                param[j] = param[j] - lr[c] * mh / (sqrt(vh) + eps)
                grad[j] = 0.0


cdef double C0 = 0.28209479177387814
cdef double C1 = 0.4886025119029199
cdef double C2_0 = 1.0925484305920792
cdef double C2_1 = -1.0925484305920792
cdef double C2_2 = 0.31539156525252005
cdef double C2_3 = -1.0925484305920792
cdef double C2_4 = 0.5462742152960396
cdef double C3_0 = -0.5900435899266435
cdef double C3_1 = 2.890611442640554
cdef double C3_2 = -0.4570457994644658
cdef double C3_3 = 0.3731763325901154
cdef double C3_4 = -0.4570457994644658
cdef double C3_5 = 1.445305721320277
cdef double C3_6 = -0.5900435899266435


cdef inline void _sh(double x, double y, double z, int degree, double* b) noexcept nogil:
    cdef double xx, yy, zz
    b[0] = C0
    if degree >= 1:
        b[1] = -C1 * y
        b[2] = C1 * z
        b[3] = -C1 * x
    if degree >= 2:
        xx = x * x; yy = y * y; zz = z * z
        b[4] = C2_0 * x * y
        b[5] = C2_1 * y * z
        b[6] = C2_2 * (2 * zz - xx - yy)
        b[7] = C2_3 * x * z
        b[8] = C2_4 * (xx - yy)
    if degree >= 3:
        b[9] = C3_0 * y * (3 * xx - yy)
        b[10] = C3_1 * x * y * z
        b[11] = C3_2 * y * (4 * zz - xx - yy)
        b[12] = C3_3 * z * (2 * zz - 3 * xx - 3 * yy)
        b[13] = C3_4 * x * (4 * zz - xx - yy)
        b[14] = C3_5 * z * (xx - yy)
        b[15] = C3_6 * x * (xx - 3 * yy)


cdef inline double _lerp(double a, double b, double t) noexcept nogil:
    return a + t * (b - a)


cdef inline double _trilerp(const double[:, :, :, ::1] g, long i0, long j0, long k0, long i1,
                            long j1, long k1, Py_ssize_t c, double* f) noexcept nogil:
    # nested lerps reproduce constant and vertex values exactly
    cdef double c0 = _lerp(_lerp(g[i0, j0, k0, c], g[i0, j0, k1, c], f[2]),
                           _lerp(g[i0, j1, k0, c], g[i0, j1, k1, c], f[2]), f[1])
    cdef double c1 = _lerp(_lerp(g[i1, j0, k0, c], g[i1, j0, k1, c], f[2]),
                           _lerp(g[i1, j1, k0, c], g[i1, j1, k1, c], f[2]), f[1])
    return _lerp(c0, c1, f[0])


cdef inline bint _cell(double* x, double* lo, double* hi,
                       long rx, long ry, long rz, long* idx, double* w, double* frac) noexcept nogil:
    """Corner indices (i0, j0, k0, i1, j1, k1) and the 8 trilinear weights of a world point."""
    cdef double fx, fy, fz, wx, wy, wz
    cdef long i0, j0, k0
    if (x[0] < lo[0] or x[1] < lo[1] or x[2] < lo[2] or x[0] > hi[0] or x[1] > hi[1]
            or x[2] > hi[2]):
        return 0
    fx = (x[0] - lo[0]) / (hi[0] - lo[0]) * (rx - 1)
    fy = (x[1] - lo[1]) / (hi[1] - lo[1]) * (ry - 1)
    fz = (x[2] - lo[2]) / (hi[2] - lo[2]) * (rz - 1)
    i0 = <long>floor(fx); j0 = <long>floor(fy); k0 = <long>floor(fz)
    if i0 > rx - 2: i0 = rx - 2
    if j0 > ry - 2: j0 = ry - 2
    if k0 > rz - 2: k0 = rz - 2
    if i0 < 0: i0 = 0
    if j0 < 0: j0 = 0
    if k0 < 0: k0 = 0
    wx = fx - i0; wy = fy - j0; wz = fz - k0
    frac[0] = wx; frac[1] = wy; frac[2] = wz
    idx[0] = i0; idx[1] = j0; idx[2] = k0
    idx[3] = i0 + 1 if rx > 1 else i0
    idx[4] = j0 + 1 if ry > 1 else j0
    idx[5] = k0 + 1 if rz > 1 else k0
    w[0] = (1 - wx) * (1 - wy) * (1 - wz)
    w[1] = (1 - wx) * (1 - wy) * wz
    w[2] = (1 - wx) * wy * (1 - wz)
    w[3] = (1 - wx) * wy * wz
    w[4] = wx * (1 - wy) * (1 - wz)
    w[5] = wx * (1 - wy) * wz
    w[6] = wx * wy * (1 - wz)
    w[7] = wx * wy * wz
    return 1


def field_forward(const double[:, :, :, ::1] grid, const double[:, ::1] pts,
                  const double[:, ::1] dirs, const double[::1] lo, const double[::1] hi,
                  int degree, bint with_color, double[:, ::1] rgb, double[::1] sigma,
                  unsigned char[::1] valid):
    """Softplus density and sigmoid SH color at world points; zero outside the box."""
    cdef Py_ssize_t n = pts.shape[0]
    cdef long rx = grid.shape[0], ry = grid.shape[1], rz = grid.shape[2]
    cdef long nsh = (degree + 1) * (degree + 1)
    cdef long nc = 1 + 3 * nsh if with_color else 1
    cdef Py_ssize_t p, c, k
    cdef long idx[6]
    cdef double w[8]
    cdef double b[16]
    cdef double raw[49]
    cdef double fr[3]
    cdef double r, logit, a0, a1
    cdef long i0, j0, k0, i1, j1, k1
    cdef double x[3]
    cdef double blo[3]
    cdef double bhi[3]
    for c in range(3):
        blo[c] = lo[c]; bhi[c] = hi[c]
    with nogil:
        for p in range(n):
            x[0] = pts[p, 0]; x[1] = pts[p, 1]; x[2] = pts[p, 2]
            if not _cell(x, blo, bhi, rx, ry, rz, idx, w, fr):
                valid[p] = 0
                sigma[p] = 0.0
                if with_color:
                    rgb[p, 0] = 0.0; rgb[p, 1] = 0.0; rgb[p, 2] = 0.0
                continue
            valid[p] = 1
            i0 = idx[0]; j0 = idx[1]; k0 = idx[2]; i1 = idx[3]; j1 = idx[4]; k1 = idx[5]
            for c in range(nc):
                raw[c] = _trilerp(grid, i0, j0, k0, i1, j1, k1, c, fr)
            r = raw[0]
            sigma[p] = (r if r > 0 else 0.0) + log1p(exp(-fabs(r)))
            if with_color:
                _sh(dirs[p, 0], dirs[p, 1], dirs[p, 2], degree, b)
                for c in range(3):
                    logit = 0.0
                    for k in range(nsh):
                        logit += raw[1 + c * nsh + k] * b[k]
                    rgb[p, c] = 0.5 * (1.0 + tanh(0.5 * logit))


def field_backward(double[:, :, :, ::1] grad_grid, const double[:, ::1] pts,
                   const double[:, ::1] dirs, const double[::1] lo, const double[::1] hi,
                   int degree, const double[:, ::1] rgb, const double[::1] sigma,
                   const double[:, ::1] g_rgb, const double[::1] g_sigma):
    """Adjoint of :func:`field_forward` (with color); accumulates in point order."""
    cdef Py_ssize_t n = pts.shape[0]
    cdef long rx = grad_grid.shape[0], ry = grad_grid.shape[1], rz = grad_grid.shape[2]
    cdef long nsh = (degree + 1) * (degree + 1)
    cdef long nc = 1 + 3 * nsh
    cdef Py_ssize_t p, c, k
    cdef long idx[6]
    cdef double w[8]
    cdef double b[16]
    cdef double g[49]
    cdef double fr[3]
    cdef double gl, col
    cdef long i0, j0, k0, i1, j1, k1
    cdef double x[3]
    cdef double blo[3]
    cdef double bhi[3]
    for c in range(3):
        blo[c] = lo[c]; bhi[c] = hi[c]
    with nogil:
        for p in range(n):
            x[0] = pts[p, 0]; x[1] = pts[p, 1]; x[2] = pts[p, 2]
            if not _cell(x, blo, bhi, rx, ry, rz, idx, w, fr):
                continue
            i0 = idx[0]; j0 = idx[1]; k0 = idx[2]; i1 = idx[3]; j1 = idx[4]; k1 = idx[5]
            g[0] = g_sigma[p] * -expm1(-sigma[p])
            _sh(dirs[p, 0], dirs[p, 1], dirs[p, 2], degree, b)
            for c in range(3):
                col = rgb[p, c]
                gl = g_rgb[p, c] * col * (1.0 - col)
                for k in range(nsh):
                    g[1 + c * nsh + k] = gl * b[k]
            for c in range(nc):
                if g[c] == 0.0:
                    continue
                grad_grid[i0, j0, k0, c] += w[0] * g[c]
                grad_grid[i0, j0, k1, c] += w[1] * g[c]
                grad_grid[i0, j1, k0, c] += w[2] * g[c]
                grad_grid[i0, j1, k1, c] += w[3] * g[c]
                grad_grid[i1, j0, k0, c] += w[4] * g[c]
                grad_grid[i1, j0, k1, c] += w[5] * g[c]
                grad_grid[i1, j1, k0, c] += w[6] * g[c]
                grad_grid[i1, j1, k1, c] += w[7] * g[c]


def path_samples(const double[:, :, ::1] vertices, const double[:, :, ::1] directions,
                 const double[:, ::1] tau, const long[:, ::1] media, const double[:, ::1] t,
                 double[:, :, ::1] pos, double[:, :, ::1] dirs, long[:, ::1] med):
    """Position, direction and medium of the segment containing each arc distance."""
    cdef Py_ssize_t n = t.shape[0], m = t.shape[1], s = vertices.shape[1]
    cdef Py_ssize_t r, j, seg, c
    cdef double tt, dt
    with nogil:
        for r in range(n):
            for j in range(m):
                tt = t[r, j]
                seg = 0
                while seg + 1 < s and tt >= tau[r, seg + 1]:
                    seg += 1
                dt = tt - tau[r, seg]
                for c in range(3):
                    pos[r, j, c] = vertices[r, seg, c] + dt * directions[r, seg, c]
                    dirs[r, j, c] = directions[r, seg, c]
                med[r, j] = media[r, seg]


def merge_sorted(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out):
    """Row-wise merge of two ascending arrays."""
    cdef Py_ssize_t n = a.shape[0], na = a.shape[1], nb = b.shape[1]
    cdef Py_ssize_t r, i, j, k
    with nogil:
        for r in range(n):
            i = 0; j = 0; k = 0
            while i < na and j < nb:
                if a[r, i] <= b[r, j]:
                    out[r, k] = a[r, i]; i += 1
                else:
                    out[r, k] = b[r, j]; j += 1
                k += 1
            while i < na:
                out[r, k] = a[r, i]; i += 1; k += 1
            while j < nb:
                out[r, k] = b[r, j]; j += 1; k += 1
