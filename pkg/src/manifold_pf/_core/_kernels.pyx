# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Signatures mirror ``_fallback`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, floor, sqrt, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    MAXJ = 32

cdef enum:
    CONVERGED = 0
    LOCAL_MINIMUM = 1
    ITERATION_CAP = 2
    OUT_OF_WORKSPACE = 3


# ---------------------------------------------------------------- distance transform

cdef void _edt_line(const double* f, double* out, Py_ssize_t n,
                    Py_ssize_t* v, double* z) noexcept nogil:
    cdef Py_ssize_t q, p, k = -1
    cdef double s, fq
    for q in range(n):
        fq = f[q]
        if fq == INFINITY:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -INFINITY
            continue
        while True:
            p = v[k]
            s = ((fq + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = s if k > 0 else -INFINITY
    if k < 0:
        for q in range(n):
            out[q] = INFINITY
        return
    cdef Py_ssize_t last = k
    k = 0
    for q in range(n):
        while k < last and z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]


def sq_edt_lines(double[:, ::1] f):
    cdef Py_ssize_t L = f.shape[0], n = f.shape[1], i, j
    cdef Py_ssize_t* v = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef double* z = <double*> malloc((n + 1) * sizeof(double))
    cdef double* out = <double*> malloc(n * sizeof(double))
    try:
        with nogil:
            for i in range(L):
                _edt_line(&f[i, 0], out, n, v, z)
                for j in range(n):
                    f[i, j] = out[j]
    finally:
        free(v)
        free(z)
        free(out)


# ---------------------------------------------------------------- sdf sampling

cdef struct Grid:
    const double* values
    Py_ssize_t nx, ny, nz
    double ox, oy, oz
    double res
    int dim


cdef inline void _axis(double x, double o, double res, Py_ssize_t n,
                       Py_ssize_t* i0, double* fr) noexcept nogil:
    cdef double u
    if n == 1:
        i0[0] = 0
        fr[0] = 0.0
        return
    u = (x - o) / res - 0.5
    if u < 0.0:
        u = 0.0
    elif u > n - 1.0:
        u = n - 1.0
    i0[0] = <Py_ssize_t> floor(u)
    if i0[0] > n - 2:
        i0[0] = n - 2
    fr[0] = u - i0[0]


cdef inline int _oob(const Grid* g, const double* p) noexcept nogil:
    if p[0] < g.ox or p[0] > g.ox + g.nx * g.res:
        return 1
    if p[1] < g.oy or p[1] > g.oy + g.ny * g.res:
        return 1
    if g.dim == 3 and (p[2] < g.oz or p[2] > g.oz + g.nz * g.res):
        return 1
    return 0


cdef double _interp(const Grid* g, const double* p) noexcept nogil:
    cdef Py_ssize_t ix, iy, iz = 0, sx, sy
    cdef double fx, fy, fz = 0.0, acc = 0.0, wx, wy, wz
    cdef int dx, dy, dz, nzs
    _axis(p[0], g.ox, g.res, g.nx, &ix, &fx)
    _axis(p[1], g.oy, g.res, g.ny, &iy, &fy)
    if g.dim == 3:
        _axis(p[2], g.oz, g.res, g.nz, &iz, &fz)
    sy = g.nz
    sx = g.ny * g.nz
    nzs = 2 if (g.dim == 3 and g.nz > 1) else 1
    for dx in range(2 if g.nx > 1 else 1):
        wx = fx if dx else 1.0 - fx
        for dy in range(2 if g.ny > 1 else 1):
            wy = fy if dy else 1.0 - fy
            for dz in range(nzs):
                wz = fz if dz else 1.0 - fz
                acc += wx * wy * wz * g.values[(ix + dx) * sx + (iy + dy) * sy + iz + dz]
    return acc


cdef void _grad(const Grid* g, const double* p, double* out) noexcept nogil:
    cdef double q[3]
    cdef double fp, fm
    cdef int ax
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for ax in range(g.dim):
        q[0] = p[0]
        q[1] = p[1]
        q[2] = p[2]
        q[ax] = p[ax] + g.res
        fp = _interp(g, q)
        q[ax] = p[ax] - g.res
        fm = _interp(g, q)
        out[ax] = (fp - fm) / (2.0 * g.res)


cdef Grid _make_grid(const double[:, :, ::1] values, const double[::1] origin,
                     double res, int dim):
    cdef Grid g
    g.values = &values[0, 0, 0]
    g.nx = values.shape[0]
    g.ny = values.shape[1]
    g.nz = values.shape[2]
    g.ox = origin[0]
    g.oy = origin[1]
    g.oz = origin[2]
    g.res = res
    g.dim = dim
    return g


def interp(const double[:, :, ::1] values, const double[::1] origin, double res,
           int dim, points):
    cdef double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t N = pts.shape[0], i
    out = np.empty(N)
    oob = np.zeros(N, dtype=np.uint8)
    cdef double[::1] o = out
    cdef unsigned char[::1] b = oob
    cdef Grid g = _make_grid(values, origin, res, dim)
    with nogil:
        for i in range(N):
            o[i] = _interp(&g, &pts[i, 0])
            b[i] = _oob(&g, &pts[i, 0])
    return out, oob


def gradient(const double[:, :, ::1] values, const double[::1] origin, double res,
             int dim, points):
    cdef double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t N = pts.shape[0], i
    out = np.zeros((N, 3))
    cdef double[:, ::1] o = out
    cdef Grid g = _make_grid(values, origin, res, dim)
    with nogil:
        for i in range(N):
            _grad(&g, &pts[i, 0], &o[i, 0])
    return out


# ---------------------------------------------------------------- chain + spheres

cdef struct Model:
    int n, m
    const double* offsets   # n x 3
    const double* K         # n x 9, Rodrigues: I + sin(q) K + (1 - cos(q)) K^2
    const double* K2        # n x 9
    const double* axes      # n x 3
    const double* base      # 3
    const int* links        # m
    const double* local     # m x 3
    const double* radius    # m


cdef void _fk(const Model* M, const double* q, double* R, double* o, double* a) noexcept nogil:
    """R: n x 9 world rotations, o: n x 3 origins, a: n x 3 world axes."""
    cdef double P[9]
    cdef double T[9]
    cdef double Rj[9]
    cdef double po[3]
    cdef int j, r, c
    cdef double s, cc
    for r in range(9):
        P[r] = 0.0
    P[0] = 1.0
    P[4] = 1.0
    P[8] = 1.0
    po[0] = M.base[0]
    po[1] = M.base[1]
    po[2] = M.base[2]
    for j in range(M.n):
        for r in range(3):
            po[r] = po[r] + P[3 * r] * M.offsets[3 * j] + P[3 * r + 1] * M.offsets[3 * j + 1] + P[3 * r + 2] * M.offsets[3 * j + 2]
            o[3 * j + r] = po[r]
            a[3 * j + r] = P[3 * r] * M.axes[3 * j] + P[3 * r + 1] * M.axes[3 * j + 1] + P[3 * r + 2] * M.axes[3 * j + 2]
        s = sin(q[j])
        cc = 1.0 - cos(q[j])
        for r in range(9):
            Rj[r] = s * M.K[9 * j + r] + cc * M.K2[9 * j + r]
        Rj[0] += 1.0
        Rj[4] += 1.0
        Rj[8] += 1.0
        for r in range(3):
            for c in range(3):
                T[3 * r + c] = P[3 * r] * Rj[c] + P[3 * r + 1] * Rj[3 + c] + P[3 * r + 2] * Rj[6 + c]
        for r in range(9):
            P[r] = T[r]
            R[9 * j + r] = T[r]


cdef inline void _center(const Model* M, const double* R, const double* o, int i,
                         double* p) noexcept nogil:
    cdef int L = M.links[i], r
    cdef const double* l = &M.local[3 * i]
    for r in range(3):
        p[r] = o[3 * L + r] + R[9 * L + 3 * r] * l[0] + R[9 * L + 3 * r + 1] * l[1] + R[9 * L + 3 * r + 2] * l[2]


cdef double _loss(const Model* M, const Grid* g, const double* q,
                  const unsigned char* mask, int mode, double margin,
                  double* grad, int* oob_any, double* dmin,
                  double* R, double* o, double* a) noexcept nogil:
    """Loss at q; fills grad (length n) when grad != NULL."""
    cdef int i, j, L
    cdef double p[3]
    cdef double gx[3]
    cdef double d, e, acc = 0.0, lx, ly, lz
    _fk(M, q, R, o, a)
    oob_any[0] = 0
    dmin[0] = INFINITY
    if grad != NULL:
        for j in range(M.n):
            grad[j] = 0.0
    for i in range(M.m):
        if not mask[i]:
            continue
        _center(M, R, o, i, p)
        d = _interp(g, p) - M.radius[i]
        if d < dmin[0]:
            dmin[0] = d
        if mode == 0:
            e = d
            if _oob(g, p):
                oob_any[0] = 1
        else:
            e = d - margin
            if e > 0.0:
                e = 0.0
        acc += e * e
        if grad != NULL and e != 0.0:
            _grad(g, p, gx)
            L = M.links[i]
            for j in range(L + 1):
                # a_j . ((p - o_j) x g)
                lx = p[0] - o[3 * j]
                ly = p[1] - o[3 * j + 1]
                lz = p[2] - o[3 * j + 2]
                grad[j] += 2.0 * e * (
                    a[3 * j] * (ly * gx[2] - lz * gx[1])
                    + a[3 * j + 1] * (lz * gx[0] - lx * gx[2])
                    + a[3 * j + 2] * (lx * gx[1] - ly * gx[0]))
    return acc


cdef class _Packed:
    cdef Model M
    cdef Grid g
    cdef object keep

    def __init__(self, offsets, axes, base, links, local, radius, values, origin,
                 double res, int dim):
        offsets = np.ascontiguousarray(offsets, dtype=np.float64)
        axes = np.ascontiguousarray(axes, dtype=np.float64)
        n = offsets.shape[0]
        if n > MAXJ:
            raise ValueError("too many joints")
        if dim == 2:
            axes = np.ascontiguousarray(np.tile([0.0, 0.0, 1.0], (n, 1)))
        K = np.zeros((n, 3, 3))
        K[:, 0, 1] = -axes[:, 2]
        K[:, 0, 2] = axes[:, 1]
        K[:, 1, 0] = axes[:, 2]
        K[:, 1, 2] = -axes[:, 0]
        K[:, 2, 0] = -axes[:, 1]
        K[:, 2, 1] = axes[:, 0]
        K2 = np.ascontiguousarray(K @ K)
        K = np.ascontiguousarray(K)
        base = np.ascontiguousarray(base, dtype=np.float64)
        links = np.ascontiguousarray(links, dtype=np.intc)
        local = np.ascontiguousarray(np.reshape(local, (-1, 3)), dtype=np.float64)
        radius = np.ascontiguousarray(radius, dtype=np.float64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        origin = np.ascontiguousarray(origin, dtype=np.float64)
        if links.size and links.max() >= n:
            raise ValueError("sphere link index out of range")
        self.keep = (offsets, axes, K, K2, base, links, local, radius, values, origin)
        cdef const double[:, ::1] off_v = offsets
        cdef const double[:, ::1] ax_v = axes
        cdef const double[:, :, ::1] K_v = K
        cdef const double[:, :, ::1] K2_v = K2
        cdef const double[::1] base_v = base
        cdef const int[::1] links_v = links
        cdef const double[:, ::1] local_v = local
        cdef const double[::1] rad_v = radius
        self.M.n = n
        self.M.m = links.shape[0]
        self.M.offsets = &off_v[0, 0]
        self.M.axes = &ax_v[0, 0]
        self.M.K = &K_v[0, 0, 0]
        self.M.K2 = &K2_v[0, 0, 0]
        self.M.base = &base_v[0]
        if self.M.m:
            self.M.links = &links_v[0]
            self.M.local = &local_v[0, 0]
            self.M.radius = &rad_v[0]
        self.g = _make_grid(values, origin, res, dim)


def sphere_distances(offsets, axes, base, links, local, radius, values, origin,
                     double res, int dim, Q):
    cdef _Packed P = _Packed(offsets, axes, base, links, local, radius, values, origin, res, dim)
    cdef double[:, ::1] Qv = np.ascontiguousarray(np.atleast_2d(Q), dtype=np.float64)
    cdef Py_ssize_t B = Qv.shape[0], b
    cdef int i, m = P.M.m
    d = np.empty((B, m))
    oob = np.zeros((B, m), dtype=np.uint8)
    cdef double[:, ::1] dv = d
    cdef unsigned char[:, ::1] ov = oob
    cdef double R[MAXJ * 9]
    cdef double o[MAXJ * 3]
    cdef double a[MAXJ * 3]
    cdef double p[3]
    with nogil:
        for b in range(B):
            _fk(&P.M, &Qv[b, 0], R, o, a)
            for i in range(m):
                _center(&P.M, R, o, i, p)
                dv[b, i] = _interp(&P.g, p) - P.M.radius[i]
                ov[b, i] = _oob(&P.g, p)
    return d, oob


def loss_and_grad(offsets, axes, base, links, local, radius, values, origin,
                  double res, int dim, Q, mask, int mode, double margin):
    cdef _Packed P = _Packed(offsets, axes, base, links, local, radius, values, origin, res, dim)
    cdef double[:, ::1] Qv = np.ascontiguousarray(np.atleast_2d(Q), dtype=np.float64)
    cdef const unsigned char[::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t B = Qv.shape[0], b
    loss = np.empty(B)
    grad = np.empty((B, P.M.n))
    oob = np.zeros(B, dtype=np.uint8)
    cdef double[::1] lv = loss
    cdef double[:, ::1] gv = grad
    cdef unsigned char[::1] ov = oob
    cdef double R[MAXJ * 9]
    cdef double o[MAXJ * 3]
    cdef double a[MAXJ * 3]
    cdef int flag
    cdef double dmin
    with nogil:
        for b in range(B):
            lv[b] = _loss(&P.M, &P.g, &Qv[b, 0], &mk[0], mode, margin, &gv[b, 0],
                          &flag, &dmin, R, o, a)
            ov[b] = flag
    return loss, grad, oob


cdef inline double _resid(int mode, double loss, double dmin) noexcept nogil:
    if mode == 0:
        return loss
    return dmin if dmin != INFINITY else 0.0


cdef inline bint _done(int mode, double loss, double dmin, double tol) noexcept nogil:
    if mode == 0:
        return loss < tol
    return dmin >= -tol


def project(offsets, axes, base, links, local, radius, values, origin, double res,
            int dim, Q0, lower, upper, mask, int mode, double lam, int max_iter,
            double tol, double step_tol, int max_halvings, double shrink, double margin):
    cdef _Packed P = _Packed(offsets, axes, base, links, local, radius, values, origin, res, dim)
    Q = np.array(np.atleast_2d(Q0), dtype=np.float64, order="C")
    cdef double[:, ::1] Qv = Q
    cdef const double[::1] lov = np.ascontiguousarray(lower, dtype=np.float64)
    cdef const double[::1] hiv = np.ascontiguousarray(upper, dtype=np.float64)
    cdef const unsigned char[::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t B = Qv.shape[0], b
    cdef int n = P.M.n, j, it, h, flag, stat, accepted
    status = np.full(B, ITERATION_CAP, dtype=np.int8)
    iters = np.zeros(B, dtype=np.int32)
    residual = np.zeros(B)
    cdef signed char[::1] sv = status
    cdef int[::1] iv = iters
    cdef double[::1] rv = residual
    cdef double R[MAXJ * 9]
    cdef double o[MAXJ * 3]
    cdef double a[MAXJ * 3]
    cdef double q[MAXJ]
    cdef double g[MAXJ]
    cdef double trial[MAXJ]
    cdef double best[MAXJ]
    cdef double lo[MAXJ]
    cdef double hi[MAXJ]
    cdef double f, ft, dmin, dt, scale, step, x, best_r, r
    with nogil:
        for b in range(B):
            for j in range(n):
                q[j] = Qv[b, j]
                lo[j] = lov[j] if lov[j] < q[j] else q[j]
                hi[j] = hiv[j] if hiv[j] > q[j] else q[j]
                best[j] = q[j]
            f = _loss(&P.M, &P.g, q, &mk[0], mode, margin, g, &flag, &dmin, R, o, a)
            best_r = _resid(mode, f, dmin)
            rv[b] = best_r
            stat = ITERATION_CAP
            iv[b] = 0
            if _done(mode, f, dmin, tol):
                stat = CONVERGED
            elif mode == 0 and flag:
                stat = OUT_OF_WORKSPACE
            it = 1
            while stat == ITERATION_CAP and it <= max_iter:
                scale = lam
                accepted = 0
                for h in range(max_halvings + 1):
                    for j in range(n):
                        x = q[j] - scale * g[j]
                        if x < lo[j]:
                            x = lo[j]
                        elif x > hi[j]:
                            x = hi[j]
                        trial[j] = x
                    ft = _loss(&P.M, &P.g, trial, &mk[0], mode, margin, NULL, &flag, &dt, R, o, a)
                    if ft <= f:
                        accepted = 1
                        break
                    scale *= shrink
                iv[b] = it
                if not accepted:
                    stat = LOCAL_MINIMUM
                    break
                step = 0.0
                for j in range(n):
                    step += (trial[j] - q[j]) * (trial[j] - q[j])
                    q[j] = trial[j]
                step = sqrt(step)
                f = _loss(&P.M, &P.g, q, &mk[0], mode, margin, g, &flag, &dmin, R, o, a)
                r = _resid(mode, f, dmin)
                rv[b] = r
                if mode == 1 and r > best_r:
                    best_r = r
                    for j in range(n):
                        best[j] = q[j]
                if _done(mode, f, dmin, tol):
                    stat = CONVERGED
                elif mode == 0 and flag:
                    stat = OUT_OF_WORKSPACE
                elif step < step_tol:
                    stat = LOCAL_MINIMUM
                it += 1
            sv[b] = stat
            if mode == 1 and stat != CONVERGED:
                for j in range(n):
                    q[j] = best[j]
                rv[b] = best_r
            for j in range(n):
                Qv[b, j] = q[j]
    return Q, status, residual, iters
