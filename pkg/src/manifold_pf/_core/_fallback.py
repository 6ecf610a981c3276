"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension.  Arrays follow the conventions of ``_core``:
grids are always 3-D (planar grids carry a trailing axis of length 1) and
points/centers are 3-vectors with z = 0 in the plane.
"""

import numpy as np

from .. import kinematics as kin

CONVERGED, LOCAL_MINIMUM, ITERATION_CAP, OUT_OF_WORKSPACE = 0, 1, 2, 3


def _edt_line(f, out):
    """Squared distance transform of one line (lower envelope of parabolas).

    ``f`` holds site costs, ``inf`` marks cells that are not sites.
    """
    n = len(f)
    v = []
    z = []
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if not v:
            v.append(q)
            z.append(-np.inf)
            continue
        while True:
            p = v[-1]
            s = ((fq + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[-1]:
                v.pop()
                z.pop()
                if not v:
                    break
            else:
                break
        v.append(q)
        z.append(s if v[:-1] else -np.inf)
    if not v:
        out[:] = np.inf
        return
    k = 0
    last = len(v) - 1
    for q in range(n):
        while k < last and z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]


def sq_edt_lines(f):
    """In-place 1-D squared EDT of every row of a C-contiguous 2-D array."""
    out = np.empty(f.shape[1])
    for row in f:
        _edt_line(row.tolist(), out)
        row[:] = out


def _corner_weights(values, origin, res, dim, points):
    shape = values.shape
    u = (points[:, :3] - origin) / res - 0.5
    hi_edge = origin + np.array(shape) * res
    oob = np.zeros(len(points), dtype=np.uint8)
    for ax in range(dim):
        oob |= (points[:, ax] < origin[ax]) | (points[:, ax] > hi_edge[ax])
    idx0 = []
    frac = []
    for ax in range(3):
        n = shape[ax]
        if ax >= dim or n == 1:
            idx0.append(np.zeros(len(points), dtype=np.intp))
            frac.append(np.zeros(len(points)))
            continue
        ua = np.clip(u[:, ax], 0.0, n - 1.0)
        i0 = np.minimum(np.floor(ua).astype(np.intp), n - 2)
        idx0.append(i0)
        frac.append(ua - i0)
    return idx0, frac, oob


def interp(values, origin, res, dim, points):
    """Multilinear interpolation at (N, 3) points; returns (values, oob)."""
    points = np.ascontiguousarray(points, dtype=float)
    idx0, frac, oob = _corner_weights(values, origin, res, dim, points)
    nx, ny, nz = values.shape
    out = np.zeros(len(points))
    for dx in (0, 1):
        if dx and nx == 1:
            continue
        wx = frac[0] if dx else 1.0 - frac[0]
        for dy in (0, 1):
            if dy and ny == 1:
                continue
            wy = frac[1] if dy else 1.0 - frac[1]
            for dz in (0, 1):
                if dz and (nz == 1 or dim == 2):
                    continue
                wz = frac[2] if dz else 1.0 - frac[2]
                out += wx * wy * wz * values[idx0[0] + dx, idx0[1] + dy, idx0[2] + dz]
    return out, oob


def gradient(values, origin, res, dim, points):
    """Central differences (step = one voxel) of the interpolated field."""
    points = np.ascontiguousarray(points, dtype=float)
    g = np.zeros((len(points), 3))
    for ax in range(dim):
        step = np.zeros(3)
        step[ax] = res
        fp, _ = interp(values, origin, res, dim, points + step)
        fm, _ = interp(values, origin, res, dim, points - step)
        g[:, ax] = (fp - fm) / (2.0 * res)
    return g


class _Model:
    __slots__ = ("chain", "links", "local", "radius", "values", "origin", "res", "dim")

    def __init__(self, offsets, axes, base, links, local, radius, values, origin, res, dim):
        n = len(offsets)
        self.chain = kin.ChainModel(
            3, offsets, axes if dim == 3 else np.tile([0.0, 0.0, 1.0], (n, 1)),
            -np.inf, np.inf, base=base,
        )
        self.links = np.asarray(links, dtype=np.intp)
        self.local = np.asarray(local, dtype=float)
        self.radius = np.asarray(radius, dtype=float)
        self.values = values
        self.origin = np.asarray(origin, dtype=float)
        self.res = float(res)
        self.dim = dim

    def distances(self, Q, frames=None):
        B = len(Q)
        m = len(self.links)
        p = kin.batch_centers(self.chain, Q, self.links, self.local, frames)
        flat = p.reshape(-1, 3)
        phi, oob = interp(self.values, self.origin, self.res, self.dim, flat)
        d = phi.reshape(B, m) - self.radius
        return d, oob.reshape(B, m), p

    def loss_grad(self, Q, mask, mode, margin, want_grad=True):
        frames = kin.batch_frames(self.chain, Q)
        d, oob, p = self.distances(Q, frames)
        if mode == 0:
            e = np.where(mask, d, 0.0)
        else:
            e = np.where(mask, np.minimum(d - margin, 0.0), 0.0)
        loss = np.sum(e * e, axis=1)
        oob_any = np.any(oob.astype(bool) & mask, axis=1)
        if not want_grad:
            return loss, None, oob_any, d
        B, m = d.shape
        gx = gradient(self.values, self.origin, self.res, self.dim, p.reshape(-1, 3)).reshape(B, m, 3)
        J = kin.batch_jacobians(self.chain, Q, self.links, self.local, frames)
        g = np.einsum("bm,bmin,bmi->bn", 2.0 * e, J, gx)
        return loss, g, oob_any, d


def _model(offsets, axes, base, links, local, radius, values, origin, res, dim):
    return _Model(offsets, axes, base, links, local, radius, values, origin, res, dim)


def sphere_distances(offsets, axes, base, links, local, radius, values, origin, res, dim, Q):
    M = _model(offsets, axes, base, links, local, radius, values, origin, res, dim)
    Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=float)
    d, oob, _ = M.distances(Q)
    return d, oob.astype(np.uint8)


def loss_and_grad(offsets, axes, base, links, local, radius, values, origin, res, dim,
                  Q, mask, mode, margin):
    M = _model(offsets, axes, base, links, local, radius, values, origin, res, dim)
    Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=float)
    mask = np.asarray(mask).astype(bool)
    loss, g, oob, _ = M.loss_grad(Q, mask, mode, margin)
    return loss, g, oob.astype(np.uint8)


def project(offsets, axes, base, links, local, radius, values, origin, res, dim,
            Q0, lower, upper, mask, mode, lam, max_iter, tol, step_tol,
            max_halvings, shrink, margin):
    """Batched backtracking gradient descent.

    mode 0 drives the masked spheres onto the surface (loss < tol);
    mode 1 pushes penetrating masked spheres out (every distance >= -tol).
    """
    M = _model(offsets, axes, base, links, local, radius, values, origin, res, dim)
    Q = np.array(np.atleast_2d(Q0), dtype=float)
    B, n = Q.shape
    mask = np.asarray(mask).astype(bool)
    status = np.full(B, ITERATION_CAP, dtype=np.int8)
    iters = np.zeros(B, dtype=np.int32)
    residual = np.zeros(B)
    # steps may not leave the limits, but a start outside them is not moved inward
    lo = np.minimum(lower, Q)
    hi = np.maximum(upper, Q)

    def done_mask(loss, d):
        if mode == 0:
            return loss < tol
        return np.all(np.where(mask, d, np.inf) >= -tol, axis=1)

    def resid(loss, d):
        if mode == 0:
            return loss
        dm = np.where(mask, d, np.inf).min(axis=1)
        return np.where(np.isfinite(dm), dm, 0.0)

    loss, g, oob, d = M.loss_grad(Q, mask, mode, margin)
    res_now = resid(loss, d)
    residual[:] = res_now
    best_Q = Q.copy()
    best_res = res_now.copy()
    active = np.ones(B, dtype=bool)
    conv = done_mask(loss, d)
    status[conv] = CONVERGED
    active &= ~conv
    if mode == 0:
        bad = oob & active
        status[bad] = OUT_OF_WORKSPACE
        active &= ~bad

    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        q = Q[idx]
        f = loss[idx]
        gi = g[idx]
        scale = np.full(idx.size, float(lam))
        accepted = np.zeros(idx.size, dtype=bool)
        q_new = q.copy()
        f_new = f.copy()
        pending = np.arange(idx.size)
        for _ in range(max_halvings + 1):
            if pending.size == 0:
                break
            trial = np.clip(q[pending] - scale[pending, None] * gi[pending],
                            lo[idx[pending]], hi[idx[pending]])
            ft, _, _, _ = M.loss_grad(trial, mask, mode, margin, want_grad=False)
            ok = ft <= f[pending]
            good = pending[ok]
            q_new[good] = trial[ok]
            f_new[good] = ft[ok]
            accepted[good] = True
            pending = pending[~ok]
            scale[pending] *= shrink
        stuck = idx[~accepted]
        status[stuck] = LOCAL_MINIMUM
        iters[stuck] = it
        active[stuck] = False

        acc = idx[accepted]
        if acc.size == 0:
            continue
        step = np.linalg.norm(q_new[accepted] - q[accepted], axis=1)
        Q[acc] = q_new[accepted]
        iters[acc] = it
        la, ga, oa, da = M.loss_grad(Q[acc], mask, mode, margin)
        loss[acc] = la
        g[acc] = ga
        r = resid(la, da)
        residual[acc] = r
        if mode == 1:
            better = r > best_res[acc]
            best_res[acc[better]] = r[better]
            best_Q[acc[better]] = Q[acc[better]]
        conv = done_mask(la, da)
        status[acc[conv]] = CONVERGED
        active[acc[conv]] = False
        if mode == 0:
            bad = oa & ~conv
            status[acc[bad]] = OUT_OF_WORKSPACE
            active[acc[bad]] = False
        else:
            bad = np.zeros(acc.size, dtype=bool)
        small = (step < step_tol) & ~conv & ~bad
        status[acc[small]] = LOCAL_MINIMUM
        active[acc[small]] = False

    if mode == 1:
        failed = status != CONVERGED
        Q[failed] = best_Q[failed]
        residual[failed] = best_res[failed]
    return Q, status, residual, iters
