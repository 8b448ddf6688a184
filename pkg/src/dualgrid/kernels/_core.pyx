# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core; the bit-exact twin of ``numpy_backend``.

Compiled with -ffp-contract=off so no FMA contraction changes rounding; the
arithmetic below follows the numpy fallback binary op by binary op.  Edit the
two files in lockstep.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def scatter_add(cnp.float64_t[::1] out, cnp.int64_t[::1] idx, cnp.float64_t[::1] vals):
    """out[idx[k]] += vals[k], accumulated strictly in k order."""
    cdef Py_ssize_t k, n = idx.shape[0]
    for k in range(n):
        out[idx[k]] += vals[k]


def stencil7(cnp.float64_t[:, :, ::1] out,
             cnp.float64_t[:, :, ::1] x,
             cnp.float64_t[:, :, ::1] gw, cnp.float64_t[:, :, ::1] ge,
             cnp.float64_t[:, :, ::1] gs, cnp.float64_t[:, :, ::1] gn,
             cnp.float64_t[:, :, ::1] gb, cnp.float64_t[:, :, ::1] gt,
             cnp.float64_t[:, :, ::1] diag):
    """7-point variable-coefficient stencil on a 1-cell padded operand."""
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t nx = out.shape[0], ny = out.shape[1], nz = out.shape[2]
    cdef double acc
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                acc = diag[i, j, k] * x[i + 1, j + 1, k + 1]
                acc = acc + gw[i, j, k] * x[i, j + 1, k + 1]
                acc = acc + ge[i, j, k] * x[i + 2, j + 1, k + 1]
                acc = acc + gs[i, j, k] * x[i + 1, j, k + 1]
                acc = acc + gn[i, j, k] * x[i + 1, j + 2, k + 1]
                acc = acc + gb[i, j, k] * x[i + 1, j + 1, k]
                acc = acc + gt[i, j, k] * x[i + 1, j + 1, k + 2]
                out[i, j, k] = acc


def upwind_div(cnp.float64_t[:, :, ::1] out,
               cnp.float64_t[:, :, ::1] phi,
               cnp.float64_t[:, :, ::1] fx,
               cnp.float64_t[:, :, ::1] fy,
               cnp.float64_t[:, :, ::1] fz,
               cnp.float64_t[::1] inv_h):
    """Divergence of first-order upwind fluxes of cell scalar ``phi``."""
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t nx = out.shape[0], ny = out.shape[1], nz = out.shape[2]
    cdef double f_lo, f_hi, face_lo, face_hi, acc
    cdef double ihx = inv_h[0], ihy = inv_h[1], ihz = inv_h[2]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                f_lo = fx[i, j, k]
                f_hi = fx[i + 1, j, k]
                face_lo = f_lo * (phi[i, j + 1, k + 1] if f_lo >= 0.0 else phi[i + 1, j + 1, k + 1])
                face_hi = f_hi * (phi[i + 1, j + 1, k + 1] if f_hi >= 0.0 else phi[i + 2, j + 1, k + 1])
                acc = (face_hi - face_lo) * ihx

                f_lo = fy[i, j, k]
                f_hi = fy[i, j + 1, k]
                face_lo = f_lo * (phi[i + 1, j, k + 1] if f_lo >= 0.0 else phi[i + 1, j + 1, k + 1])
                face_hi = f_hi * (phi[i + 1, j + 1, k + 1] if f_hi >= 0.0 else phi[i + 1, j + 2, k + 1])
                acc = acc + (face_hi - face_lo) * ihy

                f_lo = fz[i, j, k]
                f_hi = fz[i, j, k + 1]
                face_lo = f_lo * (phi[i + 1, j + 1, k] if f_lo >= 0.0 else phi[i + 1, j + 1, k + 1])
                face_hi = f_hi * (phi[i + 1, j + 1, k + 1] if f_hi >= 0.0 else phi[i + 1, j + 1, k + 2])
                acc = acc + (face_hi - face_lo) * ihz

                out[i, j, k] = acc


def pair_forces(cnp.float64_t[:, ::1] xi, cnp.float64_t[:, ::1] vi,
                cnp.float64_t[:, ::1] wi, cnp.float64_t[::1] ri, cnp.float64_t[::1] mi,
                cnp.float64_t[:, ::1] xj, cnp.float64_t[:, ::1] vj,
                cnp.float64_t[:, ::1] wj, cnp.float64_t[::1] rj, cnp.float64_t[::1] mj,
                double k, double gamma, double mu):
    """Linear spring-dashpot forces for directed particle pairs."""
    cdef Py_ssize_t p, n = ri.shape[0]
    force_np = np.empty((n, 3))
    torque_np = np.empty((n, 3))
    depth_np = np.empty(n)
    cdef cnp.float64_t[:, ::1] force = force_np
    cdef cnp.float64_t[:, ::1] torque = torque_np
    cdef cnp.float64_t[::1] depth = depth_np
    cdef double dx, dy, dz, dist2, dist, sumr, delta, invd
    cdef double nxv, nyv, nzv, m_eff, c, arm_i, arm_j
    cdef double rvx, rvy, rvz, vn, fn, vtx, vty, vtz, vt2, vt
    cdef double cap, ft, scale, fxv, fyv, fzv, tfx, tfy, tfz

    for p in range(n):
        dx = xi[p, 0] - xj[p, 0]
        dy = xi[p, 1] - xj[p, 1]
        dz = xi[p, 2] - xj[p, 2]
        dist2 = dx * dx + dy * dy + dz * dz
        dist = sqrt(dist2)
        sumr = ri[p] + rj[p]
        delta = sumr - dist
        if delta <= 0.0:
            force[p, 0] = 0.0
            force[p, 1] = 0.0
            force[p, 2] = 0.0
            torque[p, 0] = 0.0
            torque[p, 1] = 0.0
            torque[p, 2] = 0.0
            depth[p] = 0.0
            continue

        invd = 1.0 / (dist if dist > 0.0 else 1.0)
        nxv = dx * invd
        nyv = dy * invd
        nzv = dz * invd

        m_eff = mi[p] * mj[p] / (mi[p] + mj[p])
        c = 2.0 * gamma * sqrt(k * m_eff)

        arm_i = ri[p] - 0.5 * delta
        arm_j = rj[p] - 0.5 * delta

        rvx = vi[p, 0] - vj[p, 0]
        rvy = vi[p, 1] - vj[p, 1]
        rvz = vi[p, 2] - vj[p, 2]
        rvx = rvx - (wi[p, 1] * (arm_i * nzv) - wi[p, 2] * (arm_i * nyv))
        rvy = rvy - (wi[p, 2] * (arm_i * nxv) - wi[p, 0] * (arm_i * nzv))
        rvz = rvz - (wi[p, 0] * (arm_i * nyv) - wi[p, 1] * (arm_i * nxv))
        rvx = rvx - (wj[p, 1] * (arm_j * nzv) - wj[p, 2] * (arm_j * nyv))
        rvy = rvy - (wj[p, 2] * (arm_j * nxv) - wj[p, 0] * (arm_j * nzv))
        rvz = rvz - (wj[p, 0] * (arm_j * nyv) - wj[p, 1] * (arm_j * nxv))

        vn = rvx * nxv + rvy * nyv + rvz * nzv
        fn = k * delta - c * vn

        vtx = rvx - vn * nxv
        vty = rvy - vn * nyv
        vtz = rvz - vn * nzv
        vt2 = vtx * vtx + vty * vty + vtz * vtz
        vt = sqrt(vt2)

        cap = mu * (fn if fn > 0.0 else 0.0)
        ft = c * vt
        if ft > cap:
            ft = cap
        scale = ft / (vt if vt > 0.0 else 1.0)

        fxv = fn * nxv - scale * vtx
        fyv = fn * nyv - scale * vty
        fzv = fn * nzv - scale * vtz

        tfx = -scale * vtx
        tfy = -scale * vty
        tfz = -scale * vtz

        force[p, 0] = fxv
        force[p, 1] = fyv
        force[p, 2] = fzv
        torque[p, 0] = -arm_i * (nyv * tfz - nzv * tfy)
        torque[p, 1] = -arm_i * (nzv * tfx - nxv * tfz)
        torque[p, 2] = -arm_i * (nxv * tfy - nyv * tfx)
        depth[p] = delta

    return force_np, torque_np, depth_np
