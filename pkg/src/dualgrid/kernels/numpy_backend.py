"""Pure-numpy kernel implementations (fallback for the compiled core).

Every function here has a Cython twin in ``_core.pyx``.  The arithmetic is
kept in the exact same order in both (binary op by binary op) so the two
backends produce bitwise-identical results; edit them in lockstep.
"""

import numpy as np


def scatter_add(out, idx, vals):
    """out[idx[k]] += vals[k], accumulated strictly in k order."""
    np.add.at(out, idx, vals)


def stencil7(out, x, gw, ge, gs, gn, gb, gt, diag):
    """7-point variable-coefficient stencil on a 1-cell padded operand.

    ``x`` has shape (nx+2, ny+2, nz+2); coefficient arrays and ``out`` are
    interior-shaped (nx, ny, nz).  out = diag*x_c + g*neighbors, summed in
    the fixed order W, E, S, N, B, T.
    """
    xc = x[1:-1, 1:-1, 1:-1]
    acc = diag * xc
    acc = acc + gw * x[:-2, 1:-1, 1:-1]
    acc = acc + ge * x[2:, 1:-1, 1:-1]
    acc = acc + gs * x[1:-1, :-2, 1:-1]
    acc = acc + gn * x[1:-1, 2:, 1:-1]
    acc = acc + gb * x[1:-1, 1:-1, :-2]
    acc = acc + gt * x[1:-1, 1:-1, 2:]
    out[...] = acc


def upwind_div(out, phi, fx, fy, fz, inv_h):
    """Divergence of first-order upwind fluxes of cell scalar ``phi``.

    ``phi`` is 1-cell padded; ``fx``/``fy``/``fz`` are face-normal flux
    coefficients of shapes (nx+1,ny,nz), (nx,ny+1,nz), (nx,ny,nz+1); the face
    value is phi upwinded by the sign of the coefficient (ties take the low
    side).  out[c] = sum_axis (F_hi*phi_hi - F_lo*phi_lo) * inv_h[axis].
    """
    pin = phi[1:-1, 1:-1, 1:-1]

    lox = phi[:-1, 1:-1, 1:-1]
    hix = phi[1:, 1:-1, 1:-1]
    facex = fx * np.where(fx >= 0.0, lox, hix)
    acc = (facex[1:, :, :] - facex[:-1, :, :]) * inv_h[0]

    loy = phi[1:-1, :-1, 1:-1]
    hiy = phi[1:-1, 1:, 1:-1]
    facey = fy * np.where(fy >= 0.0, loy, hiy)
    acc = acc + (facey[:, 1:, :] - facey[:, :-1, :]) * inv_h[1]

    loz = phi[1:-1, 1:-1, :-1]
    hiz = phi[1:-1, 1:-1, 1:]
    facez = fz * np.where(fz >= 0.0, loz, hiz)
    acc = acc + (facez[:, :, 1:] - facez[:, :, :-1]) * inv_h[2]

    out[...] = acc
    del pin


def pair_forces(xi, vi, wi, ri, mi, xj, vj, wj, rj, mj, k, gamma, mu):
    """Linear spring-dashpot forces for directed particle pairs.

    All per-pair inputs are gathered arrays: ``x*`` positions (n,3), ``v*``
    velocities, ``w*`` angular velocities, ``r*`` radii, ``m*`` masses.
    Returns (force on i, torque on i, overlap depth) with zero rows for
    non-contacting pairs.  Normal damping c = 2*gamma*sqrt(k*m_eff);
    tangential force is a viscous damper with the same c, Coulomb-capped at
    mu*max(F_n, 0).
    """
    dx = xi[:, 0] - xj[:, 0]
    dy = xi[:, 1] - xj[:, 1]
    dz = xi[:, 2] - xj[:, 2]
    dist2 = dx * dx + dy * dy + dz * dz
    dist = np.sqrt(dist2)
    sumr = ri + rj
    delta = sumr - dist
    contact = delta > 0.0

    # contact normal on i (points from j toward i); dist==0 only for
    # coincident centers, which the caller rejects
    invd = 1.0 / np.where(dist > 0.0, dist, 1.0)
    nx = dx * invd
    ny = dy * invd
    nz = dz * invd

    m_eff = mi * mj / (mi + mj)
    c = 2.0 * gamma * np.sqrt(k * m_eff)

    arm_i = ri - 0.5 * delta
    arm_j = rj - 0.5 * delta

    # relative surface velocity at the contact point, which sits at
    # xi - arm_i*n (equivalently xj + arm_j*n)
    rvx = vi[:, 0] - vj[:, 0]
    rvy = vi[:, 1] - vj[:, 1]
    rvz = vi[:, 2] - vj[:, 2]
    rvx = rvx - (wi[:, 1] * (arm_i * nz) - wi[:, 2] * (arm_i * ny))
    rvy = rvy - (wi[:, 2] * (arm_i * nx) - wi[:, 0] * (arm_i * nz))
    rvz = rvz - (wi[:, 0] * (arm_i * ny) - wi[:, 1] * (arm_i * nx))
    rvx = rvx - (wj[:, 1] * (arm_j * nz) - wj[:, 2] * (arm_j * ny))
    rvy = rvy - (wj[:, 2] * (arm_j * nx) - wj[:, 0] * (arm_j * nz))
    rvz = rvz - (wj[:, 0] * (arm_j * ny) - wj[:, 1] * (arm_j * nx))

    vn = rvx * nx + rvy * ny + rvz * nz
    fn = k * delta - c * vn

    vtx = rvx - vn * nx
    vty = rvy - vn * ny
    vtz = rvz - vn * nz
    vt2 = vtx * vtx + vty * vty + vtz * vtz
    vt = np.sqrt(vt2)

    cap = mu * np.where(fn > 0.0, fn, 0.0)
    ft = np.minimum(c * vt, cap)
    scale = ft / np.where(vt > 0.0, vt, 1.0)

    fx = fn * nx - scale * vtx
    fy = fn * ny - scale * vty
    fz = fn * nz - scale * vtz

    # torque = (-arm_i*n) x F_t; the normal part of F drops out of the cross
    tfx = -scale * vtx
    tfy = -scale * vty
    tfz = -scale * vtz
    tx = -arm_i * (ny * tfz - nz * tfy)
    ty = -arm_i * (nz * tfx - nx * tfz)
    tz = -arm_i * (nx * tfy - ny * tfx)

    zero = 0.0
    force = np.empty((xi.shape[0], 3))
    torque = np.empty((xi.shape[0], 3))
    force[:, 0] = np.where(contact, fx, zero)
    force[:, 1] = np.where(contact, fy, zero)
    force[:, 2] = np.where(contact, fz, zero)
    torque[:, 0] = np.where(contact, tx, zero)
    torque[:, 1] = np.where(contact, ty, zero)
    torque[:, 2] = np.where(contact, tz, zero)
    return force, torque, np.where(contact, delta, 0.0)
