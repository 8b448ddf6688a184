"""Fine-grid flow solver: volume-averaged incompressible two-phase flow.

The momentum equation carries the porosity-weighted transient, convective
and viscous terms, a body force, and the particle momentum source treated
semi-implicitly (its velocity-proportional part is folded into the cell
diagonal, so stiff drag relaxes monotonically).  A single pressure
projection per step enforces the volume-averaged continuity constraint
div(eps*u) = -d(eps)/dt on face velocities; the phase fraction is advected
with first-order upwinding plus an interface compression flux.

Everything is first order and explicit apart from the drag diagonal and the
pressure solve; the pieces favor testability over accuracy order.  All
reductions inside the pressure solver go through canonical collectives, so
any rank count reproduces the single-rank iterates bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .collective import global_cell_sum, global_max
from .errors import ConfigurationError, SolverError, StepRejected
from .mesh import GridField, halo_exchange

__all__ = [
    "FluidProps",
    "BCFace",
    "BoundaryConditions",
    "FluidState",
    "mixture_properties",
    "momentum_step",
    "pressure_projection",
    "advect_alpha",
    "divergence_residual",
]

BC_KINDS = ("inlet", "outlet", "wall", "slip")
FACES = ("x-", "x+", "y-", "y+", "z-", "z+")


@dataclass(frozen=True)
class FluidProps:
    """Two-phase fluid: phase 1 is the alpha=1 (heavy) phase."""

    rho1: float
    mu1: float
    rho2: float
    mu2: float
    surface_tension: float = 0.0  # carried for completeness; no closure applied

    def __post_init__(self):
        for name in ("rho1", "mu1", "rho2", "mu2"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"fluid property {name} must be positive")


@dataclass
class BCFace:
    kind: str
    u: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in BC_KINDS:
            raise ConfigurationError(f"unknown boundary kind {self.kind!r}")
        self.u = np.asarray(self.u, dtype=np.float64)


class BoundaryConditions:
    """Per-face conditions; pressure is fixed (gauge zero) on outlet faces.

    Runs with no outlet pin the pressure gauge at global cell 0 instead.
    """

    def __init__(self, faces):
        self.faces = {}
        for name in FACES:
            spec = faces.get(name)
            if spec is None:
                raise ConfigurationError(f"missing boundary condition for face {name}")
            self.faces[name] = spec

    def __getitem__(self, name):
        return self.faces[name]

    @property
    def has_outlet(self):
        return any(f.kind == "outlet" for f in self.faces.values())

    @classmethod
    def walls(cls):
        return cls({name: BCFace("wall") for name in FACES})


_FACE_KEYS = {(0, 0): "x-", (0, 1): "x+", (1, 0): "y-", (1, 1): "y+",
              (2, 0): "z-", (2, 1): "z+"}


def _ghost_slices(axis, side):
    ghost = [slice(None)] * 3
    inner = [slice(None)] * 3
    ghost[axis] = -1 if side else 0
    inner[axis] = -2 if side else 1
    return tuple(ghost), tuple(inner)


def fill_scalar_ghosts(fld, bc, inlet_value=None):
    """Zero-gradient ghosts on physical faces; inlet faces may force a value."""
    for axis, side in fld.physical_pad_faces():
        g, i = _ghost_slices(axis, side)
        face = bc[_FACE_KEYS[(axis, side)]]
        if face.kind == "inlet" and inlet_value is not None:
            fld.data[g] = inlet_value(face)
        else:
            fld.data[g] = fld.data[i]


def fill_velocity_ghosts(fld, bc):
    for axis, side in fld.physical_pad_faces():
        g, i = _ghost_slices(axis, side)
        face = bc[_FACE_KEYS[(axis, side)]]
        if face.kind == "inlet":
            fld.data[g] = face.u
        elif face.kind == "outlet":
            fld.data[g] = fld.data[i]
        elif face.kind == "wall":
            fld.data[g] = -fld.data[i]
        elif face.kind == "slip":
            fld.data[g] = fld.data[i]
            fld.data[g + (axis,)] = -fld.data[i + (axis,)]


def fill_pressure_ghosts(fld, bc):
    """Ghost p = 0 behind outlet faces (gauge), zero-gradient elsewhere."""
    for axis, side in fld.physical_pad_faces():
        g, i = _ghost_slices(axis, side)
        face = bc[_FACE_KEYS[(axis, side)]]
        fld.data[g] = 0.0 if face.kind == "outlet" else fld.data[i]


def mixture_properties(alpha, props):
    """Pointwise linear blends rho = rho1*a + rho2*(1-a), same for mu."""
    alpha = np.asarray(alpha)
    rho = props.rho1 * alpha + props.rho2 * (1.0 - alpha)
    mu = props.mu1 * alpha + props.mu2 * (1.0 - alpha)
    return rho, mu


class FluidState:
    """Per-rank flow state on the fine grid partition.

    Cell fields are 1-cell padded GridFields; ``faces`` holds the
    projection-consistent face-normal velocities (local box faces including
    physical boundary faces), which the advective fluxes and the divergence
    diagnostic use.
    """

    def __init__(self, grid, partition, rank, props, bc, init_u=(0.0, 0.0, 0.0),
                 init_alpha=1.0):
        self.grid = grid
        self.partition = partition
        self.rank = rank
        self.props = props
        self.bc = bc

        self.u = GridField.zeros(grid, partition, rank, components=3)
        self.u.data[...] = np.asarray(init_u, dtype=np.float64)
        self.p = GridField.zeros(grid, partition, rank)
        self.alpha = GridField.zeros(grid, partition, rank)
        if callable(init_alpha):
            lo, hi = partition.box(rank)
            cells = partition.owned_cells(rank)
            self.alpha.set_owned_values(init_alpha(grid.cell_centers(cells)))
        else:
            self.alpha.data[...] = float(init_alpha)
        self.eps = GridField.full(grid, partition, rank, 1.0)
        self.rho = GridField.zeros(grid, partition, rank)
        self.mu = GridField.zeros(grid, partition, rank)
        self.dedt = np.zeros(self.u.interior.shape[:3])

        nx, ny, nz = self.u.box_shape()
        self.faces = [np.zeros((nx + 1, ny, nz)), np.zeros((nx, ny + 1, nz)),
                      np.zeros((nx, ny, nz + 1))]
        self.diagnostics = {}

    def box_shape(self):
        return self.u.box_shape()

    def refresh_mixture(self, ctx):
        """alpha ghosts -> pointwise mixture everywhere, pads included."""
        halo_exchange(self.alpha, ctx)
        fill_scalar_ghosts(self.alpha, self.bc, inlet_value=lambda f: f.alpha)
        rho, mu = mixture_properties(self.alpha.data, self.props)
        self.rho.data[...] = rho
        self.mu.data[...] = mu

    def refresh_eps(self, ctx):
        halo_exchange(self.eps, ctx)
        fill_scalar_ghosts(self.eps, self.bc)

    def refresh_velocity(self, ctx):
        halo_exchange(self.u, ctx)
        fill_velocity_ghosts(self.u, self.bc)

    def init_faces(self, ctx):
        self.refresh_velocity(ctx)
        for ax in range(3):
            self.faces[ax][...] = _face_average(self.u.data[..., ax], ax)
        _apply_face_bcs(self)


def _face_average(pad, axis):
    """Arithmetic mean of the two cells adjacent to each axis face."""
    s_lo = [slice(1, -1)] * 3
    s_hi = [slice(1, -1)] * 3
    s_lo[axis] = slice(0, -1)
    s_hi[axis] = slice(1, None)
    return 0.5 * (pad[tuple(s_lo)] + pad[tuple(s_hi)])


def _boundary_face_slice(axis, side):
    sl = [slice(None)] * 3
    sl[axis] = -1 if side else 0
    return tuple(sl)


def _interior_cell_slice(axis, side):
    sl = [slice(1, -1)] * 3
    sl[axis] = -2 if side else 1
    return tuple(sl)


def _apply_face_bcs(state):
    """Force fixed-value boundary faces (inlet, wall, slip).

    Outlet faces need no override: the zero-gradient ghost makes the face
    average the one-sided cell value exactly, and the projection corrects
    them like interior faces.
    """
    for axis, side in state.u.physical_pad_faces():
        face = state.bc[_FACE_KEYS[(axis, side)]]
        sl = _boundary_face_slice(axis, side)
        if face.kind == "inlet":
            state.faces[axis][sl] = face.u[axis]
        elif face.kind in ("wall", "slip"):
            state.faces[axis][sl] = 0.0


def _check_cfl(state, dt, ctx):
    umax = global_max(ctx, float(np.max(np.abs(state.u.interior))) if state.u.interior.size else 0.0)
    cfl = umax * dt / float(state.grid.spacing.min())
    if cfl > 0.5 + 1e-12:
        raise StepRejected(f"CFL {cfl:.3f} exceeds 0.5 (|u|max={umax:.3g}, dt={dt:.3g})")
    return cfl


def _check_diffusion(state, dt, ctx):
    rho = state.rho.interior
    mu = state.mu.interior
    nu_max = global_max(ctx, float(np.max(mu / rho)) if mu.size else 0.0)
    h2 = state.grid.spacing ** 2
    dnum = dt * nu_max * 2.0 * float(np.sum(1.0 / h2))
    if dnum > 0.5 + 1e-12:
        raise StepRejected(f"diffusion number {dnum:.3f} exceeds 0.5")
    return dnum


def _strain_divergence(state, ctx):
    """div(eps*mu*(grad u)^T), the transpose part of the viscous term.

    The tensor eps*mu*du_j/dx_c is assembled cell-centered, halo-exchanged
    as a 9-component field, and differentiated centrally.
    """
    grid = state.grid
    h = grid.spacing
    upad = state.u.data
    km = state.eps.data * state.mu.data
    w = GridField.zeros(grid, state.partition, state.rank, components=9)
    core = w.interior
    for j in range(3):
        for c in range(3):
            sl_hi = [slice(1, -1)] * 3
            sl_lo = [slice(1, -1)] * 3
            sl_hi[c] = slice(2, None)
            sl_lo[c] = slice(0, -2)
            grad = (upad[tuple(sl_hi) + (j,)] - upad[tuple(sl_lo) + (j,)]) / (2.0 * h[c])
            core[..., 3 * j + c] = km[1:-1, 1:-1, 1:-1] * grad
    halo_exchange(w, ctx)
    for axis, side in w.physical_pad_faces():
        g, i = _ghost_slices(axis, side)
        w.data[g] = w.data[i]
    out = np.zeros(core.shape[:3] + (3,))
    for c in range(3):
        for j in range(3):
            sl_hi = [slice(1, -1)] * 3
            sl_lo = [slice(1, -1)] * 3
            sl_hi[j] = slice(2, None)
            sl_lo[j] = slice(0, -2)
            out[..., c] += (w.data[tuple(sl_hi) + (3 * j + c,)]
                            - w.data[tuple(sl_lo) + (3 * j + c,)]) / (2.0 * h[j])
    return out


def momentum_step(state, gravity, dt, ctx, sources=None):
    """Explicit predictor for the cell velocities (pressure enters later).

    ``sources`` is an optional (B, S) pair of interior arrays: the particle
    drag coefficient density B [kg/(m^3 s)] and momentum source density
    S = B-weighted particle velocity [N/m^3]; the B u term is implicit:

        u* = (eps*rho/dt * u + explicit + S) / (eps*rho/dt + B)
    """
    _check_cfl(state, dt, ctx)
    _check_diffusion(state, dt, ctx)

    grid = state.grid
    h = grid.spacing
    inv_h = np.ascontiguousarray(1.0 / h)

    state.refresh_velocity(ctx)
    eps_pad = state.eps.data
    rho_pad = state.rho.data
    mu_pad = state.mu.data

    # face mass fluxes from the projected face velocities of the last step
    fm = []
    for ax in range(3):
        eps_f = _face_average(eps_pad, ax)
        rho_f = _face_average(rho_pad, ax)
        fm.append(np.ascontiguousarray((eps_f * rho_f) * state.faces[ax]))

    core = state.u.interior
    eps_c = eps_pad[1:-1, 1:-1, 1:-1]
    rho_c = rho_pad[1:-1, 1:-1, 1:-1]
    a_diag = (eps_c * rho_c) / dt

    conv = np.zeros(core.shape[:3])
    diff2 = _strain_divergence(state, ctx)
    bsrc = ssrc = None
    if sources is not None:
        bsrc, ssrc = sources

    km = eps_pad * mu_pad
    kf = [np.ascontiguousarray(_face_average(km, ax)) for ax in range(3)]

    unew = np.empty_like(core)
    for c in range(3):
        phi = np.ascontiguousarray(state.u.data[..., c])
        kernels.upwind_div(conv, phi, fm[0], fm[1], fm[2], inv_h)

        # compact face-based div(eps*mu*grad u_c)
        diff1 = np.zeros(core.shape[:3])
        for ax in range(3):
            sl_hi = [slice(1, -1)] * 3
            sl_lo = [slice(1, -1)] * 3
            sl_hi[ax] = slice(2, None)
            sl_lo[ax] = slice(0, -2)
            sc = [slice(None)] * 3
            sh = [slice(None)] * 3
            sc[ax] = slice(0, -1)
            sh[ax] = slice(1, None)
            grad_hi = (phi[tuple(sl_hi)] - phi[1:-1, 1:-1, 1:-1]) / h[ax]
            grad_lo = (phi[1:-1, 1:-1, 1:-1] - phi[tuple(sl_lo)]) / h[ax]
            diff1 += (kf[ax][tuple(sh)] * grad_hi - kf[ax][tuple(sc)] * grad_lo) / h[ax]

        rhs = a_diag * core[..., c] - conv + diff1 + diff2[..., c]
        rhs = rhs + (eps_c * rho_c) * gravity[c]
        denom = a_diag
        if sources is not None:
            rhs = rhs + ssrc[..., c]
            denom = a_diag + bsrc
        unew[..., c] = rhs / denom

    core[...] = unew
    return state


def _build_poisson(state, dt):
    """Face conductances and stencil coefficients for the projection solve.

    Operator: L p = sum_faces g_f (p_nb - p_c)/h^2, with g = dt*eps_f/rho_f;
    wall/slip/inlet faces carry no correction (g=0) and outlet faces use a
    one-sided conductance against ghost p=0.
    """
    grid = state.grid
    h = grid.spacing
    eps_pad = state.eps.data
    rho_pad = state.rho.data
    shape = state.box_shape()

    g_face = []
    for ax in range(3):
        eps_f = _face_average(eps_pad, ax)
        rho_f = _face_average(rho_pad, ax)
        g_face.append(dt * eps_f / rho_f)

    physical = dict()
    for axis, side in state.u.physical_pad_faces():
        face = state.bc[_FACE_KEYS[(axis, side)]]
        sl = _boundary_face_slice(axis, side)
        if face.kind == "outlet":
            ic = _interior_cell_slice(axis, side)
            g_face[axis][sl] = dt * eps_pad[ic] / rho_pad[ic]
        else:
            g_face[axis][sl] = 0.0
        physical[(axis, side)] = face.kind

    coeffs = []
    diag = np.zeros(shape)
    for ax in range(3):
        sc = [slice(None)] * 3
        sh = [slice(None)] * 3
        sc[ax] = slice(0, -1)
        sh[ax] = slice(1, None)
        g_lo = g_face[ax][tuple(sc)] / (h[ax] * h[ax])
        g_hi = g_face[ax][tuple(sh)] / (h[ax] * h[ax])
        diag -= g_lo
        diag -= g_hi
        # off-diagonal couplings vanish through physical faces
        g_lo = g_lo.copy()
        g_hi = g_hi.copy()
        if (ax, 0) in physical:
            sl = [slice(None)] * 3
            sl[ax] = 0
            g_lo[tuple(sl)] = 0.0
        if (ax, 1) in physical:
            sl = [slice(None)] * 3
            sl[ax] = -1
            g_hi[tuple(sl)] = 0.0
        coeffs.append((np.ascontiguousarray(g_lo), np.ascontiguousarray(g_hi)))
    return g_face, coeffs, diag


def _face_divergence(state, faces, eps_pad):
    grid = state.grid
    h = grid.spacing
    div = np.zeros(state.box_shape())
    for ax in range(3):
        eps_f = _face_average(eps_pad, ax)
        flux = eps_f * faces[ax]
        sc = [slice(None)] * 3
        sh = [slice(None)] * 3
        sc[ax] = slice(0, -1)
        sh[ax] = slice(1, None)
        div += (flux[tuple(sh)] - flux[tuple(sc)]) / h[ax]
    return div


def _gauge_cell(state):
    """Local index of global cell 0 if owned (pure-Neumann gauge pin)."""
    lo, _ = state.partition.box(state.rank)
    if all(l == 0 for l in lo):
        return (0, 0, 0)
    return None


def pressure_projection(state, dt, ctx, tol=1e-8, max_iters=2000):
    """Solve for p and correct cell and face velocities to continuity.

    Solves div(dt*eps/rho grad p) = div(eps u*) + d(eps)/dt with a Jacobi
    preconditioned conjugate gradient; every inner product is reduced in
    canonical global order, so the iterate sequence (and iteration count) is
    identical for every rank count.  Raises SolverError with the residual
    history if tolerance is not reached.
    """
    grid = state.grid
    h = grid.spacing

    state.refresh_velocity(ctx)
    eps_pad = state.eps.data

    ustar_faces = []
    for ax in range(3):
        ustar_faces.append(_face_average(state.u.data[..., ax], ax))
    state.faces = ustar_faces
    _apply_face_bcs(state)

    rhs = _face_divergence(state, state.faces, eps_pad) + state.dedt

    g_face, coeffs, diag = _build_poisson(state, dt)
    pin = None
    if not state.bc.has_outlet:
        pin = _gauge_cell(state)

    # SPD system: A p = b with A = -L
    (gxl, gxh), (gyl, gyh), (gzl, gzh) = coeffs
    a_diag = -diag
    a_gw, a_ge = -gxl, -gxh
    a_gs, a_gn = -gyl, -gyh
    a_gb, a_gt = -gzl, -gzh
    if pin is not None:
        a_diag = a_diag.copy()
        a_diag[pin] = 1.0
        for arr in (a_gw, a_ge, a_gs, a_gn, a_gb, a_gt):
            arr[pin] = 0.0
    b = -rhs
    if pin is not None:
        b = b.copy()
        b[pin] = 0.0

    work = GridField.zeros(grid, state.partition, state.rank)

    def matvec(x):
        work.interior[...] = x
        halo_exchange(work, ctx)
        for axis, side in work.physical_pad_faces():
            g, _ = _ghost_slices(axis, side)
            work.data[g] = 0.0
        out = np.empty_like(x)
        kernels.stencil7(out, work.data, a_gw, a_ge, a_gs, a_gn, a_gb, a_gt, a_diag)
        if pin is not None:
            out[pin] = x[pin]
        return out

    def dot(x, y):
        return global_cell_sum(ctx, state.partition, (x * y).reshape(-1))

    x = state.p.interior.copy()
    if pin is not None:
        x[pin] = 0.0
    r = b - matvec(x)
    bnorm = np.sqrt(dot(b, b))
    history = []
    iters = 0
    if bnorm > 0.0:
        z = r / a_diag
        rz = dot(r, z)
        d = z.copy()
        converged = np.sqrt(dot(r, r)) <= tol * bnorm
        while not converged:
            if iters >= max_iters:
                raise SolverError(
                    f"pressure solve did not converge in {max_iters} iterations; "
                    f"relative residuals: {history[:5]} ... {history[-3:]}"
                )
            q = matvec(d)
            dq = dot(d, q)
            alpha = rz / dq
            x = x + alpha * d
            r = r - alpha * q
            res = np.sqrt(dot(r, r)) / bnorm
            history.append(res)
            iters += 1
            converged = res <= tol
            z = r / a_diag
            rz_new = dot(r, z)
            d = z + (rz_new / rz) * d
            rz = rz_new
    else:
        x = np.zeros_like(x)

    state.p.interior[...] = x
    halo_exchange(state.p, ctx)
    fill_pressure_ghosts(state.p, state.bc)
    ppad = state.p.data
    rho_pad = state.rho.data

    # face corrections (identical algebra to the operator build); the cell
    # velocities take the average of their two face corrections, which keeps
    # the 1/rho weighting face-based - dividing a cell-centered pressure
    # gradient by the light-phase density would blow up at material
    # interfaces under gravity
    core = state.u.interior
    for ax in range(3):
        s_lo = [slice(1, -1)] * 3
        s_hi = [slice(1, -1)] * 3
        s_lo[ax] = slice(0, -1)
        s_hi[ax] = slice(1, None)
        dpdx = (ppad[tuple(s_hi)] - ppad[tuple(s_lo)]) / h[ax]
        eps_f = _face_average(eps_pad, ax)
        corr = (g_face[ax] / np.where(eps_f > 0.0, eps_f, 1.0)) * dpdx
        state.faces[ax] = state.faces[ax] - corr
        sc = [slice(None)] * 3
        sh = [slice(None)] * 3
        sc[ax] = slice(0, -1)
        sh[ax] = slice(1, None)
        core[..., ax] -= 0.5 * (corr[tuple(sc)] + corr[tuple(sh)])

    state.diagnostics["cg_iters"] = iters
    state.diagnostics["cg_residual"] = history[-1] if history else 0.0
    return state


def divergence_residual(state):
    """Max local |div(eps u_face) + d(eps)/dt| (combine with global_max)."""
    div = _face_divergence(state, state.faces, state.eps.data) + state.dedt
    return float(np.max(np.abs(div))) if div.size else 0.0


def advect_alpha(state, dt, ctx, c_alpha=1.0):
    """Explicit upwind transport of the phase fraction with compression.

    Updates eps*alpha with the face fluxes eps_f*u_f*alpha_up plus the
    interface compression flux eps_f*u_c*[alpha(1-alpha)]_up, where
    u_c = c_alpha*|u|*(grad alpha/|grad alpha|) evaluated at faces.  The
    compression flux is anti-diffusive, so each face flux is limited by the
    donor cell's content and the receiver cell's remaining room (with a 1/6
    share per face); that keeps the sharpening bounded without a full
    flux-corrected transport pass.  The result is divided by eps and clipped
    to [0, 1] with the clipped mass recorded in the diagnostics.
    """
    grid = state.grid
    h = grid.spacing
    inv_h = np.ascontiguousarray(1.0 / h)

    umax = global_max(ctx, float(np.max(np.abs(state.u.interior))) if state.u.interior.size else 0.0)
    cfl = umax * dt / float(h.min())
    if cfl > 0.5 + 1e-12:
        raise StepRejected(f"alpha-advection CFL {cfl:.3f} exceeds 0.5")

    # the projection corrected cell velocities; make the pad coherent before
    # face-averaging |u| for the compression term
    state.refresh_velocity(ctx)
    halo_exchange(state.alpha, ctx)
    fill_scalar_ghosts(state.alpha, state.bc, inlet_value=lambda f: f.alpha)
    apad = state.alpha.data
    eps_pad = state.eps.data

    # interface normal, cell-centered then halo-exchanged
    nhat = GridField.zeros(grid, state.partition, state.rank, components=3)
    gmag = np.zeros(state.box_shape())
    grads = []
    for ax in range(3):
        s_hi = [slice(1, -1)] * 3
        s_lo = [slice(1, -1)] * 3
        s_hi[ax] = slice(2, None)
        s_lo[ax] = slice(0, -2)
        gr = (apad[tuple(s_hi)] - apad[tuple(s_lo)]) / (2.0 * h[ax])
        grads.append(gr)
        gmag += gr * gr
    gmag = np.sqrt(gmag)
    denom = np.where(gmag > 1e-12, gmag, 1.0)
    for ax in range(3):
        nhat.interior[..., ax] = grads[ax] / denom
    halo_exchange(nhat, ctx)
    for axis, side in nhat.physical_pad_faces():
        g, i = _ghost_slices(axis, side)
        nhat.data[g] = nhat.data[i]

    umag = np.sqrt(np.sum(state.u.data * state.u.data, axis=-1))

    total = np.zeros(state.box_shape())
    acc = np.zeros(state.box_shape())

    # advective part: upwind alpha against the projected face velocities
    adv = []
    for ax in range(3):
        eps_f = _face_average(eps_pad, ax)
        adv.append(np.ascontiguousarray(eps_f * state.faces[ax]))
    kernels.upwind_div(acc, np.ascontiguousarray(apad), adv[0], adv[1], adv[2], inv_h)
    total[...] = acc

    # compression part: donor-upwinded, then limited per face by the donor
    # content and receiver room (1/6 share per face keeps cells bounded)
    phic = apad * (1.0 - apad)
    comp = []
    for ax in range(3):
        eps_f = _face_average(eps_pad, ax)
        ucf = c_alpha * _face_average(umag, ax) * _face_average(nhat.data[..., ax], ax)
        for axis, side in state.u.physical_pad_faces():
            if axis == ax:
                ucf[_boundary_face_slice(axis, side)] = 0.0
        s_lo = [slice(1, -1)] * 3
        s_hi = [slice(1, -1)] * 3
        s_lo[ax] = slice(0, -1)
        s_hi[ax] = slice(1, None)
        a_lo = apad[tuple(s_lo)]
        a_hi = apad[tuple(s_hi)]
        up = np.where(ucf >= 0.0, phic[tuple(s_lo)], phic[tuple(s_hi)])
        raw = (eps_f * ucf) * up
        donor = np.where(raw >= 0.0, a_lo, a_hi)
        receiver = np.where(raw >= 0.0, a_hi, a_lo)
        room = np.minimum(np.maximum(donor, 0.0), np.maximum(1.0 - receiver, 0.0))
        cap = (eps_f * room) * (h[ax] / (6.0 * dt))
        comp.append(np.ascontiguousarray(np.clip(raw, -cap, cap)))
    ones = np.ascontiguousarray(np.ones_like(apad))
    kernels.upwind_div(acc, ones, comp[0], comp[1], comp[2], inv_h)
    total += acc

    eps_c = eps_pad[1:-1, 1:-1, 1:-1]
    ea_new = eps_c * apad[1:-1, 1:-1, 1:-1] - dt * total
    a_new = ea_new / eps_c
    clipped = np.clip(a_new, 0.0, 1.0)
    state.alpha.interior[...] = clipped
    # per-cell masses, summed canonically by the caller
    state.alpha_preclip_cellmass = ea_new * grid.cell_volume
    state.alpha_clip_cellmass = np.abs(clipped - a_new) * (eps_c * grid.cell_volume)
    state.diagnostics["alpha_clipped_mass"] = float(np.sum(state.alpha_clip_cellmass))
    return state
