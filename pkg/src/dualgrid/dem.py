"""Discrete element solver: spheres with linear dashpot contacts.

Particles are stored structure-of-arrays per rank, always sorted by global
id.  Contact detection bins particles into coarse-grid cells and scans the
27-cell neighborhood, which is exhaustive provided no particle pair reaches
across more than one cell (validated: max contact distance must not exceed
the minimum coarse cell spacing).  Forces on a particle are accumulated over
its contacts in global (id_i, id_j) order, so a parallel run reproduces the
sequential force sums bit for bit.

Time integration is velocity Verlet (kick-drift-kick).  The drag term
beta*(u_f - u_p) is handled explicitly in the pre-drift kick and implicitly
in the post-drift kick, which is trapezoidal for the linear drag relaxation
(second order) and unconditionally stable for stiff beta.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .transport import decode_f8, encode_f8

__all__ = [
    "Particle",
    "Wall",
    "ContactParams",
    "ParticleSet",
    "GhostSet",
    "contact_force",
    "drag_force",
    "make_drag_law",
    "stable_dt_bound",
    "compute_contact_forces",
    "exchange_ghosts_and_migrate",
]

TAG_PARTICLES = 1020

ROW_WIDTH = 26  # id,x3,v3,w3,q4,r,rho,fnd3,beta,uf3,tq3

_WALL_MASS_FACTOR = 1e30  # effective wall mass = particle mass * this


@dataclass
class Particle:
    """One sphere; convenience view used at API boundaries and in tests."""

    id: int
    x: np.ndarray
    v: np.ndarray
    omega: np.ndarray = None
    quat: np.ndarray = None
    r: float = 1.0
    rho: float = 1000.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.omega = np.zeros(3) if self.omega is None else np.asarray(self.omega, dtype=np.float64)
        if self.quat is None:
            self.quat = np.array([1.0, 0.0, 0.0, 0.0])

    @property
    def volume(self):
        return (4.0 / 3.0) * math.pi * self.r ** 3

    @property
    def mass(self):
        return self.rho * self.volume

    @property
    def inertia(self):
        return 0.4 * self.mass * self.r ** 2

    @property
    def area(self):
        return math.pi * self.r ** 2


@dataclass
class Wall:
    """Infinite plane wall: a point on the plane and its unit normal."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)


@dataclass(frozen=True)
class ContactParams:
    """Linear dashpot contact model parameters.

    The damping coefficient is derived from the restitution coefficient by
    the standard inversion c = 2*gamma*sqrt(k*m_eff) with
    gamma = -ln(e)/sqrt(pi^2 + ln(e)^2), which makes the analytic rebound of
    the damped oscillator equal exactly ``e``.
    """

    k: float
    e: float = 1.0
    mu: float = 0.0

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigurationError(f"spring constant must be positive, got {self.k}")
        if not 0 < self.e <= 1:
            raise ConfigurationError(f"restitution must be in (0, 1], got {self.e}")
        if self.mu < 0:
            raise ConfigurationError(f"friction coefficient must be >= 0, got {self.mu}")

    @property
    def gamma(self):
        if self.e == 1.0:
            return 0.0
        ln_e = math.log(self.e)
        return -ln_e / math.sqrt(math.pi ** 2 + ln_e ** 2)


def stable_dt_bound(min_mass, k):
    """Largest DEM step resolving the stiffest contact: 0.2*sqrt(m_min/k)."""
    return 0.2 * math.sqrt(min_mass / k)


class ParticleSet:
    """Structure-of-arrays particle storage, sorted by global id.

    Besides the dynamic state, the set carries the force state written by
    the latest force evaluation (non-drag force, drag coefficient beta, the
    fluid velocity seen, contact torque, and the resulting acceleration for
    probes); this state travels with particles across rank migration.
    """

    __slots__ = ("ids", "x", "v", "omega", "quat", "r", "rho",
                 "f_nd", "beta", "uf", "torque", "accel")

    def __init__(self, ids, x, v, omega, quat, r, rho,
                 f_nd=None, beta=None, uf=None, torque=None):
        n = len(ids)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.float64).reshape(n, 3)
        self.v = np.asarray(v, dtype=np.float64).reshape(n, 3)
        self.omega = np.asarray(omega, dtype=np.float64).reshape(n, 3)
        self.quat = np.asarray(quat, dtype=np.float64).reshape(n, 4)
        self.r = np.asarray(r, dtype=np.float64).reshape(n)
        self.rho = np.asarray(rho, dtype=np.float64).reshape(n)
        self.f_nd = np.zeros((n, 3)) if f_nd is None else np.asarray(f_nd).reshape(n, 3)
        self.beta = np.zeros(n) if beta is None else np.asarray(beta).reshape(n)
        self.uf = np.zeros((n, 3)) if uf is None else np.asarray(uf).reshape(n, 3)
        self.torque = np.zeros((n, 3)) if torque is None else np.asarray(torque).reshape(n, 3)
        self.accel = np.zeros((n, 3))

    # -- constructors --

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_particles(cls, particles):
        n = len(particles)
        s = cls(
            np.array([p.id for p in particles], dtype=np.int64),
            np.array([p.x for p in particles]).reshape(n, 3),
            np.array([p.v for p in particles]).reshape(n, 3),
            np.array([p.omega for p in particles]).reshape(n, 3),
            np.array([p.quat for p in particles]).reshape(n, 4),
            np.array([p.r for p in particles]),
            np.array([p.rho for p in particles]),
        )
        s.sort_by_id()
        return s

    def particle(self, i):
        return Particle(int(self.ids[i]), self.x[i].copy(), self.v[i].copy(),
                        self.omega[i].copy(), self.quat[i].copy(),
                        float(self.r[i]), float(self.rho[i]))

    # -- derived quantities --

    @property
    def n(self):
        return len(self.ids)

    def volume(self):
        return (4.0 / 3.0) * math.pi * self.r ** 3

    def mass(self):
        return self.rho * self.volume()

    def inertia(self):
        return 0.4 * self.mass() * self.r ** 2

    def area(self):
        return math.pi * self.r ** 2

    def kinetic_energy(self):
        m = self.mass()
        ii = self.inertia()
        trans = 0.5 * m * np.einsum("ij,ij->i", self.v, self.v)
        rot = 0.5 * ii * np.einsum("ij,ij->i", self.omega, self.omega)
        return trans + rot

    # -- bookkeeping --

    def sort_by_id(self):
        order = np.argsort(self.ids, kind="stable")
        for name in self.__slots__:
            setattr(self, name, getattr(self, name)[order])

    def take(self, index):
        out = ParticleSet.__new__(ParticleSet)
        for name in self.__slots__:
            setattr(out, name, getattr(self, name)[index])
        return out

    def to_rows(self):
        rows = np.empty((self.n, ROW_WIDTH))
        rows[:, 0] = self.ids
        rows[:, 1:4] = self.x
        rows[:, 4:7] = self.v
        rows[:, 7:10] = self.omega
        rows[:, 10:14] = self.quat
        rows[:, 14] = self.r
        rows[:, 15] = self.rho
        rows[:, 16:19] = self.f_nd
        rows[:, 19] = self.beta
        rows[:, 20:23] = self.uf
        rows[:, 23:26] = self.torque
        return rows

    @classmethod
    def from_rows(cls, rows):
        rows = rows.reshape(-1, ROW_WIDTH)
        s = cls(rows[:, 0].astype(np.int64), rows[:, 1:4], rows[:, 4:7],
                rows[:, 7:10], rows[:, 10:14], rows[:, 14], rows[:, 15],
                f_nd=rows[:, 16:19], beta=rows[:, 19], uf=rows[:, 20:23],
                torque=rows[:, 23:26])
        return s

    def concat(self, other):
        merged = ParticleSet.from_rows(np.vstack([self.to_rows(), other.to_rows()]))
        merged.sort_by_id()
        return merged


GhostSet = ParticleSet  # read-only copies of neighbor-rank boundary particles


# ---------------------------------------------------------------------------
# drag correlations
# ---------------------------------------------------------------------------

class DragLaw:
    """beta(slip, porosity, fluid) such that F_drag = beta * (u_f - u_p)."""

    def __init__(self, name, fn):
        self.name = name
        self._fn = fn

    def __call__(self, slip_mag, eps, rho_f, mu_f, diam):
        return self._fn(slip_mag, eps, rho_f, mu_f, diam)


def _beta_difelice(slip, eps, rho_f, mu_f, diam):
    # single-sphere Dallavalle drag with a porosity correction exponent; the
    # algebraic form below equals 0.5*rho*A*Cd(Re)*|slip| with
    # Cd = (0.63 + 4.8/sqrt(Re))^2, Re = eps*rho*|slip|*d/mu, and stays
    # finite at zero slip.
    area = 0.25 * math.pi * diam ** 2
    re = np.maximum(eps * rho_f * slip * diam / mu_f, 1e-12)
    chi = 3.7 - 0.65 * np.exp(-0.5 * (1.5 - np.log10(re)) ** 2)
    cd_slip = (0.63 * np.sqrt(slip) + 4.8 * np.sqrt(mu_f / (rho_f * eps * diam))) ** 2
    return 0.5 * rho_f * area * cd_slip * eps ** (2.0 - chi)


def _beta_stokes(slip, eps, rho_f, mu_f, diam):
    return 3.0 * math.pi * mu_f * diam * np.ones_like(np.asarray(slip, dtype=np.float64))


def make_drag_law(correlation="difelice", beta=None):
    if correlation == "difelice":
        return DragLaw("difelice", _beta_difelice)
    if correlation == "stokes":
        return DragLaw("stokes", _beta_stokes)
    if correlation == "constant":
        if beta is None or beta < 0:
            raise ConfigurationError("constant drag mode needs a non-negative beta")
        b = float(beta)
        return DragLaw("constant", lambda slip, eps, rho_f, mu_f, diam: np.full_like(
            np.asarray(slip, dtype=np.float64), b))
    raise ConfigurationError(f"unknown drag correlation {correlation!r}")


def drag_force(p, u_f_at_p, eps_at_p, fluid_props, law):
    """F_drag = beta * (u_f - u_p) for a single particle.

    ``fluid_props`` is (rho_f, mu_f) at the particle position; ``eps_at_p``
    must be positive (a non-positive porosity means the carrier cell is
    overfull of solids and the configuration is broken).
    """
    if eps_at_p <= 0.0:
        raise ConfigurationError(f"porosity at particle must be positive, got {eps_at_p}")
    rho_f, mu_f = fluid_props
    slip = np.asarray(u_f_at_p, dtype=np.float64) - p.v
    smag = float(np.sqrt(np.dot(slip, slip)))
    beta = float(law(np.array([smag]), np.array([eps_at_p]), rho_f, mu_f, 2.0 * p.r)[0])
    return beta * slip


# ---------------------------------------------------------------------------
# contacts
# ---------------------------------------------------------------------------

def _pair_kernel_args(xs, vs, ws, rs, ms, ii, jj):
    return (np.ascontiguousarray(xs[ii]), np.ascontiguousarray(vs[ii]),
            np.ascontiguousarray(ws[ii]), np.ascontiguousarray(rs[ii]),
            np.ascontiguousarray(ms[ii]),
            np.ascontiguousarray(xs[jj]), np.ascontiguousarray(vs[jj]),
            np.ascontiguousarray(ws[jj]), np.ascontiguousarray(rs[jj]),
            np.ascontiguousarray(ms[jj]))


def contact_force(pi, pj, params):
    """Contact force and torque on ``pi`` from particle or wall ``pj``.

    Non-overlapping pairs return zeros; coincident centers (overlap depth
    reaching r_i + r_j) are a nonphysical state and raise.
    """
    if isinstance(pj, Wall):
        dist = float(np.dot(pi.x - pj.point, pj.normal))
        xj = pi.x - dist * pj.normal
        vj = np.zeros(3)
        wj = np.zeros(3)
        rj, mj = 0.0, pi.mass * _WALL_MASS_FACTOR
    else:
        xj, vj, wj, rj, mj = pj.x, pj.v, pj.omega, pj.r, pj.mass
    f, t, depth = kernels.pair_forces(
        np.ascontiguousarray(pi.x[None, :]), np.ascontiguousarray(pi.v[None, :]),
        np.ascontiguousarray(pi.omega[None, :]), np.array([pi.r]), np.array([pi.mass]),
        np.ascontiguousarray(np.asarray(xj, dtype=np.float64)[None, :]),
        np.ascontiguousarray(np.asarray(vj, dtype=np.float64)[None, :]),
        np.ascontiguousarray(np.asarray(wj, dtype=np.float64)[None, :]),
        np.array([rj], dtype=np.float64), np.array([mj], dtype=np.float64),
        params.k, params.gamma, params.mu,
    )
    if depth[0] >= pi.r + rj and pi.r + rj > 0:
        raise ValueError(f"coincident centers for particles {pi.id} and contact partner")
    return f[0], t[0]


def _ranges_to_indices(left, right):
    counts = right - left
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    reps = np.repeat(np.arange(len(left), dtype=np.int64), counts)
    starts = np.repeat(left, counts)
    offsets = np.arange(total, dtype=np.int64) - np.repeat(
        np.cumsum(counts) - counts, counts)
    return reps, starts + offsets


def find_contact_pairs(grid, pset, ghosts):
    """Directed candidate pairs (owned index, index into owned+ghost arrays).

    Bins owned and ghost particles into coarse cells and scans the 27-cell
    neighborhood of each owned particle.  Pairs are returned sorted by
    (id_i, id_j), the canonical accumulation order.
    """
    n_own = pset.n
    if n_own == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                pset.x, pset.v, pset.omega, pset.r, pset.mass(), pset.ids)
    xs = np.vstack([pset.x, ghosts.x])
    vs = np.vstack([pset.v, ghosts.v])
    ws = np.vstack([pset.omega, ghosts.omega])
    rs = np.concatenate([pset.r, ghosts.r])
    ms = np.concatenate([pset.mass(), ghosts.mass()])
    ids = np.concatenate([pset.ids, ghosts.ids])

    max_reach = 2.0 * rs.max() if len(rs) else 0.0
    if max_reach > grid.spacing.min() * (1.0 + 1e-12):
        raise ConfigurationError(
            f"largest possible contact distance {max_reach} exceeds the minimum "
            f"binning cell spacing {grid.spacing.min()}; contacts could be missed"
        )

    cells = grid.locate_many(xs)
    order = np.lexsort((ids, cells))
    cells_sorted = cells[order]

    dims = grid.dims
    own_ijk = np.stack(np.unravel_index(cells[:n_own], tuple(dims)), axis=1)

    pair_i = []
    pair_j = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                nb = own_ijk + np.array([di, dj, dk])
                valid = np.all((nb >= 0) & (nb < dims), axis=1)
                if not valid.any():
                    continue
                lin = (nb[:, 0] * dims[1] + nb[:, 1]) * dims[2] + nb[:, 2]
                lin = np.where(valid, lin, -1)
                left = np.searchsorted(cells_sorted, lin, side="left")
                right = np.searchsorted(cells_sorted, lin, side="right")
                reps, pos = _ranges_to_indices(left, right)
                pair_i.append(reps)
                pair_j.append(order[pos])
    ii = np.concatenate(pair_i)
    jj = np.concatenate(pair_j)

    keep = ids[jj] != ids[ii]
    ii, jj = ii[keep], jj[keep]
    d = xs[jj] - xs[ii]
    dist2 = np.einsum("ij,ij->i", d, d)
    sumr = rs[ii] + rs[jj]
    keep = dist2 < sumr * sumr
    ii, jj = ii[keep], jj[keep]

    order = np.lexsort((ids[jj], ids[ii]))
    return ii[order], jj[order], xs, vs, ws, rs, ms, ids


def compute_contact_forces(grid, pset, ghosts, params):
    """Accumulated contact force and torque on every owned particle."""
    force = np.zeros((pset.n, 3))
    torque = np.zeros((pset.n, 3))
    ii, jj, xs, vs, ws, rs, ms, ids = find_contact_pairs(grid, pset, ghosts)
    if len(ii) == 0:
        return force, torque
    f, t, depth = kernels.pair_forces(
        *_pair_kernel_args(xs, vs, ws, rs, ms, ii, jj),
        params.k, params.gamma, params.mu,
    )
    sumr = rs[ii] + rs[jj]
    if np.any(depth >= sumr):
        bad = np.flatnonzero(depth >= sumr)[0]
        raise ValueError(
            f"coincident centers for particles {ids[ii[bad]]} and {ids[jj[bad]]}"
        )
    acc = np.zeros(pset.n)
    for c in range(3):
        acc[:] = 0.0
        kernels.scatter_add(acc, ii, np.ascontiguousarray(f[:, c]))
        force[:, c] = acc
        acc[:] = 0.0
        kernels.scatter_add(acc, ii, np.ascontiguousarray(t[:, c]))
        torque[:, c] = acc
    return force, torque


_FACE_AXIS = {"x-": (0, 0), "x+": (0, 1), "y-": (1, 0), "y+": (1, 1),
              "z-": (2, 0), "z+": (2, 1)}


def wall_forces(grid, pset, wall_faces, params):
    """Contact forces against the listed domain faces, in fixed face order."""
    force = np.zeros((pset.n, 3))
    torque = np.zeros((pset.n, 3))
    if pset.n == 0:
        return force, torque
    m = pset.mass()
    lo = grid.origin
    hi = grid.domain_hi
    for face in _FACE_AXIS:
        if face not in wall_faces:
            continue
        axis, side = _FACE_AXIS[face]
        plane = hi[axis] if side else lo[axis]
        normal = np.zeros(3)
        normal[axis] = 1.0 if side else -1.0
        dist = (plane - pset.x[:, axis]) if side else (pset.x[:, axis] - plane)
        touching = np.flatnonzero(dist < pset.r)
        if len(touching) == 0:
            continue
        xj = pset.x[touching].copy()
        xj[:, axis] = plane
        zeros3 = np.zeros((len(touching), 3))
        f, t, _ = kernels.pair_forces(
            np.ascontiguousarray(pset.x[touching]), np.ascontiguousarray(pset.v[touching]),
            np.ascontiguousarray(pset.omega[touching]),
            np.ascontiguousarray(pset.r[touching]), np.ascontiguousarray(m[touching]),
            np.ascontiguousarray(xj), zeros3, zeros3,
            np.zeros(len(touching)), np.ascontiguousarray(m[touching] * _WALL_MASS_FACTOR),
            params.k, params.gamma, params.mu,
        )
        force[touching] += f
        torque[touching] += t
    return force, torque


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------

def kick_pre(pset, dt):
    """Explicit half kick from the stored force state (drag at current v)."""
    if pset.n == 0:
        return
    m = pset.mass()[:, None]
    drag = pset.beta[:, None] * (pset.uf - pset.v)
    pset.v += (0.5 * dt) * ((pset.f_nd + drag) / m)
    pset.omega += (0.5 * dt) * (pset.torque / pset.inertia()[:, None])


def kick_post(pset, dt):
    """Half kick with the drag term implicit in the new velocity."""
    if pset.n == 0:
        return
    m = pset.mass()[:, None]
    coef = (0.5 * dt) / m
    denom = 1.0 + pset.beta[:, None] * coef
    pset.v = (pset.v + coef * (pset.f_nd + pset.beta[:, None] * pset.uf)) / denom
    pset.omega += (0.5 * dt) * (pset.torque / pset.inertia()[:, None])


def drift(pset, dt):
    """Advance positions and orientations; quaternions are renormalized."""
    if pset.n == 0:
        return
    pset.x += dt * pset.v
    qw, qx, qy, qz = pset.quat[:, 0], pset.quat[:, 1], pset.quat[:, 2], pset.quat[:, 3]
    ox, oy, oz = pset.omega[:, 0], pset.omega[:, 1], pset.omega[:, 2]
    dw = -(ox * qx + oy * qy + oz * qz)
    dx = qw * ox + (oy * qz - oz * qy)
    dy = qw * oy + (oz * qx - ox * qz)
    dz = qw * oz + (ox * qy - oy * qx)
    h = 0.5 * dt
    pset.quat[:, 0] += h * dw
    pset.quat[:, 1] += h * dx
    pset.quat[:, 2] += h * dy
    pset.quat[:, 3] += h * dz
    norm = np.sqrt(np.einsum("ij,ij->i", pset.quat, pset.quat))
    pset.quat /= norm[:, None]


def evaluate_accelerations(pset):
    """Store a_p = (F_nd + beta*(u_f - u_p))/m for probes and diagnostics."""
    if pset.n == 0:
        return
    m = pset.mass()[:, None]
    pset.accel = (pset.f_nd + pset.beta[:, None] * (pset.uf - pset.v)) / m


# ---------------------------------------------------------------------------
# ghost exchange and migration
# ---------------------------------------------------------------------------

def _apply_domain_policy(pset, grid, policy):
    cells = grid.locate_many(pset.x)
    outside = cells < 0
    if not outside.any():
        return pset, cells, 0
    if policy == "error":
        bad = pset.ids[outside]
        raise RuntimeError(f"particles left the domain: ids {bad.tolist()}")
    if policy == "delete":
        keep = ~outside
        pset = pset.take(np.flatnonzero(keep))
        return pset, cells[keep], int(outside.sum())
    if policy == "reflect":
        lo = grid.origin
        hi = grid.domain_hi
        for ax in range(3):
            below = pset.x[:, ax] < lo[ax]
            pset.x[below, ax] = 2.0 * lo[ax] - pset.x[below, ax]
            pset.v[below, ax] *= -1.0
            above = pset.x[:, ax] >= hi[ax]
            pset.x[above, ax] = 2.0 * hi[ax] - pset.x[above, ax]
            pset.v[above, ax] *= -1.0
        cells = grid.locate_many(pset.x)
        if np.any(cells < 0):
            raise RuntimeError("particle still outside the domain after reflection")
        return pset, cells, 0
    raise ConfigurationError(f"unknown out-of-domain policy {policy!r}")


def exchange_ghosts_and_migrate(pset, dem_map, ctx, policy="error"):
    """Transfer ownership of moved particles and rebuild the ghost layer.

    Particles are owned by the rank owning the coarse cell containing their
    center.  The exchange is two rounds of box-neighbor messages: first
    migrants move to their new owners (a particle whose new owner is not a
    box neighbor moved more than one cell in a step, which violates the
    exchange assumptions and raises), then each rank ships ghost copies of
    its post-migration particles lying within one cell of a neighbor's box.
    Global particle count is conserved.  Returns (particles, ghosts, stats).
    """
    grid = dem_map.grid
    rank = ctx.rank
    pset, cells, dropped = _apply_domain_policy(pset, grid, policy)
    owners = dem_map.owner[cells]

    plan = dem_map.halo_plan(rank)
    peers = plan.peers
    peer_set = set(peers)

    leaving = owners != rank
    if np.any(leaving):
        bad = set(np.unique(owners[leaving]).tolist()) - peer_set
        if bad:
            raise RuntimeError(
                f"particles moved beyond the neighbor layer (to ranks {sorted(bad)}); "
                "the DEM step is too large for the cell size"
            )

    stats = {"migrated_out": int(np.count_nonzero(leaving)), "dropped": dropped,
             "migrated_in": 0, "ghosts_out": 0, "ghosts_in": 0}

    # round 1: migration
    for peer in peers:
        rows = pset.take(np.flatnonzero(owners == peer)).to_rows()
        ctx.send(peer, encode_f8(rows), TAG_PARTICLES)
    merged = pset.take(np.flatnonzero(~leaving))
    arrived = []
    for peer in peers:
        rows = decode_f8(ctx.receive(peer, TAG_PARTICLES)).reshape(-1, ROW_WIDTH)
        arrived.append(rows)
        stats["migrated_in"] += len(rows)
    if stats["migrated_in"]:
        merged = merged.concat(ParticleSet.from_rows(np.vstack(arrived)))
    else:
        merged.sort_by_id()

    # round 2: ghost layer from post-migration owners
    ijk = np.stack(np.unravel_index(grid.locate_many(merged.x), tuple(grid.dims)), axis=1)
    for peer in peers:
        plo, phi = dem_map.box(peer)
        near = np.all((ijk >= np.asarray(plo) - 1) & (ijk < np.asarray(phi) + 1), axis=1)
        rows = merged.take(np.flatnonzero(near)).to_rows()
        stats["ghosts_out"] += len(rows)
        ctx.send(peer, encode_f8(rows), TAG_PARTICLES)
    ghost_rows = []
    for peer in peers:
        rows = decode_f8(ctx.receive(peer, TAG_PARTICLES)).reshape(-1, ROW_WIDTH)
        ghost_rows.append(rows)
        stats["ghosts_in"] += len(rows)
    if stats["ghosts_in"]:
        ghosts = ParticleSet.from_rows(np.vstack(ghost_rows))
        ghosts.sort_by_id()
    else:
        ghosts = ParticleSet.empty()
    return merged, ghosts, stats
