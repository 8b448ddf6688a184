"""The dual-grid coupling driver.

One coupling step runs, in order: (1) particle fields projected onto the
coarse grid (porosity and the semi-implicit momentum-source pair), all
process-local thanks to the shared particle/coarse partition; (2) those
fields interpolated onto the fine grid; (3) the fine-grid flow step(s);
(4) the flow solution interpolated back to the coarse grid; (5) DEM
sub-steps driven by coarse-grid fluid values, with ghost/migration exchange
each sub-step.  The two grid-to-grid matrices are built once at startup and
reused for the whole run.

A mono-scale driver is provided for comparison: same physics on a single
grid with co-located partitions, no grid-to-grid interpolation.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import cfd, dem, kernels
from .errors import ConfigurationError
from .interp import CommMatrix, InterpolationKind, Strategy, interpolate
from .mesh import GridField
from .partition import LoadWeights, colocate_partition, invert_ranks, rcb_partition
from .transport import TrafficCounters

__all__ = ["CouplingSchedule", "World", "project_particles_to_coarse",
           "multiscale_step", "monoscale_step"]


@dataclass(frozen=True)
class CouplingSchedule:
    """Fine-grid step size and sub-step counts per coupling step."""

    dt_cfd: float
    n_sub: int = 10
    n_cfd: int = 1

    def __post_init__(self):
        if self.dt_cfd <= 0 or self.n_sub < 1 or self.n_cfd < 1:
            raise ConfigurationError("schedule needs dt_cfd > 0, n_sub >= 1, n_cfd >= 1")

    @property
    def dt_dem(self):
        return self.dt_cfd * self.n_cfd / self.n_sub

    @property
    def dt_coupling(self):
        return self.dt_cfd * self.n_cfd


class _PhaseTimer:
    def __init__(self, ctx):
        self.ctx = ctx
        self.wall = {}
        self.traffic = {}

    def run(self, name, fn):
        before = self.ctx.counters.snapshot()
        t0 = time.perf_counter()
        out = fn()
        dt = time.perf_counter() - t0
        delta = TrafficCounters.delta(self.ctx.counters.snapshot(), before)
        self.wall[name] = self.wall.get(name, 0.0) + dt
        old = self.traffic.get(name, (0, 0, 0, 0))
        self.traffic[name] = tuple(a + b for a, b in zip(old, delta))
        return out


class World:
    """Per-rank simulation state for one run."""

    def __init__(self, ctx, scen):
        self.ctx = ctx
        self.mode = scen.mode
        self.strategy = Strategy.parse(scen.strategy)
        self.schedule = scen.schedule
        self.props = scen.fluid_props
        self.bc = scen.bc
        self.gravity = np.asarray(scen.gravity, dtype=np.float64)
        self.contact = scen.contact
        self.drag_law = scen.drag_law
        self.walls = scen.walls
        self.policy = scen.out_of_domain
        self.ext_torque = np.asarray(scen.ext_torque, dtype=np.float64)
        self.eps_floor = scen.eps_floor
        self.c_alpha = scen.c_alpha
        self.cg_tol = scen.cg_tol
        self.cg_max_iters = scen.cg_max_iters

        P = ctx.world_size
        self.coarse = scen.coarse_grid
        self.cmap = colocate_partition(self.coarse, P)
        if self.mode == "multiscale":
            self.fine = scen.fine_grid
            weights = (LoadWeights.uniform(self.fine) if scen.fine_weights == "uniform"
                       else scen.fine_weight_values)
            self.fmap = rcb_partition(self.fine, weights, P)
            if scen.invert_fine_ranks:
                self.fmap = invert_ranks(self.fmap)
        else:
            self.fine = self.coarse
            self.fmap = self.cmap

        self.matrix_builds = {}
        if self.mode == "multiscale":
            self.m_c2f = CommMatrix((self.coarse, self.cmap), (self.fine, self.fmap), ctx.rank)
            self._count_build("coarse_to_fine")
            self.m_f2c = CommMatrix((self.fine, self.fmap), (self.coarse, self.cmap), ctx.rank)
            self._count_build("fine_to_coarse")
        else:
            self.m_c2f = self.m_f2c = None

        self.fluid = cfd.FluidState(self.fine, self.fmap, ctx.rank, self.props, self.bc,
                                    init_u=scen.init_u, init_alpha=scen.init_alpha)
        self.fluid.refresh_mixture(ctx)
        self.fluid.refresh_eps(ctx)
        self.fluid.init_faces(ctx)

        # coarse-grid fluid fields seen by the particles
        if self.mode == "multiscale":
            self.c_u = GridField.zeros(self.coarse, self.cmap, ctx.rank, components=3)
            self.c_p = GridField.zeros(self.coarse, self.cmap, ctx.rank)
            self.c_rho = GridField.full(self.coarse, self.cmap, ctx.rank, self.props.rho1)
            self.c_mu = GridField.full(self.coarse, self.cmap, ctx.rank, self.props.mu1)
            self.c_eps = GridField.full(self.coarse, self.cmap, ctx.rank, 1.0)
            self._interp_f2c()
        else:
            self.c_u = self.fluid.u
            self.c_rho = self.fluid.rho
            self.c_mu = self.fluid.mu
            self.c_eps = self.fluid.eps
        self.c_b = GridField.zeros(self.coarse, self.cmap, ctx.rank)
        self.c_s = GridField.zeros(self.coarse, self.cmap, ctx.rank, components=3)
        self.fpi_fine = GridField.zeros(self.fine, self.fmap, ctx.rank, components=3)

        # particles: filter the replicated global set down to owned cells
        self._owned_coarse = self.cmap.owned_cells(ctx.rank)
        pset = scen.particles
        cells = self.coarse.locate_many(pset.x) if pset.n else np.zeros(0, np.int64)
        if pset.n and np.any(cells < 0):
            raise ConfigurationError("initial particle positions outside the domain")
        mine = np.flatnonzero(self.cmap.owner[cells] == ctx.rank) if pset.n else np.zeros(0, np.int64)
        self.particles = pset.take(mine)
        self.particles.sort_by_id()
        self.ghosts = dem.ParticleSet.empty()

        if pset.n and self.contact is not None:
            bound = dem.stable_dt_bound(float(pset.mass().min()), self.contact.k)
            if self.schedule.dt_dem > bound * (1.0 + 1e-12):
                raise ConfigurationError(
                    f"DEM sub-step {self.schedule.dt_dem:.3e} s violates the contact "
                    f"stability bound {bound:.3e} s; raise n_sub or lower dt_cfd"
                )

        # startup: ghosts, initial projection (so d(eps)/dt starts from rest)
        self.migration_stats = {}
        self.floored_cells = 0
        self.last_drag = np.zeros((self.particles.n, 3))
        self.drag_phase_traffic = (0, 0, 0, 0)
        self.proj_phase_traffic = (0, 0, 0, 0)
        self.last_drag_ids = np.zeros(0, np.int64)
        self.reaction_density = np.zeros((len(self._owned_coarse), 3))
        self._exchange()
        self._project()
        if self.mode == "multiscale":
            self._interp_sources()
        self.fluid.dedt[...] = 0.0
        self._eps_prev = self.fluid.eps.owned_values().copy()
        self._eval_forces(record_drag=True)
        self.step_index = 0
        self.time = 0.0

    def _count_build(self, key):
        self.matrix_builds[key] = self.matrix_builds.get(key, 0) + 1

    # -- particle-side helpers --

    def _owned_cell_index(self, cells):
        idx = np.searchsorted(self._owned_coarse, cells)
        bad = (idx >= len(self._owned_coarse)) | (self._owned_coarse[np.minimum(
            idx, len(self._owned_coarse) - 1)] != cells)
        if np.any(bad):
            raise RuntimeError(
                "particle in a cell not owned by this rank: co-location violated"
            )
        return idx

    def coarse_values_at(self, cells):
        """Fluid values (u, rho, mu, eps) at owned coarse cells, local only."""
        idx = self._owned_cell_index(cells)
        u = self.c_u.owned_values()[idx]
        rho = self.c_rho.owned_values()[idx]
        mu = self.c_mu.owned_values()[idx]
        eps = self.c_eps.owned_values()[idx]
        return u, rho, mu, eps

    def _project(self):
        before = self.ctx.counters.snapshot()
        project_particles_to_coarse(self)
        self.proj_phase_traffic = TrafficCounters.delta(self.ctx.counters.snapshot(), before)

    def _exchange(self):
        self.particles, self.ghosts, self.migration_stats = dem.exchange_ghosts_and_migrate(
            self.particles, self.cmap, self.ctx, policy=self.policy)

    def _eval_forces(self, record_drag=False):
        """Contact + wall + gravity forces and the drag state at particles."""
        ps = self.particles
        fc, tc = dem.compute_contact_forces(self.coarse, ps, self.ghosts, self.contact) \
            if self.contact is not None and ps.n else (np.zeros((ps.n, 3)), np.zeros((ps.n, 3)))
        if self.walls and ps.n:
            fw, tw = dem.wall_forces(self.coarse, ps, self.walls, self.contact)
            fc = fc + fw
            tc = tc + tw
        m = ps.mass()
        f_nd = fc + m[:, None] * self.gravity
        torque = tc + self.ext_torque

        before = self.ctx.counters.snapshot()
        if ps.n:
            cells = self.coarse.locate_many(ps.x)
            u, rho, mu, eps = self.coarse_values_at(cells)
            if np.any(eps <= 0.0):
                raise RuntimeError("non-positive porosity at particle position")
            slip = u - ps.v
            smag = np.sqrt(np.einsum("ij,ij->i", slip, slip))
            beta = self.drag_law(smag, eps, rho, mu, 2.0 * ps.r)
            ps.uf = u
            ps.beta = beta
        self.drag_phase_traffic = TrafficCounters.delta(self.ctx.counters.snapshot(), before)

        ps.f_nd = f_nd
        ps.torque = torque
        dem.evaluate_accelerations(ps)
        if record_drag:
            self.last_drag = ps.beta[:, None] * (ps.uf - ps.v)
            self.last_drag_ids = ps.ids.copy()
            nown = len(self._owned_coarse)
            vals = np.zeros((nown, 3))
            if ps.n:
                cells = self.coarse.locate_many(ps.x)
                idx = self._owned_cell_index(cells)
                for c in range(3):
                    col = np.zeros(nown)
                    kernels.scatter_add(col, idx, np.ascontiguousarray(-self.last_drag[:, c]))
                    vals[:, c] = col
            self.reaction_density = vals / self.coarse.cell_volume

    # -- interpolation helpers --

    def _interp_sources(self, strategy=None):
        strategy = strategy or self.strategy
        interpolate(self.m_c2f, self.c_eps, InterpolationKind.CONSISTENT, strategy,
                    self.ctx, self.fluid.eps)
        np.clip(self.fluid.eps.interior, None, 1.0, out=self.fluid.eps.interior)
        self.fluid.refresh_eps(self.ctx)
        interpolate(self.m_c2f, self.c_b, InterpolationKind.CONSERVATIVE, strategy,
                    self.ctx, self._fine_b)
        interpolate(self.m_c2f, self.c_s, InterpolationKind.CONSERVATIVE, strategy,
                    self.ctx, self._fine_s)

    def _interp_f2c(self, strategy=None):
        strategy = strategy or self.strategy
        interpolate(self.m_f2c, self.fluid.u, InterpolationKind.CONSISTENT, strategy,
                    self.ctx, self.c_u)
        interpolate(self.m_f2c, self.fluid.p, InterpolationKind.CONSISTENT, strategy,
                    self.ctx, self.c_p)
        interpolate(self.m_f2c, self.fluid.rho, InterpolationKind.CONSISTENT, strategy,
                    self.ctx, self.c_rho)
        interpolate(self.m_f2c, self.fluid.mu, InterpolationKind.CONSISTENT, strategy,
                    self.ctx, self.c_mu)

    @property
    def _fine_b(self):
        if not hasattr(self, "_fine_b_field"):
            self._fine_b_field = GridField.zeros(self.fine, self.fmap, self.ctx.rank)
        return self._fine_b_field

    @property
    def _fine_s(self):
        if not hasattr(self, "_fine_s_field"):
            self._fine_s_field = GridField.zeros(self.fine, self.fmap, self.ctx.rank, components=3)
        return self._fine_s_field


def project_particles_to_coarse(world):
    """Per-cell porosity and semi-implicit momentum-source pair.

    Owned particles are assigned to the coarse cell containing their center
    (half-open boxes make face-sitters unambiguous); co-location guarantees
    every lookup is local, so this runs without any transport traffic.
    Porosity is floored at eps_floor with the flooring count recorded.
    """
    ps = world.particles
    grid = world.coarse
    vcell = grid.cell_volume
    nown = len(world._owned_coarse)

    solid = np.zeros(nown)
    bsum = np.zeros(nown)
    ssum = np.zeros((nown, 3))
    if ps.n:
        cells = grid.locate_many(ps.x)
        idx = world._owned_cell_index(cells)
        kernels.scatter_add(solid, idx, ps.volume())
        eps_raw = 1.0 - solid / vcell
        eps = np.maximum(eps_raw, world.eps_floor)
        world.floored_cells = int(np.count_nonzero(eps_raw < world.eps_floor))

        # drag coefficients against the current coarse-grid fluid solution
        u, rho, mu, _ = world.coarse_values_at(cells)
        eps_at_p = eps[idx]
        slip = u - ps.v
        smag = np.sqrt(np.einsum("ij,ij->i", slip, slip))
        beta = world.drag_law(smag, eps_at_p, rho, mu, 2.0 * ps.r)
        kernels.scatter_add(bsum, idx, beta)
        for c in range(3):
            col = np.zeros(nown)
            kernels.scatter_add(col, idx, np.ascontiguousarray(beta * ps.v[:, c]))
            ssum[:, c] = col
    else:
        eps = np.ones(nown)
        world.floored_cells = 0

    world.c_eps.set_owned_values(eps)
    world.c_b.set_owned_values(bsum / vcell)
    world.c_s.set_owned_values(ssum / vcell)
    return world.c_eps, world.c_b, world.c_s


def _dem_substeps(world, timer):
    sched = world.schedule
    dt = sched.dt_dem
    for sub in range(sched.n_sub):
        timer.run("dem", lambda: dem.kick_pre(world.particles, dt))
        timer.run("dem", lambda: dem.drift(world.particles, dt))
        timer.run("migration", world._exchange)
        timer.run("dem", lambda: world._eval_forces(record_drag=(sub == 0)))
        timer.run("dem", lambda: dem.kick_post(world.particles, dt))


def _fluid_steps(world, timer, sources):
    sched = world.schedule
    for _ in range(sched.n_cfd):
        def one():
            world.fluid.refresh_mixture(world.ctx)
            cfd.momentum_step(world.fluid, world.gravity, sched.dt_cfd, world.ctx,
                              sources=sources)
            cfd.pressure_projection(world.fluid, sched.dt_cfd, world.ctx,
                                    tol=world.cg_tol, max_iters=world.cg_max_iters)
            cfd.advect_alpha(world.fluid, sched.dt_cfd, world.ctx, c_alpha=world.c_alpha)
        timer.run("cfd", one)


def multiscale_step(world):
    """One coupled step of the dual-grid scheme; returns the phase report."""
    timer = _PhaseTimer(world.ctx)
    timer.run("projection", world._project)

    def c2f():
        world._interp_sources()
        eps_new = world.fluid.eps.owned_values()
        dedt = (eps_new - world._eps_prev) / world.schedule.dt_coupling
        world.fluid.dedt[...] = dedt.reshape(world.fluid.dedt.shape)
        world._eps_prev = eps_new
    timer.run("interp_c2f", c2f)

    sources = (world._fine_b.interior.copy(), world._fine_s.interior.copy())
    _fluid_steps(world, timer, sources)

    timer.run("interp_f2c", world._interp_f2c)
    _dem_substeps(world, timer)

    def reaction():
        reac = GridField.zeros(world.coarse, world.cmap, world.ctx.rank, components=3)
        reac.set_owned_values(world.reaction_density)
        interpolate(world.m_c2f, reac, InterpolationKind.CONSERVATIVE, world.strategy,
                    world.ctx, world.fpi_fine)
    timer.run("reaction_map", reaction)

    world.ctx.barrier()
    world.step_index += 1
    world.time = world.step_index * world.schedule.dt_coupling
    return timer


def monoscale_step(world):
    """Same physics on a single co-located grid; no grid-to-grid exchange."""
    timer = _PhaseTimer(world.ctx)

    def project():
        world._project()
        eps_new = world.fluid.eps.owned_values()
        dedt = (eps_new - world._eps_prev) / world.schedule.dt_coupling
        world.fluid.dedt[...] = dedt.reshape(world.fluid.dedt.shape)
        world._eps_prev = eps_new
        world.fluid.refresh_eps(world.ctx)
    timer.run("projection", project)

    sources = (world.c_b.owned_values().reshape(world.fluid.dedt.shape),
               world.c_s.owned_values().reshape(world.fluid.dedt.shape + (3,)))
    _fluid_steps(world, timer, sources)
    _dem_substeps(world, timer)

    def reaction():
        world.fpi_fine.set_owned_values(world.reaction_density)
    timer.run("reaction_map", reaction)

    world.ctx.barrier()
    world.step_index += 1
    world.time = world.step_index * world.schedule.dt_coupling
    return timer
