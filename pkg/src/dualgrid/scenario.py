"""Scenario files: versioned JSON descriptions of a complete run.

A scenario pins the grids, partitioning choices, fluid and particle
parameters, boundary conditions, schedule and outputs.  Everything a run
needs is in the file, so desk-scale substitutions (smaller grids, fewer
particles) are plain data, never code.  Validation errors name the
offending field.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cfd import BCFace, BoundaryConditions, FluidProps
from .coupling import CouplingSchedule
from .dem import ContactParams, ParticleSet, make_drag_law
from .errors import ScenarioError
from .mesh import UniformGrid
from .partition import LoadWeights, particle_histogram

__all__ = ["Scenario", "load_scenario", "scenario_hash"]

SCHEMA_VERSION = 1


def _get(d, path, default=None, required=False):
    cur = d
    parts = path.split(".")
    for i, key in enumerate(parts):
        if not isinstance(cur, dict) or key not in cur:
            if required:
                raise ScenarioError(f"missing required field '{path}'")
            return default
        cur = cur[key]
    return cur


def _vec3(d, path, default=None, required=False):
    v = _get(d, path, default=default, required=required)
    if v is None:
        return None
    v = list(v)
    if len(v) != 3:
        raise ScenarioError(f"field '{path}' must be a 3-vector")
    return np.asarray(v, dtype=np.float64)


def _positive(value, path):
    if not value > 0:
        raise ScenarioError(f"field '{path}' must be positive, got {value}")
    return value


def _grid(d, path):
    spec = _get(d, path, required=True)
    origin = _vec3(spec, "origin", default=[0.0, 0.0, 0.0])
    spacing = spec.get("spacing")
    dims = spec.get("dims")
    if dims is None:
        raise ScenarioError(f"missing required field '{path}.dims'")
    dims = [int(v) for v in dims]
    if spacing is None:
        size = _vec3(spec, "size", required=True)
        spacing = [s / n for s, n in zip(size, dims)]
    try:
        return UniformGrid(origin, spacing, dims)
    except ValueError as exc:
        raise ScenarioError(f"invalid grid at '{path}': {exc}") from exc


def _alpha_init(spec):
    if spec is None:
        return 1.0
    kind = spec.get("type", "uniform")
    if kind == "uniform":
        return float(spec.get("value", 1.0))
    if kind == "box":
        lo = _vec3(spec, "lo", required=True)
        hi = _vec3(spec, "hi", required=True)
        inside = float(spec.get("inside", 1.0))
        outside = float(spec.get("outside", 0.0))

        def fn(centers):
            within = np.all((centers >= lo) & (centers < hi), axis=1)
            return np.where(within, inside, outside)
        return fn
    raise ScenarioError(f"unknown fluid.init_alpha.type {kind!r}")


def _lattice(spec, next_id=0):
    lo = _vec3(spec, "lo", required=True)
    hi = _vec3(spec, "hi", required=True)
    radius = _positive(float(_get(spec, "radius", required=True)), "particles.source.radius")
    density = _positive(float(_get(spec, "density", required=True)), "particles.source.density")
    factor = float(spec.get("spacing_factor", 1.05))
    pitch = 2.0 * radius * factor
    velocity = _vec3(spec, "velocity", default=[0.0, 0.0, 0.0])
    jitter = float(spec.get("jitter", 0.0))
    seed = int(spec.get("seed", 0))

    counts = np.maximum(((hi - lo) / pitch).astype(np.int64), 0)
    axes = [lo[ax] + pitch * (np.arange(counts[ax]) + 0.5) for ax in range(3)]
    if min(counts) == 0:
        return ParticleSet.empty()
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    pos = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        pos = pos + rng.uniform(-jitter, jitter, size=pos.shape) * pitch
    n = len(pos)
    ids = np.arange(next_id, next_id + n, dtype=np.int64)
    return ParticleSet(ids, pos, np.tile(velocity, (n, 1)), np.zeros((n, 3)),
                       np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                       np.full(n, radius), np.full(n, density))


def _particles_from_file(spec):
    from .fieldio import load_particles
    return load_particles(_get(spec, "path", required=True))


def _single(spec):
    x = _vec3(spec, "x", required=True)
    v = _vec3(spec, "velocity", default=[0.0, 0.0, 0.0])
    radius = _positive(float(_get(spec, "radius", required=True)), "particles.source.radius")
    density = _positive(float(_get(spec, "density", required=True)), "particles.source.density")
    return ParticleSet(np.array([0], dtype=np.int64), x[None, :], v[None, :],
                       np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0, 0.0]]),
                       np.array([radius]), np.array([density]))


@dataclass
class Scenario:
    """Validated, fully-built run description (replicated on every rank)."""

    raw: dict
    name: str
    mode: str
    strategy: str
    coarse_grid: UniformGrid
    fine_grid: UniformGrid
    fine_weights: str
    fine_weight_values: LoadWeights
    invert_fine_ranks: bool
    fluid_props: FluidProps
    bc: BoundaryConditions
    gravity: np.ndarray
    init_u: np.ndarray
    init_alpha: object
    particles: ParticleSet
    contact: ContactParams
    drag_law: object
    walls: list
    out_of_domain: str
    ext_torque: np.ndarray
    schedule: CouplingSchedule
    end_time: float
    cg_tol: float
    cg_max_iters: int
    c_alpha: float
    eps_floor: float
    output: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return max(1, int(round(self.end_time / self.schedule.dt_coupling)))


def load_scenario(path):
    with open(path) as fh:
        raw = json.load(fh)
    return build_scenario(raw)


def build_scenario(raw):
    if raw.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"field 'schema' must be {SCHEMA_VERSION}")
    name = _get(raw, "name", required=True)
    mode = _get(raw, "mode", default="multiscale")
    if mode not in ("multiscale", "monoscale"):
        raise ScenarioError(f"field 'mode' must be multiscale|monoscale, got {mode!r}")
    strategy = _get(raw, "strategy", default="distributed")
    if strategy not in ("distributed", "gather-scatter"):
        raise ScenarioError(
            f"field 'strategy' must be distributed|gather-scatter, got {strategy!r}")

    grids = _get(raw, "grids", required=True)
    if mode == "monoscale":
        if "single" not in grids:
            raise ScenarioError("monoscale runs need field 'grids.single'")
        coarse = _grid(raw, "grids.single")
        fine = coarse
    else:
        coarse = _grid(raw, "grids.coarse")
        fine = _grid(raw, "grids.fine")
        if not (np.allclose(coarse.origin, fine.origin)
                and np.allclose(coarse.domain_hi, fine.domain_hi)):
            raise ScenarioError("grids.coarse and grids.fine must span the same domain")

    fw = _get(raw, "fine_partition.weights", default="uniform")
    if fw not in ("uniform", "particle-histogram"):
        raise ScenarioError(
            f"field 'fine_partition.weights' must be uniform|particle-histogram, got {fw!r}")
    invert = bool(_get(raw, "fine_partition.invert_ranks", default=False))

    fl = _get(raw, "fluid", required=True)
    props = FluidProps(
        rho1=_positive(float(_get(raw, "fluid.rho1", required=True)), "fluid.rho1"),
        mu1=_positive(float(_get(raw, "fluid.mu1", required=True)), "fluid.mu1"),
        rho2=_positive(float(_get(raw, "fluid.rho2", required=True)), "fluid.rho2"),
        mu2=_positive(float(_get(raw, "fluid.mu2", required=True)), "fluid.mu2"),
        surface_tension=float(_get(fl, "surface_tension", default=0.0)),
    )
    gravity = _vec3(fl, "gravity", default=[0.0, 0.0, 0.0])
    init_u = _vec3(fl, "init_u", default=[0.0, 0.0, 0.0])
    init_alpha = _alpha_init(_get(fl, "init_alpha"))

    bc_spec = _get(raw, "bc", required=True)
    faces = {}
    for face_name in ("x-", "x+", "y-", "y+", "z-", "z+"):
        fs = bc_spec.get(face_name)
        if fs is None:
            raise ScenarioError(f"missing required field 'bc.{face_name}'")
        kind = fs.get("type")
        if kind == "inlet":
            faces[face_name] = BCFace("inlet", u=_vec3(fs, "u", required=True),
                                      alpha=float(fs.get("alpha", 1.0)))
        elif kind in ("outlet", "wall", "slip"):
            faces[face_name] = BCFace(kind)
        else:
            raise ScenarioError(f"field 'bc.{face_name}.type' must be "
                                f"inlet|outlet|wall|slip, got {kind!r}")
    bc = BoundaryConditions(faces)

    ps = _get(raw, "particles", default={"source": {"type": "none"}})
    src = _get(ps, "source", default={"type": "none"})
    kind = src.get("type", "none")
    if kind == "none":
        particles = ParticleSet.empty()
    elif kind == "lattice":
        particles = _lattice(src)
    elif kind == "single":
        particles = _single(src)
    elif kind == "file":
        particles = _particles_from_file(src)
    else:
        raise ScenarioError(f"field 'particles.source.type' must be "
                            f"none|single|lattice|file, got {kind!r}")

    cs = _get(ps, "contact", default={"k": 1000.0, "e": 0.9, "mu": 0.3})
    contact = ContactParams(k=float(cs.get("k", 1000.0)), e=float(cs.get("e", 0.9)),
                            mu=float(cs.get("mu", 0.3)))
    ds = _get(ps, "drag", default={"correlation": "difelice"})
    drag_law = make_drag_law(ds.get("correlation", "difelice"), beta=ds.get("beta"))
    walls = list(_get(ps, "walls", default=[]))
    for w in walls:
        if w not in ("x-", "x+", "y-", "y+", "z-", "z+"):
            raise ScenarioError(f"field 'particles.walls' has unknown face {w!r}")
    policy = _get(ps, "out_of_domain", default="error")
    if policy not in ("error", "delete", "reflect"):
        raise ScenarioError(
            f"field 'particles.out_of_domain' must be error|delete|reflect, got {policy!r}")
    ext_torque = _vec3(ps, "ext_torque", default=[0.0, 0.0, 0.0])

    if particles.n:
        if 2.0 * float(particles.r.max()) > float(coarse.spacing.min()):
            raise ScenarioError(
                "particles.source.radius too large: particle diameter must not exceed "
                f"the minimum coarse cell spacing {coarse.spacing.min():.4g}")

    tm = _get(raw, "time", required=True)
    schedule = CouplingSchedule(
        dt_cfd=_positive(float(_get(raw, "time.dt_cfd", required=True)), "time.dt_cfd"),
        n_sub=int(tm.get("n_sub", 10)),
        n_cfd=int(tm.get("n_cfd", 1)),
    )
    end_time = _positive(float(_get(raw, "time.end", required=True)), "time.end")

    sv = _get(raw, "solver", default={})
    cg_tol = float(sv.get("cg_tol", 1e-8))
    cg_max_iters = int(sv.get("cg_max_iters", 2000))
    c_alpha = float(sv.get("c_alpha", 1.0))
    eps_floor = float(sv.get("eps_floor", 0.05))

    weights = LoadWeights.uniform(fine)
    if fw == "particle-histogram":
        if particles.n == 0:
            raise ScenarioError(
                "fine_partition.weights=particle-histogram needs particles")
        weights = particle_histogram(fine, particles.x)
        # keep weights positive so empty regions still get cells
        weights = LoadWeights(weights.per_cell + 1e-3)

    return Scenario(
        raw=raw, name=name, mode=mode, strategy=strategy,
        coarse_grid=coarse, fine_grid=fine,
        fine_weights=fw, fine_weight_values=weights, invert_fine_ranks=invert,
        fluid_props=props, bc=bc, gravity=gravity, init_u=init_u,
        init_alpha=init_alpha, particles=particles, contact=contact,
        drag_law=drag_law, walls=walls, out_of_domain=policy,
        ext_torque=ext_torque, schedule=schedule, end_time=end_time,
        cg_tol=cg_tol, cg_max_iters=cg_max_iters, c_alpha=c_alpha,
        eps_floor=eps_floor, output=_get(raw, "output", default={}),
    )


def scenario_hash(raw, steps=None):
    """Stable digest of the effective scenario (plus the step count).

    The exchange strategy is excluded: it changes traffic patterns but is
    contractually result-identical, so runs with different strategies remain
    comparable.
    """
    doc = dict(raw)
    doc.pop("strategy", None)
    if steps is not None:
        doc["_effective_steps"] = int(steps)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
