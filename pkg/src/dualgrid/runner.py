"""Run harness: launches rank contexts over a backend and writes outputs.

A run directory contains

* ``manifest.json``    scenario hash, world size, backend, strategy, totals
* ``diagnostics.csv``  per-step conservation numbers, reduced in canonical
                       order (bitwise identical for any rank count)
* ``metrics.csv``      per-step wall times and traffic counters per phase
                       (not meaningful to compare across runs)
* ``probes/``          per-particle time series (position, velocity,
                       acceleration, owning rank)
* ``series/``          scalar time series (kinetic energy)
* ``fields/``          binary field snapshots plus a CSV index
* ``particles_final.txt``  final particle state, reloadable as an initial
                       condition
"""

import csv
import json
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .collective import assemble_field, gather_by_key, global_cell_sum, global_max
from .coupling import World, monoscale_step, multiscale_step
from .cfd import divergence_residual
from .errors import ConfigurationError
from .fieldio import fmt, save_particles, write_field
from .scenario import Scenario, build_scenario, load_scenario, scenario_hash
from .transport import run_ranks

__all__ = ["run", "RunResult"]

DIAG_COLUMNS = [
    "step", "t", "particle_count", "solid_volume_coarse", "solid_volume_fine",
    "alpha_mass", "alpha_preclip_mass", "alpha_clipped_mass", "div_residual",
    "kinetic_energy", "momentum_x", "momentum_y", "momentum_z",
    "drag_sum_x", "drag_sum_y", "drag_sum_z",
    "fpi_integral_x", "fpi_integral_y", "fpi_integral_z",
]

PHASES = ["projection", "interp_c2f", "cfd", "interp_f2c", "dem", "migration",
          "reaction_map"]


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict


def _probe_payload(world, pid):
    ps = world.particles
    pos = np.searchsorted(ps.ids, pid)
    if pos < ps.n and ps.ids[pos] == pid:
        vals = np.concatenate([ps.x[pos], ps.v[pos], ps.accel[pos],
                               [float(world.ctx.rank)]])
        return struct.pack("<q", 1) + vals.astype("<f8").tobytes()
    return struct.pack("<q", 0)


def _collect_diagnostics(world, step):
    ctx = world.ctx
    vc = world.coarse.cell_volume
    vf = world.fine.cell_volume
    eps_c = world.c_eps.owned_values()
    solid_c = global_cell_sum(ctx, world.cmap, (1.0 - eps_c) * vc)
    eps_f = world.fluid.eps.owned_values()
    solid_f = global_cell_sum(ctx, world.fmap, (1.0 - eps_f) * vf)
    ea = (world.fluid.eps.interior * world.fluid.alpha.interior).reshape(-1) * vf
    alpha_mass = global_cell_sum(ctx, world.fmap, ea)
    if hasattr(world.fluid, "alpha_preclip_cellmass"):
        preclip = global_cell_sum(ctx, world.fmap,
                                  world.fluid.alpha_preclip_cellmass.reshape(-1))
        clip = global_cell_sum(ctx, world.fmap,
                               world.fluid.alpha_clip_cellmass.reshape(-1))
    else:
        preclip = alpha_mass
        clip = 0.0
    divres = global_max(ctx, divergence_residual(world.fluid))

    ps = world.particles
    rows = np.concatenate([ps.kinetic_energy()[:, None], ps.mass()[:, None] * ps.v],
                          axis=1) if ps.n else np.zeros((0, 4))
    keys, vals = gather_by_key(ctx, ps.ids, rows)
    dkeys, dvals = gather_by_key(ctx, world.last_drag_ids, world.last_drag)
    fpi = assemble_field(ctx, world.fpi_fine)

    if ctx.rank != 0:
        return None
    ke = float(np.sum(vals[:, 0])) if len(vals) else 0.0
    mom = np.sum(vals[:, 1:4], axis=0) if len(vals) else np.zeros(3)
    drag = np.sum(dvals, axis=0) if len(dvals) else np.zeros(3)
    fpi_int = np.sum(fpi, axis=0) * vf
    return {
        "step": step, "t": world.time, "particle_count": len(keys),
        "solid_volume_coarse": solid_c, "solid_volume_fine": solid_f,
        "alpha_mass": alpha_mass, "alpha_preclip_mass": preclip,
        "alpha_clipped_mass": clip, "div_residual": divres,
        "kinetic_energy": ke,
        "momentum_x": mom[0], "momentum_y": mom[1], "momentum_z": mom[2],
        "drag_sum_x": drag[0], "drag_sum_y": drag[1], "drag_sum_z": drag[2],
        "fpi_integral_x": fpi_int[0], "fpi_integral_y": fpi_int[1],
        "fpi_integral_z": fpi_int[2],
    }


def _collect_metrics(world, step, timer):
    ctx = world.ctx
    walls = [timer.wall.get(p, 0.0) for p in PHASES]
    traffic = []
    for p in PHASES:
        t = timer.traffic.get(p, (0, 0, 0, 0))
        traffic.extend([t[0], t[1]])
    local = struct.pack(
        "<%dd" % len(walls), *walls
    ) + struct.pack(
        "<%dq" % (len(traffic) + 7),
        *traffic,
        world.proj_phase_traffic[0], world.drag_phase_traffic[0],
        world.floored_cells,
        world.migration_stats.get("migrated_out", 0),
        world.particles.n,
        world.fluid.diagnostics.get("cg_iters", 0),
        int(kernels.BACKEND == "cy"),
    )
    payloads = ctx.gather_to_root(local)
    if payloads is None:
        return None
    nw = len(PHASES)
    wall_max = np.zeros(nw)
    traffic_sum = np.zeros(2 * nw, dtype=np.int64)
    proj_msgs = drag_msgs = floored = migrated = 0
    counts = []
    cg_iters = 0
    for buf in payloads:
        w = np.frombuffer(buf[:8 * nw], dtype="<f8")
        q = np.frombuffer(buf[8 * nw:], dtype="<i8")
        wall_max = np.maximum(wall_max, w)
        traffic_sum += q[:2 * nw]
        proj_msgs += int(q[2 * nw])
        drag_msgs += int(q[2 * nw + 1])
        floored += int(q[2 * nw + 2])
        migrated += int(q[2 * nw + 3])
        counts.append(int(q[2 * nw + 4]))
        cg_iters = int(q[2 * nw + 5])
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() > 0:
        imb = float(counts.max() / (counts.sum() / len(counts)))
    else:
        imb = 0.0
    row = {"step": step, "t": world.time}
    for i, p in enumerate(PHASES):
        row[f"wall_{p}"] = wall_max[i]
        row[f"msgs_{p}"] = int(traffic_sum[2 * i])
        row[f"bytes_{p}"] = int(traffic_sum[2 * i + 1])
    row["wall_total"] = float(wall_max.sum())
    row["projection_messages"] = proj_msgs
    row["drag_messages"] = drag_msgs
    row["floored_cells"] = floored
    row["migrated"] = migrated
    row["particle_imbalance"] = imb
    row["cg_iters"] = cg_iters
    return row


_SNAPSHOT_FIELDS = {
    "alpha": lambda w: (w.fine, w.fluid.alpha),
    "u": lambda w: (w.fine, w.fluid.u),
    "p": lambda w: (w.fine, w.fluid.p),
    "eps": lambda w: (w.fine, w.fluid.eps),
    "fpi": lambda w: (w.fine, w.fpi_fine),
    "eps_coarse": lambda w: (w.coarse, w.c_eps),
    "u_coarse": lambda w: (w.coarse, w.c_u),
}


def _snapshot(world, names, outdir, step, index_rows):
    for name in names:
        grid, field = _SNAPSHOT_FIELDS[name](world)
        arr = assemble_field(world.ctx, field)
        if world.ctx.rank == 0:
            fname = f"{name}_{step:06d}.bin"
            write_field(outdir / "fields" / fname, grid, arr, time=world.time)
            index_rows.append({"file": fname, "field": name, "step": step,
                               "time": fmt(world.time)})


def _rank_main(ctx, scen, outdir, n_steps, flags):
    outdir = Path(outdir)
    world = World(ctx, scen)
    step_fn = multiscale_step if scen.mode == "multiscale" else monoscale_step

    probe_ids = [int(v) for v in scen.output.get("probe_particles", [])]
    snap_every = int(scen.output.get("snapshot_every", 0))
    snap_fields = list(scen.output.get("snapshot_fields", ["alpha", "u", "p", "eps"]))
    for name in snap_fields:
        if name not in _SNAPSHOT_FIELDS:
            raise ConfigurationError(f"unknown snapshot field {name!r}")

    diag_rows = []
    metric_rows = []
    probe_rows = {pid: [] for pid in probe_ids}
    index_rows = []
    ke_rows = []

    row = _collect_diagnostics(world, 0)
    if row is not None:
        diag_rows.append(row)
        ke_rows.append({"step": 0, "t": 0.0, "kinetic_energy": row["kinetic_energy"]})
    for pid in probe_ids:
        payloads = ctx.gather_to_root(_probe_payload(world, pid))
        if payloads is not None:
            _append_probe(probe_rows[pid], payloads, 0, 0.0)

    for step in range(1, n_steps + 1):
        timer = step_fn(world)
        row = _collect_diagnostics(world, step)
        mrow = _collect_metrics(world, step, timer)
        if row is not None:
            diag_rows.append(row)
            ke_rows.append({"step": step, "t": world.time,
                            "kinetic_energy": row["kinetic_energy"]})
        if mrow is not None:
            metric_rows.append(mrow)
        for pid in probe_ids:
            payloads = ctx.gather_to_root(_probe_payload(world, pid))
            if payloads is not None:
                _append_probe(probe_rows[pid], payloads, step, world.time)
        if snap_every and step % snap_every == 0:
            _snapshot(world, snap_fields, outdir, step, index_rows)

    _snapshot(world, snap_fields, outdir, n_steps, index_rows)
    keys, vals = gather_by_key(ctx, world.particles.ids, world.particles.to_rows())

    if ctx.rank == 0:
        _write_csv(outdir / "diagnostics.csv", DIAG_COLUMNS, diag_rows)
        if metric_rows:
            _write_csv(outdir / "metrics.csv", list(metric_rows[0].keys()), metric_rows)
        _write_csv(outdir / "fields" / "index.csv",
                   ["file", "field", "step", "time"], index_rows)
        _write_csv(outdir / "series" / "kinetic_energy.csv",
                   ["step", "t", "kinetic_energy"], ke_rows)
        for pid in probe_ids:
            _write_csv(outdir / "probes" / f"particle_{pid}.csv",
                       ["step", "t", "x", "y", "z", "ux", "uy", "uz",
                        "ax", "ay", "az", "owner"], probe_rows[pid])
        from .dem import ParticleSet
        final = ParticleSet.from_rows(vals) if len(vals) else ParticleSet.empty()
        save_particles(outdir / "particles_final.txt", final)

    return {
        "rank": ctx.rank,
        "counters": ctx.counters.snapshot(),
        "matrix_builds": world.matrix_builds,
        "particles": world.particles.n,
    }


def _append_probe(rows, payloads, step, t):
    found = None
    for buf in payloads:
        flag = struct.unpack("<q", buf[:8])[0]
        if flag:
            found = np.frombuffer(buf[8:], dtype="<f8")
            break
    if found is None:
        return
    rows.append({
        "step": step, "t": fmt(t),
        "x": fmt(found[0]), "y": fmt(found[1]), "z": fmt(found[2]),
        "ux": fmt(found[3]), "uy": fmt(found[4]), "uz": fmt(found[5]),
        "ax": fmt(found[6]), "ay": fmt(found[7]), "az": fmt(found[8]),
        "owner": int(found[9]),
    })


def _write_csv(path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            out = {}
            for key in columns:
                val = row.get(key, "")
                if isinstance(val, float):
                    val = fmt(val)
                out[key] = val
            writer.writerow(out)


def run(scenario, *, ranks=1, backend="deterministic", strategy=None, mode=None,
        out_dir=None, steps=None, force=False, timeout=120.0):
    """Run a scenario and write the output directory; returns RunResult."""
    if isinstance(scenario, (str, Path)):
        with open(scenario) as fh:
            raw = json.load(fh)
    elif isinstance(scenario, dict):
        raw = dict(scenario)
    elif isinstance(scenario, Scenario):
        raw = dict(scenario.raw)
    else:
        raise ConfigurationError("scenario must be a path, dict, or Scenario")
    if strategy is not None:
        raw["strategy"] = strategy
    if mode is not None:
        raw["mode"] = mode
    scen = build_scenario(raw)
    n_steps = scen.n_steps if steps is None else int(steps)

    if out_dir is None:
        raise ConfigurationError("an output directory is required")
    outdir = Path(out_dir)
    if outdir.exists() and any(outdir.iterdir()):
        if not force:
            raise ConfigurationError(
                f"output directory {outdir} is not empty (use force to overwrite)")
        if not ((outdir / "manifest.json").exists() or (outdir / "fields").is_dir()):
            raise ConfigurationError(
                f"refusing to overwrite {outdir}: not a previous run directory")
        shutil.rmtree(outdir)
    for sub in ("fields", "probes", "series"):
        (outdir / sub).mkdir(parents=True, exist_ok=True)

    flags = {"backend": backend}
    summaries = run_ranks(ranks, _rank_main, scen, outdir, n_steps, flags,
                          backend=backend, timeout=timeout)

    manifest = {
        "schema": 1,
        "scenario_name": scen.name,
        "scenario_hash": scenario_hash(raw, steps=n_steps),
        "ranks": ranks,
        "backend": backend,
        "strategy": scen.strategy,
        "mode": scen.mode,
        "steps": n_steps,
        "final_time": n_steps * scen.schedule.dt_coupling,
        "package_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "matrix_builds": summaries[0]["matrix_builds"],
        "traffic": [list(s["counters"]) for s in summaries],
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return RunResult(outdir, manifest)
