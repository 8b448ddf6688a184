"""Field snapshots and particle state files.

Field snapshots are flat little-endian float64 arrays behind a fixed binary
header (dims, spacing, origin, components, time); a CSV index written next
to them maps field name and step to the file.  Particle states use a plain
text table (one particle per line) with full round-trip precision, the same
format accepted for initial conditions.
"""

import struct

import numpy as np

from .dem import ParticleSet

__all__ = ["write_field", "read_field", "save_particles", "load_particles", "fmt"]

MAGIC = b"DGF1"
_HEADER = "<4sqq3q3d3dd"  # magic, version, components, dims, origin, spacing, time


def fmt(x):
    """Shortest round-trip decimal form of a float (bitwise reproducible)."""
    return repr(float(x))


def write_field(path, grid, values, time=0.0):
    """Write a full-grid cell array (ncells,) or (ncells, C) to ``path``."""
    values = np.asarray(values, dtype=np.float64)
    comps = 1 if values.ndim == 1 else values.shape[1]
    header = struct.pack(
        _HEADER, MAGIC, 1, comps,
        *[int(d) for d in grid.dims],
        *[float(v) for v in grid.origin],
        *[float(v) for v in grid.spacing],
        float(time),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field(path):
    """Read a snapshot; returns (meta dict, array (ncells[, C]))."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize(_HEADER))
        magic, version, comps, nx, ny, nz, ox, oy, oz, sx, sy, sz, t = struct.unpack(_HEADER, head)
        if magic != MAGIC:
            raise ValueError(f"{path} is not a field snapshot")
        payload = np.frombuffer(fh.read(), dtype="<f8")
    ncells = nx * ny * nz
    arr = payload.reshape(ncells, comps) if comps > 1 else payload
    meta = {"version": version, "components": comps, "dims": (nx, ny, nz),
            "origin": (ox, oy, oz), "spacing": (sx, sy, sz), "time": t}
    return meta, arr


PARTICLE_HEADER = "# id x y z ux uy uz r rho"


def save_particles(path, pset):
    """Write particles as text rows: id x y z ux uy uz r rho."""
    with open(path, "w") as fh:
        fh.write(PARTICLE_HEADER + "\n")
        for i in range(pset.n):
            cols = [str(int(pset.ids[i]))]
            cols += [fmt(v) for v in pset.x[i]]
            cols += [fmt(v) for v in pset.v[i]]
            cols += [fmt(pset.r[i]), fmt(pset.rho[i])]
            fh.write(" ".join(cols) + "\n")


def load_particles(path):
    ids, xs, vs, rs, rhos = [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ValueError(
                    f"particle file {path}: expected 9 columns (id x y z ux uy uz r rho), "
                    f"got {len(parts)}")
            ids.append(int(parts[0]))
            xs.append([float(v) for v in parts[1:4]])
            vs.append([float(v) for v in parts[4:7]])
            rs.append(float(parts[7]))
            rhos.append(float(parts[8]))
    n = len(ids)
    pset = ParticleSet(np.asarray(ids, dtype=np.int64), np.asarray(xs).reshape(n, 3),
                       np.asarray(vs).reshape(n, 3), np.zeros((n, 3)),
                       np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                       np.asarray(rs), np.asarray(rhos))
    pset.sort_by_id()
    return pset
