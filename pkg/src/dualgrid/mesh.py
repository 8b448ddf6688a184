"""Structured uniform grids, cell-centered fields, and cell-cell overlaps.

Two independent axis-aligned uniform grids (a coarse bulk-scale grid and a
fine flow grid) are the geometric backbone of the coupling.  Cells are
half-open boxes [low, high): a point on a shared face belongs to the upper
cell, which makes point location unambiguous.  Cell linear indices follow
C order over (i, j, k).
"""

from collections import namedtuple

import numpy as np

__all__ = [
    "UniformGrid",
    "GridField",
    "CellOverlap",
    "OverlapSet",
    "locate_cell",
    "compute_overlaps",
    "halo_exchange",
]

# overlap slivers thinner than this fraction of the receiver cell volume are
# floating-point face-touch artifacts and are dropped
OVERLAP_VOLUME_CUTOFF = 1e-12

TAG_HALO = 1000

CellOverlap = namedtuple("CellOverlap", ["sender_cell", "receiver_cell", "volume"])


class UniformGrid:
    """Axis-aligned uniform structured grid of hexahedral cells."""

    __slots__ = ("origin", "spacing", "dims")

    def __init__(self, origin, spacing, dims):
        self.origin = np.asarray(origin, dtype=np.float64).copy()
        self.spacing = np.asarray(spacing, dtype=np.float64).copy()
        self.dims = np.asarray(dims, dtype=np.int64).copy()
        if self.origin.shape != (3,) or self.spacing.shape != (3,) or self.dims.shape != (3,):
            raise ValueError("origin, spacing and dims must be 3-vectors")
        if not np.all(self.spacing > 0.0):
            raise ValueError(f"grid spacing must be strictly positive, got {self.spacing}")
        if not np.all(self.dims >= 1):
            raise ValueError(f"grid dims must be >= 1, got {self.dims}")

    @property
    def ncells(self):
        return int(np.prod(self.dims))

    @property
    def cell_volume(self):
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])

    @property
    def domain_hi(self):
        return self.origin + self.spacing * self.dims

    def linear_index(self, ijk):
        i, j, k = ijk
        return int((i * self.dims[1] + j) * self.dims[2] + k)

    def cell_ijk(self, lin):
        nz = int(self.dims[2])
        ny = int(self.dims[1])
        k = lin % nz
        j = (lin // nz) % ny
        i = lin // (nz * ny)
        return (int(i), int(j), int(k))

    def cell_low(self, ijk):
        return self.origin + self.spacing * np.asarray(ijk, dtype=np.float64)

    def cell_center(self, ijk):
        return self.origin + self.spacing * (np.asarray(ijk, dtype=np.float64) + 0.5)

    def cell_centers(self, lin):
        """Centers for an array of linear cell indices, shape (n, 3)."""
        lin = np.asarray(lin, dtype=np.int64)
        ijk = np.stack(np.unravel_index(lin, tuple(self.dims)), axis=-1)
        return self.origin + self.spacing * (ijk + 0.5)

    def axis_edges(self, axis):
        n = int(self.dims[axis])
        return self.origin[axis] + self.spacing[axis] * np.arange(n + 1, dtype=np.float64)

    def locate_many(self, points):
        """Linear cell index per point; -1 for points outside the grid."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = (pts - self.origin) / self.spacing
        ijk = np.floor(rel).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < self.dims), axis=1)
        lin = (ijk[:, 0] * self.dims[1] + ijk[:, 1]) * self.dims[2] + ijk[:, 2]
        return np.where(inside, lin, -1)

    def __repr__(self):
        return (
            f"UniformGrid(origin={self.origin.tolist()}, "
            f"spacing={self.spacing.tolist()}, dims={self.dims.tolist()})"
        )


def locate_cell(grid, point):
    """Cell (i, j, k) whose half-open box contains ``point``, else None."""
    lin = int(grid.locate_many(np.asarray(point, dtype=np.float64)[None, :])[0])
    if lin < 0:
        return None
    return grid.cell_ijk(lin)


class OverlapSet:
    """All positive-volume cell intersections between two grids.

    Stored as parallel arrays (sender linear id, receiver linear id, volume),
    sorted by (receiver, sender).  Iterating yields CellOverlap tuples.
    """

    __slots__ = ("sender_grid", "receiver_grid", "sender", "receiver", "volume")

    def __init__(self, sender_grid, receiver_grid, sender, receiver, volume):
        self.sender_grid = sender_grid
        self.receiver_grid = receiver_grid
        self.sender = sender
        self.receiver = receiver
        self.volume = volume

    def __len__(self):
        return int(self.sender.shape[0])

    def __iter__(self):
        for s, r, v in zip(self.sender, self.receiver, self.volume):
            yield CellOverlap(int(s), int(r), float(v))

    def received_volume(self):
        """Total overlap volume per receiver cell (dense, length ncells)."""
        out = np.zeros(self.receiver_grid.ncells)
        np.add.at(out, self.receiver, self.volume)
        return out


def _axis_interval_overlaps(o_s, h_s, n_s, o_r, h_r, n_r):
    """1-D interval intersections between two uniform subdivisions.

    Returns (sender index, receiver index, overlap length) arrays covering
    every pair with nonnegative formal overlap; zero/negative lengths are
    kept here and filtered after the 3-D volume is assembled.
    """
    r_lo = o_r + h_r * np.arange(n_r, dtype=np.float64)
    r_hi = r_lo + h_r
    first = np.floor((r_lo - o_s) / h_s).astype(np.int64)
    last = np.floor((r_hi - o_s) / h_s).astype(np.int64)
    first = np.clip(first, 0, n_s - 1)
    last = np.clip(last, 0, n_s - 1)
    counts = np.maximum(last - first + 1, 0)
    r_idx = np.repeat(np.arange(n_r, dtype=np.int64), counts)
    offs = np.concatenate([np.arange(c, dtype=np.int64) for c in counts]) if len(counts) else np.empty(0, np.int64)
    s_idx = np.repeat(first, counts) + offs
    s_lo = o_s + h_s * s_idx
    s_hi = s_lo + h_s
    lo = np.maximum(s_lo, r_lo[r_idx])
    hi = np.minimum(s_hi, r_hi[r_idx])
    return s_idx, r_idx, hi - lo


def compute_overlaps(sender, receiver):
    """Enumerate every sender/receiver cell pair with positive intersection.

    Volumes are products of per-axis interval intersections; pairs whose
    volume falls below OVERLAP_VOLUME_CUTOFF times the receiver cell volume
    (face-touching artifacts) are discarded.  Disjoint grids give an empty
    set.
    """
    per_axis = []
    for ax in range(3):
        sx, rx, lx = _axis_interval_overlaps(
            sender.origin[ax], sender.spacing[ax], int(sender.dims[ax]),
            receiver.origin[ax], receiver.spacing[ax], int(receiver.dims[ax]),
        )
        per_axis.append((sx, rx, lx))

    (sx, rxi, lx), (sy, ryi, ly), (sz, rzi, lz) = per_axis
    ax_i, ax_j, ax_k = np.meshgrid(
        np.arange(len(sx)), np.arange(len(sy)), np.arange(len(sz)), indexing="ij"
    )
    ax_i = ax_i.ravel()
    ax_j = ax_j.ravel()
    ax_k = ax_k.ravel()

    vol = (lx[ax_i] * ly[ax_j]) * lz[ax_k]
    keep = vol > OVERLAP_VOLUME_CUTOFF * receiver.cell_volume
    ax_i, ax_j, ax_k, vol = ax_i[keep], ax_j[keep], ax_k[keep], vol[keep]

    s_lin = (sx[ax_i] * sender.dims[1] + sy[ax_j]) * sender.dims[2] + sz[ax_k]
    r_lin = (rxi[ax_i] * receiver.dims[1] + ryi[ax_j]) * receiver.dims[2] + rzi[ax_k]

    order = np.lexsort((s_lin, r_lin))
    return OverlapSet(sender, receiver, s_lin[order], r_lin[order], vol[order])


class GridField:
    """Cell-centered field on one rank's box of a partitioned grid.

    Data is a local 3-D array with a one-cell pad ring; the pad holds halo
    copies of neighbor-owned cells (filled by ``halo_exchange``) or physical
    boundary ghosts (filled by the flow solver's boundary conditions).  Halo
    values are stale between exchanges and must be treated as read-only.
    """

    __slots__ = ("grid", "partition", "rank", "components", "lo", "hi", "data")

    def __init__(self, grid, partition, rank, components=1, data=None):
        self.grid = grid
        self.partition = partition
        self.rank = rank
        self.components = components
        lo, hi = partition.box(rank)
        self.lo = lo
        self.hi = hi
        shape = tuple(int(h - l) + 2 for l, h in zip(lo, hi))
        if components > 1:
            shape = shape + (components,)
        if data is None:
            data = np.zeros(shape)
        else:
            if data.shape != shape:
                raise ValueError(f"expected local shape {shape}, got {data.shape}")
        self.data = data

    @classmethod
    def zeros(cls, grid, partition, rank, components=1):
        return cls(grid, partition, rank, components)

    @classmethod
    def full(cls, grid, partition, rank, value, components=1):
        f = cls(grid, partition, rank, components)
        f.data[...] = value
        return f

    @property
    def interior(self):
        return self.data[1:-1, 1:-1, 1:-1]

    def owned_values(self):
        """Copy of owned cell values, flattened in global (ascending) order.

        The interior is a strided view, so this is a copy; write back with
        ``set_owned_values``.
        """
        if self.components > 1:
            return self.interior.reshape(-1, self.components)
        return self.interior.reshape(-1)

    def set_owned_values(self, values):
        """Write a flat owned-values array (as from owned_values) back."""
        self.interior[...] = np.asarray(values).reshape(self.interior.shape)

    def copy(self):
        return GridField(self.grid, self.partition, self.rank, self.components, self.data.copy())

    def box_shape(self):
        return tuple(int(h - l) for l, h in zip(self.lo, self.hi))

    def physical_pad_faces(self):
        """Pad faces lying on the global domain boundary, as (axis, side)."""
        faces = []
        for ax in range(3):
            if self.lo[ax] == 0:
                faces.append((ax, 0))
            if self.hi[ax] == int(self.grid.dims[ax]):
                faces.append((ax, 1))
        return faces


def _pad_flat_indices(lo, hi, cells_ijk):
    """Flat indices into the padded local array for global (i,j,k) cells."""
    shape = tuple(int(h - l) + 2 for l, h in zip(lo, hi))
    li = cells_ijk[:, 0] - lo[0] + 1
    lj = cells_ijk[:, 1] - lo[1] + 1
    lk = cells_ijk[:, 2] - lo[2] + 1
    return (li * shape[1] + lj) * shape[2] + lk


def _box_cells(lo, hi):
    """Global (i,j,k) triples of all cells in [lo, hi), C order."""
    ii, jj, kk = np.meshgrid(
        np.arange(lo[0], hi[0], dtype=np.int64),
        np.arange(lo[1], hi[1], dtype=np.int64),
        np.arange(lo[2], hi[2], dtype=np.int64),
        indexing="ij",
    )
    return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)


class HaloPlan:
    """Per-neighbor send/recv index lists for one rank's halo ring."""

    __slots__ = ("peers", "send_idx", "recv_idx")

    def __init__(self, peers, send_idx, recv_idx):
        self.peers = peers          # sorted neighbor rank ids
        self.send_idx = send_idx    # peer -> flat pad indices of owned cells to send
        self.recv_idx = recv_idx    # peer -> flat pad indices of halo slots to fill


def build_halo_plan(grid, partition, rank):
    dims = grid.dims
    lo, hi = partition.box(rank)

    exp_lo = np.maximum(np.asarray(lo) - 1, 0)
    exp_hi = np.minimum(np.asarray(hi) + 1, dims)
    ring = _box_cells(exp_lo, exp_hi)
    in_own = np.all((ring >= lo) & (ring < hi), axis=1)
    ring = ring[~in_own]

    send_idx = {}
    recv_idx = {}
    if len(ring):
        lin = (ring[:, 0] * dims[1] + ring[:, 1]) * dims[2] + ring[:, 2]
        owners = partition.owner[lin]
        for peer in np.unique(owners):
            peer = int(peer)
            cells = ring[owners == peer]
            recv_idx[peer] = _pad_flat_indices(lo, hi, cells)

    for peer in range(partition.rank_count):
        if peer == rank:
            continue
        plo, phi = partition.box(peer)
        slo = np.maximum(np.asarray(plo) - 1, np.asarray(lo))
        shi = np.minimum(np.asarray(phi) + 1, np.asarray(hi))
        if np.any(slo >= shi):
            continue
        cells = _box_cells(slo, shi)
        send_idx[peer] = _pad_flat_indices(lo, hi, cells)

    peers = sorted(set(send_idx) | set(recv_idx))
    return HaloPlan(peers, send_idx, recv_idx)


def halo_exchange(field, ctx):
    """Refresh the halo ring of ``field`` from the owning ranks.

    One message per neighbor pair and direction; owned cells are untouched.
    A single-rank run sends nothing.
    """
    plan = field.partition.halo_plan(field.rank)
    if not plan.peers:
        return field
    flat = field.data.reshape(-1, field.components) if field.components > 1 else field.data.reshape(-1)
    for peer in plan.peers:
        idx = plan.send_idx.get(peer)
        if idx is None:
            continue
        payload = np.ascontiguousarray(flat[idx], dtype="<f8").tobytes()
        ctx.send(peer, payload, TAG_HALO)
    for peer in plan.peers:
        idx = plan.recv_idx.get(peer)
        if idx is None:
            continue
        buf = np.frombuffer(ctx.receive(peer, TAG_HALO), dtype="<f8")
        if field.components > 1:
            flat[idx] = buf.reshape(-1, field.components)
        else:
            flat[idx] = buf
    return field
