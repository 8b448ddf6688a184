"""Rank-ownership maps for structured grids.

Two partitioners are provided.  ``colocate_partition`` produces the single
map shared verbatim by the particle domain and the coarse grid, which makes
every particle/fluid exchange process-local by construction.  The fine flow
grid is partitioned independently with ``rcb_partition`` (recursive
coordinate bisection), which may place any weight distribution in balance at
the price of grid-to-grid communication.

Both partitioners are deterministic: every rank computes the same map from
the same inputs, after which maps are treated as immutable shared data.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .mesh import build_halo_plan

__all__ = [
    "PartitionMap",
    "LoadWeights",
    "colocate_partition",
    "rcb_partition",
    "imbalance_factor",
    "particle_histogram",
]


@dataclass
class LoadWeights:
    """Non-negative per-cell load, e.g. particle counts or all-ones."""

    per_cell: np.ndarray

    def __post_init__(self):
        self.per_cell = np.asarray(self.per_cell, dtype=np.float64)
        if np.any(self.per_cell < 0):
            raise ConfigurationError("load weights must be non-negative")
        if not np.any(self.per_cell > 0):
            raise ConfigurationError("load weights must not be all zero")

    @classmethod
    def uniform(cls, grid):
        return cls(np.ones(grid.ncells))


class PartitionMap:
    """Cell -> rank ownership for one grid.

    Maps produced by the built-in partitioners carry the per-rank boxes
    (index ranges), which the halo machinery requires.  Arbitrary owner
    arrays (``from_owner``) are supported for communication-structure work
    but cannot be used for halo exchange.
    """

    def __init__(self, grid, owner, rank_count, boxes=None):
        self.grid = grid
        self.owner = np.asarray(owner, dtype=np.int64)
        self.rank_count = int(rank_count)
        self.boxes = boxes
        self._halo_plans = {}
        if self.owner.shape != (grid.ncells,):
            raise ConfigurationError("owner array length must equal the cell count")
        if self.owner.min() < 0 or self.owner.max() >= rank_count:
            raise ConfigurationError("owner ranks must lie in [0, rank_count)")

    @classmethod
    def from_boxes(cls, grid, boxes):
        owner = np.full(grid.ncells, -1, dtype=np.int64)
        dims = grid.dims
        for rank, (lo, hi) in enumerate(boxes):
            ii, jj, kk = np.meshgrid(
                np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]), np.arange(lo[2], hi[2]),
                indexing="ij",
            )
            lin = (ii.ravel() * dims[1] + jj.ravel()) * dims[2] + kk.ravel()
            owner[lin] = rank
        if np.any(owner < 0):
            raise ConfigurationError("boxes do not cover the grid")
        return cls(grid, owner, len(boxes), boxes=list(boxes))

    @classmethod
    def from_owner(cls, grid, owner, rank_count):
        return cls(grid, owner, rank_count, boxes=None)

    def box(self, rank):
        if self.boxes is None:
            raise ConfigurationError("this partition map has no box decomposition")
        return self.boxes[rank]

    def owned_cells(self, rank):
        """Linear ids of the cells owned by ``rank``, ascending."""
        if self.boxes is not None:
            lo, hi = self.boxes[rank]
            dims = self.grid.dims
            ii, jj, kk = np.meshgrid(
                np.arange(lo[0], hi[0], dtype=np.int64),
                np.arange(lo[1], hi[1], dtype=np.int64),
                np.arange(lo[2], hi[2], dtype=np.int64),
                indexing="ij",
            )
            return ((ii.ravel() * dims[1] + jj.ravel()) * dims[2] + kk.ravel())
        return np.flatnonzero(self.owner == rank).astype(np.int64)

    def owned_count(self, rank):
        if self.boxes is not None:
            lo, hi = self.boxes[rank]
            return int(np.prod([h - l for l, h in zip(lo, hi)]))
        return int(np.count_nonzero(self.owner == rank))

    def halo_plan(self, rank):
        plan = self._halo_plans.get(rank)
        if plan is None:
            plan = build_halo_plan(self.grid, self, rank)
            self._halo_plans[rank] = plan
        return plan

    def validate(self):
        counts = np.bincount(self.owner, minlength=self.rank_count)
        if np.any(counts == 0):
            raise ConfigurationError("every rank must own at least one cell")
        return True


def _split_box(grid, weights, box, rank_lo, rank_hi, boxes):
    lo, hi = box
    nranks = rank_hi - rank_lo
    if nranks == 1:
        boxes[rank_lo] = (tuple(int(v) for v in lo), tuple(int(v) for v in hi))
        return

    half = nranks // 2
    w3 = weights.reshape(tuple(grid.dims))
    sub = w3[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    slabs = [sub.sum(axis=tuple(ax for ax in range(3) if ax != axis)) for axis in range(3)]

    # the "current box" is trimmed to the support of its load before picking
    # the longest axis; a mostly-empty box would otherwise keep splitting
    # along its empty direction
    extents = np.zeros(3)
    for axis in range(3):
        nz = np.flatnonzero(slabs[axis] > 0.0)
        if len(nz):
            extents[axis] = grid.spacing[axis] * (nz[-1] - nz[0] + 1)
    if not np.any(extents > 0.0):
        extents = grid.spacing * (np.asarray(hi) - np.asarray(lo))
    order = np.argsort(-extents, kind="stable")

    for axis in order:
        axis = int(axis)
        n = int(hi[axis] - lo[axis])
        if n < 2:
            continue
        cross = 1
        for ax in range(3):
            if ax != axis:
                cross *= int(hi[ax] - lo[ax])
        s_min = -(-half // cross)            # ceil(half / cross)
        s_max = n - s_min
        if s_min > s_max:
            continue

        slab_w = slabs[axis]
        total = slab_w.sum()
        if total <= 0.0:
            # empty sub-box: bisect by cell count instead
            slab_w = np.ones(n)
            total = float(n)
        prefix = np.cumsum(slab_w)
        target = 0.5 * total
        # weighted median: the feasible plane closest to half the load,
        # ties toward the lower cell index
        cand = np.arange(s_min, min(s_max, n - 1) + 1)
        s = int(cand[np.argmin(np.abs(prefix[cand - 1] - target))])

        mid_lo = list(lo)
        mid_hi = list(hi)
        mid_hi[axis] = lo[axis] + s
        mid_lo[axis] = lo[axis] + s
        _split_box(grid, weights, (tuple(lo), tuple(mid_hi)), rank_lo, rank_lo + half, boxes)
        _split_box(grid, weights, (tuple(mid_lo), tuple(hi)), rank_lo + half, rank_hi, boxes)
        return

    raise ConfigurationError(
        f"cannot bisect box {box} for {nranks} ranks: too few cells along every axis"
    )


def rcb_partition(grid, weights, rank_count):
    """Recursive coordinate bisection of ``grid`` balancing ``weights``.

    At each level the box is split along its longest physical axis at the
    weighted median of the per-slab loads (ties toward the lower cell
    index), and each half receives half of the ranks.  ``rank_count`` must
    be a power of two.
    """
    if rank_count < 1 or (rank_count & (rank_count - 1)) != 0:
        raise ConfigurationError(
            f"rcb_partition requires a power-of-two rank count, got {rank_count}"
        )
    if rank_count > grid.ncells:
        raise ConfigurationError(
            f"rank count {rank_count} exceeds cell count {grid.ncells}"
        )
    if weights.per_cell.shape != (grid.ncells,):
        raise ConfigurationError("weights length must equal the cell count")
    boxes = [None] * rank_count
    full = ((0, 0, 0), tuple(int(d) for d in grid.dims))
    _split_box(grid, weights.per_cell, full, 0, rank_count, boxes)
    return PartitionMap.from_boxes(grid, boxes)


def colocate_partition(coarse, rank_count):
    """Uniform box decomposition shared by the DEM and coarse-grid domains.

    The particle decomposition cells are identified with the coarse-grid
    cells outright, so the co-location constraint is structural: there is
    one map, used for both.  Power-of-two rank counts use uniform-weight
    bisection boxes; other counts fall back to near-even slabs along the
    axis with the most cells.
    """
    if rank_count < 1:
        raise ConfigurationError("rank count must be positive")
    if rank_count > coarse.ncells:
        raise ConfigurationError(
            f"rank count {rank_count} exceeds cell count {coarse.ncells}"
        )
    if rank_count & (rank_count - 1) == 0:
        return rcb_partition(coarse, LoadWeights.uniform(coarse), rank_count)

    axis = int(np.argmax(coarse.dims))
    n = int(coarse.dims[axis])
    if n < rank_count:
        raise ConfigurationError(
            f"slab decomposition needs at least {rank_count} cells along axis {axis}, got {n}"
        )
    cuts = [int(np.floor(i * n / rank_count)) for i in range(rank_count + 1)]
    boxes = []
    for r in range(rank_count):
        lo = [0, 0, 0]
        hi = [int(d) for d in coarse.dims]
        lo[axis] = cuts[r]
        hi[axis] = cuts[r + 1]
        boxes.append((tuple(lo), tuple(hi)))
    return PartitionMap.from_boxes(coarse, boxes)


def imbalance_factor(pmap, weights):
    """max over ranks of owned weight, divided by the mean owned weight."""
    if weights.per_cell.shape != (pmap.grid.ncells,):
        raise ConfigurationError("weights length must equal the cell count")
    per_rank = np.bincount(pmap.owner, weights=weights.per_cell, minlength=pmap.rank_count)
    total = per_rank.sum()
    if total <= 0.0:
        raise ConfigurationError("total weight is zero")
    return float(per_rank.max() / (total / pmap.rank_count))


def invert_ranks(pmap):
    """Relabel ranks r -> P-1-r; used to stage worst-case non-overlap."""
    owner = pmap.rank_count - 1 - pmap.owner
    boxes = list(reversed(pmap.boxes)) if pmap.boxes is not None else None
    return PartitionMap(pmap.grid, owner, pmap.rank_count, boxes=boxes)


def particle_histogram(grid, positions):
    """Per-cell particle counts as LoadWeights; outside points are an error."""
    cells = grid.locate_many(positions)
    if np.any(cells < 0):
        raise ConfigurationError("particle positions outside the grid")
    return LoadWeights(np.bincount(cells, minlength=grid.ncells).astype(np.float64))
