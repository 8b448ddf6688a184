"""dualgrid: a desk-scale, rank-parallel dual-grid CFD-DEM coupling sandbox.

Particles live on a coarse bulk-scale grid whose partition they share (so
particle/fluid exchange is always process-local); the flow is solved on an
independently partitioned fine grid; the two grids talk through a static
sparse communication matrix with either gather-scatter or distributed
exchange.
"""

__version__ = "0.1.0"

from .mesh import CellOverlap, GridField, UniformGrid, compute_overlaps, halo_exchange, locate_cell
from .partition import LoadWeights, PartitionMap, colocate_partition, imbalance_factor, rcb_partition
from .transport import RankContext, TrafficCounters, run_ranks

__all__ = [
    "__version__",
    "UniformGrid",
    "GridField",
    "CellOverlap",
    "locate_cell",
    "compute_overlaps",
    "halo_exchange",
    "PartitionMap",
    "LoadWeights",
    "colocate_partition",
    "rcb_partition",
    "imbalance_factor",
    "RankContext",
    "TrafficCounters",
    "run_ranks",
]
