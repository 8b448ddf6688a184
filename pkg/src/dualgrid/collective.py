"""Canonical collective operations built on the transport layer.

Parallel-equals-sequential (bitwise) requires every global reduction to be
computed in an order that does not depend on the partitioning.  The helpers
here therefore assemble per-cell (or per-particle) values into one array in
global index order at rank 0, reduce that single array there, and broadcast
the result, so any rank count reduces exactly the same float sequence.
"""

import struct

import numpy as np

from .transport import decode_f8, decode_i8, encode_f8, encode_i8

__all__ = [
    "assemble_field",
    "assemble_cellwise",
    "global_cell_sum",
    "global_max",
    "global_all",
    "broadcast_floats",
    "gather_by_key",
]


def _field_payload(field):
    return encode_f8(field.owned_values())


def assemble_field(ctx, field):
    """Gather a distributed field; root returns the (ncells[, C]) global array."""
    payloads = ctx.gather_to_root(_field_payload(field))
    if payloads is None:
        return None
    grid = field.grid
    part = field.partition
    comp = field.components
    shape = (grid.ncells, comp) if comp > 1 else (grid.ncells,)
    out = np.zeros(shape)
    for rank, buf in enumerate(payloads):
        vals = decode_f8(buf)
        cells = part.owned_cells(rank)
        if comp > 1:
            out[cells] = vals.reshape(-1, comp)
        else:
            out[cells] = vals
    return out


def assemble_cellwise(ctx, partition, local_values):
    """Gather per-owned-cell values (global order per rank) to a full vector."""
    payloads = ctx.gather_to_root(encode_f8(local_values))
    if payloads is None:
        return None
    out = np.zeros(partition.grid.ncells)
    for rank, buf in enumerate(payloads):
        out[partition.owned_cells(rank)] = decode_f8(buf)
    return out


def broadcast_floats(ctx, values):
    """Root broadcasts a small float vector; every rank returns it."""
    if ctx.rank == 0:
        buf = encode_f8(np.asarray(values, dtype=np.float64))
        ctx.scatter_from_root([buf] * ctx.world_size)
        return decode_f8(buf)
    return decode_f8(ctx.scatter_from_root())


def global_cell_sum(ctx, partition, local_values):
    """Partition-independent sum of one value per cell; same float everywhere.

    Values are assembled in global cell order at root and reduced with a
    single np.sum there, so the result is bitwise identical for any rank
    count, assuming the per-cell values themselves are.
    """
    full = assemble_cellwise(ctx, partition, local_values)
    s = float(np.sum(full)) if full is not None else 0.0
    return float(broadcast_floats(ctx, [s])[0])


def global_max(ctx, local_value):
    payloads = ctx.gather_to_root(struct.pack("<d", float(local_value)))
    if payloads is not None:
        m = max(struct.unpack("<d", p)[0] for p in payloads)
    else:
        m = 0.0
    return float(broadcast_floats(ctx, [m])[0])


def global_all(ctx, local_flag):
    payloads = ctx.gather_to_root(struct.pack("<b", 1 if local_flag else 0))
    if payloads is not None:
        flag = all(struct.unpack("<b", p)[0] for p in payloads)
    else:
        flag = False
    return bool(broadcast_floats(ctx, [1.0 if flag else 0.0])[0])


def gather_by_key(ctx, keys, values):
    """Gather (key, row) pairs from all ranks; root returns them key-sorted.

    ``keys`` is int64 (n,), ``values`` float64 (n, m).  Used for particle
    reductions: sorting by the global particle id makes the concatenation
    order independent of ownership.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    m = values.shape[1]
    header = struct.pack("<qq", len(keys), m)
    payload = header + encode_i8(np.asarray(keys, dtype=np.int64)) + encode_f8(values)
    payloads = ctx.gather_to_root(payload)
    if payloads is None:
        return None, None
    all_keys = []
    all_vals = []
    for buf in payloads:
        n, mm = struct.unpack("<qq", buf[:16])
        ks = decode_i8(buf[16:16 + 8 * n])
        vs = decode_f8(buf[16 + 8 * n:]).reshape(n, mm)
        all_keys.append(ks)
        all_vals.append(vs)
    keys_cat = np.concatenate(all_keys)
    vals_cat = np.concatenate(all_vals)
    order = np.argsort(keys_cat, kind="stable")
    return keys_cat[order], vals_cat[order]
