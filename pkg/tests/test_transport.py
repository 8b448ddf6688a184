import struct

import numpy as np
import pytest

from dualgrid.transport import (RankFailure, TransportDeadlock, TransportError,
                                TransportTimeout, run_ranks)


def test_point_to_point_loopback():
    def fn(ctx):
        if ctx.rank == 0:
            ctx.send(1, b"0123456789abcdef", tag=7)
            return None
        return ctx.receive(0, tag=7)

    out = run_ranks(2, fn)
    assert out[1] == b"0123456789abcdef"


def test_fifo_order_per_tag():
    def fn(ctx):
        if ctx.rank == 0:
            ctx.send(1, b"first", tag=3)
            ctx.send(1, b"second", tag=3)
            return None
        return ctx.receive(0, 3), ctx.receive(0, 3)

    out = run_ranks(2, fn)
    assert out[1] == (b"first", b"second")


def test_counters_accounting_identity():
    n, payload = 5, b"x" * 64

    def fn(ctx):
        if ctx.rank == 0:
            for _ in range(n):
                ctx.send(1, payload, tag=1)
        else:
            for _ in range(n):
                ctx.receive(0, 1)
        return ctx.counters.snapshot()

    out = run_ranks(2, fn)
    assert out[0][0] == n and out[0][1] == n * len(payload)
    assert out[1][2] == n and out[1][3] == n * len(payload)


def test_self_send_rejected():
    def fn(ctx):
        ctx.send(ctx.rank, b"zzz")

    with pytest.raises(TransportError):
        run_ranks(1, fn)


def test_out_of_range_peer_rejected():
    def fn(ctx):
        ctx.send(5, b"zzz")

    with pytest.raises(RankFailure) as err:
        run_ranks(2, fn)
    assert isinstance(err.value.cause, TransportError)


def test_gather_single_rank():
    def fn(ctx):
        return ctx.gather_to_root(b"only")

    assert run_ranks(1, fn)[0] == [b"only"]


def test_gather_orders_by_rank():
    def fn(ctx):
        return ctx.gather_to_root(bytes([ctx.rank]))

    out = run_ranks(4, fn)
    assert out[0] == [b"\x00", b"\x01", b"\x02", b"\x03"]
    assert all(v is None for v in out[1:])


def test_gather_root_receive_lower_bound():
    b = 32

    def fn(ctx):
        ctx.gather_to_root(b"g" * b)
        return ctx.counters.snapshot()

    out = run_ranks(4, fn)
    assert out[0][3] >= (4 - 1) * b


def test_scatter_mirrors_gather():
    def fn(ctx):
        payloads = [bytes([10 + r]) for r in range(ctx.world_size)] if ctx.rank == 0 else None
        return ctx.scatter_from_root(payloads)

    out = run_ranks(4, fn)
    assert out == [b"\x0a", b"\x0b", b"\x0c", b"\x0d"]
    assert run_ranks(1, lambda ctx: ctx.scatter_from_root([b"solo"]))[0] == b"solo"


def test_barrier_separates_phases():
    def fn(ctx):
        # without the barrier rank 1 could observe zero sends
        if ctx.rank == 0:
            ctx.send(1, b"pre-barrier", tag=9)
        ctx.barrier()
        if ctx.rank == 1:
            return ctx.receive(0, 9)
        return None

    assert run_ranks(2, fn)[1] == b"pre-barrier"


def test_traffic_conserved_at_barrier():
    def fn(ctx):
        peer = (ctx.rank + 1) % ctx.world_size
        src = (ctx.rank - 1) % ctx.world_size
        if peer != ctx.rank:
            ctx.send(peer, bytes(8 * (ctx.rank + 1)), tag=2)
            ctx.receive(src, 2)
        ctx.barrier()
        return ctx.counters.snapshot()

    out = run_ranks(3, fn)
    assert sum(s[1] for s in out) == sum(s[3] for s in out)


def test_deterministic_trace_reproducible():
    def fn(ctx):
        peer = (ctx.rank + 1) % ctx.world_size
        src = (ctx.rank - 1) % ctx.world_size
        ctx.send(peer, bytes([ctx.rank] * 4), tag=5)
        got = ctx.receive(src, 5)
        ctx.barrier()
        return got

    traces = []
    results = []
    for _ in range(2):
        trace = []
        results.append(run_ranks(3, fn, trace=trace))
        traces.append(trace)
    assert traces[0] == traces[1]
    assert results[0] == results[1]


def test_deadlock_detection_reports_waiters():
    def fn(ctx):
        return ctx.receive(1 - ctx.rank, 0)

    with pytest.raises(TransportDeadlock) as err:
        run_ranks(2, fn)
    msg = str(err.value)
    assert "rank 0" in msg and "rank 1" in msg


def test_threads_backend_same_results():
    def fn(ctx):
        ctx.send((ctx.rank + 1) % ctx.world_size, struct.pack("<d", float(ctx.rank)), tag=4)
        val = struct.unpack("<d", ctx.receive((ctx.rank - 1) % ctx.world_size, 4))[0]
        gathered = ctx.gather_to_root(struct.pack("<d", val * 2))
        if ctx.rank == 0:
            return sorted(struct.unpack("<d", g)[0] for g in gathered)
        return None

    det = run_ranks(4, fn, backend="deterministic")
    thr = run_ranks(4, fn, backend="threads")
    assert det[0] == thr[0]


def test_threads_backend_timeout():
    def fn(ctx):
        if ctx.rank == 0:
            ctx.receive(1, 0)

    with pytest.raises((TransportTimeout, RankFailure)):
        run_ranks(2, fn, backend="threads", timeout=0.2)


def test_rank_exception_propagates():
    def fn(ctx):
        if ctx.rank == 1:
            raise ValueError("boom")
        ctx.barrier()

    with pytest.raises(RankFailure) as err:
        run_ranks(2, fn)
    assert isinstance(err.value.cause, ValueError)
