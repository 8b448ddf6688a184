"""Message passing between logical ranks, with full traffic accounting.

Ranks are OS threads inside one process rather than MPI processes; the
contract is the familiar one: tagged point-to-point send/receive with FIFO
matching per (sender, receiver, tag), plus gather/scatter through rank 0 and
a barrier.  Payloads are opaque byte strings; numeric arrays are encoded
explicitly little-endian so results are bit-exact across backends and
machines.

Two backends implement the contract:

* ``deterministic`` - a single baton is passed between rank threads in fixed
  round-robin order at every blocking point, so execution is fully
  serialized and reproducible, and a global stall is detected and reported
  as a deadlock with the per-rank wait states.
* ``threads`` - ranks run freely and block on condition variables, with a
  configurable timeout instead of deadlock detection.

Message contents depend only on program order (never on timing), so the two
backends produce identical numerical results.
"""

import threading
from collections import deque

import numpy as np

__all__ = [
    "RankContext",
    "TrafficCounters",
    "TransportError",
    "TransportDeadlock",
    "TransportTimeout",
    "RankFailure",
    "run_ranks",
    "encode_f8",
    "decode_f8",
    "encode_i8",
    "decode_i8",
]

TAG_GATHER = -1
TAG_SCATTER = -2


class TransportError(RuntimeError):
    pass


class TransportDeadlock(TransportError):
    pass


class TransportTimeout(TransportError):
    pass


class RankFailure(RuntimeError):
    """Wraps the first exception raised inside a rank function."""

    def __init__(self, rank, cause):
        super().__init__(f"rank {rank} failed: {cause!r}")
        self.rank = rank
        self.cause = cause


def encode_f8(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_f8(buf):
    return np.frombuffer(buf, dtype="<f8").copy()


def encode_i8(arr):
    return np.ascontiguousarray(arr, dtype="<i8").tobytes()


def decode_i8(buf):
    return np.frombuffer(buf, dtype="<i8").copy()


class TrafficCounters:
    """Monotone per-rank counts of messages and payload bytes."""

    __slots__ = ("messages_sent", "bytes_sent", "messages_received", "bytes_received",
                 "per_peer_sent", "per_peer_received")

    def __init__(self):
        self.messages_sent = 0
        self.bytes_sent = 0
        self.messages_received = 0
        self.bytes_received = 0
        self.per_peer_sent = {}
        self.per_peer_received = {}

    def record_send(self, peer, nbytes):
        self.messages_sent += 1
        self.bytes_sent += nbytes
        m, b = self.per_peer_sent.get(peer, (0, 0))
        self.per_peer_sent[peer] = (m + 1, b + nbytes)

    def record_receive(self, peer, nbytes):
        self.messages_received += 1
        self.bytes_received += nbytes
        m, b = self.per_peer_received.get(peer, (0, 0))
        self.per_peer_received[peer] = (m + 1, b + nbytes)

    def snapshot(self):
        return (self.messages_sent, self.bytes_sent,
                self.messages_received, self.bytes_received)

    @staticmethod
    def delta(after, before):
        return tuple(a - b for a, b in zip(after, before))


class RankContext:
    """Handle a rank function uses for every inter-rank effect."""

    def __init__(self, rank, world_size, hub, trace=None):
        self.rank = rank
        self.world_size = world_size
        self.counters = TrafficCounters()
        self.trace = trace
        self._hub = hub

    def _check_peer(self, peer):
        if not 0 <= peer < self.world_size:
            raise TransportError(f"peer {peer} out of range for world size {self.world_size}")
        if peer == self.rank:
            raise TransportError(
                "self-send is not allowed; local data must use direct calls"
            )

    def send(self, peer, payload, tag=0):
        self._check_peer(peer)
        if not isinstance(payload, (bytes, bytearray, memoryview)):
            raise TransportError("payload must be a byte sequence")
        payload = bytes(payload)
        self._hub.put(self.rank, peer, tag, payload)
        self.counters.record_send(peer, len(payload))
        if self.trace is not None:
            self.trace.append(("send", self.rank, peer, tag, len(payload)))

    def receive(self, peer, tag=0):
        self._check_peer(peer)
        payload = self._hub.get(self.rank, peer, tag)
        self.counters.record_receive(peer, len(payload))
        if self.trace is not None:
            self.trace.append(("recv", self.rank, peer, tag, len(payload)))
        return payload

    def gather_to_root(self, payload):
        """Root returns the per-rank payload list (by rank id); others None."""
        if self.rank == 0:
            out = [bytes(payload)]
            for src in range(1, self.world_size):
                out.append(self.receive(src, TAG_GATHER))
            return out
        self.send(0, payload, TAG_GATHER)
        return None

    def scatter_from_root(self, payloads=None):
        """Root distributes payloads[i] to rank i and returns its own."""
        if self.rank == 0:
            if payloads is None or len(payloads) != self.world_size:
                raise TransportError("root must pass one payload per rank")
            for dst in range(1, self.world_size):
                self.send(dst, payloads[dst], TAG_SCATTER)
            return bytes(payloads[0])
        return self.receive(0, TAG_SCATTER)

    def barrier(self):
        self._hub.barrier(self.rank)
        if self.trace is not None:
            self.trace.append(("barrier", self.rank))


class _HubBase:
    """Shared mailbox state; queues are keyed (src, dst, tag)."""

    def __init__(self, world_size):
        self.world_size = world_size
        self.queues = {}
        self.failure = None

    def _queue(self, src, dst, tag):
        key = (src, dst, tag)
        q = self.queues.get(key)
        if q is None:
            q = deque()
            self.queues[key] = q
        return q


class _DeterministicHub(_HubBase):
    """Single-baton scheduler: exactly one rank thread runs at a time.

    A rank holds the baton from one blocking point to the next; blocking
    (empty receive queue, incomplete barrier) parks the rank with a resume
    predicate and passes the baton round-robin to the next runnable rank.
    If no rank can run while some are still parked, that is a deadlock and
    the per-rank wait states are reported.
    """

    RUNNING, PARKED, DONE = 0, 1, 2

    def __init__(self, world_size):
        super().__init__(world_size)
        self.cv = threading.Condition()
        self.state = [self.PARKED] * world_size
        self.pred = [_always] * world_size
        self.desc = ["start"] * world_size
        self.active = None

        self.barrier_gen = 0
        self.barrier_count = 0

    def activate_first(self):
        self.active = 0
        self.state[0] = self.RUNNING

    # -- scheduling core (callers hold self.cv) --

    def _advance(self, from_rank):
        """Hand the baton to the next runnable rank after ``from_rank``."""
        self.active = None
        for step in range(1, self.world_size + 1):
            cand = (from_rank + step) % self.world_size
            if self.state[cand] == self.PARKED and self.pred[cand]():
                self.active = cand
                self.state[cand] = self.RUNNING
                self.cv.notify_all()
                return
        if all(s == self.DONE for s in self.state) or self.failure is not None:
            self.cv.notify_all()
            return
        waiting = [
            f"rank {r}: waiting on {self.desc[r]}"
            for r in range(self.world_size)
            if self.state[r] == self.PARKED
        ]
        self.failure = TransportDeadlock(
            "no rank can progress:\n  " + "\n  ".join(waiting)
        )
        self.cv.notify_all()

    def _block(self, rank, pred, desc):
        """Park ``rank`` until ``pred`` holds and the baton returns to it."""
        self.state[rank] = self.PARKED
        self.pred[rank] = pred
        self.desc[rank] = desc
        self._advance(rank)
        while True:
            if self.failure is not None:
                raise self.failure
            if self.active == rank and self.state[rank] == self.RUNNING:
                return
            self.cv.wait()

    # -- lifecycle --

    def start(self, rank):
        with self.cv:
            while True:
                if self.failure is not None:
                    raise self.failure
                if self.active == rank and self.state[rank] == self.RUNNING:
                    return
                self.cv.wait()

    def finish(self, rank):
        with self.cv:
            self.state[rank] = self.DONE
            self._advance(rank)

    def fail(self, rank, exc):
        with self.cv:
            if self.failure is None:
                self.failure = RankFailure(rank, exc)
            self.state[rank] = self.DONE
            self.cv.notify_all()

    # -- transport primitives --

    def put(self, src, dst, tag, payload):
        with self.cv:
            if self.failure is not None:
                raise self.failure
            self._queue(src, dst, tag).append(payload)

    def get(self, dst, src, tag):
        with self.cv:
            if self.failure is not None:
                raise self.failure
            q = self._queue(src, dst, tag)
            if not q:
                self._block(dst, lambda: len(q) > 0, f"receive(peer={src}, tag={tag})")
            return q.popleft()

    def barrier(self, rank):
        with self.cv:
            if self.failure is not None:
                raise self.failure
            gen = self.barrier_gen
            self.barrier_count += 1
            if self.barrier_count == self.world_size:
                self.barrier_count = 0
                self.barrier_gen += 1
                return
            self._block(rank, lambda: self.barrier_gen > gen, f"barrier#{gen}")


def _always():
    return True


class _ThreadedHub(_HubBase):
    """Free-running backend; blocking waits use a timeout per wait."""

    def __init__(self, world_size, timeout):
        super().__init__(world_size)
        self.cv = threading.Condition()
        self.timeout = timeout
        self.barrier_gen = 0
        self.barrier_count = 0

    def start(self, rank):
        pass

    def finish(self, rank):
        pass

    def fail(self, rank, exc):
        with self.cv:
            if self.failure is None:
                self.failure = RankFailure(rank, exc)
            self.cv.notify_all()

    def put(self, src, dst, tag, payload):
        with self.cv:
            if self.failure is not None:
                raise self.failure
            self._queue(src, dst, tag).append(payload)
            self.cv.notify_all()

    def get(self, dst, src, tag):
        with self.cv:
            q = self._queue(src, dst, tag)
            while not q:
                if self.failure is not None:
                    raise self.failure
                if not self.cv.wait(timeout=self.timeout):
                    raise TransportTimeout(
                        f"rank {dst} timed out after {self.timeout}s in "
                        f"receive(peer={src}, tag={tag})"
                    )
            return q.popleft()

    def barrier(self, rank):
        with self.cv:
            if self.failure is not None:
                raise self.failure
            gen = self.barrier_gen
            self.barrier_count += 1
            if self.barrier_count == self.world_size:
                self.barrier_count = 0
                self.barrier_gen += 1
                self.cv.notify_all()
                return
            while self.barrier_gen == gen:
                if self.failure is not None:
                    raise self.failure
                if not self.cv.wait(timeout=self.timeout):
                    raise TransportTimeout(
                        f"rank {rank} timed out after {self.timeout}s in barrier"
                    )


def run_ranks(world_size, fn, *args, backend="deterministic", timeout=60.0, trace=None):
    """Run ``fn(ctx, *args)`` on every rank and return the per-rank results.

    ``trace``, if a list, records (op, rank, peer, tag, nbytes) tuples for
    every transport call; under the deterministic backend the recorded
    sequence is reproducible run to run.  The first exception raised inside
    a rank aborts the world and is re-raised as RankFailure (single-rank
    runs execute inline and raise the original exception directly).
    """
    if world_size < 1:
        raise TransportError("world size must be >= 1")
    if backend == "deterministic":
        hub = _DeterministicHub(world_size)
    elif backend == "threads":
        hub = _ThreadedHub(world_size, timeout)
    else:
        raise TransportError(f"unknown backend {backend!r}")

    results = [None] * world_size
    contexts = [RankContext(r, world_size, hub, trace=trace) for r in range(world_size)]

    if world_size == 1:
        if isinstance(hub, _DeterministicHub):
            hub.activate_first()
        results[0] = fn(contexts[0], *args)
        return results

    def wrapper(rank):
        try:
            hub.start(rank)
            results[rank] = fn(contexts[rank], *args)
            hub.finish(rank)
        except (RankFailure, TransportDeadlock):
            pass
        except BaseException as exc:  # noqa: BLE001 - report any rank failure
            hub.fail(rank, exc)

    threads = [threading.Thread(target=wrapper, args=(r,), name=f"rank-{r}")
               for r in range(world_size)]
    if isinstance(hub, _DeterministicHub):
        with hub.cv:
            hub.activate_first()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if hub.failure is not None:
        raise hub.failure
    return results
