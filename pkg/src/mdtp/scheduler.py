"""Chunk scheduling for multi-source downloads.

Each replica is treated as a bin whose capacity is its last observed
throughput. Every scheduling decision the fastest replica gets the large
chunk; every other replica gets a chunk scaled down in proportion to its
throughput, so all outstanding chunks are expected to finish at about the
same time. A shared range ledger hands out byte ranges so that every byte
of the file is requested exactly once.
"""

import math
import threading
import time
from collections import deque
from dataclasses import dataclass

PROBE = "probe"
ADAPTIVE = "adaptive"
STATIC = "static"

POLICY_MDTP = "mdtp"
POLICY_STATIC = "static"

DEFAULT_MIN_CHUNK = 64 * 1024


@dataclass(frozen=True)
class SchedulerConfig:
    """Chunk-size parameters for one transfer.

    initial_chunk is the uniform probe size used to take the first
    throughput measurement from each replica; large_chunk is the per-round
    size given to the fastest replica; min_chunk is the floor below which
    slow replicas' chunks are never shrunk.
    """

    file_size: int
    initial_chunk: int
    large_chunk: int
    min_chunk: int = DEFAULT_MIN_CHUNK
    ewma_alpha: float | None = None

    def __post_init__(self):
        if self.file_size <= 0:
            raise ValueError(f"file_size must be positive, got {self.file_size}")
        if not (0 < self.min_chunk <= self.initial_chunk <= self.large_chunk):
            raise ValueError(
                "chunk sizes must satisfy 0 < min_chunk <= initial_chunk <= large_chunk, "
                f"got min={self.min_chunk} initial={self.initial_chunk} large={self.large_chunk}"
            )
        if self.ewma_alpha is not None and not (0.0 < self.ewma_alpha <= 1.0):
            raise ValueError(f"ewma_alpha must be in (0, 1], got {self.ewma_alpha}")


@dataclass(frozen=True)
class ChunkAssignment:
    """One byte-range request: inclusive offsets, issued to one replica."""

    replica_id: str
    start_byte: int
    end_byte: int
    round: int
    kind: str

    def __post_init__(self):
        if not (0 <= self.start_byte <= self.end_byte):
            raise ValueError(f"bad range [{self.start_byte}, {self.end_byte}]")
        if self.kind not in (PROBE, ADAPTIVE, STATIC):
            raise ValueError(f"unknown assignment kind {self.kind!r}")

    @property
    def size(self):
        return self.end_byte - self.start_byte + 1


class RangeLedger:
    """Hands out sequential, disjoint byte ranges over [0, file_size).

    Not thread-safe on its own; ChunkScheduler serializes access.
    """

    def __init__(self, file_size):
        if file_size <= 0:
            raise ValueError(f"file_size must be positive, got {file_size}")
        self.file_size = file_size
        self.next_byte = 0
        self.assigned = []

    @property
    def exhausted(self):
        return self.next_byte >= self.file_size

    def allocate(self, requested_size):
        """Return the next (start, end) inclusive range, or None when no
        bytes remain. The final range is truncated at the end of the file."""
        if requested_size < 1:
            raise ValueError(f"requested_size must be >= 1, got {requested_size}")
        if self.exhausted:
            return None
        start = self.next_byte
        end = min(start + requested_size - 1, self.file_size - 1)
        self.next_byte = end + 1
        self.assigned.append((start, end))
        return start, end


def round_half_up(x):
    return math.floor(x + 0.5)


def geometric_mean(rates):
    """Geometric mean of positive rates, computed in log space.

    The result is clamped into [min(rates), max(rates)] so the bound holds
    exactly despite the log/exp round trip (otherwise a uniform snapshot
    can classify nobody as fast).
    """
    rates = list(rates)
    if not rates:
        raise ValueError("geometric_mean of an empty sequence")
    total = 0.0
    for r in rates:
        if r <= 0:
            raise ValueError(f"rates must be positive, got {r}")
        total += math.log(r)
    return min(max(rates), max(min(rates), math.exp(total / len(rates))))


def classify_fast(throughput, gm):
    """A replica at or above the geometric mean counts as fast."""
    if throughput <= 0 or gm <= 0:
        raise ValueError("throughput and geometric mean must be positive")
    return throughput >= gm


def fastest_throughput(snapshot):
    """Return (replica_id, rate) for the fastest replica in the snapshot.

    Fast replicas are those at or above the geometric mean; the fastest of
    them is necessarily the global maximum. Ties break to the lowest
    replica_id so scheduling stays deterministic.
    """
    if not snapshot:
        raise ValueError("empty throughput snapshot")
    gm = geometric_mean(snapshot.values())
    fast = [(rid, th) for rid, th in snapshot.items() if classify_fast(th, gm)]
    return min(fast, key=lambda item: (-item[1], item[0]))


def compute_chunk_size(throughput, snapshot, config):
    """Size of the next chunk for a replica with the given throughput.

    Proportional rule: the fastest replica downloads large_chunk per round,
    which fixes the round duration; everyone else gets round-duration worth
    of bytes at its own rate, i.e. large_chunk * th_i / th_max, clamped to
    [min_chunk, large_chunk].
    """
    _, th_max = fastest_throughput(snapshot)
    size = round_half_up(config.large_chunk * throughput / th_max)
    return max(config.min_chunk, min(config.large_chunk, size))


class ChunkScheduler:
    """Shared scheduling state for one transfer: ledger, throughput
    snapshot, reallocation queue for failed ranges, and an event log.

    All public methods are safe to call concurrently from per-replica
    fetch loops; none of them blocks on network I/O.
    """

    def __init__(self, config, policy=POLICY_MDTP, static_chunk=None):
        if policy not in (POLICY_MDTP, POLICY_STATIC):
            raise ValueError(f"unknown policy {policy!r}")
        if policy == POLICY_STATIC and (static_chunk is None or static_chunk < 1):
            raise ValueError("static policy requires a positive static_chunk")
        self.config = config
        self.policy = policy
        self.static_chunk = static_chunk
        self.ledger = RangeLedger(config.file_size)
        self.snapshot = {}
        self.events = []
        self._realloc = deque()
        self._in_flight = {}
        self._rounds = {}
        self._excluded = set()
        self._lock = threading.Lock()
        self._progress = threading.Condition(self._lock)

    # -- allocation ------------------------------------------------------

    def _take_range(self, requested_size):
        """Pull up to requested_size bytes, preferring requeued ranges from
        failed replicas over fresh ledger bytes. Returns (start, end) or
        None when nothing is left anywhere."""
        if self._realloc:
            start, end = self._realloc[0]
            if end - start + 1 > requested_size:
                self._realloc[0] = (start + requested_size, end)
                return start, start + requested_size - 1
            self._realloc.popleft()
            return start, end
        return self.ledger.allocate(requested_size)

    def _chunk_size_for(self, replica_id):
        if self.policy == POLICY_STATIC:
            return self.static_chunk, STATIC
        if replica_id not in self.snapshot:
            return self.config.initial_chunk, PROBE
        size = compute_chunk_size(self.snapshot[replica_id], self.snapshot, self.config)
        return size, ADAPTIVE

    def _issue_locked(self, replica_id):
        if replica_id in self._in_flight:
            raise ValueError(f"replica {replica_id} already has an in-flight chunk")
        size, kind = self._chunk_size_for(replica_id)
        taken = self._take_range(size)
        if taken is None:
            return None
        start, end = taken
        rnd = self._rounds.get(replica_id, 0)
        self._rounds[replica_id] = rnd + 1
        assignment = ChunkAssignment(replica_id, start, end, rnd, kind)
        self._in_flight[replica_id] = assignment
        self.events.append(
            {
                "replica_id": replica_id,
                "start": start,
                "end": end,
                "size": assignment.size,
                "kind": kind,
                "round": rnd,
                "timestamp": time.time(),
            }
        )
        return assignment

    def next_assignment(self, replica_id):
        """Issue the next chunk for a ready replica, or None when no bytes
        remain to hand out right now."""
        with self._lock:
            return self._issue_locked(replica_id)

    # -- completion / failure -------------------------------------------

    def record_completion(self, replica_id, assignment, elapsed):
        """Fold a finished chunk into the throughput snapshot and release
        the replica's in-flight slot. Returns the updated estimate."""
        if elapsed <= 0:
            raise ValueError(f"elapsed must be positive, got {elapsed}")
        observed = assignment.size / elapsed
        with self._progress:
            alpha = self.config.ewma_alpha
            if alpha is not None and replica_id in self.snapshot:
                observed = alpha * observed + (1 - alpha) * self.snapshot[replica_id]
            self.snapshot[replica_id] = observed
            self._in_flight.pop(replica_id, None)
            self._progress.notify_all()
        return observed

    def record_failure(self, replica_id, assignment=None):
        """Exclude a failed replica for the rest of the transfer and queue
        its unfinished range for reallocation by the surviving loops."""
        with self._progress:
            self._excluded.add(replica_id)
            inflight = self._in_flight.pop(replica_id, None)
            if assignment is None:
                assignment = inflight
            if assignment is not None:
                self._realloc.append((assignment.start_byte, assignment.end_byte))
            self._progress.notify_all()

    # -- transfer state --------------------------------------------------

    def _complete_locked(self):
        return self.ledger.exhausted and not self._realloc and not self._in_flight

    @property
    def transfer_complete(self):
        with self._lock:
            return self._complete_locked()

    def acquire(self, replica_id, poll_interval=0.5):
        """Blocking helper for fetch loops: wait until a chunk is available
        for this replica, returning None once the transfer is complete or
        the replica has been excluded."""
        with self._progress:
            while True:
                if replica_id in self._excluded:
                    return None
                assignment = self._issue_locked(replica_id)
                if assignment is not None:
                    return assignment
                if self._complete_locked():
                    return None
                # Everything is assigned but chunks are still in flight; a
                # failure may yet hand a range back to this loop.
                self._progress.wait(poll_interval)
