"""Multi-source transfer engine.

One persistent HTTP connection per replica, one fetch loop per replica.
Loops pull byte-range assignments from a shared scheduler, measure each
chunk's wall-clock fetch time (request write through last payload byte),
and write payloads at their offsets into a shared sink. A replica that
fails mid-transfer is excluded and its unfinished range is handed to the
surviving loops, so every byte is still fetched exactly once.
"""

import hashlib
import http.client
import os
import threading
import time
from dataclasses import dataclass
from urllib.parse import urlsplit

from .scheduler import (
    DEFAULT_MIN_CHUNK,
    POLICY_MDTP,
    POLICY_STATIC,
    ChunkScheduler,
    SchedulerConfig,
)


class TransferError(Exception):
    """Base for engine failures; exit_code feeds the CLI's status mapping."""

    exit_code = 1


class TransferAbortError(TransferError):
    """No replica could serve the transfer at all."""

    exit_code = 3


class IncompleteTransferError(TransferError):
    """Transfer ended with unrecovered byte ranges."""

    exit_code = 4


class InconsistentReplicaError(TransferError):
    """Replicas disagree about the resource (e.g. different sizes)."""

    exit_code = 5


class UnsupportedServerError(TransferError):
    """A replica does not advertise byte-range support."""

    exit_code = 6


class ProtocolError(TransferError):
    """Unexpected response to a range request (anything but 206)."""


class PayloadMismatchError(TransferError):
    """Range response body shorter or longer than the requested range."""


@dataclass(frozen=True)
class ReplicaEndpoint:
    """One data source: http(s) base URL plus the resource path on it."""

    replica_id: str
    base_url: str
    resource_path: str

    def __post_init__(self):
        parsed = urlsplit(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.hostname:
            raise ValueError(f"bad base_url {self.base_url!r}")
        if not self.resource_path.startswith("/"):
            raise ValueError(f"resource_path must start with '/', got {self.resource_path!r}")

    @property
    def url(self):
        return self.base_url + self.resource_path

    @classmethod
    def from_url(cls, url, replica_id=None):
        parsed = urlsplit(url)
        netloc = parsed.netloc
        base = f"{parsed.scheme}://{netloc}"
        path = parsed.path or "/"
        if parsed.query:
            path += "?" + parsed.query
        return cls(replica_id or netloc, base, path)


class ReplicaSession:
    """A single reused connection to one replica.

    The connection is established exactly once; auto-reopen is disabled so
    a dropped session surfaces as a replica failure instead of silently
    costing a second connection.
    """

    def __init__(self, endpoint, timeout=30.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self.established = 0
        self.request_count = 0
        self.head_count = 0
        self.bytes_fetched = 0
        self.failures = 0
        self.chunk_sizes = []
        self.failed = False
        self._conn = None

    def connect(self):
        if self._conn is not None:
            return
        parsed = urlsplit(self.endpoint.base_url)
        conn_cls = (
            http.client.HTTPSConnection
            if parsed.scheme == "https"
            else http.client.HTTPConnection
        )
        conn = conn_cls(parsed.hostname, parsed.port, timeout=self.timeout)
        conn.connect()
        conn.auto_open = 0
        self._conn = conn
        self.established += 1

    def head_size(self):
        """Size-only metadata request on the session's connection.

        Returns (content_length, advertises_byte_ranges).
        """
        self.connect()
        self.head_count += 1
        self._conn.request("HEAD", self.endpoint.resource_path)
        resp = self._conn.getresponse()
        resp.read()
        if resp.status != 200:
            raise ProtocolError(f"{self.endpoint.replica_id}: HEAD returned {resp.status}")
        length = resp.getheader("Content-Length")
        if length is None:
            raise ProtocolError(f"{self.endpoint.replica_id}: HEAD without Content-Length")
        ranges_ok = "bytes" in resp.getheader("Accept-Ranges", "").lower()
        return int(length), ranges_ok

    def fetch(self, assignment):
        """Fetch one inclusive byte range; returns (payload, elapsed_seconds).

        Elapsed covers request write through receipt of the last payload
        byte, which is what the scheduler's throughput estimate is based on.
        """
        self.connect()
        self.request_count += 1
        headers = {"Range": f"bytes={assignment.start_byte}-{assignment.end_byte}"}
        t0 = time.perf_counter()
        self._conn.request("GET", self.endpoint.resource_path, headers=headers)
        resp = self._conn.getresponse()
        if resp.status != 206:
            raise ProtocolError(
                f"{self.endpoint.replica_id}: expected partial content, got {resp.status}"
            )
        payload = resp.read()
        elapsed = time.perf_counter() - t0
        if len(payload) != assignment.size:
            raise PayloadMismatchError(
                f"{self.endpoint.replica_id}: asked for {assignment.size} bytes, "
                f"got {len(payload)}"
            )
        self.bytes_fetched += len(payload)
        self.chunk_sizes.append(len(payload))
        return payload, elapsed

    def close(self):
        if self._conn is not None:
            self._conn.close()
            self._conn = None


def merge_gaps(received, expected_size):
    """Gaps in coverage: byte ranges of [0, expected_size) missing from the
    received (start, end) inclusive range list."""
    gaps = []
    cursor = 0
    for start, end in sorted(received):
        if start > cursor:
            gaps.append((cursor, start - 1))
        cursor = max(cursor, end + 1)
    if cursor < expected_size:
        gaps.append((cursor, expected_size - 1))
    return gaps


class FileSink:
    """Positional writes into a preallocated output file."""

    def __init__(self, path, expected_size):
        self.path = path
        self.expected_size = expected_size
        self.received = []
        self._lock = threading.Lock()
        self._fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        os.ftruncate(self._fd, expected_size)

    def write(self, offset, data):
        if offset < 0 or offset + len(data) > self.expected_size:
            raise ValueError(f"write [{offset}, {offset + len(data)}) outside sink bounds")
        os.pwrite(self._fd, data, offset)
        with self._lock:
            self.received.append((offset, offset + len(data) - 1))

    def coverage_gaps(self):
        with self._lock:
            return merge_gaps(self.received, self.expected_size)

    def digest(self):
        h = hashlib.sha256()
        os.lseek(self._fd, 0, os.SEEK_SET)
        remaining = self.expected_size
        while remaining > 0:
            block = os.read(self._fd, min(1 << 20, remaining))
            if not block:
                break
            h.update(block)
            remaining -= len(block)
        return h.hexdigest()

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class DiscardSink:
    """Counts and digests payload without touching disk.

    Chunks are folded into a single linear sha256 in offset order through a
    small reorder buffer, so the digest matches a straight hash of the
    source. Out-of-order data is buffered in memory until the gap before it
    fills; the scheduler's requeue-first policy keeps that window near the
    number of in-flight chunks.
    """

    def __init__(self, expected_size):
        self.expected_size = expected_size
        self.received = []
        self._lock = threading.Lock()
        self._hash = hashlib.sha256()
        self._pending = {}
        self._cursor = 0

    def write(self, offset, data):
        if offset < 0 or offset + len(data) > self.expected_size:
            raise ValueError(f"write [{offset}, {offset + len(data)}) outside sink bounds")
        with self._lock:
            self.received.append((offset, offset + len(data) - 1))
            self._pending[offset] = data
            while self._cursor in self._pending:
                block = self._pending.pop(self._cursor)
                self._hash.update(block)
                self._cursor += len(block)

    def coverage_gaps(self):
        with self._lock:
            return merge_gaps(self.received, self.expected_size)

    def digest(self):
        with self._lock:
            if self._cursor != self.expected_size:
                raise IncompleteTransferError(
                    f"digest requested with only {self._cursor}/{self.expected_size} bytes folded"
                )
            return self._hash.hexdigest()

    def close(self):
        self._pending.clear()


@dataclass
class TransferReport:
    """Outcome of one download, serializable for the CLI and bench."""

    policy: str
    file_size: int
    total_wall_time: float
    content_sha256: str
    replicas_used_fraction: float
    config: dict
    replicas: dict
    events: list

    def to_dict(self, include_events=True):
        doc = {
            "policy": self.policy,
            "file_size": self.file_size,
            "total_wall_time": self.total_wall_time,
            "content_sha256": self.content_sha256,
            "replicas_used_fraction": self.replicas_used_fraction,
            "config": self.config,
            "replicas": self.replicas,
        }
        if include_events:
            doc["events"] = self.events
        return doc


def discover_size(sessions):
    """Find the resource size, tolerating unreachable replicas.

    Every endpoint is queried in order on its transfer session; the first
    success supplies the size, all responders must agree on it and must
    advertise byte-range support. Unreachable replicas are marked failed
    and skipped (their fetch loops never start).
    """
    size = None
    for session in sessions:
        try:
            length, ranges_ok = session.head_size()
        except (OSError, http.client.HTTPException, ProtocolError):
            session.failed = True
            session.failures += 1
            continue
        if not ranges_ok:
            raise UnsupportedServerError(
                f"{session.endpoint.replica_id} does not advertise byte-range support"
            )
        if size is None:
            size = length
        elif length != size:
            raise InconsistentReplicaError(
                f"replicas disagree on size: {size} vs {length} "
                f"({session.endpoint.replica_id})"
            )
    if size is None:
        raise TransferAbortError("no replica reachable for size discovery")
    if size <= 0:
        raise TransferAbortError("replicas report an empty resource")
    return size


def replica_loop(session, scheduler, sink, clock=None):
    """Fetch chunks for one replica until the transfer completes or the
    replica fails. The first fetch of a fresh replica is its probe chunk."""
    rid = session.endpoint.replica_id
    while True:
        assignment = scheduler.acquire(rid)
        if assignment is None:
            return
        try:
            payload, elapsed = session.fetch(assignment)
        except (TransferError, OSError, http.client.HTTPException):
            session.failed = True
            session.failures += 1
            scheduler.record_failure(rid, assignment)
            session.close()
            return
        if clock is not None:
            clock.mark()
        scheduler.record_completion(rid, assignment, elapsed)
        sink.write(assignment.start_byte, payload)


class _Clock:
    """Tracks the arrival time of the most recent payload byte."""

    def __init__(self):
        self._lock = threading.Lock()
        self.last_byte = None

    def mark(self):
        with self._lock:
            self.last_byte = time.perf_counter()


def download(
    endpoints,
    *,
    policy=POLICY_MDTP,
    initial_chunk=None,
    large_chunk=None,
    min_chunk=DEFAULT_MIN_CHUNK,
    static_chunk=None,
    ewma_alpha=None,
    out_path=None,
    discard=False,
    timeout=30.0,
):
    """Run one multi-source transfer and return its TransferReport.

    Chunk parameters default from the file size (see select_chunk_params).
    Exactly one of out_path / discard selects the sink. Wall time runs from
    just before the fetch loops start to the last payload byte; coverage
    verification and digesting happen after the clock stops.
    """
    if bool(out_path) == bool(discard):
        raise ValueError("exactly one of out_path / discard must be given")
    if not endpoints:
        raise ValueError("at least one endpoint required")
    ids = [ep.replica_id for ep in endpoints]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate replica ids: {ids}")

    sessions = [ReplicaSession(ep, timeout=timeout) for ep in endpoints]
    try:
        file_size = discover_size(sessions)

        if initial_chunk is None or large_chunk is None:
            from .bench import select_chunk_params

            auto_initial, auto_large = select_chunk_params(file_size)
            initial_chunk = initial_chunk or auto_initial
            large_chunk = large_chunk or auto_large
        config = SchedulerConfig(
            file_size=file_size,
            initial_chunk=initial_chunk,
            large_chunk=large_chunk,
            min_chunk=min(min_chunk, initial_chunk),
            ewma_alpha=ewma_alpha,
        )
        scheduler = ChunkScheduler(config, policy=policy, static_chunk=static_chunk)
        sink = FileSink(out_path, file_size) if out_path else DiscardSink(file_size)

        try:
            clock = _Clock()
            threads = []
            errors = []

            def run_loop(session):
                try:
                    replica_loop(session, scheduler, sink, clock)
                except Exception as exc:  # unexpected: surface after join
                    errors.append(exc)
                    session.failed = True
                    scheduler.record_failure(session.endpoint.replica_id)

            t0 = time.perf_counter()
            for session in sessions:
                if session.failed:
                    continue
                thread = threading.Thread(target=run_loop, args=(session,), daemon=True)
                thread.start()
                threads.append(thread)
            for thread in threads:
                thread.join()
            if errors:
                raise errors[0]

            gaps = sink.coverage_gaps()
            if gaps:
                if all(s.failed for s in sessions):
                    raise TransferAbortError("all replicas failed")
                raise IncompleteTransferError(f"unrecovered ranges: {gaps[:4]}")
            wall_time = (clock.last_byte or t0) - t0
            digest = sink.digest()
        finally:
            sink.close()
    finally:
        for session in sessions:
            session.close()

    used = sum(1 for s in sessions if s.request_count > 0)
    report = TransferReport(
        policy=policy,
        file_size=file_size,
        total_wall_time=wall_time,
        content_sha256=digest,
        replicas_used_fraction=used / len(sessions),
        config={
            "initial_chunk": config.initial_chunk,
            "large_chunk": config.large_chunk,
            "min_chunk": config.min_chunk,
            "static_chunk": static_chunk,
            "ewma_alpha": ewma_alpha,
        },
        replicas={
            s.endpoint.replica_id: {
                "bytes": s.bytes_fetched,
                "requests": s.request_count,
                "failures": s.failures,
                "chunk_sizes": list(s.chunk_sizes),
            }
            for s in sessions
        },
        events=list(scheduler.events),
    )
    return report
