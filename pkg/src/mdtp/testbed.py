"""Local replica servers for desk-scale transfer experiments.

Each replica is an HTTP/1.1 server bound to its own port, serving one
source file under /data with inclusive byte-range semantics. Per-replica
profiles throttle delivery with a token bucket (per connection), delay the
first response byte by a fixed latency, and can kill the connection after
a byte budget to simulate a crashing server. Accept/request/byte counters
support single-session and utilization assertions in tests.
"""

import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .engine import ReplicaEndpoint

RESOURCE_PATH = "/data"
TOKEN_BUCKET_BURST = 64 * 1024
_RANGE_RE = re.compile(r"^bytes=(\d+)-(\d+)$")


@dataclass(frozen=True)
class ReplicaProfile:
    """Serving behavior of one replica.

    rate_limit is bytes/second (None = unlimited); added_latency is seconds
    slept before the first response byte of every request, plus up to
    latency_jitter seconds of uniform jitter; fail_after kills the
    connection once the replica has served that many payload bytes in total.
    """

    replica_id: str
    rate_limit: float | None = None
    added_latency: float = 0.0
    latency_jitter: float = 0.0
    fail_after: int | None = None

    def __post_init__(self):
        if self.rate_limit is not None and self.rate_limit <= 0:
            raise ValueError(f"rate_limit must be positive, got {self.rate_limit}")
        if self.added_latency < 0 or self.latency_jitter < 0:
            raise ValueError("latency values must be >= 0")
        if self.fail_after is not None and self.fail_after < 0:
            raise ValueError(f"fail_after must be >= 0, got {self.fail_after}")


@dataclass(frozen=True)
class TestbedSpec:
    """Source file plus one profile (and optional fixed port) per replica."""

    __test__ = False  # keep pytest from collecting this as a test class

    source_path: str
    profiles: tuple
    host: str = "127.0.0.1"
    ports: tuple | None = None

    def __post_init__(self):
        profiles = tuple(self.profiles)
        if not profiles:
            raise ValueError("testbed needs at least one replica profile")
        ids = [p.replica_id for p in profiles]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate replica ids: {ids}")
        object.__setattr__(self, "profiles", profiles)
        if self.ports is not None:
            ports = tuple(self.ports)
            if len(ports) != len(profiles):
                raise ValueError("ports list must match profiles")
            nonzero = [p for p in ports if p]
            if len(set(nonzero)) != len(nonzero):
                raise ValueError(f"duplicate ports: {ports}")
            object.__setattr__(self, "ports", ports)

    @classmethod
    def from_file(cls, path):
        """Load a spec from JSON: rates in bytes/sec, latency in ms.

        {"source": "big.bin",
         "host": "127.0.0.1",
         "replicas": [{"id": "r1", "rate_limit": 10485760, "latency_ms": 500,
                       "fail_after": null, "port": 0}, ...]}
        """
        with open(path) as fh:
            doc = json.load(fh)
        profiles = []
        ports = []
        for entry in doc["replicas"]:
            profiles.append(
                ReplicaProfile(
                    replica_id=entry["id"],
                    rate_limit=entry.get("rate_limit"),
                    added_latency=entry.get("latency_ms", 0) / 1000.0,
                    latency_jitter=entry.get("latency_jitter_ms", 0) / 1000.0,
                    fail_after=entry.get("fail_after"),
                )
            )
            ports.append(entry.get("port", 0))
        return cls(
            source_path=doc["source"],
            profiles=tuple(profiles),
            host=doc.get("host", "127.0.0.1"),
            ports=tuple(ports),
        )


class TokenBucket:
    """Paces one connection: consume() sleeps until the bytes fit the rate."""

    def __init__(self, rate, burst=TOKEN_BUCKET_BURST):
        self.rate = float(rate)
        self.burst = float(burst)
        self.tokens = float(burst)
        self.last_refill = time.monotonic()

    def consume(self, n):
        while True:
            now = time.monotonic()
            self.tokens = min(self.burst, self.tokens + (now - self.last_refill) * self.rate)
            self.last_refill = now
            if self.tokens >= n:
                self.tokens -= n
                return
            time.sleep((n - self.tokens) / self.rate)


class ReplicaServer(ThreadingHTTPServer):
    """One replica: profile, counters, and the shared source file."""

    daemon_threads = True

    def __init__(self, address, profile, source_path):
        self.profile = profile
        self.source_path = source_path
        self.source_size = os.path.getsize(source_path)
        self.counters = {"accepts": 0, "requests": 0, "bytes_served": 0}
        self.counters_lock = threading.Lock()
        self.dead = False
        super().__init__(address, _RangeHandler)

    def get_request(self):
        request = super().get_request()
        with self.counters_lock:
            self.counters["accepts"] += 1
        return request

    def count_served(self, n):
        """Add served payload bytes; True return means the fail_after budget
        is now exceeded and the connection must die."""
        with self.counters_lock:
            self.counters["bytes_served"] += n
            if (
                self.profile.fail_after is not None
                and self.counters["bytes_served"] >= self.profile.fail_after
            ):
                self.dead = True
        return self.dead


class _RangeHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def setup(self):
        super().setup()
        profile = self.server.profile
        self.bucket = TokenBucket(profile.rate_limit) if profile.rate_limit else None

    def log_message(self, fmt, *args):
        pass

    def _sleep_latency(self):
        profile = self.server.profile
        delay = profile.added_latency
        if profile.latency_jitter:
            delay += random.uniform(0, profile.latency_jitter)
        if delay:
            time.sleep(delay)

    def _count_request(self):
        with self.server.counters_lock:
            self.server.counters["requests"] += 1

    def _die(self):
        # Simulated crash: drop the TCP connection without a response.
        self.close_connection = True
        try:
            self.connection.close()
        except OSError:
            pass

    def do_HEAD(self):
        self._count_request()
        if self.server.dead:
            self._die()
            return
        if self.path != RESOURCE_PATH:
            self.send_error(404)
            return
        self._sleep_latency()
        self.send_response(200)
        self.send_header("Content-Length", str(self.server.source_size))
        self.send_header("Accept-Ranges", "bytes")
        self.end_headers()

    def do_GET(self):
        self._count_request()
        if self.server.dead:
            self._die()
            return
        if self.path != RESOURCE_PATH:
            self.send_error(404)
            return
        size = self.server.source_size
        header = self.headers.get("Range")
        if header is None:
            start, end, status = 0, size - 1, 200
        else:
            m = _RANGE_RE.match(header.strip())
            if not m:
                self._send_unsatisfiable(size)
                return
            start, end = int(m.group(1)), int(m.group(2))
            if start > end or end >= size:
                self._send_unsatisfiable(size)
                return
            status = 206
        self._sleep_latency()
        length = end - start + 1
        self.send_response(status)
        self.send_header("Content-Length", str(length))
        self.send_header("Accept-Ranges", "bytes")
        if status == 206:
            self.send_header("Content-Range", f"bytes {start}-{end}/{size}")
        self.end_headers()
        self._stream(start, length)

    def _send_unsatisfiable(self, size):
        self.send_response(416)
        self.send_header("Content-Range", f"bytes */{size}")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _stream(self, start, length):
        block = TOKEN_BUCKET_BURST
        with open(self.server.source_path, "rb") as src:
            src.seek(start)
            remaining = length
            while remaining > 0:
                data = src.read(min(block, remaining))
                if not data:
                    break
                if self.bucket:
                    self.bucket.consume(len(data))
                try:
                    self.wfile.write(data)
                except OSError:
                    self.close_connection = True
                    return
                remaining -= len(data)
                if self.server.count_served(len(data)):
                    self._die()
                    return


class Testbed:
    """A set of running replica servers plus their endpoints and counters."""

    def __init__(self, spec):
        self.spec = spec
        self.servers = {}
        self._threads = []
        self._running = False
        ports = spec.ports or (0,) * len(spec.profiles)
        try:
            for profile, port in zip(spec.profiles, ports):
                server = ReplicaServer((spec.host, port), profile, spec.source_path)
                self.servers[profile.replica_id] = server
        except OSError:
            self.stop()
            raise

    def start(self):
        for server in self.servers.values():
            thread = threading.Thread(target=server.serve_forever, daemon=True)
            thread.start()
            self._threads.append(thread)
        self._running = True
        return self

    @property
    def endpoints(self):
        return [
            ReplicaEndpoint(
                replica_id=rid,
                base_url=f"http://{server.server_address[0]}:{server.server_address[1]}",
                resource_path=RESOURCE_PATH,
            )
            for rid, server in self.servers.items()
        ]

    def counters(self, replica_id=None):
        if replica_id is not None:
            server = self.servers[replica_id]
            with server.counters_lock:
                return dict(server.counters)
        return {rid: self.counters(rid) for rid in self.servers}

    def stop(self):
        for server in self.servers.values():
            if self._running:
                server.shutdown()
            server.server_close()
        for thread in self._threads:
            thread.join(timeout=5)
        self._threads = []
        self._running = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_testbed(spec):
    """Spawn all replicas in the spec and return the running testbed."""
    if not os.path.exists(spec.source_path):
        raise FileNotFoundError(f"source file missing: {spec.source_path}")
    return Testbed(spec).start()


def retarget_fastest(profiles, *, latency=None, rate=None, factor=None):
    """Copy profiles with the fastest one (highest configured rate) slowed
    down: a fixed added latency, an absolute new rate, or a fraction of its
    configured rate. Used by bench conditions so the target is deterministic."""
    def configured(p):
        return p.rate_limit if p.rate_limit is not None else float("inf")

    fastest = max(profiles, key=configured)
    if (rate is not None or factor is not None) and fastest.rate_limit is None:
        raise ValueError("cannot scale an unlimited profile; give it an explicit rate")
    updated = []
    for p in profiles:
        if p.replica_id != fastest.replica_id:
            updated.append(p)
            continue
        changes = {}
        if latency is not None:
            changes["added_latency"] = latency
        if factor is not None:
            changes["rate_limit"] = p.rate_limit * factor
        elif rate is not None:
            changes["rate_limit"] = rate
        updated.append(replace(p, **changes))
    return updated
