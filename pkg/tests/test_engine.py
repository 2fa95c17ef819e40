import hashlib
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from conftest import MIB, make_file, sha256_file, uniform_profiles
from mdtp.engine import (
    DiscardSink,
    FileSink,
    IncompleteTransferError,
    InconsistentReplicaError,
    PayloadMismatchError,
    ProtocolError,
    ReplicaEndpoint,
    ReplicaSession,
    TransferAbortError,
    UnsupportedServerError,
    discover_size,
    download,
    merge_gaps,
)
from mdtp.scheduler import ChunkAssignment, PROBE
from mdtp.testbed import RESOURCE_PATH, ReplicaProfile


# -- endpoints ---------------------------------------------------------------


def test_endpoint_from_url():
    ep = ReplicaEndpoint.from_url("http://example.org:8080/files/data.bin?v=1", "r1")
    assert ep.base_url == "http://example.org:8080"
    assert ep.resource_path == "/files/data.bin?v=1"
    assert ep.url == "http://example.org:8080/files/data.bin?v=1"


def test_endpoint_validation():
    with pytest.raises(ValueError):
        ReplicaEndpoint("r1", "ftp://host", "/x")
    with pytest.raises(ValueError):
        ReplicaEndpoint("r1", "http://host", "no-slash")


# -- gap arithmetic ----------------------------------------------------------


def test_merge_gaps():
    assert merge_gaps([], 10) == [(0, 9)]
    assert merge_gaps([(0, 9)], 10) == []
    assert merge_gaps([(0, 3), (6, 9)], 10) == [(4, 5)]
    assert merge_gaps([(4, 9)], 10) == [(0, 3)]
    assert merge_gaps([(0, 3)], 10) == [(4, 9)]


# -- sinks --------------------------------------------------------------------


def test_file_sink_positional_writes(tmp_path):
    path = tmp_path / "out.bin"
    sink = FileSink(str(path), 10)
    try:
        sink.write(6, b"6789")
        sink.write(0, b"012345")
        assert sink.coverage_gaps() == []
        assert sink.digest() == hashlib.sha256(b"0123456789").hexdigest()
    finally:
        sink.close()
    assert path.read_bytes() == b"0123456789"


def test_file_sink_rejects_out_of_bounds(tmp_path):
    sink = FileSink(str(tmp_path / "out.bin"), 10)
    try:
        with pytest.raises(ValueError):
            sink.write(8, b"xyz")
    finally:
        sink.close()


def test_discard_sink_digests_out_of_order_writes():
    data = b"the quick brown fox jumps over the lazy dog"
    sink = DiscardSink(len(data))
    sink.write(10, data[10:20])
    sink.write(0, data[0:10])
    sink.write(30, data[30:])
    sink.write(20, data[20:30])
    assert sink.coverage_gaps() == []
    assert sink.digest() == hashlib.sha256(data).hexdigest()
    assert sink._pending == {}  # reorder buffer fully drained


def test_discard_sink_digest_requires_every_byte():
    sink = DiscardSink(10)
    sink.write(0, b"01234")
    assert sink.coverage_gaps() == [(5, 9)]
    with pytest.raises(IncompleteTransferError):
        sink.digest()


# -- misbehaving servers for protocol contracts --------------------------------


class _OneShotServer(ThreadingHTTPServer):
    daemon_threads = True


def serve(handler_cls):
    server = _OneShotServer(("127.0.0.1", 0), handler_cls)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    return server, ReplicaEndpoint("bad", f"http://{host}:{port}", RESOURCE_PATH)


class IgnoresRanges(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    body = b"x" * 100

    def log_message(self, *a):
        pass

    def do_HEAD(self):
        self.send_response(200)
        self.send_header("Content-Length", str(len(self.body)))
        self.send_header("Accept-Ranges", "bytes")
        self.end_headers()

    def do_GET(self):
        self.send_response(200)  # full body despite the Range header
        self.send_header("Content-Length", str(len(self.body)))
        self.end_headers()
        self.wfile.write(self.body)


class WrongLength(IgnoresRanges):
    def do_GET(self):
        self.send_response(206)
        self.send_header("Content-Length", "2")
        self.send_header("Content-Range", "bytes 0-1/100")
        self.end_headers()
        self.wfile.write(b"xx")  # shorter than any real chunk request


class NoRangeSupport(IgnoresRanges):
    def do_HEAD(self):
        self.send_response(200)
        self.send_header("Content-Length", str(len(self.body)))
        self.end_headers()


def test_full_body_response_is_protocol_error():
    server, endpoint = serve(IgnoresRanges)
    session = ReplicaSession(endpoint)
    try:
        with pytest.raises(ProtocolError):
            session.fetch(ChunkAssignment("bad", 0, 3, 0, PROBE))
    finally:
        session.close()
        server.shutdown()
        server.server_close()


def test_short_body_is_payload_mismatch():
    server, endpoint = serve(WrongLength)
    session = ReplicaSession(endpoint)
    try:
        with pytest.raises(PayloadMismatchError):
            session.fetch(ChunkAssignment("bad", 0, 9, 0, PROBE))
    finally:
        session.close()
        server.shutdown()
        server.server_close()


def test_missing_range_support_rejected():
    server, endpoint = serve(NoRangeSupport)
    session = ReplicaSession(endpoint)
    try:
        with pytest.raises(UnsupportedServerError):
            discover_size([session])
    finally:
        session.close()
        server.shutdown()
        server.server_close()


# -- size discovery ------------------------------------------------------------


def free_port_endpoint(rid="down"):
    # bind-then-close to get a port with nothing listening
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return ReplicaEndpoint(rid, f"http://127.0.0.1:{port}", RESOURCE_PATH)


def test_discover_size_unanimous(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(3), source_file)
    sessions = [ReplicaSession(ep) for ep in tb.endpoints]
    try:
        assert discover_size(sessions) == 3 * MIB + 517
    finally:
        for s in sessions:
            s.close()


def test_discover_size_failover_skips_dead_replica(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(1), source_file)
    sessions = [ReplicaSession(free_port_endpoint()), ReplicaSession(tb.endpoints[0])]
    try:
        assert discover_size(sessions) == 3 * MIB + 517
        assert sessions[0].failed and not sessions[1].failed
    finally:
        for s in sessions:
            s.close()


def test_discover_size_mismatch_is_inconsistent(tmp_path, testbed_factory):
    a = make_file(tmp_path / "a.bin", 4096, seed=1)
    b = make_file(tmp_path / "b.bin", 4097, seed=1)
    tb1 = testbed_factory([ReplicaProfile("r1")], a)
    tb2 = testbed_factory([ReplicaProfile("r2")], b)
    sessions = [ReplicaSession(tb1.endpoints[0]), ReplicaSession(tb2.endpoints[0])]
    try:
        with pytest.raises(InconsistentReplicaError):
            discover_size(sessions)
    finally:
        for s in sessions:
            s.close()


def test_discover_size_all_dead_aborts():
    sessions = [ReplicaSession(free_port_endpoint(f"d{i}")) for i in range(2)]
    with pytest.raises(TransferAbortError):
        discover_size(sessions)


# -- downloads -----------------------------------------------------------------


def test_single_replica_download(tmp_path, source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(1), source_file)
    out = tmp_path / "out.bin"
    report = download(tb.endpoints, out_path=str(out), initial_chunk=256 * 1024,
                      large_chunk=MIB)
    assert report.content_sha256 == sha256_file(source_file)
    assert out.read_bytes() == open(source_file, "rb").read()
    assert report.replicas_used_fraction == 1.0


def test_download_conservation_invariants(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(4), source_file)
    report = download(tb.endpoints, discard=True, initial_chunk=128 * 1024,
                      large_chunk=512 * 1024)
    assert sum(r["bytes"] for r in report.replicas.values()) == report.file_size
    assert sum(r["requests"] for r in report.replicas.values()) == len(report.events)
    sizes_from_events = sorted(e["size"] for e in report.events)
    sizes_from_replicas = sorted(
        s for r in report.replicas.values() for s in r["chunk_sizes"]
    )
    assert sizes_from_events == sizes_from_replicas


def test_download_single_session_per_replica(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(3), source_file)
    download(tb.endpoints, discard=True, initial_chunk=256 * 1024, large_chunk=MIB)
    for rid, counters in tb.counters().items():
        assert counters["accepts"] == 1, f"{rid} saw {counters['accepts']} connections"


def test_download_survives_replica_failure(tmp_path, testbed_factory):
    source = make_file(tmp_path / "src.bin", 8 * MIB, seed=9)
    profiles = [
        ReplicaProfile("healthy"),
        ReplicaProfile("dying", fail_after=1 * MIB),
    ]
    tb = testbed_factory(profiles, source)
    report = download(tb.endpoints, discard=True, initial_chunk=512 * 1024,
                      large_chunk=2 * MIB)
    assert report.content_sha256 == sha256_file(source)
    assert report.replicas["dying"]["failures"] >= 1
    assert sum(r["bytes"] for r in report.replicas.values()) == 8 * MIB


def test_download_all_replicas_dead_aborts():
    with pytest.raises(TransferAbortError):
        download([free_port_endpoint()], discard=True)


def test_download_sink_argument_required(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(1), source_file)
    with pytest.raises(ValueError):
        download(tb.endpoints)
    with pytest.raises(ValueError):
        download(tb.endpoints, out_path="x", discard=True)


def test_download_rejects_duplicate_ids(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(1), source_file)
    ep = tb.endpoints[0]
    with pytest.raises(ValueError):
        download([ep, ep], discard=True)


def test_download_report_shape(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(2), source_file)
    report = download(tb.endpoints, discard=True, initial_chunk=256 * 1024,
                      large_chunk=MIB)
    doc = report.to_dict()
    assert set(doc) == {
        "policy", "file_size", "total_wall_time", "content_sha256",
        "replicas_used_fraction", "config", "replicas", "events",
    }
    assert doc["policy"] == "mdtp"
    assert doc["config"]["initial_chunk"] == 256 * 1024
    slim = report.to_dict(include_events=False)
    assert "events" not in slim
    assert report.total_wall_time > 0


def test_static_policy_download(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(3), source_file)
    report = download(tb.endpoints, policy="static", static_chunk=512 * 1024,
                      discard=True)
    assert report.content_sha256 == sha256_file(source_file)
    sizes = {e["size"] for e in report.events}
    # uniform chunks except the truncated tail
    assert 512 * 1024 in sizes and len(sizes) <= 2


def test_probe_round_uses_initial_chunk(source_file, testbed_factory):
    tb = testbed_factory(uniform_profiles(3), source_file)
    report = download(tb.endpoints, discard=True, initial_chunk=128 * 1024,
                      large_chunk=MIB)
    probes = [e for e in report.events if e["kind"] == "probe"]
    assert len(probes) == 3
    assert all(p["size"] == 128 * 1024 for p in probes)
    assert all(p["round"] == 0 for p in probes)
