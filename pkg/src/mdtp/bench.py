"""Experiment harness: repeated transfers against the local testbed with
mean / standard-error reporting per (file size, policy, condition) cell.

Conditions mirror the interesting network situations: an untouched
baseline, extra per-request latency on the fastest replica, and a
bandwidth throttle on the fastest replica. Cells run sequentially so they
do not contend for local bandwidth; each cell repeats its transfer and
reports summary statistics plus per-replica request behavior.
"""

import json
import math
import os
import random
import statistics
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

from . import engine, testbed
from .scheduler import DEFAULT_MIN_CHUNK, POLICY_MDTP, POLICY_STATIC
from .units import GIB, MIB, format_size, parse_size

# (threshold, initial, large): files up to the threshold use the pair.
# Sub-GiB files fall back to a desk-scale pair with the same 1:10 shape.
_CHUNK_TABLE = [
    (1 * GIB - 1, 1 * MIB, 10 * MIB),
    (8 * GIB, 4 * MIB, 40 * MIB),
    (None, 16 * MIB, 160 * MIB),
]

DEFAULT_STATIC_CHUNK = 6 * MIB


def select_chunk_params(file_size):
    """Initial and large chunk sizes for a file of the given size."""
    if file_size <= 0:
        raise ValueError(f"file_size must be positive, got {file_size}")
    for threshold, initial, large in _CHUNK_TABLE:
        if threshold is None or file_size <= threshold:
            return initial, large
    raise AssertionError("unreachable")


class SummaryStats(NamedTuple):
    mean: float
    std_error: float
    n: int


def summarize(values):
    """Mean and standard error (sample stddev / sqrt(n)) of repeated runs.

    A single run has no spread to estimate; it reports 0.0 with n=1 so
    callers can flag it.
    """
    values = list(values)
    if not values:
        raise ValueError("summarize of an empty sample")
    if len(values) == 1:
        return SummaryStats(values[0], 0.0, 1)
    return SummaryStats(
        statistics.mean(values),
        statistics.stdev(values) / math.sqrt(len(values)),
        len(values),
    )


BASELINE = "baseline"
ADD_LATENCY = "add_latency"
THROTTLE = "throttle"


@dataclass(frozen=True)
class Condition:
    """Network condition for one cell; latency/throttle target the replica
    with the highest configured rate so the condition is deterministic."""

    kind: str = BASELINE
    latency: float | None = None
    rate: float | None = None
    factor: float | None = None

    def __post_init__(self):
        if self.kind not in (BASELINE, ADD_LATENCY, THROTTLE):
            raise ValueError(f"unknown condition {self.kind!r}")
        if self.kind == ADD_LATENCY and (self.latency is None or self.latency < 0):
            raise ValueError("add_latency needs a non-negative latency")
        if self.kind == THROTTLE and (self.rate is None) == (self.factor is None):
            raise ValueError("throttle needs exactly one of rate / factor")

    def apply(self, profiles):
        if self.kind == BASELINE:
            return list(profiles)
        if self.kind == ADD_LATENCY:
            return testbed.retarget_fastest(profiles, latency=self.latency)
        return testbed.retarget_fastest(profiles, rate=self.rate, factor=self.factor)

    def label(self):
        if self.kind == ADD_LATENCY:
            return f"add_latency({self.latency:g}s)"
        if self.kind == THROTTLE:
            if self.factor is not None:
                return f"throttle(x{self.factor:g})"
            return f"throttle({format_size(int(self.rate))}/s)"
        return BASELINE

    @classmethod
    def from_dict(cls, doc):
        return cls(
            kind=doc.get("kind", BASELINE),
            latency=doc.get("latency"),
            rate=doc.get("rate"),
            factor=doc.get("factor"),
        )


def default_profiles():
    """Six replicas: one dominant fast source plus a spread of slower peers,
    rates in bytes/second."""
    rates = [32, 8, 7, 6, 5, 4]
    return [
        testbed.ReplicaProfile(replica_id=f"r{i + 1}", rate_limit=r * MIB)
        for i, r in enumerate(rates)
    ]


@dataclass(frozen=True)
class ExperimentSpec:
    """The cell matrix: sizes x policies x conditions, with shared chunk
    parameters and testbed profiles."""

    file_sizes: tuple
    policies: tuple = (POLICY_MDTP, POLICY_STATIC)
    conditions: tuple = (Condition(),)
    repeats: int = 10
    profiles: tuple = None
    initial_chunk: int | None = None
    large_chunk: int | None = None
    min_chunk: int = DEFAULT_MIN_CHUNK
    static_chunk: int = DEFAULT_STATIC_CHUNK
    include_disk: bool = False
    host: str = "127.0.0.1"
    seed: int = 7

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.file_sizes)
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError(f"file sizes must be positive, got {sizes}")
        object.__setattr__(self, "file_sizes", sizes)
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        profiles = tuple(self.profiles) if self.profiles else tuple(default_profiles())
        object.__setattr__(self, "profiles", profiles)

    @classmethod
    def from_file(cls, path):
        """Load from JSON; sizes accept suffixed strings like "256MiB"."""
        with open(path) as fh:
            doc = json.load(fh)
        profiles = None
        if "replicas" in doc:
            profiles = [
                testbed.ReplicaProfile(
                    replica_id=entry["id"],
                    rate_limit=entry.get("rate_limit"),
                    added_latency=entry.get("latency_ms", 0) / 1000.0,
                    fail_after=entry.get("fail_after"),
                )
                for entry in doc["replicas"]
            ]
        conditions = [Condition.from_dict(c) for c in doc.get("conditions", [{}])]
        return cls(
            file_sizes=tuple(parse_size(s) for s in doc["file_sizes"]),
            policies=tuple(doc.get("policies", (POLICY_MDTP, POLICY_STATIC))),
            conditions=tuple(conditions),
            repeats=doc.get("repeats", 10),
            profiles=profiles,
            initial_chunk=parse_size(doc["initial_chunk"]) if "initial_chunk" in doc else None,
            large_chunk=parse_size(doc["large_chunk"]) if "large_chunk" in doc else None,
            static_chunk=parse_size(doc.get("static_chunk", DEFAULT_STATIC_CHUNK)),
            include_disk=doc.get("include_disk", False),
            host=doc.get("host", "127.0.0.1"),
            seed=doc.get("seed", 7),
        )


@dataclass
class BenchCell:
    """Results for one (size, policy, condition) combination."""

    file_size: int
    policy: str
    condition: str
    runs: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def incomplete(self):
        return bool(self.errors)

    def times(self):
        return [r["total_wall_time"] for r in self.runs]

    def stats(self):
        return summarize(self.times())

    def utilization(self):
        return statistics.mean(r["replicas_used_fraction"] for r in self.runs)

    def request_counts(self):
        """Per-replica request counts, averaged over runs."""
        totals = {}
        for run in self.runs:
            for rid, stats in run["replicas"].items():
                totals.setdefault(rid, []).append(stats["requests"])
        return {rid: statistics.mean(v) for rid, v in sorted(totals.items())}

    def to_dict(self):
        doc = {
            "file_size": self.file_size,
            "policy": self.policy,
            "condition": self.condition,
            "incomplete": self.incomplete,
            "errors": self.errors,
            "runs": self.runs,
        }
        if self.runs:
            stats = self.stats()
            doc.update(
                mean_time=stats.mean,
                std_error=stats.std_error,
                n=stats.n,
                utilization=self.utilization(),
                request_counts=self.request_counts(),
            )
        return doc


@dataclass
class BenchReport:
    cells: list
    spec_echo: dict

    def cell(self, file_size, policy, condition_label):
        for c in self.cells:
            if (c.file_size, c.policy, c.condition) == (file_size, policy, condition_label):
                return c
        raise KeyError((file_size, policy, condition_label))

    def to_dict(self):
        return {"spec": self.spec_echo, "cells": [c.to_dict() for c in self.cells]}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def render_table(self):
        """Aligned text summary, one row per cell."""
        header = f"{'size':>10}  {'policy':<8}  {'condition':<22}  {'mean(s)':>9}  {'se(s)':>7}  {'util':>5}  n"
        lines = [header, "-" * len(header)]
        for c in self.cells:
            if c.runs:
                stats = c.stats()
                lines.append(
                    f"{format_size(c.file_size):>10}  {c.policy:<8}  {c.condition:<22}  "
                    f"{stats.mean:>9.3f}  {stats.std_error:>7.3f}  {c.utilization():>5.2f}  {stats.n}"
                )
            else:
                lines.append(
                    f"{format_size(c.file_size):>10}  {c.policy:<8}  {c.condition:<22}  "
                    f"{'failed':>9}  {'-':>7}  {'-':>5}  0"
                )
        return "\n".join(lines)

    def to_csv(self):
        rows = ["file_size,policy,condition,mean_time,std_error,utilization,n,incomplete"]
        for c in self.cells:
            if c.runs:
                stats = c.stats()
                rows.append(
                    f"{c.file_size},{c.policy},{c.condition},{stats.mean:.6f},"
                    f"{stats.std_error:.6f},{c.utilization():.4f},{stats.n},{c.incomplete}"
                )
            else:
                rows.append(f"{c.file_size},{c.policy},{c.condition},,,,0,True")
        return "\n".join(rows) + "\n"


def make_source_file(path, size, seed):
    """Deterministic pseudo-random file content for a given seed."""
    rng = random.Random(seed)
    with open(path, "wb") as fh:
        remaining = size
        while remaining > 0:
            block = rng.randbytes(min(1 << 20, remaining))
            fh.write(block)
            remaining -= len(block)
    return path


def run_transfer_cell(cell, spec, source_path, profiles, progress=None):
    """Run `repeats` transfers for one cell against a fresh testbed.

    Transfers discard payload by default so timing excludes disk writes;
    include_disk routes each run through a real output file instead.
    """
    tb_spec = testbed.TestbedSpec(source_path=source_path, profiles=tuple(profiles), host=spec.host)
    tb = testbed.start_testbed(tb_spec)
    try:
        for i in range(spec.repeats):
            sink_args = {"discard": True}
            scratch = None
            if spec.include_disk:
                scratch = source_path + f".out-{cell.policy}-{i}"
                sink_args = {"out_path": scratch}
            try:
                report = engine.download(
                    tb.endpoints,
                    policy=cell.policy,
                    initial_chunk=spec.initial_chunk or select_chunk_params(cell.file_size)[0],
                    large_chunk=spec.large_chunk or select_chunk_params(cell.file_size)[1],
                    min_chunk=spec.min_chunk,
                    static_chunk=spec.static_chunk if cell.policy == POLICY_STATIC else None,
                    **sink_args,
                )
            except engine.TransferError as exc:
                cell.errors.append(f"run {i}: {type(exc).__name__}: {exc}")
                continue
            finally:
                if scratch and os.path.exists(scratch):
                    os.unlink(scratch)
            cell.runs.append(report.to_dict(include_events=False))
            if progress:
                progress(cell, i, report)
    finally:
        tb.stop()
    return cell


def run_experiment(spec, progress=None):
    """Execute the full cell matrix sequentially and collect a BenchReport.

    A failing run is recorded in its cell's error list and the matrix keeps
    going; the cell is marked incomplete.
    """
    cells = []
    with tempfile.TemporaryDirectory(prefix="mdtp-bench-") as workdir:
        for file_size in spec.file_sizes:
            source = os.path.join(workdir, f"src-{file_size}.bin")
            make_source_file(source, file_size, spec.seed)
            for condition in spec.conditions:
                profiles = condition.apply(spec.profiles)
                for policy in spec.policies:
                    cell = BenchCell(file_size, policy, condition.label())
                    run_transfer_cell(cell, spec, source, profiles, progress=progress)
                    cells.append(cell)
    spec_echo = {
        "file_sizes": list(spec.file_sizes),
        "policies": list(spec.policies),
        "conditions": [c.label() for c in spec.conditions],
        "repeats": spec.repeats,
        "initial_chunk": spec.initial_chunk,
        "large_chunk": spec.large_chunk,
        "static_chunk": spec.static_chunk,
        "min_chunk": spec.min_chunk,
        "include_disk": spec.include_disk,
        "seed": spec.seed,
        "profiles": [
            {
                "id": p.replica_id,
                "rate_limit": p.rate_limit,
                "latency_ms": p.added_latency * 1000.0,
                "fail_after": p.fail_after,
            }
            for p in spec.profiles
        ],
    }
    return BenchReport(cells=cells, spec_echo=spec_echo)
