"""Adaptive multi-source downloader with throughput-proportional chunking.

A file is fetched from several replicas at once over HTTP byte ranges.
After a uniform probe round, each replica's chunk size tracks its observed
throughput so that all outstanding requests finish at about the same time;
a static-chunking baseline, an analytic queue-model comparison, and a
throttled local testbed round out the package for experiments.
"""

from .bench import (
    BenchReport,
    Condition,
    ExperimentSpec,
    SummaryStats,
    run_experiment,
    select_chunk_params,
    summarize,
)
from .engine import (
    DiscardSink,
    FileSink,
    IncompleteTransferError,
    InconsistentReplicaError,
    PayloadMismatchError,
    ProtocolError,
    ReplicaEndpoint,
    ReplicaSession,
    TransferAbortError,
    TransferError,
    TransferReport,
    UnsupportedServerError,
    discover_size,
    download,
)
from .queueing import (
    QueueModelParams,
    utilization_multi,
    utilization_single,
    wait_multi,
    wait_single,
)
from .scheduler import (
    ChunkAssignment,
    ChunkScheduler,
    RangeLedger,
    SchedulerConfig,
    classify_fast,
    compute_chunk_size,
    fastest_throughput,
    geometric_mean,
)
from .testbed import ReplicaProfile, Testbed, TestbedSpec, start_testbed

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "ChunkAssignment",
    "ChunkScheduler",
    "Condition",
    "DiscardSink",
    "ExperimentSpec",
    "FileSink",
    "IncompleteTransferError",
    "InconsistentReplicaError",
    "PayloadMismatchError",
    "ProtocolError",
    "QueueModelParams",
    "RangeLedger",
    "ReplicaEndpoint",
    "ReplicaProfile",
    "ReplicaSession",
    "SchedulerConfig",
    "SummaryStats",
    "Testbed",
    "TestbedSpec",
    "TransferAbortError",
    "TransferError",
    "TransferReport",
    "UnsupportedServerError",
    "classify_fast",
    "compute_chunk_size",
    "discover_size",
    "download",
    "fastest_throughput",
    "geometric_mean",
    "run_experiment",
    "select_chunk_params",
    "start_testbed",
    "summarize",
    "utilization_multi",
    "utilization_single",
    "wait_multi",
    "wait_single",
]
