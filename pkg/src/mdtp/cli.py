"""Command-line entry points: download, bench, queue-model, testbed."""

import argparse
import json
import sys

from . import bench, engine, queueing, testbed
from .scheduler import DEFAULT_MIN_CHUNK, POLICY_MDTP, POLICY_STATIC
from .units import format_rate, format_size, parse_size


def _size(text):
    try:
        return parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _rates(text):
    try:
        rates = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}")
    if not rates:
        raise argparse.ArgumentTypeError("empty rate list")
    return rates


def build_parser():
    parser = argparse.ArgumentParser(prog="mdtp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    dl = sub.add_parser("download", help="multi-source download from replica URLs")
    dl.add_argument("urls", nargs="+", help="replica URLs serving identical content")
    dl.add_argument("--policy", choices=[POLICY_MDTP, POLICY_STATIC], default=POLICY_MDTP)
    dl.add_argument("--initial-chunk", type=_size, default=None, help="probe chunk size")
    dl.add_argument("--large-chunk", type=_size, default=None, help="fastest-replica chunk size")
    dl.add_argument("--chunk-size", type=_size, default=None, help="uniform size for --policy static")
    dl.add_argument("--min-chunk", type=_size, default=DEFAULT_MIN_CHUNK)
    out = dl.add_mutually_exclusive_group(required=True)
    out.add_argument("--out", help="output file path")
    out.add_argument("--discard", action="store_true", help="verify and digest without writing")
    dl.add_argument("--report", help="write the transfer report as JSON here")
    dl.add_argument("--timeout", type=float, default=30.0)
    dl.set_defaults(func=cmd_download)

    be = sub.add_parser("bench", help="run the experiment matrix against a local testbed")
    be.add_argument("--spec", help="experiment spec JSON (sizes, policies, conditions, replicas)")
    be.add_argument("--sizes", type=str, default=None, help="comma list, e.g. 64MiB,256MiB")
    be.add_argument("--policies", type=str, default=None, help="comma list of mdtp,static")
    be.add_argument("--repeats", type=int, default=None)
    be.add_argument("--chunk-size", type=_size, default=None, help="static-policy chunk size")
    be.add_argument("--add-latency", type=float, default=None,
                    help="extra condition: seconds of latency on the fastest replica")
    be.add_argument("--throttle-factor", type=float, default=None,
                    help="extra condition: scale the fastest replica's rate by this factor")
    be.add_argument("--disk", action="store_true",
                    help="write runs to disk so timing includes sink writes")
    be.add_argument("--seed", type=int, default=None, help="source-content seed")
    be.add_argument("--report", help="write the bench report as JSON here")
    be.add_argument("--csv", help="write the summary table as CSV here")
    be.set_defaults(func=cmd_bench)

    qm = sub.add_parser("queue-model", help="analytic multi-source vs single-source wait times")
    qm.add_argument("--arrival-rate", type=float, required=True)
    qm.add_argument("--service-rates", type=_rates, required=True,
                    help="comma list of per-replica service rates")
    qm.add_argument("--single-rate", type=float, default=None,
                    help="single-server rate (default: fastest replica)")
    qm.set_defaults(func=cmd_queue_model)

    tb = sub.add_parser("testbed", help="serve a file from throttled local replicas")
    tb.add_argument("--spec", required=True, help="testbed spec JSON")
    tb.add_argument("--duration", type=float, default=None,
                    help="serve for this many seconds, then exit (default: until Ctrl+C)")
    tb.set_defaults(func=cmd_testbed)

    return parser


def cmd_download(args):
    endpoints = [engine.ReplicaEndpoint.from_url(url, f"r{i + 1}") for i, url in enumerate(args.urls)]
    if args.policy == POLICY_STATIC and args.chunk_size is None:
        print("error: --policy static requires --chunk-size", file=sys.stderr)
        return 2
    try:
        report = engine.download(
            endpoints,
            policy=args.policy,
            initial_chunk=args.initial_chunk,
            large_chunk=args.large_chunk,
            min_chunk=args.min_chunk,
            static_chunk=args.chunk_size,
            out_path=args.out,
            discard=args.discard,
            timeout=args.timeout,
        )
    except engine.TransferError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code

    rate = report.file_size / report.total_wall_time if report.total_wall_time > 0 else 0.0
    print(f"policy        {report.policy}")
    print(f"size          {format_size(report.file_size)} ({report.file_size} bytes)")
    print(f"wall time     {report.total_wall_time:.3f}s ({format_rate(rate)})")
    print(f"sha256        {report.content_sha256}")
    print(f"replicas used {report.replicas_used_fraction:.0%}")
    for rid, stats in report.replicas.items():
        print(
            f"  {rid}: {stats['requests']} requests, {format_size(stats['bytes'])}"
            + (f", {stats['failures']} failures" if stats["failures"] else "")
        )
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        print(f"report written to {args.report}")
    return 0


def cmd_bench(args):
    if args.spec:
        spec = bench.ExperimentSpec.from_file(args.spec)
    else:
        sizes = [parse_size(s) for s in (args.sizes or "64MiB").split(",")]
        spec = bench.ExperimentSpec(file_sizes=tuple(sizes))
    overrides = {}
    if args.sizes and args.spec:
        overrides["file_sizes"] = tuple(parse_size(s) for s in args.sizes.split(","))
    if args.policies:
        overrides["policies"] = tuple(p.strip() for p in args.policies.split(","))
    if args.repeats:
        overrides["repeats"] = args.repeats
    if args.chunk_size:
        overrides["static_chunk"] = args.chunk_size
    if args.disk:
        overrides["include_disk"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    conditions = list(spec.conditions)
    if args.add_latency is not None:
        conditions.append(bench.Condition(kind=bench.ADD_LATENCY, latency=args.add_latency))
    if args.throttle_factor is not None:
        conditions.append(bench.Condition(kind=bench.THROTTLE, factor=args.throttle_factor))
    if len(conditions) != len(spec.conditions):
        overrides["conditions"] = tuple(conditions)
    if overrides:
        from dataclasses import replace

        spec = replace(spec, **overrides)

    def progress(cell, i, report):
        print(
            f"[{cell.policy:>6} {cell.condition:<20} {format_size(cell.file_size):>8}] "
            f"run {i + 1}/{spec.repeats}: {report.total_wall_time:.3f}s",
            file=sys.stderr,
        )

    report = bench.run_experiment(spec, progress=progress)
    print(report.render_table())
    if args.report:
        report.save(args.report)
        print(f"report written to {args.report}", file=sys.stderr)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.to_csv())
        print(f"csv written to {args.csv}", file=sys.stderr)
    return 1 if any(c.incomplete for c in report.cells) else 0


def cmd_queue_model(args):
    try:
        params = queueing.QueueModelParams(
            arrival_rate=args.arrival_rate,
            service_rates=tuple(args.service_rates),
            single_rate=args.single_rate,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = queueing.compare(params)

    def fmt(value):
        return "unstable" if value is None else f"{value:.6g}s"

    print(f"arrival rate          {result['arrival_rate']:g}")
    print(f"replica service rates {', '.join(f'{m:g}' for m in result['service_rates'])}")
    print(f"single service rate   {result['single_rate']:g}")
    print(f"utilization multi     {result['utilization_multi']:.6g}")
    print(f"utilization single    {result['utilization_single']:.6g}")
    print(f"wait multi            {fmt(result['wait_multi'])}")
    print(f"wait single           {fmt(result['wait_single'])}")
    return 0


def cmd_testbed(args):
    import time

    spec = testbed.TestbedSpec.from_file(args.spec)
    tb = testbed.start_testbed(spec)
    print("replicas serving" + ("" if args.duration else " (Ctrl+C to stop)") + ":")
    for ep in tb.endpoints:
        print(f"  {ep.replica_id}: {ep.url}")
    sys.stdout.flush()
    try:
        if args.duration is not None:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        tb.stop()
        print("counters:")
        for rid, counters in tb.counters().items():
            print(f"  {rid}: {counters}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
