"""Command line front end.

Subcommands:
  reconstruct   parse capture streams and write one dag document per request
  synth         generate a synthetic capture plus its ground truth
  diff          compare reconstructed dag documents against ground truth
  render        print gantt charts or a summary table for dag documents

Exit codes: 0 success, 1 data errors (parse failures in strict mode,
unsorted streams, non-empty diffs), 2 usage and configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import ExitStack
from pathlib import Path

from .dag import (
    DagValidationError,
    RequestDag,
    build_all_dags,
    export_json,
    render_gantt,
    render_summary,
    summarize,
)
from .engine import ReplayEngine
from .ingest import (
    BACKENDS,
    IngestConfig,
    MalformedLineError,
    ParseStats,
    UnsortedStreamError,
    filter_records,
    merge_streams,
    read_stream,
)
from .records import Endpoint
from .synth import (
    FaultMode,
    GroundTruth,
    InvalidTopologyError,
    compare,
    demo_topology,
    inject_faults,
    load_topology,
    random_topology,
    simulate,
    write_streams,
)


def _endpoint(text: str) -> Endpoint:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected ip:port, got {text!r}")
    return Endpoint(host, int(port))


def _fail(message: str, code: int) -> int:
    print(f"reqflow: {message}", file=sys.stderr)
    return code


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ----------------------------------------------------------------------
# reconstruct

def _load_config(path: str) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("config must be a json object")
    return doc


def cmd_reconstruct(args: argparse.Namespace) -> int:
    config = {}
    if args.config:
        try:
            config = _load_config(args.config)
        except (OSError, ValueError) as exc:
            return _fail(f"bad config {args.config}: {exc}", 2)

    backend = args.backend or config.get("backend", "ftrace")
    if backend not in BACKENDS:
        return _fail(f"unknown backend {backend!r}", 2)
    try:
        gateways = list(args.gateway or ()) or [
            _endpoint(item) for item in config.get("gateways", ())
        ]
    except argparse.ArgumentTypeError as exc:
        return _fail(str(exc), 2)
    if not gateways:
        return _fail("at least one --gateway ip:port is required", 2)
    user_events = tuple(args.user_event or config.get("user_events", ()))
    pids = tuple(args.pid or config.get("pids", ()))
    follow_forks = args.follow_forks or bool(config.get("follow_forks", False))
    strict = args.strict or bool(config.get("strict", False))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = ParseStats()
    engine = ReplayEngine(gateway_endpoints=gateways, user_events=user_events)

    try:
        with ExitStack() as stack:
            handles = []
            for name in args.inputs:
                try:
                    handles.append(stack.enter_context(open(name)))
                except OSError as exc:
                    return _fail(f"cannot open input: {exc}", 2)
            streams = [
                read_stream(handle, backend=backend, strict=strict, stats=stats)
                for handle in handles
            ]
            records = merge_streams(streams)
            if pids or follow_forks:
                records = filter_records(
                    records,
                    IngestConfig(
                        backend=backend,
                        pid_allowlist=frozenset(pids),
                        follow_forks=follow_forks,
                    ),
                )
            for record in records:
                engine.handle(record)
    except MalformedLineError as exc:
        return _fail(f"parse failure: {exc}", 1)
    except UnsortedStreamError as exc:
        return _fail(f"input not time ordered: {exc}", 1)

    snapshot = engine.finalize()
    try:
        dags = list(build_all_dags(snapshot))
    except DagValidationError as exc:
        return _fail(f"dag construction failed: {exc}", 1)

    for dag in dags:
        (out / f"trace_{dag.trace_id}.json").write_text(export_json(dag))
        if args.gantt:
            (out / f"trace_{dag.trace_id}.gantt.txt").write_text(render_gantt(dag))
    summary = render_summary(summarize(dags)) if dags else "traces 0\n"
    (out / "summary.txt").write_text(summary)
    diagnostics = {
        "minted_traces": snapshot.minted_traces,
        "counters": dict(sorted(snapshot.counters.items())),
        "unattributed": dict(sorted(snapshot.unattributed.items())),
        "parse": {
            "parsed": stats.parsed,
            "skipped": stats.skipped,
            "malformed": stats.malformed,
            "errors": stats.errors,
        },
    }
    _write_json(out / "diagnostics.json", diagnostics)
    print(f"reconstructed {len(dags)} traces from {stats.parsed} records -> {out}")
    return 0


# ----------------------------------------------------------------------
# synth

def cmd_synth(args: argparse.Namespace) -> int:
    try:
        if args.demo:
            topology = demo_topology()
        elif args.topology:
            topology = load_topology(args.topology)
        else:
            topology = random_topology(args.random_seed)
        streams, truth = simulate(
            topology, args.requests, args.cpus, args.seed,
            duplicate_receives=args.duplicate_receives,
        )
    except (InvalidTopologyError, ValueError) as exc:
        return _fail(str(exc), 2)

    manifest = []
    faults = []
    if args.drop_user is not None:
        faults.append(FaultMode.drop_user_events(args.drop_user))
    if args.drop_structural is not None:
        faults.append(FaultMode.drop_structural(args.drop_structural))
    if args.truncate is not None:
        faults.append(FaultMode.truncate(args.truncate))
    for mode in faults:
        streams, dropped = inject_faults(streams, mode, args.fault_seed)
        manifest.extend(dropped)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_streams(streams, out, args.backend)
    _write_json(out / "truth.json", truth.to_doc())
    _write_json(out / "topology.json", topology.to_doc())
    if faults:
        _write_json(out / "fault_manifest.json", manifest)
    total = sum(len(stream) for stream in streams)
    print(f"wrote {total} records across {len(paths)} streams -> {out}")
    return 0


# ----------------------------------------------------------------------
# diff

def _collect_dag_paths(arguments: list[str]) -> list[Path]:
    paths: list[Path] = []
    for name in arguments:
        path = Path(name)
        if path.is_dir():
            paths.extend(sorted(path.glob("trace_*.json")))
        else:
            paths.append(path)
    return paths


def cmd_diff(args: argparse.Namespace) -> int:
    try:
        truth = GroundTruth.from_doc(json.loads(Path(args.truth).read_text()))
    except (OSError, KeyError, ValueError) as exc:
        return _fail(f"bad truth file {args.truth}: {exc}", 2)
    docs = []
    for path in _collect_dag_paths(args.dags):
        try:
            docs.append(json.loads(path.read_text()))
        except (OSError, ValueError) as exc:
            return _fail(f"bad dag document {path}: {exc}", 1)
    report = compare(docs, truth)
    sys.stdout.write(report.render())
    clean = report.structure_empty if args.ignore_tallies else report.empty
    return 0 if clean else 1


# ----------------------------------------------------------------------
# render

def cmd_render(args: argparse.Namespace) -> int:
    if not args.summary and args.width < 40:
        return _fail("--width must be at least 40", 2)
    dags = []
    for name in args.dags:
        try:
            dags.append(RequestDag.from_doc(json.loads(Path(name).read_text())))
        except (OSError, KeyError, ValueError) as exc:
            return _fail(f"bad dag document {name}: {exc}", 1)
    if args.summary:
        sys.stdout.write(render_summary(summarize(dags)))
        return 0
    for dag in dags:
        sys.stdout.write(render_gantt(dag, width=args.width))
    return 0


# ----------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reqflow",
        description="reconstruct per-request flow dags from kernel trace captures",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="replay capture streams into dag documents")
    p.add_argument("inputs", nargs="+", help="per-cpu capture files, each time ordered")
    p.add_argument("--backend", choices=BACKENDS, default=None)
    p.add_argument("--gateway", type=_endpoint, action="append",
                   help="entry endpoint as ip:port; repeatable")
    p.add_argument("--user-event", action="append", dest="user_event",
                   help="event name to tally against active spans; repeatable")
    p.add_argument("--pid", type=int, action="append",
                   help="restrict replay to these pids; repeatable")
    p.add_argument("--follow-forks", action="store_true",
                   help="extend the pid filter across forks")
    p.add_argument("--strict", action="store_true",
                   help="fail on the first malformed line instead of counting it")
    p.add_argument("--config", help="json file providing defaults for the flags above")
    p.add_argument("--gantt", action="store_true", help="also write gantt text per trace")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("synth", help="generate a synthetic capture with ground truth")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--topology", help="topology json file")
    source.add_argument("--demo", action="store_true", help="bundled two-tier topology")
    source.add_argument("--random-seed", type=int, dest="random_seed",
                        help="generate a random topology from this seed")
    p.add_argument("--requests", type=int, default=10)
    p.add_argument("--cpus", type=int, default=2)
    p.add_argument("--seed", type=int, default=1, help="workload seed")
    p.add_argument("--backend", choices=BACKENDS, default="ftrace")
    p.add_argument("--duplicate-receives", action="store_true",
                   help="emit a second receive probe per message")
    p.add_argument("--drop-user", type=float, default=None, metavar="P",
                   help="drop each user event record with probability P")
    p.add_argument("--drop-structural", type=float, default=None, metavar="P",
                   help="drop each structural record with probability P")
    p.add_argument("--truncate", type=int, default=None, metavar="NS",
                   help="drop every record after this timestamp")
    p.add_argument("--fault-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("diff", help="compare dag documents against ground truth")
    p.add_argument("dags", nargs="+", help="dag json files or directories of trace_*.json")
    p.add_argument("--truth", required=True, help="ground truth json file")
    p.add_argument("--ignore-tallies", action="store_true",
                   help="succeed when only event tallies differ")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("render", help="print gantt charts or a summary table")
    p.add_argument("dags", nargs="+", help="dag json files")
    p.add_argument("--summary", action="store_true", help="one table over all inputs")
    p.add_argument("--width", type=int, default=100, help="gantt bar width in columns")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
