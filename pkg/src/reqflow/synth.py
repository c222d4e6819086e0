"""Synthetic workload generation with exact ground truth.

A TopologySpec describes services, their listen endpoints, worker models,
and downstream calls. simulate() walks requests through the topology on a
strictly increasing clock and emits the same kernel events a live capture
would produce, alongside the span tree it knows to be true. Requests are
serviced one at a time so every thread holds at most one active span and
reconstruction is exact; concurrency across CPUs only scatters records over
per-CPU streams.

The outside client is untraced: its side of the gateway exchange emits
nothing, exactly as a pid-filtered capture would look.
"""

from __future__ import annotations

import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dag import CAUSE_FORK, CAUSE_TCP
from .engine import EXTERNAL_THREAD, Tcp4Tuple
from .records import (
    EXIT_EVENT,
    FORK_EVENT,
    STRUCTURAL_EVENTS,
    SYSCALL_ENTER_PREFIX,
    SYSCALL_EXIT_PREFIX,
    TCP_RCV_EVENT,
    TCP_SEND_PROBES,
    Endpoint,
    TraceRecord,
)

WORKER_MODELS = ("reuse", "fork_per_request")

_NAME_RE = re.compile(r"^[A-Za-z0-9_.:/-]+$")
_EXTERNAL_IP = "203.0.113.9"
_EPHEMERAL_BASE = 40_000
_EPHEMERAL_SPAN = 20_000
_CLIENT_BASE = 60_000
_CLIENT_SPAN = 5_000

_SEND_CHOICES = ("sendmsg", "sendto", "write", "writev")
_RECV_CHOICES = ("read", "readv", "recvfrom", "recvmsg")
_PROBE_CHOICES = tuple(sorted(TCP_SEND_PROBES))


class InvalidTopologyError(ValueError):
    pass


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    ip: str
    port: int
    worker_model: str = "reuse"
    calls: tuple[str, ...] = ()
    service_time_ns: tuple[int, int] = (1_000, 5_000)
    pid: int | None = None
    child_pids: tuple[int, ...] = ()


@dataclass
class TopologySpec:
    services: tuple[ServiceSpec, ...]
    gateway: str
    user_event_rates: dict[str, float] = field(default_factory=dict)
    reuse_connections: bool = False

    def validate(self) -> None:
        if not self.services:
            raise InvalidTopologyError("topology has no services")
        names = [svc.name for svc in self.services]
        if len(set(names)) != len(names):
            raise InvalidTopologyError("duplicate service names")
        by_name = {svc.name: svc for svc in self.services}
        if self.gateway not in by_name:
            raise InvalidTopologyError(f"gateway {self.gateway!r} is not a service")
        pinned = [svc.pid for svc in self.services if svc.pid is not None]
        if len(set(pinned)) != len(pinned):
            raise InvalidTopologyError("duplicate pinned pids")
        for svc in self.services:
            if not _NAME_RE.match(svc.name):
                raise InvalidTopologyError(f"service name {svc.name!r} not a plain token")
            if svc.worker_model not in WORKER_MODELS:
                raise InvalidTopologyError(
                    f"{svc.name}: worker_model must be one of {WORKER_MODELS}"
                )
            if not (0 < svc.port <= 65535):
                raise InvalidTopologyError(f"{svc.name}: bad port {svc.port}")
            lo, hi = svc.service_time_ns
            if lo < 0 or hi < lo:
                raise InvalidTopologyError(f"{svc.name}: bad service time ({lo}, {hi})")
            for target in svc.calls:
                if target not in by_name:
                    raise InvalidTopologyError(f"{svc.name} calls unknown {target!r}")
        for event, rate in self.user_event_rates.items():
            if event in STRUCTURAL_EVENTS:
                raise InvalidTopologyError(f"user event {event!r} is structural")
            if not _NAME_RE.match(event):
                raise InvalidTopologyError(f"user event {event!r} not a plain token")
            if rate < 0:
                raise InvalidTopologyError(f"user event {event!r} has negative rate")
        self._check_acyclic(by_name)

    def _check_acyclic(self, by_name: dict[str, ServiceSpec]) -> None:
        WHITE, GRAY, BLACK = 0, 1, 2
        color = dict.fromkeys(by_name, WHITE)

        def walk(name: str, path: list[str]) -> None:
            color[name] = GRAY
            path.append(name)
            for target in by_name[name].calls:
                if color[target] == GRAY:
                    cycle = " -> ".join(path[path.index(target):] + [target])
                    raise InvalidTopologyError(f"call graph has a cycle: {cycle}")
                if color[target] == WHITE:
                    walk(target, path)
            path.pop()
            color[name] = BLACK

        for name in by_name:
            if color[name] == WHITE:
                walk(name, [])

    def to_doc(self) -> dict:
        services = []
        for svc in self.services:
            doc: dict = {
                "name": svc.name,
                "ip": svc.ip,
                "port": svc.port,
                "worker_model": svc.worker_model,
                "calls": list(svc.calls),
                "service_time_ns": list(svc.service_time_ns),
            }
            if svc.pid is not None:
                doc["pid"] = svc.pid
            if svc.child_pids:
                doc["child_pids"] = list(svc.child_pids)
            services.append(doc)
        return {
            "gateway": self.gateway,
            "reuse_connections": self.reuse_connections,
            "user_event_rates": dict(sorted(self.user_event_rates.items())),
            "services": services,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> TopologySpec:
        try:
            services = tuple(
                ServiceSpec(
                    name=svc["name"],
                    ip=svc["ip"],
                    port=svc["port"],
                    worker_model=svc.get("worker_model", "reuse"),
                    calls=tuple(svc.get("calls", ())),
                    service_time_ns=tuple(svc.get("service_time_ns", (1_000, 5_000))),
                    pid=svc.get("pid"),
                    child_pids=tuple(svc.get("child_pids", ())),
                )
                for svc in doc["services"]
            )
            return cls(
                services=services,
                gateway=doc["gateway"],
                user_event_rates=dict(doc.get("user_event_rates", {})),
                reuse_connections=bool(doc.get("reuse_connections", False)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidTopologyError(f"bad topology document: {exc}") from exc


def load_topology(path: str | Path) -> TopologySpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidTopologyError(f"cannot load topology from {path}: {exc}") from exc
    topology = TopologySpec.from_doc(doc)
    topology.validate()
    return topology


# ----------------------------------------------------------------------
# ground truth

@dataclass
class SpanTruth:
    kind: str
    owner_pid: int
    comm: str
    trace_id: int
    start_ns: int
    end_ns: int
    parent_index: int | None
    cause: str | None
    source_thread: int | None = None  # network spans
    conn: tuple | None = None  # (src_ip, src_port, dst_ip, dst_port)
    parent_thread: int | None = None  # fork spans
    tallies: dict[str, int] = field(default_factory=dict)

    def to_doc(self) -> dict:
        doc: dict = {
            "kind": self.kind,
            "owner_pid": self.owner_pid,
            "comm": self.comm,
            "trace_id": self.trace_id,
            "start_ns": self.start_ns,
            "end_ns": self.end_ns,
            "parent_index": self.parent_index,
            "cause": self.cause,
            "tallies": dict(sorted(self.tallies.items())),
        }
        if self.kind == "network":
            doc["source_thread"] = self.source_thread
            doc["conn"] = list(self.conn)
        else:
            doc["parent_thread"] = self.parent_thread
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> SpanTruth:
        return cls(
            kind=doc["kind"],
            owner_pid=doc["owner_pid"],
            comm=doc["comm"],
            trace_id=doc["trace_id"],
            start_ns=doc["start_ns"],
            end_ns=doc["end_ns"],
            parent_index=doc["parent_index"],
            cause=doc["cause"],
            source_thread=doc.get("source_thread"),
            conn=tuple(doc["conn"]) if "conn" in doc else None,
            parent_thread=doc.get("parent_thread"),
            tallies=dict(doc.get("tallies", {})),
        )


@dataclass
class TraceTruth:
    trace_id: int
    spans: list[SpanTruth]


@dataclass
class GroundTruth:
    traces: list[TraceTruth]
    external_arrivals: int
    fork_edges: list[tuple[int, int]]
    event_totals: dict[str, int]

    def to_doc(self) -> dict:
        return {
            "schema_version": "1",
            "external_arrivals": self.external_arrivals,
            "fork_edges": [list(edge) for edge in self.fork_edges],
            "event_totals": dict(sorted(self.event_totals.items())),
            "traces": [
                {"trace_id": t.trace_id, "spans": [s.to_doc() for s in t.spans]}
                for t in self.traces
            ],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> GroundTruth:
        return cls(
            traces=[
                TraceTruth(t["trace_id"], [SpanTruth.from_doc(s) for s in t["spans"]])
                for t in doc["traces"]
            ],
            external_arrivals=doc["external_arrivals"],
            fork_edges=[tuple(edge) for edge in doc["fork_edges"]],
            event_totals=dict(doc["event_totals"]),
        )


# ----------------------------------------------------------------------
# simulation

def _poisson(rng: random.Random, mean: float) -> int:
    if mean <= 0:
        return 0
    limit = math.exp(-mean)
    count = 0
    product = 1.0
    while True:
        product *= rng.random()
        if product <= limit:
            return count
        count += 1


def _flat(conn: Tcp4Tuple) -> tuple:
    return (conn.src.ip, conn.src.port, conn.dst.ip, conn.dst.port)


def _tuple_args(conn: Tcp4Tuple) -> dict[str, str]:
    return {
        "saddr": conn.src.ip,
        "sport": str(conn.src.port),
        "daddr": conn.dst.ip,
        "dport": str(conn.dst.port),
    }


class _Simulation:
    def __init__(self, topology, cpus, rng, duplicate_receives):
        self.topology = topology
        self.cpus = cpus
        self.rng = rng
        self.duplicate_receives = duplicate_receives
        self.by_name = {svc.name: svc for svc in topology.services}
        self.records: list[TraceRecord] = []
        self.truth_traces: list[TraceTruth] = []
        self.fork_edges: list[tuple[int, int]] = []
        self.event_totals: Counter[str] = Counter()
        self.now = 5_000_000_000
        self._eph_counter = 0
        self._conn_cache: dict[tuple[int, str], Tcp4Tuple] = {}
        # pid assignment: pinned first, then a counter that skips them
        self.pids: dict[str, int] = {}
        self._used_pids = {
            pid
            for svc in topology.services
            for pid in (svc.pid, *svc.child_pids)
            if pid is not None
        }
        self._next_pid = 1001
        for svc in topology.services:
            self.pids[svc.name] = svc.pid if svc.pid is not None else self._alloc_pid()
        self._child_iters = {svc.name: iter(svc.child_pids) for svc in topology.services}

    def _alloc_pid(self) -> int:
        while self._next_pid in self._used_pids:
            self._next_pid += 1
        pid = self._next_pid
        self._used_pids.add(pid)
        self._next_pid += 1
        return pid

    def _child_pid(self, svc: ServiceSpec) -> int:
        pinned = next(self._child_iters[svc.name], None)
        return pinned if pinned is not None else self._alloc_pid()

    # -- clock and emission ------------------------------------------

    def _emit(self, pid: int, comm: str, event: str, args: dict | None = None) -> int:
        self.now += self.rng.randint(80, 800)
        self.records.append(
            TraceRecord(
                timestamp_ns=self.now,
                cpu=self.rng.randrange(self.cpus),
                pid=pid,
                comm=comm,
                event=event,
                args=dict(args) if args else {},
            )
        )
        return self.now

    def _delay(self, svc: ServiceSpec) -> None:
        self.now += self.rng.randint(*svc.service_time_ns)

    def _user_plan(self, slots: int) -> tuple[list[Counter], dict[str, int]]:
        plan = [Counter() for _ in range(slots)]
        totals: Counter[str] = Counter()
        for event in sorted(self.topology.user_event_rates):
            count = _poisson(self.rng, self.topology.user_event_rates[event])
            if count:
                totals[event] = count
            for _ in range(count):
                plan[self.rng.randrange(slots)][event] += 1
        return plan, dict(sorted(totals.items()))

    def _emit_user(self, pid: int, comm: str, counts: Counter) -> None:
        for event in sorted(counts):
            for _ in range(counts[event]):
                self._emit(pid, comm, event)
                self.event_totals[event] += 1

    def _message(self, sender, conn: Tcp4Tuple, receiver) -> tuple[int | None, int | None]:
        """One data transmission. sender/receiver are (pid, comm) or None
        for the untraced outside world. Returns (send probe ts, receive ts)."""
        send_ts = rcv_ts = None
        if sender is not None:
            pid, comm = sender
            syscall = self.rng.choice(_SEND_CHOICES)
            self._emit(pid, comm, SYSCALL_ENTER_PREFIX + syscall)
            probe = self.rng.choice(_PROBE_CHOICES)
            send_ts = self._emit(pid, comm, probe, _tuple_args(conn))
            self._emit(pid, comm, SYSCALL_EXIT_PREFIX + syscall)
        if receiver is not None:
            pid, comm = receiver
            syscall = self.rng.choice(_RECV_CHOICES)
            self._emit(pid, comm, SYSCALL_ENTER_PREFIX + syscall)
            # receiver-local orientation: saddr is the receiver's endpoint
            rcv_args = _tuple_args(Tcp4Tuple(src=conn.dst, dst=conn.src))
            rcv_ts = self._emit(pid, comm, TCP_RCV_EVENT, rcv_args)
            if self.duplicate_receives:
                self._emit(pid, comm, TCP_RCV_EVENT, dict(rcv_args))
            self._emit(pid, comm, SYSCALL_EXIT_PREFIX + syscall)
        return send_ts, rcv_ts

    def _connection(self, caller_pid: int, caller_ip: str, svc: ServiceSpec) -> Tcp4Tuple:
        key = (caller_pid, svc.name)
        if self.topology.reuse_connections and key in self._conn_cache:
            return self._conn_cache[key]
        port = _EPHEMERAL_BASE + self._eph_counter % _EPHEMERAL_SPAN
        self._eph_counter += 1
        conn = Tcp4Tuple(
            src=Endpoint(caller_ip, port), dst=Endpoint(svc.ip, svc.port)
        )
        if self.topology.reuse_connections:
            self._conn_cache[key] = conn
        return conn

    # -- request walk ------------------------------------------------

    def run_request(self, trace_id: int) -> None:
        gateway = self.by_name[self.topology.gateway]
        if self.topology.reuse_connections:
            client = Endpoint(_EXTERNAL_IP, _CLIENT_BASE)
        else:
            client = Endpoint(_EXTERNAL_IP, _CLIENT_BASE + (trace_id - 1) % _CLIENT_SPAN)
        conn = Tcp4Tuple(src=client, dst=Endpoint(gateway.ip, gateway.port))
        listener = self.pids[gateway.name]
        _, rcv_ts = self._message(None, conn, (listener, gateway.name))
        spans: list[SpanTruth] = []
        self._serve(
            gateway, conn, rcv_ts, trace_id, spans,
            parent_index=None, source_thread=EXTERNAL_THREAD, cause=None,
            requester=None,
        )
        self.truth_traces.append(TraceTruth(trace_id, spans))

    def _serve(self, svc, conn, rcv_ts, trace_id, spans, parent_index,
               source_thread, cause, requester) -> None:
        listener = self.pids[svc.name]
        span = SpanTruth(
            kind="network", owner_pid=listener, comm=svc.name, trace_id=trace_id,
            start_ns=rcv_ts, end_ns=0, parent_index=parent_index, cause=cause,
            source_thread=source_thread, conn=_flat(conn),
        )
        spans.append(span)
        my_index = len(spans) - 1
        if svc.worker_model == "fork_per_request":
            plan, tally = self._user_plan(2)
            self._emit_user(listener, svc.name, plan[0])
            self._delay(svc)
            child = self._child_pid(svc)
            fork_ts = self._emit(
                listener, svc.name, FORK_EVENT,
                {"comm": svc.name, "pid": str(listener),
                 "child_comm": svc.name, "child_pid": str(child)},
            )
            self.fork_edges.append((listener, child))
            fork_span = SpanTruth(
                kind="fork", owner_pid=child, comm=svc.name, trace_id=trace_id,
                start_ns=fork_ts, end_ns=0, parent_index=my_index, cause=CAUSE_FORK,
                parent_thread=listener,
            )
            spans.append(fork_span)
            fork_index = len(spans) - 1
            fork_span.tallies = self._work(child, svc.name, svc, trace_id, spans, fork_index)
            fork_span.end_ns = self._emit(
                child, svc.name, EXIT_EVENT, {"comm": svc.name, "pid": str(child)}
            )
            self._emit_user(listener, svc.name, plan[1])
            span.tallies = tally
        else:
            span.tallies = self._work(listener, svc.name, svc, trace_id, spans, my_index)
        self._delay(svc)
        response = Tcp4Tuple(src=conn.dst, dst=conn.src)
        send_ts, _ = self._message((listener, svc.name), response, requester)
        span.end_ns = send_ts

    def _work(self, worker, comm, svc, trace_id, spans, parent_index) -> dict[str, int]:
        """Downstream calls plus user activity on the worker thread."""
        plan, totals = self._user_plan(len(svc.calls) + 2)
        self._emit_user(worker, comm, plan[0])
        self._delay(svc)
        for position, name in enumerate(svc.calls):
            self._call(worker, comm, svc.ip, self.by_name[name], trace_id, spans, parent_index)
            self._emit_user(worker, comm, plan[position + 1])
        self._emit_user(worker, comm, plan[-1])
        return totals

    def _call(self, caller_pid, caller_comm, caller_ip, svc, trace_id, spans, parent_index):
        conn = self._connection(caller_pid, caller_ip, svc)
        listener = self.pids[svc.name]
        _, rcv_ts = self._message((caller_pid, caller_comm), conn, (listener, svc.name))
        self._serve(
            svc, conn, rcv_ts, trace_id, spans,
            parent_index=parent_index, source_thread=caller_pid, cause=CAUSE_TCP,
            requester=(caller_pid, caller_comm),
        )

    def finish(self) -> tuple[list[list[TraceRecord]], GroundTruth]:
        streams: list[list[TraceRecord]] = [[] for _ in range(self.cpus)]
        for record in self.records:
            streams[record.cpu].append(record)
        for stream in streams:
            for position, record in enumerate(stream):
                record.seq = position
        truth = GroundTruth(
            traces=self.truth_traces,
            external_arrivals=len(self.truth_traces),
            fork_edges=list(self.fork_edges),
            event_totals=dict(sorted(self.event_totals.items())),
        )
        return streams, truth


def simulate(
    topology: TopologySpec,
    request_count: int,
    cpus: int,
    seed: int,
    duplicate_receives: bool = False,
) -> tuple[list[list[TraceRecord]], GroundTruth]:
    """Deterministically generate per-CPU record streams plus ground truth."""
    topology.validate()
    if cpus < 1:
        raise ValueError("cpus must be at least 1")
    if request_count < 0:
        raise ValueError("request_count must not be negative")
    sim = _Simulation(topology, cpus, random.Random(seed), duplicate_receives)
    for number in range(request_count):
        sim.run_request(number + 1)
    return sim.finish()


# ----------------------------------------------------------------------
# emitters

def emit_ftrace_line(record: TraceRecord) -> str:
    secs, frac = divmod(record.timestamp_ns, 1_000_000_000)
    head = (
        f"{record.comm}-{record.pid} [{record.cpu:03d}] ...."
        f" {secs}.{frac:09d}: {record.event}:"
    )
    if not record.args:
        return head
    args = " ".join(f"{k}={v}" for k, v in record.args.items())
    return f"{head} {args}"


def emit_bpftrace_line(record: TraceRecord) -> str:
    fields = [
        str(record.timestamp_ns),
        str(record.cpu),
        str(record.pid),
        record.comm,
        record.event,
    ]
    fields.extend(f"{k}={v}" for k, v in record.args.items())
    return "\t".join(fields)


_EMITTERS = {"ftrace": emit_ftrace_line, "bpftrace": emit_bpftrace_line}


def write_streams(streams, out_dir: str | Path, backend: str) -> list[Path]:
    emit = _EMITTERS[backend]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, stream in enumerate(streams):
        path = out / f"cpu{index}.{backend}.log"
        with path.open("w") as handle:
            for record in stream:
                handle.write(emit(record))
                handle.write("\n")
        paths.append(path)
    return paths


# ----------------------------------------------------------------------
# fault injection

@dataclass(frozen=True)
class FaultMode:
    kind: str
    probability: float = 0.0
    at_ns: int = 0

    @classmethod
    def drop_user_events(cls, probability: float) -> FaultMode:
        return cls(kind="drop_user_events", probability=probability)

    @classmethod
    def drop_structural(cls, probability: float) -> FaultMode:
        return cls(kind="drop_structural", probability=probability)

    @classmethod
    def truncate(cls, at_ns: int) -> FaultMode:
        return cls(kind="truncate", at_ns=at_ns)

    def __post_init__(self):
        if self.kind not in ("drop_user_events", "drop_structural", "truncate"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if not (0.0 <= self.probability <= 1.0):
            raise ValueError("probability must be within [0, 1]")


def inject_faults(streams, mode: FaultMode, seed: int):
    """Drop records per the fault mode; returns (streams, removal manifest)."""
    rng = random.Random(seed)
    kept_streams = []
    manifest = []
    for index, stream in enumerate(streams):
        kept = []
        for record in stream:
            structural = record.event in STRUCTURAL_EVENTS
            if mode.kind == "truncate":
                drop = record.timestamp_ns > mode.at_ns
            elif mode.kind == "drop_user_events":
                drop = not structural and rng.random() < mode.probability
            else:
                drop = structural and rng.random() < mode.probability
            if drop:
                manifest.append(
                    {
                        "stream": index,
                        "seq": record.seq,
                        "timestamp_ns": record.timestamp_ns,
                        "cpu": record.cpu,
                        "pid": record.pid,
                        "event": record.event,
                        "reason": mode.kind,
                    }
                )
            else:
                kept.append(record)
        kept_streams.append(kept)
    return kept_streams, manifest


# ----------------------------------------------------------------------
# reconstruction vs ground truth

def _truth_node_key(span: SpanTruth) -> tuple:
    if span.kind == "network":
        return (
            "network", span.owner_pid, span.source_thread,
            *span.conn, span.trace_id, span.start_ns,
        )
    return ("fork", span.owner_pid, span.parent_thread, span.trace_id, span.start_ns)


def _doc_node_key(node: dict, trace_id: int) -> tuple:
    identity = node["identity"]
    if node["kind"] == "network":
        conn = identity["tuple"]
        return (
            "network", node["owner_pid"], identity["source_thread"],
            conn["src_ip"], conn["src_port"], conn["dst_ip"], conn["dst_port"],
            trace_id, node["start_ns"],
        )
    return ("fork", node["owner_pid"], identity["parent_thread"], trace_id, node["start_ns"])


def _key_str(key: tuple) -> str:
    if key[0] == "network":
        _, owner, src_thread, sip, sport, dip, dport, trace, start = key
        return (
            f"network trace={trace} owner={owner} src_thread={src_thread}"
            f" conn={sip}:{sport}->{dip}:{dport} start={start}"
        )
    _, owner, parent, trace, start = key
    return f"fork trace={trace} owner={owner} parent={parent} start={start}"


@dataclass
class TraceDiff:
    trace_id: int
    missing_nodes: list[str] = field(default_factory=list)
    extra_nodes: list[str] = field(default_factory=list)
    missing_edges: list[str] = field(default_factory=list)
    extra_edges: list[str] = field(default_factory=list)
    end_mismatches: list[tuple[str, tuple, tuple]] = field(default_factory=list)
    tally_mismatches: list[tuple[str, str, int, int]] = field(default_factory=list)

    @property
    def structure_empty(self) -> bool:
        return not (
            self.missing_nodes or self.extra_nodes
            or self.missing_edges or self.extra_edges or self.end_mismatches
        )

    @property
    def empty(self) -> bool:
        return self.structure_empty and not self.tally_mismatches


@dataclass
class DiffReport:
    expected_traces: int
    actual_traces: int
    missing_traces: list[int]
    extra_traces: list[int]
    trace_diffs: list[TraceDiff]

    @property
    def structure_empty(self) -> bool:
        return (
            self.expected_traces == self.actual_traces
            and not self.missing_traces
            and not self.extra_traces
            and all(diff.structure_empty for diff in self.trace_diffs)
        )

    @property
    def empty(self) -> bool:
        return self.structure_empty and all(diff.empty for diff in self.trace_diffs)

    def tally_mismatch_count(self) -> int:
        return sum(len(diff.tally_mismatches) for diff in self.trace_diffs)

    def render(self, limit: int = 20) -> str:
        lines = [
            f"traces: expected {self.expected_traces} actual {self.actual_traces}"
        ]
        if self.missing_traces:
            lines.append(f"missing traces: {self.missing_traces[:limit]}")
        if self.extra_traces:
            lines.append(f"extra traces: {self.extra_traces[:limit]}")

        def extend(label: str, entries: list[str]) -> None:
            for entry in entries[:limit]:
                lines.append(f"  {label}: {entry}")
            if len(entries) > limit:
                lines.append(f"  ... and {len(entries) - limit} more {label} entries")

        for diff in self.trace_diffs:
            if diff.empty:
                continue
            lines.append(f"trace {diff.trace_id}:")
            extend("missing node", diff.missing_nodes)
            extend("extra node", diff.extra_nodes)
            extend("missing edge", diff.missing_edges)
            extend("extra edge", diff.extra_edges)
            extend(
                "end mismatch",
                [f"{k} expected={e} actual={a}" for k, e, a in diff.end_mismatches],
            )
            extend(
                "tally mismatch",
                [
                    f"{k} event={event} expected={e} actual={a}"
                    for k, event, e, a in diff.tally_mismatches
                ],
            )
        if self.empty:
            lines.append("clean")
        elif self.structure_empty:
            lines.append("structure clean; tallies differ")
        return "\n".join(lines) + "\n"


def _compare_trace(trace_id: int, doc: dict, truth_trace: TraceTruth) -> TraceDiff:
    diff = TraceDiff(trace_id=trace_id)
    truth_keys = [_truth_node_key(span) for span in truth_trace.spans]
    expected_nodes = Counter(truth_keys)
    actual_nodes = Counter(_doc_node_key(n, trace_id) for n in doc["nodes"])
    diff.missing_nodes = [_key_str(k) for k in sorted((expected_nodes - actual_nodes))]
    diff.extra_nodes = [_key_str(k) for k in sorted((actual_nodes - expected_nodes))]

    expected_edges: Counter = Counter()
    for position, span in enumerate(truth_trace.spans):
        if span.parent_index is not None:
            expected_edges[
                (truth_keys[span.parent_index], truth_keys[position], span.cause)
            ] += 1
    id_to_key = {
        n["state_id"]: _doc_node_key(n, trace_id)
        for n in doc["nodes"] + doc["diagnostics"]["orphans"]
    }
    actual_edges: Counter = Counter()
    for edge in doc["edges"]:
        actual_edges[
            (id_to_key[edge["parent"]], id_to_key[edge["child"]], edge["cause"])
        ] += 1

    def edge_str(edge: tuple) -> str:
        parent, child, cause = edge
        return f"{_key_str(parent)} => {_key_str(child)} cause={cause}"

    diff.missing_edges = [edge_str(e) for e in sorted(expected_edges - actual_edges)]
    diff.extra_edges = [edge_str(e) for e in sorted(actual_edges - expected_edges)]

    expected_ends: dict[tuple, list[int]] = {}
    for key, span in zip(truth_keys, truth_trace.spans):
        expected_ends.setdefault(key, []).append(span.end_ns)
    actual_ends: dict[tuple, list[int]] = {}
    for node in doc["nodes"]:
        actual_ends.setdefault(_doc_node_key(node, trace_id), []).append(node["end_ns"])
    for key in sorted(set(expected_ends) & set(actual_ends)):
        expected = tuple(sorted(expected_ends[key]))
        actual = tuple(sorted(actual_ends[key]))
        if expected != actual:
            diff.end_mismatches.append((_key_str(key), expected, actual))

    expected_tallies: dict[tuple, Counter] = {}
    for key, span in zip(truth_keys, truth_trace.spans):
        expected_tallies.setdefault(key, Counter()).update(span.tallies)
    actual_tallies: dict[tuple, Counter] = {}
    for node in doc["nodes"]:
        actual_tallies.setdefault(
            _doc_node_key(node, trace_id), Counter()
        ).update(node["event_tallies"])
    for key in sorted(set(expected_tallies) & set(actual_tallies)):
        expected, actual = expected_tallies[key], actual_tallies[key]
        for event in sorted(set(expected) | set(actual)):
            if expected[event] != actual[event]:
                diff.tally_mismatches.append(
                    (_key_str(key), event, expected[event], actual[event])
                )
    return diff


def compare(dag_docs: list[dict], truth: GroundTruth) -> DiffReport:
    """Diff reconstructed dag documents against the harness ground truth.

    Nodes match on kind, owner, identity, and exact span start; missing and
    extra traces are reported rather than raised.
    """
    truth_by_id = {trace.trace_id: trace for trace in truth.traces}
    docs_by_id = {doc["trace_id"]: doc for doc in dag_docs}
    missing = sorted(set(truth_by_id) - set(docs_by_id))
    extra = sorted(set(docs_by_id) - set(truth_by_id))
    diffs = [
        _compare_trace(trace_id, docs_by_id[trace_id], truth_by_id[trace_id])
        for trace_id in sorted(set(truth_by_id) & set(docs_by_id))
    ]
    return DiffReport(
        expected_traces=len(truth_by_id),
        actual_traces=len(docs_by_id),
        missing_traces=missing,
        extra_traces=extra,
        trace_diffs=diffs,
    )


# ----------------------------------------------------------------------
# canned topologies

def random_topology(seed: int) -> TopologySpec:
    """A small random acyclic topology; services only call higher indexes."""
    rng = random.Random(seed)
    count = rng.randint(1, 10)
    services = []
    for index in range(count):
        remaining = count - index - 1
        fanout = rng.randint(0, min(4, remaining)) if remaining else 0
        calls = [f"svc{j}" for j in rng.sample(range(index + 1, count), fanout)]
        if calls and rng.random() < 0.2:
            calls.append(rng.choice(calls))  # repeated call to one target
        lo = rng.randint(400, 2000)
        services.append(
            ServiceSpec(
                name=f"svc{index}",
                ip=f"10.20.{index // 250}.{index % 250 + 1}",
                port=7000 + index,
                worker_model=rng.choice(WORKER_MODELS),
                calls=tuple(calls),
                service_time_ns=(lo, lo + rng.randint(200, 5000)),
            )
        )
    rates = {}
    if rng.random() < 0.85:
        rates["page_fault_user"] = round(rng.uniform(0.0, 5.0), 2)
    if rng.random() < 0.6:
        rates["sched_migrate_task"] = round(rng.uniform(0.0, 1.5), 2)
    return TopologySpec(
        services=tuple(services),
        gateway="svc0",
        user_event_rates=rates,
        reuse_connections=rng.random() < 0.5,
    )


DEMO_SEED = 11
DEMO_CPUS = 2
DEMO_REQUESTS = 1


def demo_topology() -> TopologySpec:
    """Bundled two-tier fixture: fork-per-request frontend, one RPC hop."""
    path = resources.files("reqflow").joinpath("fixtures/two_tier_fork.json")
    topology = TopologySpec.from_doc(json.loads(path.read_text()))
    topology.validate()
    return topology


def demo_simulation() -> tuple[list[list[TraceRecord]], GroundTruth]:
    return simulate(demo_topology(), DEMO_REQUESTS, DEMO_CPUS, DEMO_SEED)
