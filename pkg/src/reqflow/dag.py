"""Per-request DAG assembly, canonical JSON export, and text rendering.

Every minted trace id becomes one RequestDag. The root is the trace's
arrival state (the NetworkState whose source_thread is the external
sentinel). A state is a child of a parent state when the parent's owner
thread caused it while the parent span was open: network children are
states the owner's sends propagated (source_thread == owner, start within
the parent span), fork children are ForkStates the owner created. States of
the trace that end up unreachable from the root are exported under
diagnostics.orphans, never attached heuristically and never dropped.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

from .engine import EXTERNAL_THREAD, EngineSnapshot, ForkState, State, Thread

SCHEMA_VERSION = "1"

CAUSE_TCP = "tcp"
CAUSE_FORK = "fork"


class UnknownTraceError(KeyError):
    pass


class DagValidationError(ValueError):
    pass


@dataclass
class DagNode:
    state_id: str
    kind: str
    owner_pid: int
    comm: str
    start_ns: int
    end_ns: int
    flags: list[str]
    identity: dict
    event_tallies: dict[str, int]

    def to_doc(self) -> dict:
        return {
            "state_id": self.state_id,
            "kind": self.kind,
            "owner_pid": self.owner_pid,
            "comm": self.comm,
            "start_ns": self.start_ns,
            "end_ns": self.end_ns,
            "flags": list(self.flags),
            "identity": self.identity,
            "event_tallies": dict(sorted(self.event_tallies.items())),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> DagNode:
        return cls(
            state_id=doc["state_id"],
            kind=doc["kind"],
            owner_pid=doc["owner_pid"],
            comm=doc["comm"],
            start_ns=doc["start_ns"],
            end_ns=doc["end_ns"],
            flags=list(doc["flags"]),
            identity=dict(doc["identity"]),
            event_tallies=dict(doc["event_tallies"]),
        )


Edge = tuple[str, str, str]  # (parent state_id, child state_id, cause)


@dataclass
class RequestDag:
    trace_id: int
    root_id: str
    nodes: list[DagNode]
    edges: list[Edge]
    orphans: list[DagNode] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)

    def node_by_id(self) -> dict[str, DagNode]:
        return {node.state_id: node for node in self.nodes}

    def to_doc(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "trace_id": self.trace_id,
            "root": self.root_id,
            "nodes": [node.to_doc() for node in self.nodes],
            "edges": [
                {"parent": p, "child": c, "cause": cause}
                for p, c, cause in self.edges
            ],
            "diagnostics": {
                "orphans": [node.to_doc() for node in self.orphans],
                "counters": dict(sorted(self.counters.items())),
            },
        }

    @classmethod
    def from_doc(cls, doc: dict) -> RequestDag:
        return cls(
            trace_id=doc["trace_id"],
            root_id=doc["root"],
            nodes=[DagNode.from_doc(n) for n in doc["nodes"]],
            edges=[(e["parent"], e["child"], e["cause"]) for e in doc["edges"]],
            orphans=[DagNode.from_doc(n) for n in doc["diagnostics"]["orphans"]],
            counters=dict(doc["diagnostics"]["counters"]),
        )


def _identity(state: State) -> dict:
    if state.kind == "network":
        return {
            "source_thread": state.source_thread,
            "tuple": {
                "src_ip": state.conn.src.ip,
                "src_port": state.conn.src.port,
                "dst_ip": state.conn.dst.ip,
                "dst_port": state.conn.dst.port,
            },
            "trace_id": state.trace_id,
        }
    return {"parent_thread": state.parent_pid, "trace_id": state.trace_id}


def _state_id(kind: str, owner_pid: int, identity: dict, start_ns: int) -> str:
    # start_ns participates so a key recurring on a kept-alive connection
    # still yields a unique id.
    material = json.dumps([kind, owner_pid, identity, start_ns], sort_keys=True)
    digest = hashlib.sha1(material.encode()).hexdigest()[:12]
    return f"{kind}:{owner_pid}:{digest}"


def _make_node(thread: Thread, state: State) -> DagNode:
    identity = _identity(state)
    return DagNode(
        state_id=_state_id(state.kind, state.owner_pid, identity, state.start_ns),
        kind=state.kind,
        owner_pid=state.owner_pid,
        comm=thread.comm,
        start_ns=state.start_ns,
        end_ns=state.end_ns,
        flags=sorted(state.flags),
        identity=identity,
        event_tallies=dict(state.tallies),
    )


def _build(trace_id: int, items: list[tuple[Thread, State]]) -> RequestDag:
    entries: list[tuple[State, DagNode]] = []
    seen_ids: set[str] = set()
    for thread, state in items:
        node = _make_node(thread, state)
        while node.state_id in seen_ids:  # pathological duplicate guard
            node.state_id += "+"
        seen_ids.add(node.state_id)
        entries.append((state, node))

    roots = [
        (state, node)
        for state, node in entries
        if state.kind == "network" and state.source_thread == EXTERNAL_THREAD
    ]
    if not roots:
        raise DagValidationError(f"trace {trace_id} has no arrival state")
    roots.sort(key=lambda e: (e[0].start_ns, e[1].state_id))
    root_state, root_node = roots[0]

    by_net_source: dict[int, list[tuple[State, DagNode]]] = {}
    by_fork_parent: dict[int, list[tuple[State, DagNode]]] = {}
    for state, node in entries:
        if state.kind == "network":
            by_net_source.setdefault(state.source_thread, []).append((state, node))
        else:
            by_fork_parent.setdefault(state.parent_pid, []).append((state, node))

    def children(state: State) -> list[tuple[State, DagNode, str]]:
        found = []
        for cand_state, cand_node in by_net_source.get(state.owner_pid, []):
            if cand_state is state:
                continue
            if state.start_ns <= cand_state.start_ns <= state.end_ns:
                found.append((cand_state, cand_node, CAUSE_TCP))
        for cand_state, cand_node in by_fork_parent.get(state.owner_pid, []):
            if state.start_ns <= cand_state.start_ns <= state.end_ns:
                found.append((cand_state, cand_node, CAUSE_FORK))
        found.sort(key=lambda c: (c[0].start_ns, c[1].state_id))
        return found

    edges: list[Edge] = []
    edge_set: set[Edge] = set()
    reachable: set[int] = {id(root_state)}
    on_path: set[int] = set()

    def visit(state: State, node: DagNode) -> None:
        on_path.add(id(state))
        for child_state, child_node, cause in children(state):
            if id(child_state) in on_path:
                continue  # never close a cycle
            edge = (node.state_id, child_node.state_id, cause)
            if edge not in edge_set:
                edge_set.add(edge)
                edges.append(edge)
            if id(child_state) not in reachable:
                reachable.add(id(child_state))
                visit(child_state, child_node)
        on_path.discard(id(state))

    visit(root_state, root_node)

    nodes = [node for state, node in entries if id(state) in reachable]
    orphans = [node for state, node in entries if id(state) not in reachable]
    nodes.sort(key=lambda n: (n.start_ns, n.state_id))
    orphans.sort(key=lambda n: (n.start_ns, n.state_id))
    edges.sort()

    incoming = Counter(child for _, child, _ in edges)
    counters = {
        "orphan_states": len(orphans),
        "multi_parent_nodes": sum(1 for n in incoming.values() if n > 1),
    }
    return RequestDag(
        trace_id=trace_id,
        root_id=root_node.state_id,
        nodes=nodes,
        edges=edges,
        orphans=orphans,
        counters=counters,
    )


def build_dag(trace_id: int, snapshot: EngineSnapshot) -> RequestDag:
    """Assemble the DAG for one minted trace id."""
    if trace_id not in snapshot.minted_traces:
        raise UnknownTraceError(trace_id)
    items = snapshot.states_by_trace().get(trace_id, [])
    return _build(trace_id, items)


def build_all_dags(snapshot: EngineSnapshot) -> Iterator[RequestDag]:
    """Assemble one DAG per minted trace id, in mint order."""
    grouped = snapshot.states_by_trace()
    for trace_id in snapshot.minted_traces:
        yield _build(trace_id, grouped.get(trace_id, []))


def validate_dag(dag: RequestDag) -> None:
    """Independent structural check: rooted, connected, acyclic, ordered."""
    by_id = dag.node_by_id()
    if dag.root_id not in by_id:
        raise DagValidationError("root node missing from node list")
    adjacency: dict[str, list[str]] = {node_id: [] for node_id in by_id}
    incoming = Counter()
    for parent, child, _cause in dag.edges:
        if parent not in by_id or child not in by_id:
            raise DagValidationError(f"edge references unknown node: {parent}->{child}")
        if by_id[child].start_ns < by_id[parent].start_ns:
            raise DagValidationError(f"child starts before parent: {parent}->{child}")
        adjacency[parent].append(child)
        incoming[child] += 1
    for node_id in by_id:
        if node_id != dag.root_id and incoming[node_id] == 0:
            raise DagValidationError(f"non-root node {node_id} has no incoming edge")
    # reachability and cycle check in one pass
    WHITE, GRAY, BLACK = 0, 1, 2
    color = dict.fromkeys(by_id, WHITE)

    def dfs(node_id: str) -> None:
        color[node_id] = GRAY
        for nxt in adjacency[node_id]:
            if color[nxt] == GRAY:
                raise DagValidationError(f"cycle through {nxt}")
            if color[nxt] == WHITE:
                dfs(nxt)
        color[node_id] = BLACK

    dfs(dag.root_id)
    unreachable = [node_id for node_id, c in color.items() if c == WHITE]
    if unreachable:
        raise DagValidationError(f"nodes unreachable from root: {unreachable}")


def export_json(dag: RequestDag) -> str:
    """Canonical export: sorted keys, nodes by (start_ns, state_id), edges
    lexicographic. Byte-identical across runs on identical input."""
    return json.dumps(dag.to_doc(), sort_keys=True, indent=2) + "\n"


def _dfs_rows(dag: RequestDag) -> list[tuple[DagNode, int]]:
    by_id = dag.node_by_id()
    children: dict[str, list[str]] = {node_id: [] for node_id in by_id}
    for parent, child, _cause in dag.edges:
        children[parent].append(child)
    for node_id in children:
        children[node_id].sort(key=lambda c: (by_id[c].start_ns, c))
    rows: list[tuple[DagNode, int]] = []
    rendered: set[str] = set()

    def visit(node_id: str, depth: int) -> None:
        rendered.add(node_id)
        rows.append((by_id[node_id], depth))
        for child in children[node_id]:
            if child not in rendered:  # multi-parent nodes render once
                visit(child, depth + 1)

    visit(dag.root_id, 0)
    return rows


def _bar(start: int, end: int, window: tuple[int, int], width: int) -> str:
    w0, w1 = window
    span = max(1, w1 - w0)
    c0 = (start - w0) * width // span
    c0 = min(max(c0, 0), width - 1)
    c1 = -((end - w0) * width // -span)  # ceiling division
    c1 = min(max(c1, c0 + 1), width)
    return "." * c0 + "#" * (c1 - c0) + "." * (width - c1)


def _node_label(node: DagNode) -> str:
    label = f"pid={node.owner_pid} comm={node.comm}"
    if node.flags:
        label += f" [{','.join(node.flags)}]"
    for event, count in sorted(node.event_tallies.items()):
        label += f" {event}={count}"
    return label


def render_gantt(dag: RequestDag, width: int = 100) -> str:
    """One row per node in DFS order, indented by depth; bar position and
    length are proportional to the span within the trace window."""
    if width < 40:
        raise ValueError("width must be at least 40 columns")
    everything = dag.nodes + dag.orphans
    window = (
        min(node.start_ns for node in everything),
        max(node.end_ns for node in everything),
    )
    lines = [
        f"trace {dag.trace_id}  window {window[0]}..{window[1]} ns"
        f"  nodes {len(dag.nodes)}"
    ]
    for node, depth in _dfs_rows(dag):
        bar = _bar(node.start_ns, node.end_ns, window, width)
        lines.append("  " * depth + f"|{bar}| {_node_label(node)}")
    if dag.orphans:
        lines.append("orphans:")
        for node in dag.orphans:
            bar = _bar(node.start_ns, node.end_ns, window, width)
            lines.append("  " + f"|{bar}| {_node_label(node)}")
    return "\n".join(lines) + "\n"


def summarize(dags: Iterable[RequestDag]) -> dict:
    """Per-trace duration/node/tally rows plus min/median/max aggregates."""
    dag_list = list(dags)
    if not dag_list:
        raise ValueError("at least one dag is required")
    rows = []
    merged: Counter[str] = Counter()
    for dag in dag_list:
        everything = dag.nodes + dag.orphans
        span = max(n.end_ns for n in everything) - min(n.start_ns for n in everything)
        totals: Counter[str] = Counter()
        for node in everything:
            totals.update(node.event_tallies)
        merged.update(totals)
        rows.append(
            {
                "trace_id": dag.trace_id,
                "span_ns": span,
                "nodes": len(dag.nodes),
                "event_totals": dict(sorted(totals.items())),
            }
        )
    spans = sorted(row["span_ns"] for row in rows)
    aggregate = {
        "traces": len(rows),
        "span_ns_min": spans[0],
        "span_ns_median": statistics.median(spans),
        "span_ns_max": spans[-1],
        "event_totals": dict(sorted(merged.items())),
    }
    return {"traces": rows, "aggregate": aggregate}


def render_summary(summary: dict) -> str:
    events = sorted(summary["aggregate"]["event_totals"])
    header = ["trace", "span_ns", "nodes", *events]
    table = [header]
    for row in summary["traces"]:
        table.append(
            [
                str(row["trace_id"]),
                str(row["span_ns"]),
                str(row["nodes"]),
                *(str(row["event_totals"].get(event, 0)) for event in events),
            ]
        )
    widths = [max(len(line[col]) for line in table) for col in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[col]) for col, cell in enumerate(line)).rstrip()
        for line in table
    ]
    agg = summary["aggregate"]
    lines.append("")
    lines.append(
        f"traces={agg['traces']} span_ns min={agg['span_ns_min']}"
        f" median={agg['span_ns_median']} max={agg['span_ns_max']}"
    )
    totals = " ".join(f"{k}={v}" for k, v in agg["event_totals"].items())
    if totals:
        lines.append(f"event totals: {totals}")
    return "\n".join(lines) + "\n"
