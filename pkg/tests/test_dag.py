from __future__ import annotations

import json
import random
import statistics
from collections import Counter

import pytest

from reqflow.dag import (
    CAUSE_FORK,
    CAUSE_TCP,
    DagNode,
    DagValidationError,
    RequestDag,
    UnknownTraceError,
    build_all_dags,
    build_dag,
    export_json,
    render_gantt,
    render_summary,
    summarize,
    validate_dag,
)
from reqflow.engine import (
    EXTERNAL_THREAD,
    EngineSnapshot,
    ForkState,
    NetworkState,
    Tcp4Tuple,
    Thread,
)
from reqflow.records import Endpoint


def _conn(sport: int, dport: int) -> Tcp4Tuple:
    return Tcp4Tuple(Endpoint("10.0.0.1", sport), Endpoint("10.0.0.2", dport))


def _net(owner, source_thread, trace, start, end, sport=50_000, dport=80):
    conn = _conn(sport, dport)
    return NetworkState(
        source_thread=source_thread, conn=conn, trace_id=trace, owner_pid=owner,
        source=conn.src, start_ns=start, end_ns=end,
    )


def _fork(owner, parent, trace, start, end):
    return ForkState(
        parent_pid=parent, trace_id=trace, owner_pid=owner,
        start_ns=start, end_ns=end,
    )


def _thread(pid, comm, *states) -> Thread:
    return Thread(pid=pid, comm=comm, ended_states=list(states))


def _snap(minted, threads) -> EngineSnapshot:
    return EngineSnapshot(
        threads=threads, sockets={}, minted_traces=minted,
        counters={}, unattributed=Counter(), end_ns=0,
    )


def test_two_hop_chain_builds_expected_edges():
    root = _net(1, EXTERNAL_THREAD, 1, 100, 400)
    child = _net(2, 1, 1, 150, 300, sport=41_000, dport=9_000)
    snapshot = _snap([1], [_thread(1, "gw", root), _thread(2, "svc", child)])
    dag = build_dag(1, snapshot)
    validate_dag(dag)
    assert len(dag.nodes) == 2
    assert dag.nodes[0].state_id == dag.root_id
    assert [cause for _, _, cause in dag.edges] == [CAUSE_TCP]
    assert dag.counters == {"orphan_states": 0, "multi_parent_nodes": 0}


def test_state_starting_outside_parent_span_is_orphaned():
    root = _net(1, EXTERNAL_THREAD, 1, 100, 200)
    late = _net(2, 1, 1, 250, 300, sport=41_000, dport=9_000)
    snapshot = _snap([1], [_thread(1, "gw", root), _thread(2, "svc", late)])
    dag = build_dag(1, snapshot)
    validate_dag(dag)
    assert len(dag.nodes) == 1
    assert len(dag.orphans) == 1
    assert dag.orphans[0].owner_pid == 2
    assert dag.counters["orphan_states"] == 1
    assert not dag.edges


def test_fork_edge_carries_fork_cause():
    root = _net(1, EXTERNAL_THREAD, 1, 100, 400)
    worker = _fork(42, 1, 1, 150, 350)
    snapshot = _snap([1], [_thread(1, "gw", root), _thread(42, "worker", worker)])
    dag = build_dag(1, snapshot)
    validate_dag(dag)
    assert [cause for _, _, cause in dag.edges] == [CAUSE_FORK]
    fork_node = next(node for node in dag.nodes if node.kind == "fork")
    assert fork_node.identity == {"parent_thread": 1, "trace_id": 1}


def test_node_with_two_containing_parents_gets_both_edges():
    # thread 2 holds a fork span and a network span of the same trace; a
    # downstream request it caused is a child of both
    root = _net(1, EXTERNAL_THREAD, 1, 100, 500)
    forked = _fork(2, 1, 1, 150, 450)
    received = _net(2, 1, 1, 160, 440, sport=41_000, dport=9_000)
    downstream = _net(3, 2, 1, 200, 300, sport=42_000, dport=9_100)
    snapshot = _snap(
        [1],
        [
            _thread(1, "gw", root),
            _thread(2, "mid", forked, received),
            _thread(3, "leaf", downstream),
        ],
    )
    dag = build_dag(1, snapshot)
    validate_dag(dag)
    leaf_id = next(n.state_id for n in dag.nodes if n.owner_pid == 3)
    incoming = [edge for edge in dag.edges if edge[1] == leaf_id]
    assert len(incoming) == 2
    assert dag.counters["multi_parent_nodes"] == 1


def test_mutual_containment_cannot_close_a_cycle():
    root = _net(1, EXTERNAL_THREAD, 1, 100, 200)
    to_two = _net(2, 1, 1, 100, 150, sport=41_000, dport=9_000)
    back_to_one = _net(1, 2, 1, 100, 200, sport=42_000, dport=9_100)
    snapshot = _snap(
        [1], [_thread(1, "a", root, back_to_one), _thread(2, "b", to_two)]
    )
    dag = build_dag(1, snapshot)
    validate_dag(dag)  # raises if a cycle survived
    assert len(dag.nodes) == 3
    assert len(dag.edges) >= 2


def test_unknown_trace_raises():
    snapshot = _snap([1], [_thread(1, "gw", _net(1, EXTERNAL_THREAD, 1, 1, 2))])
    with pytest.raises(UnknownTraceError):
        build_dag(99, snapshot)


def test_trace_without_arrival_state_fails():
    lonely = _net(2, 1, 5, 100, 200)
    snapshot = _snap([5], [_thread(2, "svc", lonely)])
    with pytest.raises(DagValidationError, match="no arrival state"):
        build_dag(5, snapshot)


def test_build_all_dags_yields_in_mint_order(demo_run):
    _streams, truth, snapshot, dags = demo_run
    assert [dag.trace_id for dag in dags] == snapshot.minted_traces
    assert [trace.trace_id for trace in truth.traces] == snapshot.minted_traces


def test_export_is_canonical_and_input_order_free():
    states = [
        _net(1, EXTERNAL_THREAD, 1, 100, 400),
        _net(2, 1, 1, 150, 300, sport=41_000, dport=9_000),
        _fork(42, 1, 1, 160, 380),
    ]
    threads = [_thread(1, "gw", states[0]), _thread(2, "svc", states[1]),
               _thread(42, "worker", states[2])]
    exports = set()
    rng = random.Random(5)
    for _ in range(6):
        shuffled = threads[:]
        rng.shuffle(shuffled)
        exports.add(export_json(build_dag(1, _snap([1], shuffled))))
    assert len(exports) == 1
    text = exports.pop()
    assert text.endswith("\n")
    doc = json.loads(text)
    assert doc["schema_version"] == "1"
    assert list(doc) == sorted(doc)


def test_doc_round_trip_preserves_everything():
    root = _net(1, EXTERNAL_THREAD, 1, 100, 400)
    root.tallies.update({"page_fault_user": 3})
    worker = _fork(42, 1, 1, 150, 350)
    worker.flags.add("open_at_end")
    snapshot = _snap([1], [_thread(1, "gw", root), _thread(42, "w", worker)])
    dag = build_dag(1, snapshot)
    clone = RequestDag.from_doc(json.loads(export_json(dag)))
    assert export_json(clone) == export_json(dag)
    assert clone.node_by_id().keys() == dag.node_by_id().keys()


def test_identical_states_still_get_distinct_ids():
    twin_a = _net(2, 1, 1, 150, 300)
    twin_b = _net(2, 1, 1, 150, 300)
    root = _net(1, EXTERNAL_THREAD, 1, 100, 400, sport=50_001)
    snapshot = _snap([1], [_thread(1, "gw", root), _thread(2, "svc", twin_a, twin_b)])
    dag = build_dag(1, snapshot)
    ids = [node.state_id for node in dag.nodes]
    assert len(ids) == len(set(ids)) == 3


def _tiny_dag() -> RequestDag:
    nodes = [
        DagNode("n:1:aaa", "network", 1, "gw", 100, 400, [], {"trace_id": 1}, {}),
        DagNode("n:2:bbb", "network", 2, "svc", 150, 300, [], {"trace_id": 1}, {}),
    ]
    return RequestDag(
        trace_id=1, root_id="n:1:aaa", nodes=nodes,
        edges=[("n:1:aaa", "n:2:bbb", CAUSE_TCP)],
    )


def test_validate_rejects_edge_to_unknown_node():
    dag = _tiny_dag()
    dag.edges.append(("n:1:aaa", "ghost", CAUSE_TCP))
    with pytest.raises(DagValidationError, match="unknown node"):
        validate_dag(dag)


def test_validate_rejects_child_starting_before_parent():
    dag = _tiny_dag()
    dag.nodes[1].start_ns = 50
    with pytest.raises(DagValidationError, match="starts before"):
        validate_dag(dag)


def test_validate_rejects_unreachable_and_cycles():
    dag = _tiny_dag()
    dag.edges.clear()
    with pytest.raises(DagValidationError, match="no incoming edge"):
        validate_dag(dag)
    cyclic = _tiny_dag()
    # equal start times so the cycle is the only defect
    cyclic.nodes.append(
        DagNode("n:3:ccc", "network", 3, "x", 150, 250, [], {"trace_id": 1}, {})
    )
    cyclic.edges.append(("n:2:bbb", "n:3:ccc", CAUSE_TCP))
    cyclic.edges.append(("n:3:ccc", "n:2:bbb", CAUSE_TCP))
    with pytest.raises(DagValidationError, match="cycle"):
        validate_dag(cyclic)


def test_gantt_rows_have_fixed_width_bars():
    root = _net(1, EXTERNAL_THREAD, 1, 1_000, 2_000)
    child = _net(2, 1, 1, 1_250, 1_500, sport=41_000, dport=9_000)
    late = _net(3, 1, 1, 2_500, 3_000, sport=43_000, dport=9_200)  # orphan
    snapshot = _snap(
        [1],
        [_thread(1, "gw", root), _thread(2, "svc", child), _thread(3, "x", late)],
    )
    dag = build_dag(1, snapshot)
    text = render_gantt(dag, width=60)
    lines = text.splitlines()
    assert lines[0].startswith("trace 1  window 1000..3000 ns")
    bar_lines = [line for line in lines if "|" in line]
    for line in bar_lines:
        inner = line.split("|")[1]
        assert len(inner) == 60
        assert set(inner) <= {"#", "."}
        assert "#" in inner
    assert "orphans:" in lines
    # the root bar must start at the left edge; the orphan must not
    root_bar = bar_lines[0].split("|")[1]
    assert root_bar[0] == "#"
    orphan_bar = bar_lines[-1].split("|")[1]
    assert orphan_bar[0] == "."


def test_gantt_rejects_narrow_width():
    dag = _tiny_dag()
    with pytest.raises(ValueError, match="width"):
        render_gantt(dag, width=39)


def test_gantt_indents_children_and_renders_multi_parent_once():
    root = _net(1, EXTERNAL_THREAD, 1, 100, 500)
    forked = _fork(2, 1, 1, 150, 450)
    received = _net(2, 1, 1, 160, 440, sport=41_000, dport=9_000)
    downstream = _net(3, 2, 1, 200, 300, sport=42_000, dport=9_100)
    snapshot = _snap(
        [1],
        [
            _thread(1, "gw", root),
            _thread(2, "mid", forked, received),
            _thread(3, "leaf", downstream),
        ],
    )
    dag = build_dag(1, snapshot)
    text = render_gantt(dag, width=40)
    assert text.count("pid=3") == 1  # two parents, drawn once
    rows = [line for line in text.splitlines() if "pid=" in line]
    assert rows[0].startswith("|")
    assert all(row.startswith("  ") for row in rows[1:])


def test_summary_math_matches_hand_computation():
    def dag_with_span(trace_id, start, end, tally):
        node = DagNode(
            f"n:{trace_id}:x", "network", 1, "gw", start, end, [],
            {"trace_id": trace_id}, dict(tally),
        )
        return RequestDag(trace_id=trace_id, root_id=node.state_id, nodes=[node], edges=[])

    dags = [
        dag_with_span(1, 0, 100, {"page_fault_user": 2}),
        dag_with_span(2, 0, 250, {"page_fault_user": 5}),
        dag_with_span(3, 10, 40, {}),
    ]
    summary = summarize(dags)
    spans = [row["span_ns"] for row in summary["traces"]]
    assert spans == [100, 250, 30]
    agg = summary["aggregate"]
    assert agg["traces"] == 3
    assert agg["span_ns_min"] == 30
    assert agg["span_ns_max"] == 250
    assert agg["span_ns_median"] == statistics.median(spans)
    assert agg["event_totals"] == {"page_fault_user": 7}
    text = render_summary(summary)
    assert "trace" in text.splitlines()[0]
    assert "page_fault_user" in text.splitlines()[0]
    assert "traces=3" in text
    assert text.endswith("\n")


def test_summary_requires_at_least_one_dag():
    with pytest.raises(ValueError):
        summarize([])
