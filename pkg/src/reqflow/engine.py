"""Replay of an ordered kernel-event stream into request-scoped thread states.

Each application thread is a small state machine driven by five groups of
events:

* syscall enter/exit tracepoints establish whether the thread is currently
  inside one of the tracked send or receive syscalls;
* a send probe observed inside a send syscall marks outgoing TCP data,
  records the sending thread on the socket, and classifies the transmission
  as a REQUEST, or as a RESPONSE when the destination matches the requester
  endpoint of one of the thread's active network spans (which that send
  ends);
* tcp_rcv_space_adjust observed inside a receive syscall marks incoming TCP
  data and either propagates every trace id active on the sending thread
  onto the receiver as new NetworkStates, or mints a fresh trace id when the
  data arrives on a configured gateway endpoint with no observed in-flight
  request (traffic entering from the untraced outside world);
* sched_process_fork copies the parent's active trace ids onto the child as
  ForkStates;
* sched_process_exit ends everything the thread still owns and retires it.

A NetworkState spans request arrival to response sent. A ForkState spans the
child's lifetime. Both accumulate per-event tallies of user-enabled events
that fire on the owning thread while they are active. Replay is single pass
and deterministic: identical input streams produce identical pools.
"""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from typing import ClassVar, NamedTuple, Union

from .records import (
    EXIT_EVENT,
    FORK_EVENT,
    RECEIVE_SYSCALLS,
    SEND_SYSCALLS,
    SYSCALL_ENTER_PREFIX,
    SYSCALL_EVENTS,
    SYSCALL_EXIT_PREFIX,
    TCP_RCV_EVENT,
    TCP_SEND_PROBES,
    Endpoint,
    EventCatalog,
    TraceRecord,
)

log = logging.getLogger(__name__)

# Sentinel thread id for untraced peers (outside clients). Never a real pid.
EXTERNAL_THREAD = 0

REQUEST = "REQUEST"
RESPONSE = "RESPONSE"

FLAG_OPEN_AT_END = "open_at_end"
FLAG_ENDED_BY_EXIT = "ended_by_exit"


class Tcp4Tuple(NamedTuple):
    src: Endpoint
    dst: Endpoint

    def normalized(self) -> tuple[Endpoint, Endpoint]:
        """Direction-free form; keys the socket pool."""
        return (self.src, self.dst) if self.src <= self.dst else (self.dst, self.src)


SocketKey = tuple[Endpoint, Endpoint]


@dataclass
class SocketRecord:
    key: SocketKey
    sender_thread: int | None = None
    transmission_type: str | None = None
    last_direction: Tcp4Tuple | None = None


@dataclass
class NetworkState:
    """One request's residence on a thread: arrival to response sent."""

    source_thread: int
    conn: Tcp4Tuple  # oriented requester -> receiver
    trace_id: int
    owner_pid: int
    source: Endpoint  # requester endpoint; matched against response sends
    start_ns: int
    end_ns: int | None = None
    flags: set[str] = field(default_factory=set)
    tallies: Counter[str] = field(default_factory=Counter)

    kind: ClassVar[str] = "network"

    @property
    def key(self) -> tuple:
        return ("net", self.source_thread, self.conn.normalized(), self.trace_id)


@dataclass
class ForkState:
    """A forked child's lifetime under one of the parent's active traces."""

    parent_pid: int
    trace_id: int
    owner_pid: int
    start_ns: int
    end_ns: int | None = None
    flags: set[str] = field(default_factory=set)
    tallies: Counter[str] = field(default_factory=Counter)

    kind: ClassVar[str] = "fork"

    @property
    def key(self) -> tuple:
        return ("fork", self.parent_pid, self.trace_id)


State = Union[NetworkState, ForkState]


@dataclass
class Thread:
    pid: int
    comm: str = ""
    parent: int | None = None
    alive: bool = True
    in_syscall: str | None = None
    # Keyed store holds active states only; key uniqueness is enforced here.
    # Ended states move to the archive so a key can recur on a kept-alive
    # connection carrying a later request.
    active_states: dict[tuple, State] = field(default_factory=dict)
    ended_states: list[State] = field(default_factory=list)

    @property
    def active_traces(self) -> set[int]:
        return {state.trace_id for state in self.active_states.values()}


@dataclass
class EngineSnapshot:
    """Frozen result of a replay, handed to the DAG builder."""

    threads: list[Thread]
    sockets: dict[SocketKey, SocketRecord]
    minted_traces: list[int]
    counters: dict[str, int]
    unattributed: Counter[str]
    end_ns: int

    def iter_thread_states(self) -> Iterator[tuple[Thread, State]]:
        for thread in self.threads:
            for state in thread.ended_states:
                yield thread, state

    def states_by_trace(self) -> dict[int, list[tuple[Thread, State]]]:
        grouped: dict[int, list[tuple[Thread, State]]] = {}
        for thread, state in self.iter_thread_states():
            grouped.setdefault(state.trace_id, []).append((thread, state))
        return grouped


def _conn_from_args(args: dict[str, str]) -> Tcp4Tuple | None:
    try:
        src = Endpoint(args["saddr"], int(args["sport"]))
        dst = Endpoint(args["daddr"], int(args["dport"]))
    except (KeyError, ValueError):
        return None
    return Tcp4Tuple(src, dst)


class ReplayEngine:
    """Single-pass consumer of one merged, time-ordered record stream."""

    def __init__(
        self,
        gateway_endpoints: Iterable[Endpoint],
        user_events: Iterable[str] = (),
        catalog: EventCatalog | None = None,
    ):
        self.catalog = catalog or EventCatalog(user_events=frozenset(user_events))
        self.gateway_endpoints = frozenset(
            Endpoint(ip, port) for ip, port in gateway_endpoints
        )
        if not self.gateway_endpoints:
            raise ValueError("at least one gateway endpoint is required")
        self.active: dict[int, Thread] = {}
        self.terminated: dict[int, Thread] = {}
        self._all_threads: list[Thread] = []
        self.sockets: dict[SocketKey, SocketRecord] = {}
        self.minted: list[int] = []
        self._next_trace_id = 1
        self.counters: Counter[str] = Counter()
        self.unattributed: Counter[str] = Counter()
        self.last_ns = 0
        self.finalized = False

    # ------------------------------------------------------------------
    # thread pool

    def _thread(self, record: TraceRecord) -> Thread:
        thread = self.active.get(record.pid)
        if thread is None:
            # Late events for an already-terminated pid stay on the retired
            # thread rather than spawning a ghost.
            thread = self.terminated.get(record.pid)
        if thread is None:
            thread = Thread(pid=record.pid, comm=record.comm)
            self.active[record.pid] = thread
            self._all_threads.append(thread)
        elif record.comm:
            thread.comm = record.comm
        return thread

    def _spawn_child(self, pid: int, comm: str, parent: int) -> Thread:
        existing = self.active.get(pid)
        if existing is not None:
            # Fork naming a pid that is still live: anomalous stream. Reuse
            # the live thread as the child rather than inventing a twin.
            self.counters["fork_existing_pid"] += 1
            existing.parent = parent
            return existing
        self.terminated.pop(pid, None)  # pid reuse after exit
        child = Thread(pid=pid, comm=comm, parent=parent)
        self.active[pid] = child
        self._all_threads.append(child)
        return child

    def _find_thread(self, pid: int) -> Thread | None:
        return self.active.get(pid) or self.terminated.get(pid)

    # ------------------------------------------------------------------
    # state lifecycle

    def _add_state(self, thread: Thread, state: State) -> bool:
        if state.key in thread.active_states:
            return False
        thread.active_states[state.key] = state
        return True

    def _end_state(
        self, thread: Thread, state: State, end_ns: int, flag: str | None = None
    ) -> None:
        state.end_ns = max(end_ns, state.start_ns)
        if flag:
            state.flags.add(flag)
        del thread.active_states[state.key]
        thread.ended_states.append(state)

    # ------------------------------------------------------------------
    # event handlers

    def handle(self, record: TraceRecord) -> None:
        if self.finalized:
            raise RuntimeError("engine already finalized")
        if record.timestamp_ns > self.last_ns:
            self.last_ns = record.timestamp_ns
        event = record.event
        if event in SYSCALL_EVENTS:
            self._syscall_boundary(record)
        elif event in TCP_SEND_PROBES:
            self._tcp_send(record)
        elif event == TCP_RCV_EVENT:
            self._tcp_receive(record)
        elif event == FORK_EVENT:
            self._fork(record)
        elif event == EXIT_EVENT:
            self._exit(record)
        elif event in self.catalog.user_events:
            self._user_event(record)
        else:
            self.counters["ignored_events"] += 1

    def consume(self, records: Iterable[TraceRecord]) -> None:
        for record in records:
            self.handle(record)

    def _syscall_boundary(self, record: TraceRecord) -> None:
        thread = self._thread(record)
        if record.event.startswith(SYSCALL_ENTER_PREFIX):
            name = record.event[len(SYSCALL_ENTER_PREFIX):]
            if thread.in_syscall is not None:
                self.counters["nested_syscall_enter"] += 1
                log.debug(
                    "pid %d enters %s while inside %s",
                    thread.pid, name, thread.in_syscall,
                )
            thread.in_syscall = name
        else:
            thread.in_syscall = None

    def _tcp_send(self, record: TraceRecord) -> None:
        """Outgoing TCP data: classify the socket, maybe end a span."""
        thread = self._thread(record)
        if thread.in_syscall not in SEND_SYSCALLS:
            self.counters["orphan_probe"] += 1
            return
        conn = _conn_from_args(record.args)
        if conn is None:
            self.counters["bad_tuple_args"] += 1
            return
        key = conn.normalized()
        sock = self.sockets.get(key)
        if sock is None:
            sock = SocketRecord(key=key)
            self.sockets[key] = sock
        sock.sender_thread = thread.pid
        sock.transmission_type = REQUEST
        sock.last_direction = conn
        # Sending back to a requester ends that span; first match in state
        # creation order wins, extra simultaneous matches are only counted.
        first = None
        extra = 0
        for state in thread.active_states.values():
            if isinstance(state, NetworkState) and state.source == conn.dst:
                if first is None:
                    first = state
                else:
                    extra += 1
        if first is not None:
            sock.transmission_type = RESPONSE
            self._end_state(thread, first, record.timestamp_ns)
            if extra:
                self.counters["multi_match_response"] += 1

    def _tcp_receive(self, record: TraceRecord) -> None:
        """Incoming TCP data: propagate the sender's traces or mint one."""
        thread = self._thread(record)
        if thread.in_syscall not in RECEIVE_SYSCALLS:
            self.counters["orphan_probe"] += 1
            return
        conn = _conn_from_args(record.args)
        if conn is None:
            self.counters["bad_tuple_args"] += 1
            return
        local, remote = conn.src, conn.dst  # receiver-local orientation
        key = conn.normalized()
        sock = self.sockets.get(key)
        if sock is not None and sock.transmission_type == REQUEST:
            if sock.sender_thread == EXTERNAL_THREAD:
                # The in-flight request on this socket was already minted;
                # further copies to user space are duplicates.
                self.counters["duplicate_receive"] += 1
                return
            sender = self._find_thread(sock.sender_thread)
            if sender is None:
                self.counters["unknown_sender"] += 1
                return
            direction = sock.last_direction
            for trace_id in sorted(sender.active_traces):
                state = NetworkState(
                    source_thread=sender.pid,
                    conn=direction,
                    trace_id=trace_id,
                    owner_pid=thread.pid,
                    source=direction.src,
                    start_ns=record.timestamp_ns,
                )
                if not self._add_state(thread, state):
                    self.counters["duplicate_receive"] += 1
        elif local in self.gateway_endpoints:
            # Arrival on a gateway endpoint with no observed in-flight
            # request: traffic from the untraced outside, new trace.
            trace_id = self._mint()
            direction = Tcp4Tuple(src=remote, dst=local)
            state = NetworkState(
                source_thread=EXTERNAL_THREAD,
                conn=direction,
                trace_id=trace_id,
                owner_pid=thread.pid,
                source=remote,
                start_ns=record.timestamp_ns,
            )
            self._add_state(thread, state)
            self.sockets[key] = SocketRecord(
                key=key,
                sender_thread=EXTERNAL_THREAD,
                transmission_type=REQUEST,
                last_direction=direction,
            )
        elif sock is None:
            self.counters["receive_on_unknown_socket"] += 1
        # else: a response landing back on the requester; no state.

    def _mint(self) -> int:
        trace_id = self._next_trace_id
        self._next_trace_id += 1
        self.minted.append(trace_id)
        return trace_id

    def _fork(self, record: TraceRecord) -> None:
        parent = self._thread(record)
        child_pid_raw = record.args.get("child_pid", "")
        if not child_pid_raw.isdigit():
            self.counters["bad_fork_args"] += 1
            return
        child_pid = int(child_pid_raw)
        child_comm = record.args.get("child_comm", parent.comm)
        child = self._spawn_child(child_pid, child_comm, parent.pid)
        for trace_id in sorted(parent.active_traces):
            state = ForkState(
                parent_pid=parent.pid,
                trace_id=trace_id,
                owner_pid=child_pid,
                start_ns=record.timestamp_ns,
            )
            if not self._add_state(child, state):
                self.counters["duplicate_fork"] += 1

    def _exit(self, record: TraceRecord) -> None:
        thread = self.active.pop(record.pid, None)
        if thread is None:
            self.counters["exit_unknown_pid"] += 1
            return
        for state in list(thread.active_states.values()):
            # An un-responded network span cut short by exit is flagged; a
            # fork span ending at exit is its normal end.
            flag = FLAG_ENDED_BY_EXIT if isinstance(state, NetworkState) else None
            self._end_state(thread, state, record.timestamp_ns, flag)
        thread.alive = False
        thread.in_syscall = None
        self.terminated[record.pid] = thread

    def _user_event(self, record: TraceRecord) -> None:
        thread = self._thread(record)
        if thread.active_states:
            for state in thread.active_states.values():
                state.tallies[record.event] += 1
        else:
            self.unattributed[record.event] += 1

    # ------------------------------------------------------------------

    def finalize(self, end_timestamp: int | None = None) -> EngineSnapshot:
        """End still-open states, freeze the pools, and return them."""
        if self.finalized:
            raise RuntimeError("engine already finalized")
        end_ns = self.last_ns if end_timestamp is None else end_timestamp
        for thread in self._all_threads:
            for state in list(thread.active_states.values()):
                self._end_state(thread, state, end_ns, FLAG_OPEN_AT_END)
        self.finalized = True
        return EngineSnapshot(
            threads=list(self._all_threads),
            sockets=dict(self.sockets),
            minted_traces=list(self.minted),
            counters=dict(self.counters),
            unattributed=Counter(self.unattributed),
            end_ns=end_ns,
        )
