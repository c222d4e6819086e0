"""Record types and event names shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple


class Endpoint(NamedTuple):
    ip: str
    port: int

    def __str__(self) -> str:
        return f"{self.ip}:{self.port}"


@dataclass(slots=True)
class TraceRecord:
    """One normalized kernel event.

    timestamp_ns is monotonic integer nanoseconds. seq is the record's
    position within its source stream and breaks timestamp ties
    deterministically during merge.
    """

    timestamp_ns: int
    cpu: int
    pid: int
    comm: str
    event: str
    args: dict[str, str] = field(default_factory=dict)
    seq: int = 0


# Syscalls whose enter/exit tracepoints bracket TCP activity.
SEND_SYSCALLS = frozenset(("sendto", "sendmsg", "write", "writev"))
RECEIVE_SYSCALLS = frozenset(("recvfrom", "recvmsg", "read", "readv"))

SYSCALL_ENTER_PREFIX = "sys_enter_"
SYSCALL_EXIT_PREFIX = "sys_exit_"

# Two kprobes cover outgoing TCP data; names match the capture scripts.
TCP_SEND_PROBES = frozenset(("tcp_send_sock_sendmsg", "tcp_send_sys_sendmsg"))
TCP_RCV_EVENT = "tcp_rcv_space_adjust"
FORK_EVENT = "sched_process_fork"
EXIT_EVENT = "sched_process_exit"


def _syscall_events() -> frozenset[str]:
    names = []
    for syscall in SEND_SYSCALLS | RECEIVE_SYSCALLS:
        names.append(SYSCALL_ENTER_PREFIX + syscall)
        names.append(SYSCALL_EXIT_PREFIX + syscall)
    return frozenset(names)


SYSCALL_EVENTS = _syscall_events()

STRUCTURAL_EVENTS = frozenset(
    SYSCALL_EVENTS | TCP_SEND_PROBES | {TCP_RCV_EVENT, FORK_EVENT, EXIT_EVENT}
)


@dataclass(frozen=True)
class EventCatalog:
    """Event names the reconstructor consumes.

    structural_events drive state transitions; user_events are tallied into
    whichever spans are active on the thread when they fire. The two sets
    must not overlap.
    """

    structural_events: frozenset[str] = STRUCTURAL_EVENTS
    user_events: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        overlap = self.structural_events & self.user_events
        if overlap:
            raise ValueError(
                f"user events shadow structural events: {sorted(overlap)}"
            )
