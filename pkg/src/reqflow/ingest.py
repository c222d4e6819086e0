"""Trace-log parsing, per-CPU stream merge, and pid filtering.

Two input formats are handled.

ftrace text reports, one event per line::

    <comm>-<pid> [<cpu>] <flags> <secs>.<frac>: <event>: <key=value ...>

The fractional part carries six or nine digits depending on the configured
trace clock; both normalize to integer nanoseconds. Lines starting with '#'
are comments. The flags column is optional and ignored.

bpftrace output following this tool's capture convention, tab separated::

    ts_ns<TAB>cpu<TAB>pid<TAB>comm<TAB>event<TAB>k=v<TAB>k=v...

Blank lines and "Attaching N probes..." banners are skipped. Anything else
that does not parse raises MalformedLineError carrying the line number; the
stream reader either aborts (strict) or counts the line and continues.
"""

from __future__ import annotations

import heapq
import re
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from operator import attrgetter

from .records import FORK_EVENT, TraceRecord

BACKENDS = ("ftrace", "bpftrace")


class MalformedLineError(ValueError):
    def __init__(self, message: str, line_number: int | None = None, line: str = ""):
        self.line_number = line_number
        self.line = line
        where = f" at line {line_number}" if line_number is not None else ""
        super().__init__(f"{message}{where}: {line.rstrip()!r}")


class UnsortedStreamError(ValueError):
    def __init__(self, stream_index: int, position: int):
        self.stream_index = stream_index
        self.position = position
        super().__init__(
            f"stream {stream_index} regresses in time at record {position}"
        )


# comm is greedy so pids embedded in the name ("web-7" pid 42) resolve to the
# last dash-number group before the cpu bracket.
_FTRACE_RE = re.compile(
    r"^\s*(?P<comm>.+)-(?P<pid>\d+)\s+\[(?P<cpu>\d+)\]"
    r"(?:\s+(?P<flags>\S+))?\s+(?P<secs>\d+)\.(?P<frac>\d{6}|\d{9}):\s+"
    r"(?P<event>[^\s:]+):\s*(?P<args>.*)$"
)


def _parse_kv(tokens: Iterable[str], line_number: int | None, line: str) -> dict[str, str]:
    args: dict[str, str] = {}
    last = None
    for token in tokens:
        if "=" in token:
            key, value = token.split("=", 1)
            if not key:
                raise MalformedLineError("empty arg key", line_number, line)
            if key in args:
                raise MalformedLineError(f"duplicate arg key {key!r}", line_number, line)
            args[key] = value
            last = key
        elif last is not None:
            # A bare token continues the previous value (values may contain
            # spaces in the ftrace format).
            args[last] += " " + token
        else:
            raise MalformedLineError(f"arg token without '=': {token!r}", line_number, line)
    return args


def parse_ftrace_line(line: str, line_number: int | None = None) -> TraceRecord | None:
    """Parse one ftrace report line; return None for comments and blanks."""
    stripped = line.strip()
    if not stripped or stripped.startswith("#"):
        return None
    match = _FTRACE_RE.match(line.rstrip("\n"))
    if match is None:
        raise MalformedLineError("unrecognized ftrace line", line_number, line)
    frac = match["frac"]
    scale = 1000 if len(frac) == 6 else 1
    timestamp_ns = int(match["secs"]) * 1_000_000_000 + int(frac) * scale
    args = _parse_kv(match["args"].split(), line_number, line)
    return TraceRecord(
        timestamp_ns=timestamp_ns,
        cpu=int(match["cpu"]),
        pid=int(match["pid"]),
        comm=match["comm"],
        event=match["event"],
        args=args,
    )


def parse_bpftrace_line(line: str, line_number: int | None = None) -> TraceRecord | None:
    """Parse one line of the tab-separated bpftrace convention."""
    stripped = line.rstrip("\n")
    if not stripped.strip():
        return None
    if stripped.startswith("Attaching "):
        return None
    parts = stripped.split("\t")
    if len(parts) < 5:
        raise MalformedLineError("expected at least 5 tab fields", line_number, line)
    try:
        timestamp_ns = int(parts[0])
        cpu = int(parts[1])
        pid = int(parts[2])
    except ValueError:
        raise MalformedLineError("non-integer header field", line_number, line) from None
    event = parts[4]
    if not event:
        raise MalformedLineError("empty event name", line_number, line)
    args = _parse_kv(parts[5:], line_number, line)
    return TraceRecord(
        timestamp_ns=timestamp_ns,
        cpu=cpu,
        pid=pid,
        comm=parts[3],
        event=event,
        args=args,
    )


_PARSERS = {"ftrace": parse_ftrace_line, "bpftrace": parse_bpftrace_line}


@dataclass
class ParseStats:
    parsed: int = 0
    skipped: int = 0
    malformed: int = 0
    errors: list[str] = field(default_factory=list)

    def record_error(self, exc: MalformedLineError) -> None:
        self.malformed += 1
        if len(self.errors) < 10:
            self.errors.append(str(exc))


def read_stream(
    lines: Iterable[str],
    backend: str,
    strict: bool = False,
    stats: ParseStats | None = None,
) -> Iterator[TraceRecord]:
    """Yield records from raw lines, assigning per-stream sequence numbers."""
    if backend not in _PARSERS:
        raise ValueError(f"unknown backend {backend!r}, expected one of {BACKENDS}")
    parse = _PARSERS[backend]
    stats = stats if stats is not None else ParseStats()
    seq = 0
    for line_number, line in enumerate(lines, 1):
        try:
            record = parse(line, line_number)
        except MalformedLineError as exc:
            if strict:
                raise
            stats.record_error(exc)
            continue
        if record is None:
            stats.skipped += 1
            continue
        record.seq = seq
        seq += 1
        stats.parsed += 1
        yield record


_MERGE_KEY = attrgetter("timestamp_ns", "cpu", "seq")


def _checked(stream: Iterable[TraceRecord], index: int) -> Iterator[TraceRecord]:
    last = None
    for position, record in enumerate(stream):
        if last is not None and record.timestamp_ns < last:
            raise UnsortedStreamError(index, position)
        last = record.timestamp_ns
        yield record


def merge_streams(streams: Sequence[Iterable[TraceRecord]]) -> Iterator[TraceRecord]:
    """Merge per-CPU streams into one sequence ordered by (ts, cpu, seq).

    Each input stream must be internally non-decreasing in timestamp;
    a violation raises UnsortedStreamError naming the stream and position.
    Ties across streams resolve by cpu then seq, so the output equals a
    stable sort of the concatenated input.
    """
    checked = [_checked(stream, index) for index, stream in enumerate(streams)]
    return heapq.merge(*checked, key=_MERGE_KEY)


@dataclass
class IngestConfig:
    backend: str = "ftrace"
    pid_allowlist: frozenset[int] = frozenset()
    follow_forks: bool = False


def filter_records(
    records: Iterable[TraceRecord], config: IngestConfig
) -> Iterator[TraceRecord]:
    """Keep records for allowlisted pids, optionally following forks.

    An empty allowlist passes everything through. With follow_forks, a
    sched_process_fork from a retained pid extends the allowlist with the
    child pid from that point in the stream on. Output order and
    multiplicity are a subsequence of the input.
    """
    allowed = set(config.pid_allowlist)
    if not allowed:
        yield from records
        return
    for record in records:
        if (
            config.follow_forks
            and record.event == FORK_EVENT
            and record.pid in allowed
        ):
            child = record.args.get("child_pid", "")
            if child.isdigit():
                allowed.add(int(child))
        if record.pid in allowed:
            yield record
