"""Lightweight region tracing for the simulation loop.

A :class:`Tracer` collects :class:`TraceEvent` records from scoped
timers placed around the hot regions of a run (assembly, solves,
staging copies, ...).  Events live in a bounded ring buffer; overflow
drops the oldest events and counts them.  The CSV output is sorted by
start time so interleaved regions read chronologically.
"""

from __future__ import annotations

import csv
import enum
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass

__all__ = [
    "Region",
    "RegionSummary",
    "TraceEvent",
    "Tracer",
    "read_trace_csv",
    "region_scope",
    "summarize",
    "write_trace_csv",
]

TRACE_HEADER = ["region", "step", "corrector_iter", "start_ns", "duration_ns"]


class Region(enum.Enum):
    """Instrumented phases of a simulation run."""

    ASSEMBLY = "Assembly"
    SOLVE = "Solve"
    PREDICTOR = "Predictor"
    CONVERGE = "Converge"
    STAGE_IN = "StageIn"
    STAGE_OUT = "StageOut"
    IO = "IO"
    # reordering work inside the direct solver; separate from Solve so
    # ordering reuse is visible in traces
    ORDERING = "Ordering"


_REGION_BY_VALUE = {region.value: region for region in Region}


@dataclass
class TraceEvent:
    region: Region
    step: int
    corrector_iter: int
    start_ns: int
    duration_ns: int


class Tracer:
    """Bounded event collector.

    ``capacity`` limits the buffer; when full, the oldest event is
    dropped and ``dropped`` incremented.  A disabled tracer records
    nothing, so scopes cost almost nothing when tracing is off.
    """

    def __init__(self, capacity: int = 1_000_000, enabled: bool = True):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.enabled = enabled
        self.dropped = 0
        self._events: deque[TraceEvent] = deque()

    def add(self, event: TraceEvent) -> None:
        if not self.enabled:
            return
        if len(self._events) == self.capacity:
            self._events.popleft()
            self.dropped += 1
        self._events.append(event)

    @property
    def events(self) -> list[TraceEvent]:
        return list(self._events)

    def __len__(self) -> int:
        return len(self._events)


@contextmanager
def region_scope(tracer: Tracer | None, region: Region, step: int = -1, corrector_iter: int = -1):
    """Time a block and record it; a no-op when tracer is absent/disabled."""
    if tracer is None or not tracer.enabled:
        yield
        return
    start = time.perf_counter_ns()
    try:
        yield
    finally:
        tracer.add(
            TraceEvent(
                region=region,
                step=step,
                corrector_iter=corrector_iter,
                start_ns=start,
                duration_ns=time.perf_counter_ns() - start,
            )
        )


def write_trace_csv(events, path) -> None:
    """Write events sorted by start time."""
    ordered = sorted(events, key=lambda e: e.start_ns)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for e in ordered:
            writer.writerow([e.region.value, e.step, e.corrector_iter, e.start_ns, e.duration_ns])


def read_trace_csv(path) -> list[TraceEvent]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected trace header {header!r}")
        events = []
        for row in reader:
            if len(row) != 5:
                raise ValueError(f"{path}: malformed trace row {row!r}")
            name = row[0]
            if name not in _REGION_BY_VALUE:
                raise ValueError(f"{path}: unknown region {name!r}")
            events.append(
                TraceEvent(
                    region=_REGION_BY_VALUE[name],
                    step=int(row[1]),
                    corrector_iter=int(row[2]),
                    start_ns=int(row[3]),
                    duration_ns=int(row[4]),
                )
            )
    return events


@dataclass
class RegionSummary:
    count: int
    total_ns: int
    mean_ns: float


def summarize(events) -> dict[Region, RegionSummary]:
    """Per-region event count, total duration and mean duration."""
    out: dict[Region, RegionSummary] = {}
    for e in events:
        s = out.get(e.region)
        if s is None:
            out[e.region] = RegionSummary(count=1, total_ns=e.duration_ns, mean_ns=0.0)
        else:
            s.count += 1
            s.total_ns += e.duration_ns
    for s in out.values():
        s.mean_ns = s.total_ns / s.count
    return out
