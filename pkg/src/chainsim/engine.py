"""Deterministic discrete-event core.

Integer-nanosecond virtual clock, a (fire_at, seq)-ordered event heap, and
per-node serialized CPU accounting. A run is strictly single-threaded; with a
fixed seed and scenario the event trace is identical across runs and
platforms (no floats touch the clock).
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

NS = 1
US = 1_000
MS = 1_000_000
SEC = 1_000_000_000


class SimFault(RuntimeError):
    """An event handler raised; the run is aborted with the event named."""


@dataclass(order=True)
class Event:
    fire_at: int
    seq: int
    fn: Callable = field(compare=False)
    args: tuple = field(compare=False)
    target: Any = field(compare=False, default=None)


class Simulator:
    def __init__(self):
        self.now: int = 0
        self._heap: list[Event] = []
        self._next_seq = 0
        self._cpu_busy_until: dict[Any, int] = {}
        self._trace: Optional[Any] = None

    # -- scheduling ---------------------------------------------------------

    def schedule(self, delay: int, fn: Callable, *args, target=None) -> int:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        return self.schedule_at(self.now + delay, fn, *args, target=target)

    def schedule_at(self, at: int, fn: Callable, *args, target=None) -> int:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        seq = self._next_seq
        self._next_seq += 1
        heapq.heappush(self._heap, Event(at, seq, fn, args, target))
        return seq

    # -- execution ----------------------------------------------------------

    def run(self, until: int) -> int:
        """Process every event with fire_at <= until; clock ends at until."""
        if until < self.now:
            raise ValueError("until precedes current time")
        processed = 0
        heap = self._heap
        while heap and heap[0].fire_at <= until:
            ev = heapq.heappop(heap)
            self.now = ev.fire_at
            if self._trace is not None:
                self._trace.update(
                    b"%d|%d|%r|%s;" % (ev.fire_at, ev.seq, ev.target,
                                       ev.fn.__qualname__.encode()))
            try:
                ev.fn(*ev.args)
            except Exception as exc:  # noqa: BLE001 - rewrap with diagnostics
                raise SimFault(
                    f"event seq={ev.seq} at t={ev.fire_at}ns "
                    f"target={ev.target!r} handler={ev.fn.__qualname__}: {exc}"
                ) from exc
            processed += 1
        self.now = until
        return processed

    def pending(self) -> int:
        return len(self._heap)

    # -- CPU budget ---------------------------------------------------------

    def cpu_execute(self, node, cost: int) -> int:
        """Serialize a CPU task on `node`; returns its completion time."""
        if cost < 0:
            raise ValueError("negative cpu cost")
        start = max(self._cpu_busy_until.get(node, 0), self.now)
        completion = start + cost
        self._cpu_busy_until[node] = completion
        return completion

    def cpu_busy_until(self, node) -> int:
        return self._cpu_busy_until.get(node, 0)

    # -- trace hashing (diagnostics/determinism tests) -----------------------

    def enable_trace(self):
        self._trace = hashlib.sha256()

    def trace_hash(self) -> str:
        if self._trace is None:
            raise RuntimeError("trace not enabled")
        return self._trace.hexdigest()
