"""Discrete-event kernel.

Simulated time is held as an integer count of microseconds so that event
ordering never suffers from float drift. The public API speaks seconds.
"""
from __future__ import annotations

import hashlib
import heapq
import logging
import queue
import time
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

logger = logging.getLogger(__name__)

US_PER_S = 1_000_000


def to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def to_seconds(us: int) -> float:
    return us / US_PER_S


class SchedulingInPast(ValueError):
    pass


class ModeError(RuntimeError):
    """Raised when an operation needs the engine in a different run mode."""


class OverrunWarning(RuntimeWarning):
    pass


@dataclass(eq=False)
class Event:
    fire_at: int
    seq: int
    handler: Callable[..., Any]
    args: tuple = ()
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True

    @property
    def time(self) -> float:
        return to_seconds(self.fire_at)

    def __lt__(self, other: "Event") -> bool:
        return (self.fire_at, self.seq) < (other.fire_at, other.seq)


@dataclass
class RealtimeStats:
    pace: float = 1.0
    dispatched: int = 0
    overruns: int = 0
    max_lag: float = 0.0
    ingress: int = 0
    wall_time: float = 0.0


@dataclass
class IngressEvent:
    wall_received: float
    handler: Callable[..., Any]
    args: tuple = field(default_factory=tuple)
    mapped_sim_time: float | None = None


class Engine:
    """Single-threaded event loop with seeded named RNG streams.

    ``run_until`` advances purely in simulated time. ``run_realtime`` paces
    dispatch against the wall clock and accepts work from other threads
    through :meth:`post`.
    """

    def __init__(self, seed: int = 0, *, overrun_threshold: float = 0.05,
                 trace: bool = False):
        self.seed = int(seed)
        self.overrun_threshold = overrun_threshold
        self._clock = 0
        self._seq = 0
        self._heap: list[Event] = []
        self._streams: dict[str, np.random.Generator] = {}
        self.dispatched = 0
        self.trace: list[tuple[int, int, str]] | None = [] if trace else None
        self.mode = "sim"
        self.rt_stats = RealtimeStats()
        self._ingress: queue.SimpleQueue = queue.SimpleQueue()
        self._wall_start = 0.0
        self._pace = 1.0
        self._lag = 0.0

    # -- clock ---------------------------------------------------------
    @property
    def now(self) -> float:
        return to_seconds(self._clock)

    @property
    def now_us(self) -> int:
        return self._clock

    def __len__(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)

    # -- scheduling ----------------------------------------------------
    def schedule_at(self, at: float, handler: Callable[..., Any], *args) -> Event:
        at_us = to_us(at)
        if at_us < self._clock:
            raise SchedulingInPast(f"cannot schedule at {at} < now {self.now}")
        return self._push(at_us, handler, args)

    def schedule_in(self, delay: float, handler: Callable[..., Any], *args) -> Event:
        if delay < 0:
            raise SchedulingInPast(f"negative delay {delay}")
        return self._push(self._clock + to_us(delay), handler, args)

    def _push(self, at_us: int, handler, args) -> Event:
        ev = Event(at_us, self._seq, handler, args)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def _dispatch(self, ev: Event) -> None:
        self._clock = ev.fire_at
        self.dispatched += 1
        if self.trace is not None:
            name = getattr(ev.handler, "__qualname__", repr(ev.handler))
            self.trace.append((ev.fire_at, ev.seq, name))
        ev.handler(*ev.args)

    def _peek(self) -> Event | None:
        heap = self._heap
        while heap and heap[0].cancelled:
            heapq.heappop(heap)
        return heap[0] if heap else None

    def run_until(self, t_end: float) -> int:
        """Dispatch every event with ``fire_at <= t_end``; leave the clock at t_end."""
        end_us = to_us(t_end)
        count = 0
        heap = self._heap
        while heap:
            ev = heap[0]
            if ev.cancelled:
                heapq.heappop(heap)
                continue
            if ev.fire_at > end_us:
                break
            heapq.heappop(heap)
            self._dispatch(ev)
            count += 1
        if end_us > self._clock:
            self._clock = end_us
        return count

    # -- real time -----------------------------------------------------
    def stop(self) -> None:
        """Ask a running real-time loop to return; safe from any thread."""
        self._ingress.put(None)

    def post(self, handler: Callable[..., Any], *args) -> None:
        """Hand work to the event loop from another thread.

        The work becomes an event at ``(wall_received - wall_start) * pace``,
        clamped to the current clock.
        """
        if self.mode != "realtime":
            raise ModeError("engine is not running in real-time mode")
        self._ingress.put(IngressEvent(time.monotonic(), handler, args))

    @property
    def lagging(self) -> bool:
        return self.mode == "realtime" and self._lag > self.overrun_threshold

    def _accept(self, item: IngressEvent) -> None:
        mapped = max(self._clock, to_us((item.wall_received - self._wall_start) * self._pace))
        item.mapped_sim_time = to_seconds(mapped)
        self.rt_stats.ingress += 1
        self._push(mapped, item.handler, item.args)

    def run_realtime(self, pace: float = 1.0, until: float | None = None) -> RealtimeStats:
        """Run with event ``e`` dispatched no earlier than ``wall_start + e.time / pace``.

        Returns when ``until`` is reached or :meth:`stop` is called. Lag beyond
        ``overrun_threshold`` is counted and reported as an :class:`OverrunWarning`.
        """
        if pace <= 0:
            raise ValueError("pace must be positive")
        self._pace = pace
        self.mode = "realtime"
        stats = self.rt_stats = RealtimeStats(pace=pace)
        # sim time already elapsed maps to wall time already elapsed
        started = time.monotonic()
        self._wall_start = started - self.now / pace
        end_us = None if until is None else to_us(until)
        try:
            while True:
                try:
                    while True:
                        item = self._ingress.get_nowait()
                        if item is None:
                            return stats
                        self._accept(item)
                except queue.Empty:
                    pass
                ev = self._peek()
                if ev is None or (end_us is not None and ev.fire_at > end_us):
                    if end_us is None:
                        deadline = None
                    else:
                        deadline = self._wall_start + to_seconds(end_us) / pace
                    timeout = None if deadline is None else deadline - time.monotonic()
                    if timeout is not None and timeout <= 0:
                        self._clock = max(self._clock, end_us)
                        return stats
                    try:
                        item = self._ingress.get(timeout=timeout)
                    except queue.Empty:
                        continue
                    if item is None:
                        return stats
                    self._accept(item)
                    continue
                deadline = self._wall_start + ev.time / pace
                wait = deadline - time.monotonic()
                if wait > 0:
                    try:
                        item = self._ingress.get(timeout=wait)
                    except queue.Empty:
                        continue
                    if item is None:
                        return stats
                    self._accept(item)
                    continue
                heapq.heappop(self._heap)
                lag = -wait
                self._lag = lag
                stats.max_lag = max(stats.max_lag, lag)
                if lag > self.overrun_threshold:
                    stats.overruns += 1
                    warnings.warn(f"event at t={ev.time:.6f} dispatched {lag:.3f}s late",
                                  OverrunWarning, stacklevel=2)
                self._dispatch(ev)
                stats.dispatched += 1
        finally:
            stats.wall_time = time.monotonic() - started
            self.mode = "sim"
            self._lag = 0.0

    # -- randomness ----------------------------------------------------
    def rng(self, name: str) -> np.random.Generator:
        """Deterministic generator for ``(seed, name)``; created once per engine."""
        gen = self._streams.get(name)
        if gen is None:
            gen = make_rng(self.seed, name)
            self._streams[name] = gen
        return gen


def make_rng(seed: int, name: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), key]))
