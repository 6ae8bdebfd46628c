"""Abstract radio access network.

Positions and mobility, nearest-cell association with handover tracking,
per-UE transport latency for application traffic and a Layer-2 measure
store that feeds the RNIS.
"""
from __future__ import annotations

import bisect
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

L2_MEASURES = (
    "dl_delay", "ul_delay", "dl_throughput", "ul_throughput",
    "active_ue_dl", "active_ue_ul", "data_volume_dl", "data_volume_ul",
)


class UnknownUe(KeyError):
    pass


class UnknownCell(KeyError):
    pass


class UeNotAssociated(RuntimeError):
    pass


class EmptyHistory(LookupError):
    pass


@dataclass(frozen=True)
class Position:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite position {self!r}")

    def distance(self, other: "Position") -> float:
        return math.dist((self.x, self.y, self.z), (other.x, other.y, other.z))

    def as_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "z": self.z}

    @classmethod
    def of(cls, value) -> "Position":
        if isinstance(value, Position):
            return value
        if isinstance(value, dict):
            return cls(float(value.get("x", 0.0)), float(value.get("y", 0.0)),
                       float(value.get("z", 0.0)))
        return cls(*(float(v) for v in value))


# -- mobility ----------------------------------------------------------------

class Stationary:
    def __init__(self, position):
        self.position = Position.of(position)

    def position_at(self, t: float) -> Position:
        return self.position


class LinearMobility:
    """Constant velocity from ``start`` at time ``t0``."""

    def __init__(self, start, velocity, t0: float = 0.0):
        self.start = Position.of(start)
        self.velocity = tuple(float(v) for v in velocity)
        self.t0 = t0

    def position_at(self, t: float) -> Position:
        dt = t - self.t0
        vx, vy, vz = self.velocity
        return Position(self.start.x + vx * dt, self.start.y + vy * dt,
                        self.start.z + vz * dt)


class WaypointMobility:
    """Piecewise-linear path at constant speed; the UE halts on the last waypoint."""

    def __init__(self, waypoints: Sequence, speed: float, t0: float = 0.0):
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.waypoints = [Position.of(w) for w in waypoints]
        if not self.waypoints:
            raise ValueError("at least one waypoint required")
        self.speed = speed
        self.t0 = t0
        # arrival time at each waypoint
        self._times = [t0]
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            self._times.append(self._times[-1] + a.distance(b) / speed)

    def position_at(self, t: float) -> Position:
        times, pts = self._times, self.waypoints
        if t <= times[0]:
            return pts[0]
        if t >= times[-1]:
            return pts[-1]
        i = bisect.bisect_right(times, t) - 1
        span = times[i + 1] - times[i]
        f = (t - times[i]) / span if span > 0 else 1.0
        a, b = pts[i], pts[i + 1]
        return Position(a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f, a.z + (b.z - a.z) * f)


class TraceMobility:
    """Linear interpolation between ``(time, Position)`` records; holds the ends."""

    def __init__(self, records: Iterable[tuple[float, Position]]):
        recs = sorted(records, key=lambda r: r[0])
        if not recs:
            raise ValueError("empty trace")
        self.times = [r[0] for r in recs]
        self.points = [Position.of(r[1]) for r in recs]

    def position_at(self, t: float) -> Position:
        times, pts = self.times, self.points
        if t <= times[0]:
            return pts[0]
        if t >= times[-1]:
            return pts[-1]
        i = bisect.bisect_right(times, t) - 1
        f = (t - times[i]) / (times[i + 1] - times[i])
        a, b = pts[i], pts[i + 1]
        return Position(a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f, a.z + (b.z - a.z) * f)


def load_mobility_trace(path) -> dict[str, TraceMobility]:
    """Read ``time ue_id x y z`` lines (whitespace separated, ``#`` comments)."""
    per_ue: dict[str, list] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'time ue_id x y z'")
        t, ue, x, y, z = parts
        per_ue.setdefault(ue, []).append((float(t), Position(float(x), float(y), float(z))))
    return {ue: TraceMobility(recs) for ue, recs in per_ue.items()}


# -- transport ---------------------------------------------------------------

class Lost:
    """Marker returned by :meth:`Ran.transport_delay` for a dropped message."""

    def __repr__(self):
        return "LOST"


LOST = Lost()


@dataclass
class DelayDist:
    kind: str = "constant"  # constant | uniform | exponential | empirical
    value: float = 0.0      # constant value or exponential mean, seconds
    low: float = 0.0
    high: float = 0.0
    samples: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "exponential", "empirical"):
            raise ValueError(f"unknown delay distribution {self.kind!r}")
        if self.kind == "empirical" and not self.samples:
            raise ValueError("empirical distribution needs samples")
        if min((self.value, self.low, *self.samples), default=0.0) < 0:
            raise ValueError("delays must be non-negative")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "exponential":
            return float(rng.exponential(self.value))
        return float(self.samples[rng.integers(len(self.samples))])

    @classmethod
    def of(cls, spec) -> "DelayDist":
        if isinstance(spec, DelayDist):
            return spec
        if isinstance(spec, (int, float)):
            return cls("constant", float(spec))
        spec = dict(spec)
        if "samples" in spec:
            spec["samples"] = tuple(spec["samples"])
        return cls(**spec)


@dataclass
class TransportProfile:
    dl: DelayDist = field(default_factory=DelayDist)
    ul: DelayDist = field(default_factory=DelayDist)
    loss_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")

    @classmethod
    def of(cls, spec) -> "TransportProfile":
        if spec is None:
            return cls()
        if isinstance(spec, TransportProfile):
            return spec
        return cls(DelayDist.of(spec.get("dl", 0.0)), DelayDist.of(spec.get("ul", 0.0)),
                   float(spec.get("loss_prob", 0.0)))


# -- layer 2 -----------------------------------------------------------------

@dataclass
class L2Sample:
    """One collected measurement; measures not observed are left as ``None``.

    Delays are in milliseconds, throughputs in bit/s, volumes in bytes.
    """
    timestamp: float
    ue_id: str | None = None  # None means a cell aggregate
    dl_delay: float | None = None
    ul_delay: float | None = None
    dl_throughput: float | None = None
    ul_throughput: float | None = None
    active_ue_dl: int | None = None
    active_ue_ul: int | None = None
    data_volume_dl: float | None = None
    data_volume_ul: float | None = None

    def __post_init__(self):
        for name in L2_MEASURES:
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Aggregator:
    kind: str = "average"  # average | moving-average | last-sample
    window: float | None = None

    def __post_init__(self):
        if self.kind not in ("average", "moving-average", "last-sample"):
            raise ValueError(f"unknown aggregator {self.kind!r}")
        if self.kind == "moving-average" and not (self.window and self.window > 0):
            raise ValueError("moving-average needs a positive window")

    def apply(self, samples: list[tuple[float, float]], now: float) -> float:
        """Aggregate ``(timestamp, value)`` pairs in time order."""
        if not samples:
            raise EmptyHistory("no samples")
        if self.kind == "last-sample":
            return samples[-1][1]
        if self.kind == "moving-average":
            samples = [s for s in samples if s[0] >= now - self.window]
            if not samples:
                raise EmptyHistory("no samples inside window")
        return sum(v for _, v in samples) / len(samples)


@dataclass
class UeState:
    ue_id: str
    position: Position
    mobility: object
    transport: TransportProfile
    serving_cell: str | None = None


@dataclass
class CellState:
    cell_id: str
    position: Position
    attached_ues: set = field(default_factory=set)
    l2_history: deque = field(default_factory=lambda: deque(maxlen=1024))


@dataclass(frozen=True)
class HandoverEvent:
    time: float
    ue_id: str
    source: str | None
    target: str


@dataclass
class _Traffic:
    dl_bytes: int = 0
    ul_bytes: int = 0
    dl_delays: list = field(default_factory=list)
    ul_delays: list = field(default_factory=list)


class Ran:
    """Cells, UEs and the transport they share.

    With an ``engine`` attached, :meth:`start` schedules periodic mobility
    updates and, if ``l2_period`` is set, periodic Layer-2 collection built
    from the traffic seen by :meth:`transport_delay`.
    """

    def __init__(self, engine=None, *, mobility_period: float = 0.1,
                 l2_capacity: int = 1024, l2_period: float | None = 1.0):
        self.engine = engine
        self.mobility_period = mobility_period
        self.l2_capacity = l2_capacity
        self.l2_period = l2_period
        self.cells: dict[str, CellState] = {}
        self.ues: dict[str, UeState] = {}
        self.handovers: list[HandoverEvent] = []
        self.mobility_listeners: list[Callable[[dict], None]] = []
        self.handover_listeners: list[Callable[[HandoverEvent], None]] = []
        self._t = 0.0
        self._traffic: dict[str, _Traffic] = {}
        self._rng = engine.rng("ran-transport") if engine is not None else np.random.default_rng(0)

    @property
    def now(self) -> float:
        return self.engine.now if self.engine is not None else self._t

    # -- topology ------------------------------------------------------
    def add_cell(self, cell_id: str, position) -> CellState:
        if cell_id in self.cells:
            raise ValueError(f"duplicate cell {cell_id!r}")
        cell = CellState(cell_id, Position.of(position), l2_history=deque(maxlen=self.l2_capacity))
        self.cells[cell_id] = cell
        for ue in self.ues.values():
            self.associate(ue.ue_id)
        return cell

    def add_ue(self, ue_id: str, position=None, mobility=None, transport=None) -> UeState:
        if ue_id in self.ues:
            raise ValueError(f"duplicate UE {ue_id!r}")
        if mobility is None:
            mobility = Stationary(position if position is not None else (0, 0, 0))
        pos = mobility.position_at(self.now) if position is None else Position.of(position)
        ue = UeState(ue_id, pos, mobility, TransportProfile.of(transport))
        self.ues[ue_id] = ue
        if self.cells:
            self.associate(ue_id)
        return ue

    def ue(self, ue_id: str) -> UeState:
        try:
            return self.ues[ue_id]
        except KeyError:
            raise UnknownUe(ue_id) from None

    def cell(self, cell_id: str) -> CellState:
        try:
            return self.cells[cell_id]
        except KeyError:
            raise UnknownCell(cell_id) from None

    # -- mobility ------------------------------------------------------
    def start(self) -> None:
        if self.engine is None:
            raise RuntimeError("start() needs an engine")
        self.engine.schedule_in(self.mobility_period, self._mobility_tick)
        if self.l2_period:
            self.engine.schedule_in(self.l2_period, self._l2_tick)

    def _mobility_tick(self) -> None:
        self.update_positions(self.engine.now)
        self.engine.schedule_in(self.mobility_period, self._mobility_tick)

    def advance_mobility(self, dt: float) -> dict[str, Position]:
        """Advance the standalone clock by ``dt`` and move every UE."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        self._t += dt
        return self.update_positions(self._t)

    def update_positions(self, t: float) -> dict[str, Position]:
        moved = {}
        for ue in self.ues.values():
            ue.position = ue.mobility.position_at(t)
            moved[ue.ue_id] = ue.position
        if self.cells:
            for ue_id in self.ues:
                self.associate(ue_id, t)
        for listener in self.mobility_listeners:
            listener(moved)
        return moved

    # -- association ---------------------------------------------------
    def nearest_cell(self, position: Position) -> str:
        if not self.cells:
            raise UnknownCell("no cells")
        return min(self.cells.values(),
                   key=lambda c: (c.position.distance(position), c.cell_id)).cell_id

    def associate(self, ue_id: str, t: float | None = None) -> str:
        ue = self.ue(ue_id)
        best = self.nearest_cell(ue.position)
        if best != ue.serving_cell:
            old = ue.serving_cell
            if old is not None:
                self.cells[old].attached_ues.discard(ue_id)
            self.cells[best].attached_ues.add(ue_id)
            ue.serving_cell = best
            ev = HandoverEvent(self.now if t is None else t, ue_id, old, best)
            if old is not None:
                self.handovers.append(ev)
                logger.debug("handover %s: %s -> %s", ue_id, old, best)
                for listener in self.handover_listeners:
                    listener(ev)
        return best

    # -- transport -----------------------------------------------------
    def transport_delay(self, ue_id: str, direction: str, payload_bytes: int = 0):
        """Sample a one-way delay in seconds, or :data:`LOST`."""
        ue = self.ue(ue_id)
        if ue.serving_cell is None:
            raise UeNotAssociated(ue_id)
        prof = ue.transport
        if direction not in ("dl", "ul"):
            raise ValueError("direction must be 'dl' or 'ul'")
        if prof.loss_prob > 0 and self._rng.random() < prof.loss_prob:
            return LOST
        delay = (prof.dl if direction == "dl" else prof.ul).sample(self._rng)
        tr = self._traffic.setdefault(ue_id, _Traffic())
        if direction == "dl":
            tr.dl_bytes += payload_bytes
            tr.dl_delays.append(delay)
        else:
            tr.ul_bytes += payload_bytes
            tr.ul_delays.append(delay)
        return delay

    # -- layer 2 -------------------------------------------------------
    def record_l2(self, cell_id: str, sample: L2Sample) -> None:
        self.cell(cell_id).l2_history.append(sample)

    def _l2_tick(self) -> None:
        self.collect_l2(self.l2_period)
        self.engine.schedule_in(self.l2_period, self._l2_tick)

    def collect_l2(self, period: float) -> None:
        """Turn the traffic seen since the last collection into L2 samples."""
        now = self.now
        for cell in self.cells.values():
            active_dl = active_ul = 0
            vol_dl = vol_ul = 0
            dl_all: list[float] = []
            ul_all: list[float] = []
            for ue_id in sorted(cell.attached_ues):
                tr = self._traffic.pop(ue_id, None)
                if tr is None:
                    continue
                active_dl += bool(tr.dl_delays)
                active_ul += bool(tr.ul_delays)
                vol_dl += tr.dl_bytes
                vol_ul += tr.ul_bytes
                dl_all += tr.dl_delays
                ul_all += tr.ul_delays
                cell.l2_history.append(L2Sample(
                    now, ue_id,
                    dl_delay=_mean_ms(tr.dl_delays), ul_delay=_mean_ms(tr.ul_delays),
                    dl_throughput=tr.dl_bytes * 8 / period, ul_throughput=tr.ul_bytes * 8 / period,
                    data_volume_dl=tr.dl_bytes, data_volume_ul=tr.ul_bytes))
            cell.l2_history.append(L2Sample(
                now, None, dl_delay=_mean_ms(dl_all), ul_delay=_mean_ms(ul_all),
                dl_throughput=vol_dl * 8 / period, ul_throughput=vol_ul * 8 / period,
                active_ue_dl=active_dl, active_ue_ul=active_ul,
                data_volume_dl=vol_dl, data_volume_ul=vol_ul))
        # traffic from UEs that left every cell is dropped
        self._traffic.clear()

    def query_l2(self, cell_id: str, measure: str, agg: Aggregator = Aggregator(),
                 ue_id: str | None = None) -> float:
        """Aggregate one measure over the cell's history (cell aggregate or one UE)."""
        if measure not in L2_MEASURES:
            raise ValueError(f"unknown measure {measure!r}")
        cell = self.cell(cell_id)
        values = [(s.timestamp, getattr(s, measure)) for s in cell.l2_history
                  if s.ue_id == ue_id and getattr(s, measure) is not None]
        return agg.apply(values, self.now)


def _mean_ms(delays: list[float]) -> float | None:
    return 1000.0 * sum(delays) / len(delays) if delays else None

