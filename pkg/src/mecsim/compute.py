"""MEC host resource pool: admission control and the compute(N) primitive."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

logger = logging.getLogger(__name__)

SEGREGATION = "segregation"
FAIR_SHARING = "fair-sharing"

_RESOURCES = ("cpu_rate", "ram", "disk")


class AdmissionRejected(Exception):
    """Admission control refused a request; ``component`` names the violated resource."""

    def __init__(self, component: str, message: str = ""):
        super().__init__(message or f"insufficient {component}")
        self.component = component


class UnknownApp(KeyError):
    pass


class NonPositiveInstructions(ValueError):
    pass


@dataclass(frozen=True)
class ResourceVector:
    cpu_rate: float = 0.0  # instructions per second
    ram: float = 0.0       # bytes
    disk: float = 0.0      # bytes

    def __post_init__(self):
        for name in _RESOURCES:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(self.cpu_rate + other.cpu_rate, self.ram + other.ram,
                              self.disk + other.disk)

    def exceeds(self, capacity: "ResourceVector") -> str | None:
        """Name of the first component above ``capacity``, if any."""
        for name in _RESOURCES:
            if getattr(self, name) > getattr(capacity, name):
                return "cpu" if name == "cpu_rate" else name
        return None

    @classmethod
    def of(cls, spec) -> "ResourceVector":
        if isinstance(spec, ResourceVector):
            return spec
        spec = dict(spec)
        cpu = spec.pop("cpu", spec.pop("cpu_rate", 0.0))
        return cls(float(cpu), float(spec.get("ram", 0.0)), float(spec.get("disk", 0.0)))


@dataclass(eq=False)
class ComputeTask:
    app_id: str
    instructions: float
    requested_at: float       # time the task starts executing
    effective_rate: float
    completes_at: float
    callback: Callable | None = None
    event: object = None


@dataclass
class _Allocation:
    request: ResourceVector
    dummy: bool = False
    tasks: list = field(default_factory=list)  # pending and running, in order


class MecHost:
    """A MEC host's CPU/RAM/disk pool running internal MEC apps.

    Under segregation a computation always runs at the app's stipulated rate.
    Under fair sharing it runs at ``r_i * R / sum(r_j)`` where the sum covers
    dummy loads plus every app with outstanding work when the call is made;
    the rate is frozen for the life of the task.
    """

    def __init__(self, host_id: str, capacity: ResourceVector, engine=None, *,
                 scheduling: str = SEGREGATION, services=(), address: str = "10.0.5.2",
                 base_port: int = 4500):
        if scheduling not in (SEGREGATION, FAIR_SHARING):
            raise ValueError(f"unknown scheduling mode {scheduling!r}")
        self.host_id = host_id
        self.capacity = ResourceVector.of(capacity)
        self.engine = engine
        self.scheduling = scheduling
        self.available_services = set(services)
        self.address = address
        self.allocations: dict[str, _Allocation] = {}
        self._ids = itertools.count(1)
        self._ports = itertools.count(base_port)
        self._allocated: ResourceVector | None = None  # cached sum, reset on release

    # -- bookkeeping ---------------------------------------------------
    @property
    def allocated(self) -> ResourceVector:
        if self._allocated is None:
            total = ResourceVector()
            for a in self.allocations.values():
                total = total + a.request
            self._allocated = total
        return self._allocated

    @property
    def utilization(self) -> float:
        if self.capacity.cpu_rate == 0:
            return 1.0
        return self.allocated.cpu_rate / self.capacity.cpu_rate

    def next_port(self) -> int:
        return next(self._ports)

    def can_admit(self, request: ResourceVector) -> str | None:
        return (self.allocated + ResourceVector.of(request)).exceeds(self.capacity)

    def admit(self, request: ResourceVector, app_id: str | None = None) -> str:
        """Reserve ``request``; raise :class:`AdmissionRejected` when it does not fit."""
        request = ResourceVector.of(request)
        bad = self.can_admit(request)
        if bad:
            raise AdmissionRejected(bad, f"host {self.host_id}: insufficient {bad}")
        if app_id is None:
            app_id = f"{self.host_id}-app{next(self._ids)}"
        if app_id in self.allocations:
            raise ValueError(f"app {app_id!r} already admitted on {self.host_id}")
        self._allocated = self.allocated + request
        self.allocations[app_id] = _Allocation(request)
        return app_id

    def install_dummy_load(self, cpu_rate: float, app_id: str | None = None) -> str:
        app_id = self.admit(ResourceVector(cpu_rate), app_id or f"{self.host_id}-dummy{next(self._ids)}")
        self.allocations[app_id].dummy = True
        return app_id

    def release(self, app_id: str) -> None:
        alloc = self.allocations.pop(app_id, None)
        if alloc is None:
            raise UnknownApp(app_id)
        self._allocated = None
        for task in alloc.tasks:
            if task.event is not None:
                task.event.cancel()
        alloc.tasks.clear()

    # -- computation ---------------------------------------------------
    def _active_sum(self, caller: str) -> float:
        total = 0.0
        for app_id, a in self.allocations.items():
            if a.dummy or a.tasks or app_id == caller:
                total += a.request.cpu_rate
        return total

    def effective_rate(self, app_id: str) -> float:
        """Rate a computation requested now by ``app_id`` would get."""
        try:
            alloc = self.allocations[app_id]
        except KeyError:
            raise UnknownApp(app_id) from None
        r = alloc.request.cpu_rate
        if self.scheduling == SEGREGATION:
            return r
        # the scale factor first: exactly 1.0 when the active sum is R, never below 1 otherwise
        return r * (self.capacity.cpu_rate / self._active_sum(app_id))

    def compute(self, app_id: str, instructions: float, callback: Callable | None = None) -> float:
        """Schedule a block of ``instructions``; return its completion time in seconds.

        A second call from a busy app queues behind its running task.
        """
        if instructions <= 0:
            raise NonPositiveInstructions(instructions)
        rate = self.effective_rate(app_id)
        if rate <= 0:
            raise ValueError(f"app {app_id!r} has no CPU rate")
        alloc = self.allocations[app_id]
        now = self.engine.now if self.engine is not None else 0.0
        start = alloc.tasks[-1].completes_at if alloc.tasks else now
        done = start + instructions / rate
        task = ComputeTask(app_id, instructions, start, rate, done, callback)
        alloc.tasks.append(task)
        if self.engine is not None:
            task.event = self.engine.schedule_at(done, self._complete, app_id, task)
        return done

    def _complete(self, app_id: str, task: ComputeTask) -> None:
        alloc = self.allocations.get(app_id)
        if alloc is not None and task in alloc.tasks:
            alloc.tasks.remove(task)
        if task.callback is not None:
            task.callback(task)
