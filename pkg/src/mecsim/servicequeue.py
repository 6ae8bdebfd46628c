"""Queueing core of a MEC service.

Two mutually exclusive operating modes:

* explicit: every job (foreground or background) sits in a FIFO and a single
  server works through them, notifications first;
* generator: only foreground jobs are stored. Congestion from background
  traffic is drawn from the M/M/1 state distribution at each foreground
  arrival, so the cost does not depend on the background rate.
"""
from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

logger = logging.getLogger(__name__)


class UnstableConfiguration(ValueError):
    pass


class QueueOverflow(RuntimeError):
    pass


# -- samplers -----------------------------------------------------------------

def sample_backlog(rho: float, rng: np.random.Generator) -> int:
    """Number of jobs found in an M/M/1 system, ``P(n) = rho**n * (1 - rho)``.

    Inverse-CDF draw: ``P(N >= n) = rho**n``.
    """
    if not 0.0 <= rho < 1.0:
        raise UnstableConfiguration(f"rho={rho} outside [0, 1)")
    if rho == 0.0:
        return 0
    u = 1.0 - rng.random()  # (0, 1]
    return int(math.floor(math.log(u) / math.log(rho)))


def sample_bg_arrivals(lambda_b: float, t0: float, t1: float, rng: np.random.Generator) -> int:
    """Background arrivals in ``[t0, t1)``: Poisson with mean ``lambda_b * (t1 - t0)``."""
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    mean = lambda_b * (t1 - t0)
    return int(rng.poisson(mean)) if mean > 0 else 0


def erlang(k: int, mu: float, rng: np.random.Generator) -> float:
    """Sum of ``k`` independent exponential(mu) service times."""
    return float(rng.gamma(k, 1.0 / mu))


# -- models -------------------------------------------------------------------

@dataclass
class BackgroundModel:
    """Analytic M/M/1 background load for one service.

    ``lambda_f`` is the configured foreground rate, ``lambda_b`` the
    background rate and ``mu`` the service rate, all per second.
    """
    lambda_f: float
    lambda_b: float
    mu: float
    fg_in_system: int = 0
    last_fg_arrival: float | None = None
    last_fg_departure: float | None = None

    def __post_init__(self):
        if self.lambda_f < 0 or self.lambda_b < 0 or self.mu <= 0:
            raise ValueError("rates must be non-negative and mu positive")
        if self.lambda_f + self.lambda_b >= self.mu:
            raise UnstableConfiguration(
                f"unstable: lambda_f + lambda_b = {self.lambda_f + self.lambda_b} >= mu = {self.mu}")
        if self.lambda_f > self.lambda_b / 10:
            logger.warning("background model: lambda_f=%g is not << lambda_b=%g",
                           self.lambda_f, self.lambda_b)

    @property
    def rho(self) -> float:
        return (self.lambda_f + self.lambda_b) / self.mu

    def schedule_departure(self, arrival: float, backlog_rng: np.random.Generator,
                           arrivals_rng: np.random.Generator,
                           service_rng: np.random.Generator) -> float:
        """Departure time of a foreground job arriving at ``arrival``; updates state."""
        if self.fg_in_system == 0:
            n = sample_backlog(self.rho, backlog_rng)
            start = arrival
        else:
            n = sample_bg_arrivals(self.lambda_b, self.last_fg_arrival, arrival, arrivals_rng)
            start = self.last_fg_departure
        departure = start + erlang(n + 1, self.mu, service_rng)
        self.fg_in_system += 1
        self.last_fg_arrival = arrival
        self.last_fg_departure = departure
        return departure

    def departed(self) -> None:
        self.fg_in_system -= 1


class ServiceTimeModel:
    """Per-job service time; ``distribution`` is exponential, constant or a callable.

    A callable receives ``(job, rng)`` and returns seconds.
    """

    def __init__(self, mean: float, distribution: str | Callable = "exponential"):
        if not mean > 0:
            raise ValueError("service time mean must be positive")
        if not callable(distribution) and distribution not in ("exponential", "constant"):
            raise ValueError(f"unknown service time distribution {distribution!r}")
        self.mean = mean
        self.distribution = distribution

    @property
    def mu(self) -> float:
        return 1.0 / self.mean

    def sample(self, job, rng: np.random.Generator) -> float:
        if self.distribution == "constant":
            return self.mean
        if self.distribution == "exponential":
            return float(rng.exponential(self.mean))
        return float(self.distribution(job, rng))


# -- jobs ---------------------------------------------------------------------

_ids = itertools.count(1)


@dataclass(eq=False)
class ServiceRequest:
    kind: str
    requester: Any = None
    params: dict = field(default_factory=dict)
    is_foreground: bool = True
    on_response: Callable | None = None
    request_id: int = field(default_factory=lambda: next(_ids))
    arrival: float | None = None
    departure: float | None = None
    response: Any = None

    @property
    def response_time(self) -> float:
        return self.departure - self.arrival


@dataclass(eq=False)
class NotificationJob:
    subscription: Any
    payload: Any = None
    on_done: Callable | None = None
    notification_id: int = field(default_factory=lambda: next(_ids))
    created: float | None = None
    departure: float | None = None

    @property
    def is_foreground(self) -> bool:
        return True


# -- the queue ----------------------------------------------------------------

class ServiceQueue:
    """Single-server queue in front of a MEC service.

    ``handler(request)`` runs when a request completes service and its return
    value is passed to ``request.on_response``. Notification jobs call their
    own ``on_done`` on completion.
    """

    def __init__(self, engine, name: str, service_time: ServiceTimeModel | None = None, *,
                 background: BackgroundModel | None = None, capacity: int | None = None,
                 handler: Callable | None = None):
        self.engine = engine
        self.name = name
        self.service_time = service_time or ServiceTimeModel(0.01)
        self.background = background
        self.capacity = capacity
        self.handler = handler
        self.requests: deque = deque()
        self.notifications: deque = deque()
        self.in_service = None
        self.inflight = 0  # generator mode
        self.max_resident = 0
        self.departure_listeners: list[Callable] = []
        self._svc_rng = engine.rng(f"svc-time/{name}")
        if background is not None:
            self._backlog_rng = engine.rng(f"bg-backlog/{name}")
            self._arrivals_rng = engine.rng(f"bg-arrivals/{name}")

    @property
    def mode(self) -> str:
        return "explicit" if self.background is None else "generator"

    @property
    def resident(self) -> int:
        if self.background is not None:
            return self.inflight
        return len(self.requests) + len(self.notifications) + (self.in_service is not None)

    def _check_capacity(self) -> None:
        if self.capacity is not None and self.resident >= self.capacity:
            raise QueueOverflow(f"service {self.name} queue full ({self.capacity})")

    def submit_request(self, req: ServiceRequest) -> ServiceRequest:
        self._check_capacity()
        req.arrival = self.engine.now
        self._enqueue(req, self.requests)
        return req

    def submit_notification(self, job: NotificationJob) -> NotificationJob:
        self._check_capacity()
        job.created = self.engine.now
        self._enqueue(job, self.notifications)
        return job

    def _enqueue(self, job, fifo: deque) -> None:
        if self.background is not None:
            departure = self.background.schedule_departure(
                self.engine.now, self._backlog_rng, self._arrivals_rng, self._svc_rng)
            self.inflight += 1
            self.max_resident = max(self.max_resident, self.inflight)
            self.engine.schedule_at(departure, self._generated_departure, job)
            return
        fifo.append(job)
        self.max_resident = max(self.max_resident, self.resident)
        if self.in_service is None:
            self._start_next()

    def _start_next(self) -> None:
        if self.notifications:
            job = self.notifications.popleft()
        elif self.requests:
            job = self.requests.popleft()
        else:
            return
        self.in_service = job
        self.engine.schedule_in(self.service_time.sample(job, self._svc_rng), self._finish, job)

    def _finish(self, job) -> None:
        self.in_service = None
        self._complete(job)
        self._start_next()

    def _generated_departure(self, job) -> None:
        self.inflight -= 1
        self.background.departed()
        self._complete(job)

    def _complete(self, job) -> None:
        job.departure = self.engine.now
        if isinstance(job, NotificationJob):
            if job.on_done is not None:
                job.on_done(job)
        else:
            if self.handler is not None:
                job.response = self.handler(job)
            if job.on_response is not None:
                job.on_response(job)
        for listener in self.departure_listeners:
            listener(job)


# -- explicit background population -------------------------------------------

class PoissonSource:
    """Independent Poisson request generator feeding a :class:`ServiceQueue`."""

    def __init__(self, engine, queue: ServiceQueue, rate: float, rng: np.random.Generator,
                 kind: str = "background", name: str = ""):
        self.engine = engine
        self.queue = queue
        self.rate = rate
        self.rng = rng
        self.kind = kind
        self.name = name
        self.sent = 0
        self._event = None

    def start(self) -> None:
        if self.rate > 0:
            self._event = self.engine.schedule_in(self.rng.exponential(1.0 / self.rate), self._fire)

    def stop(self) -> None:
        if self._event is not None:
            self._event.cancel()

    def _fire(self) -> None:
        self.sent += 1
        self.queue.submit_request(ServiceRequest(self.kind, self.name, is_foreground=False))
        self._event = self.engine.schedule_in(self.rng.exponential(1.0 / self.rate), self._fire)


def explicit_background_population(engine, queue: ServiceQueue, count: int,
                                   each_lambda: float) -> list[PoissonSource]:
    """Start ``count`` explicit Poisson sources of rate ``each_lambda`` on ``queue``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = engine.rng(f"bg-explicit/{queue.name}")
    sources = [PoissonSource(engine, queue, each_lambda, rng, name=f"bg{i}") for i in range(count)]
    for s in sources:
        s.start()
    return sources
