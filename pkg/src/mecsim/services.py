"""MEC services: the service base, Service Registry, RNIS and Location Service."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from .ran import Aggregator, EmptyHistory, L2_MEASURES, Position, Ran, UnknownCell, UnknownUe
from .servicequeue import (BackgroundModel, NotificationJob, ServiceQueue, ServiceRequest,
                           ServiceTimeModel)

logger = logging.getLogger(__name__)


class ServiceError(Exception):
    """Error raised inside a request handler; ``status`` is an HTTP-style code."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class DuplicateRegistration(ValueError):
    pass


class InvalidRadius(ValueError):
    pass


class UnknownSubscription(KeyError):
    pass


@dataclass
class Response:
    status: int
    body: Any = None

    @property
    def ok(self) -> bool:
        return self.status < 400


@dataclass(frozen=True)
class ServiceDescriptor:
    name: str
    host_id: str
    address: str
    port: int
    version: str = "2.1.1"

    @property
    def endpoint(self) -> str:
        return f"{self.address}:{self.port}"

    def as_dict(self) -> dict:
        return {"serName": self.name, "hostId": self.host_id, "version": self.version,
                "transportInfo": {"endpoint": {"addresses": [
                    {"host": self.address, "port": self.port}]}}}


class MecServiceBase:
    """HTTP-less service scaffold: a :class:`ServiceQueue` plus request dispatch.

    Subclasses implement ``handle_<kind>(params) -> Response``.
    """

    def __init__(self, engine, name: str, host_id: str, *, address: str = "10.0.5.2",
                 port: int = 10020, service_time: ServiceTimeModel | None = None,
                 background: BackgroundModel | None = None, capacity: int | None = None):
        self.engine = engine
        self.name = name
        self.host_id = host_id
        self.descriptor = ServiceDescriptor(name, host_id, address, port)
        self.queue = ServiceQueue(engine, f"{host_id}/{name}", service_time,
                                  background=background, capacity=capacity,
                                  handler=self._handle)

    def request(self, kind: str, params: dict | None = None, *, requester=None,
                on_response: Callable | None = None, is_foreground: bool = True) -> ServiceRequest:
        """Queue a request; ``on_response(req)`` fires at departure with ``req.response`` set."""
        req = ServiceRequest(kind, requester, params or {}, is_foreground, on_response)
        return self.queue.submit_request(req)

    def _handle(self, req: ServiceRequest) -> Response:
        method = getattr(self, "handle_" + req.kind.replace("-", "_"), None)
        if method is None:
            return Response(404, {"error": f"unknown resource {req.kind!r}"})
        try:
            return method(req.params)
        except ServiceError as exc:
            return Response(exc.status, {"error": str(exc)})
        except (UnknownUe, UnknownCell, UnknownSubscription) as exc:
            return Response(404, {"error": f"{type(exc).__name__}: {exc.args[0]}"})
        except (ValueError, TypeError, KeyError) as exc:
            return Response(400, {"error": str(exc)})

    def handle_background(self, params) -> Response:
        return Response(200)


class ServiceRegistry(MecServiceBase):
    """System-wide catalogue of MEC services (Mp1 discovery)."""

    def __init__(self, engine, host_id: str = "platform", **kw):
        kw.setdefault("port", 10021)
        super().__init__(engine, "ServiceRegistry", host_id, **kw)
        self._entries: list[ServiceDescriptor] = []

    def register(self, desc: ServiceDescriptor) -> None:
        if any(d.name == desc.name and d.host_id == desc.host_id for d in self._entries):
            raise DuplicateRegistration(f"{desc.name} already registered on {desc.host_id}")
        self._entries.append(desc)

    def deregister(self, name: str, host_id: str) -> None:
        self._entries = [d for d in self._entries if not (d.name == name and d.host_id == host_id)]

    def remove_host(self, host_id: str) -> None:
        self._entries = [d for d in self._entries if d.host_id != host_id]

    def discover(self, name: str | None = None, local_host: str | None = None) -> list[ServiceDescriptor]:
        """Matching services, those on ``local_host`` first."""
        found = [d for d in self._entries if name is None or d.name == name]
        return sorted(found, key=lambda d: d.host_id != local_host)

    def handle_services(self, params) -> Response:
        found = self.discover(params.get("ser_name"), params.get("local_host"))
        return Response(200, [d.as_dict() for d in found])


class Rnis(MecServiceBase):
    """Radio Network Information Service exposing Layer-2 measures."""

    def __init__(self, engine, ran: Ran, host_id: str, **kw):
        kw.setdefault("port", 10022)
        super().__init__(engine, "RNIService", host_id, **kw)
        self.ran = ran

    def layer2_measures(self, cell_ids=(), ue_ids=(), aggregator: Aggregator = Aggregator(),
                        measures=L2_MEASURES) -> dict:
        if not cell_ids and not ue_ids:
            cell_ids = sorted(self.ran.cells)
        cells = [self.ran.cell(c) for c in cell_ids]
        ues = [self.ran.ue(u) for u in ue_ids]
        doc = {"timestamp": self.engine.now, "cellInfo": [], "ueInfo": []}
        for cell in cells:
            entry = {"cellId": cell.cell_id}
            entry.update(self._measures(cell.cell_id, None, aggregator, measures))
            doc["cellInfo"].append(entry)
        for ue in ues:
            entry = {"ueId": ue.ue_id, "cellId": ue.serving_cell}
            if ue.serving_cell is not None:
                entry.update(self._measures(ue.serving_cell, ue.ue_id, aggregator, measures))
            doc["ueInfo"].append(entry)
        return doc

    def _measures(self, cell_id, ue_id, agg, measures) -> dict:
        out = {}
        for m in measures:
            try:
                out[m] = self.ran.query_l2(cell_id, m, agg, ue_id=ue_id)
            except EmptyHistory:
                out[m] = None
        return out

    def handle_layer2_meas(self, params) -> Response:
        agg = Aggregator(params.get("aggregator", "average"), params.get("window"))
        measures = params.get("measures") or L2_MEASURES
        unknown = set(measures) - set(L2_MEASURES)
        if unknown:
            raise ServiceError(400, f"unknown measures {sorted(unknown)}")
        return Response(200, self.layer2_measures(
            params.get("cell_ids", ()), params.get("ue_ids", ()), agg, measures))


@dataclass
class AreaSubscription:
    sub_id: int
    ue_id: str
    center: Position
    radius: float
    direction: str  # entering | leaving
    callback: Any   # callable(notification dict) or URL string
    last_inside: bool = False
    active: bool = True
    delivered: int = 0

    def inside(self, pos: Position) -> bool:
        return pos.distance(self.center) <= self.radius

    def as_dict(self) -> dict:
        cb = self.callback if isinstance(self.callback, str) else None
        return {"subscriptionId": self.sub_id, "ueId": self.ue_id,
                "center": self.center.as_dict(), "radius": self.radius,
                "direction": self.direction, "callbackUrl": cb}


class LocationService(MecServiceBase):
    """UE/cell positions and circular-area enter/leave subscriptions."""

    def __init__(self, engine, ran: Ran, host_id: str, **kw):
        kw.setdefault("port", 10020)
        super().__init__(engine, "LocationService", host_id, **kw)
        self.ran = ran
        self.subscriptions: dict[int, AreaSubscription] = {}
        self._sub_ids = itertools.count(1)
        # delivers notifications whose callback is a URL; installed by the gateway
        self.url_sender: Callable[[AreaSubscription, dict], None] | None = None
        self.sent: list[dict] = []
        ran.mobility_listeners.append(self.evaluate)

    # -- queries ---------------------------------------------------------
    def users(self, ue_ids=(), cell_ids=()) -> list[dict]:
        if ue_ids:
            ues = [self.ran.ue(u) for u in ue_ids]
        elif cell_ids:
            ues = []
            for c in cell_ids:
                ues += [self.ran.ue(u) for u in sorted(self.ran.cell(c).attached_ues)]
        else:
            ues = [self.ran.ues[u] for u in sorted(self.ran.ues)]
        now = self.engine.now
        return [{"ueId": u.ue_id, "cellId": u.serving_cell, "position": u.position.as_dict(),
                 "timestamp": now} for u in ues]

    def cells(self, cell_ids=()) -> list[dict]:
        ids = cell_ids or sorted(self.ran.cells)
        return [{"cellId": c, "position": self.ran.cell(c).position.as_dict()} for c in ids]

    def handle_users(self, params) -> Response:
        return Response(200, {"users": self.users(params.get("ue_ids", ()), params.get("cell_ids", ()))})

    def handle_cells(self, params) -> Response:
        return Response(200, {"cells": self.cells(params.get("cell_ids", ()))})

    # -- subscriptions -----------------------------------------------------
    def subscribe(self, ue_id: str, center, radius: float, direction: str = "entering",
                  callback=None) -> int:
        ue = self.ran.ue(ue_id)
        if not radius > 0:
            raise InvalidRadius(radius)
        _check_direction(direction)
        if isinstance(callback, str) and not callback.startswith(("http://", "https://")):
            raise ValueError(f"bad callback URL {callback!r}")
        sub = AreaSubscription(next(self._sub_ids), ue_id, Position.of(center), float(radius),
                               direction, callback)
        sub.last_inside = sub.inside(ue.position)
        self.subscriptions[sub.sub_id] = sub
        return sub.sub_id

    def modify(self, sub_id: int, direction: str | None = None, center=None,
               radius: float | None = None) -> None:
        sub = self._sub(sub_id)
        if direction is not None:
            _check_direction(direction)
        if radius is not None and not radius > 0:
            raise InvalidRadius(radius)
        if direction is not None:
            sub.direction = direction
        if center is not None:
            sub.center = Position.of(center)
        if radius is not None:
            sub.radius = float(radius)
        sub.last_inside = sub.inside(self.ran.ue(sub.ue_id).position)

    def unsubscribe(self, sub_id: int) -> None:
        self._sub(sub_id)
        del self.subscriptions[sub_id]

    def _sub(self, sub_id) -> AreaSubscription:
        try:
            return self.subscriptions[int(sub_id)]
        except (KeyError, ValueError):
            raise UnknownSubscription(sub_id) from None

    def evaluate(self, moved=None) -> list[NotificationJob]:
        """Check every subscription against current positions; queue notifications."""
        jobs = []
        now = self.engine.now
        for sub_id in sorted(self.subscriptions):
            sub = self.subscriptions[sub_id]
            if not sub.active:
                continue
            pos = self.ran.ue(sub.ue_id).position
            inside = sub.inside(pos)
            if inside == sub.last_inside:
                continue
            sub.last_inside = inside
            event = "entering" if inside else "leaving"
            if event != sub.direction:
                continue
            payload = {"subscriptionId": sub.sub_id, "ueId": sub.ue_id, "event": event,
                       "position": pos.as_dict(), "timestamp": now}
            job = NotificationJob(sub, payload, self._deliver)
            jobs.append(self.queue.submit_notification(job))
        return jobs

    def _deliver(self, job: NotificationJob) -> None:
        sub = job.subscription
        if sub.sub_id not in self.subscriptions or not sub.active:
            return
        payload = dict(job.payload, deliveredAt=self.engine.now)
        sub.delivered += 1
        self.sent.append(payload)
        if callable(sub.callback):
            sub.callback(payload)
        elif isinstance(sub.callback, str):
            if self.url_sender is None:
                logger.warning("no URL sender configured; dropping notification for %s", sub.callback)
            else:
                self.url_sender(sub, payload)

    def handle_subscribe_area(self, params) -> Response:
        sub_id = self.subscribe(params["ueId"], params["center"], float(params["radius"]),
                                params.get("direction", "entering"),
                                params.get("callbackUrl", params.get("callback")))
        return Response(201, self.subscriptions[sub_id].as_dict())

    def handle_modify_area(self, params) -> Response:
        self.modify(params["subscriptionId"], params.get("direction"), params.get("center"),
                    None if params.get("radius") is None else float(params["radius"]))
        return Response(200, self._sub(params["subscriptionId"]).as_dict())

    def handle_delete_area(self, params) -> Response:
        self.unsubscribe(params["subscriptionId"])
        return Response(204)


def _check_direction(direction: str) -> None:
    if direction not in ("entering", "leaving"):
        raise ValueError(f"direction must be 'entering' or 'leaving', not {direction!r}")
