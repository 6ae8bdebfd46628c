"""MEC system level: descriptors, orchestrator, app contexts, device app, app scaffold."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .compute import MecHost, ResourceVector
from .ran import LOST, Ran
from .services import MecServiceBase, Response, ServiceRegistry

logger = logging.getLogger(__name__)

REQUESTED, INSTANTIATING, RUNNING, TERMINATING, TERMINATED = (
    "requested", "instantiating", "running", "terminating", "terminated")
LIFECYCLE_ORDER = (REQUESTED, INSTANTIATING, RUNNING, TERMINATING, TERMINATED)


class MalformedDescriptor(ValueError):
    pass


class DuplicateAppId(ValueError):
    pass


class UnknownApp(KeyError):
    pass


class UnknownContext(KeyError):
    pass


class PlacementFailed(RuntimeError):
    pass


class NoRunningInstance(LookupError):
    pass


# -- descriptors --------------------------------------------------------------

@dataclass
class AppDescriptor:
    app_id: str
    app_name: str
    virtual_compute: ResourceVector
    app_provider: str = ""
    app_service_required: list = field(default_factory=list)
    emulated_endpoint: tuple[str, int] | None = None
    joinable: bool = False

    @property
    def external(self) -> bool:
        return self.emulated_endpoint is not None

    @classmethod
    def from_dict(cls, doc: dict) -> "AppDescriptor":
        missing = [k for k in ("appId", "appName", "virtualComputeDescriptor") if k not in doc]
        if missing:
            raise MalformedDescriptor(f"missing field(s): {', '.join(missing)}")
        try:
            vc = ResourceVector.of(doc["virtualComputeDescriptor"])
        except (TypeError, ValueError) as exc:
            raise MalformedDescriptor(f"virtualComputeDescriptor: {exc}") from None
        emu = doc.get("emulatedMecApplication")
        if emu is not None:
            try:
                emu = (str(emu["ipAddress"]), int(emu["port"]))
            except (KeyError, TypeError, ValueError):
                raise MalformedDescriptor("emulatedMecApplication needs ipAddress and port") from None
        services = doc.get("appServiceRequired", [])
        if isinstance(services, str):
            services = [services]
        services = [s["serName"] if isinstance(s, dict) else str(s) for s in services]
        desc = cls(str(doc["appId"]), str(doc["appName"]), vc, str(doc.get("appProvider") or ""),
                   services, emu, bool(doc.get("joinable", False)))
        if not desc.external and not desc.app_provider:
            raise MalformedDescriptor("internal app needs appProvider")
        return desc

    def to_dict(self) -> dict:
        doc = {"appId": self.app_id, "appName": self.app_name, "appProvider": self.app_provider,
               "appServiceRequired": list(self.app_service_required),
               "virtualComputeDescriptor": {"cpu": self.virtual_compute.cpu_rate,
                                            "ram": self.virtual_compute.ram,
                                            "disk": self.virtual_compute.disk}}
        if self.emulated_endpoint:
            doc["emulatedMecApplication"] = {"ipAddress": self.emulated_endpoint[0],
                                             "port": self.emulated_endpoint[1]}
        if self.joinable:
            doc["joinable"] = True
        return doc


def load_descriptor(path) -> AppDescriptor:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedDescriptor(f"{path}: {exc}") from None
    return AppDescriptor.from_dict(doc)


@dataclass
class AppContext:
    context_id: int
    descriptor: AppDescriptor
    owner: Any
    state: str = REQUESTED
    host_id: str | None = None
    app_instance_id: str | None = None
    address: str | None = None
    port: int | None = None
    members: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.history.append(self.state)
        if not self.members:
            self.members.append(self.owner)

    def advance(self, state: str) -> None:
        if LIFECYCLE_ORDER.index(state) != LIFECYCLE_ORDER.index(self.state) + 1:
            raise RuntimeError(f"illegal transition {self.state} -> {state}")
        self.state = state
        self.history.append(state)

    @property
    def endpoint(self) -> str | None:
        return None if self.address is None else f"{self.address}:{self.port}"

    def as_dict(self) -> dict:
        return {"contextId": str(self.context_id), "appName": self.descriptor.app_name,
                "appId": self.descriptor.app_id, "state": self.state, "hostId": self.host_id,
                "appInstanceId": self.app_instance_id,
                "userAppInstanceInfo": {"referenceURI": self.endpoint,
                                        "address": self.address, "port": self.port}}


# -- orchestrator -------------------------------------------------------------

class Orchestrator:
    """Host selection. Subclass and override :meth:`choose_best_mec_host` for a new policy.

    The default keeps hosts that can admit the descriptor's compute request and
    offer every required service (on the host itself, or anywhere in the
    system when ``strict`` is off), then takes the least utilised, lowest id
    on ties.
    """

    def __init__(self, hosts: list[MecHost], registry: ServiceRegistry | None = None, *,
                 strict: bool = True):
        self.hosts = hosts
        self.registry = registry
        self.strict = strict

    def _offers(self, host: MecHost, service: str) -> bool:
        if service in host.available_services:
            return True
        return (not self.strict and self.registry is not None
                and bool(self.registry.discover(service)))

    def feasible_hosts(self, descriptor: AppDescriptor) -> list[MecHost]:
        return [h for h in self.hosts
                if h.can_admit(descriptor.virtual_compute) is None
                and all(self._offers(h, s) for s in descriptor.app_service_required)]

    def choose_best_mec_host(self, descriptor: AppDescriptor) -> MecHost:
        hosts = self.feasible_hosts(descriptor)
        if not hosts:
            raise PlacementFailed(f"no feasible host for {descriptor.app_name}")
        return min(hosts, key=lambda h: (h.utilization, h.host_id))


# -- MEC system ---------------------------------------------------------------

class MecSystem:
    """Orchestrator, UALCMP context management and the hosts of one MEC system."""

    def __init__(self, engine, hosts: list[MecHost], *, ran: Ran | None = None,
                 registry: ServiceRegistry | None = None, orchestrator: Orchestrator | None = None,
                 instantiation_delay: float = 0.0, termination_delay: float = 0.0,
                 platform_delay: float = 0.0, system_id: str = "mec1"):
        self.engine = engine
        self.system_id = system_id
        self.hosts = {h.host_id: h for h in hosts}
        self.ran = ran
        self.registry = registry if registry is not None else ServiceRegistry(engine)
        self.orchestrator = orchestrator or Orchestrator(hosts, self.registry)
        self.instantiation_delay = instantiation_delay
        self.termination_delay = termination_delay
        self.platform_delay = platform_delay
        self.services: dict[tuple[str, str], MecServiceBase] = {}
        self.app_classes: dict[str, type] = {}
        self.descriptors: dict[str, AppDescriptor] = {}
        self.contexts: dict[int, AppContext] = {}
        self.apps: dict[int, "MecApp"] = {}
        self.endpoints: dict[str, "MecApp"] = {}
        self.ue_handlers: dict[str, Callable[[Any], None]] = {}
        self.listeners: list[Callable[[AppContext], None]] = []
        self.app_params: dict[str, dict] = {}
        self.stats = None
        self._ctx_ids = itertools.count(1)

    # -- setup ---------------------------------------------------------
    def add_service(self, service: MecServiceBase) -> None:
        host = self.hosts[service.host_id]
        self.registry.register(service.descriptor)
        host.available_services.add(service.name)
        self.services[(service.name, service.host_id)] = service

    def remove_host(self, host_id: str) -> None:
        self.registry.remove_host(host_id)
        self.hosts.pop(host_id)
        self.orchestrator.hosts[:] = list(self.hosts.values())
        self.services = {k: v for k, v in self.services.items() if k[1] != host_id}

    def register_app_class(self, provider: str, cls: type) -> None:
        self.app_classes[provider] = cls

    def onboard(self, descriptor: AppDescriptor | dict) -> AppDescriptor:
        if isinstance(descriptor, dict):
            descriptor = AppDescriptor.from_dict(descriptor)
        if any(d.app_id == descriptor.app_id for d in self.descriptors.values()):
            raise DuplicateAppId(descriptor.app_id)
        if not descriptor.external and descriptor.app_provider not in self.app_classes:
            raise MalformedDescriptor(f"unknown appProvider {descriptor.app_provider!r}")
        self.descriptors[descriptor.app_name] = descriptor
        return descriptor

    def service(self, name: str, local_host: str | None = None) -> MecServiceBase:
        for desc in self.registry.discover(name, local_host):
            svc = self.services.get((desc.name, desc.host_id))
            if svc is not None:
                return svc
        raise LookupError(f"service {name!r} not available")

    # -- contexts ------------------------------------------------------
    def _set_state(self, ctx: AppContext, state: str) -> None:
        ctx.advance(state)
        for listener in self.listeners:
            listener(ctx)

    def create_app_context(self, owner, app_name: str,
                           on_done: Callable[[AppContext], None] | None = None) -> AppContext:
        """Request an instance of ``app_name``; it becomes running after the instantiation delay.

        Raises :class:`UnknownApp` or :class:`PlacementFailed` immediately.
        """
        desc = self.descriptors.get(app_name)
        if desc is None:
            raise UnknownApp(app_name)
        ctx = AppContext(next(self._ctx_ids), desc, owner)
        if desc.external:
            ctx.address, ctx.port = desc.emulated_endpoint
        else:
            host = self.orchestrator.choose_best_mec_host(desc)
            ctx.host_id = host.host_id
            ctx.app_instance_id = host.admit(desc.virtual_compute, f"{app_name}-ctx{ctx.context_id}")
            ctx.address, ctx.port = host.address, host.next_port()
        self.contexts[ctx.context_id] = ctx
        self._set_state(ctx, INSTANTIATING)
        self.engine.schedule_in(self.instantiation_delay, self._instantiated, ctx, on_done)
        return ctx

    def _instantiated(self, ctx: AppContext, on_done) -> None:
        if ctx.state != INSTANTIATING:
            return
        if not ctx.descriptor.external:
            cls = self.app_classes[ctx.descriptor.app_provider]
            app = cls(self, ctx)
            self.apps[ctx.context_id] = app
            self.endpoints[ctx.endpoint] = app
        self._set_state(ctx, RUNNING)
        if ctx.context_id in self.apps:
            self.apps[ctx.context_id].on_start()
        if on_done is not None:
            on_done(ctx)

    def delete_app_context(self, context_id: int,
                           on_done: Callable[[AppContext], None] | None = None) -> AppContext:
        ctx = self.contexts.get(_as_int(context_id))
        if ctx is None or ctx.state != RUNNING:
            raise UnknownContext(context_id)
        self._set_state(ctx, TERMINATING)
        app = self.apps.pop(ctx.context_id, None)
        if app is not None:
            self.endpoints.pop(ctx.endpoint, None)
            app.on_stop()
        self.engine.schedule_in(self.termination_delay, self._terminated, ctx, on_done)
        return ctx

    def _terminated(self, ctx: AppContext, on_done) -> None:
        if not ctx.descriptor.external and ctx.host_id in self.hosts:
            self.hosts[ctx.host_id].release(ctx.app_instance_id)
        self._set_state(ctx, TERMINATED)
        self.contexts.pop(ctx.context_id, None)
        if on_done is not None:
            on_done(ctx)

    def running_context(self, app_name: str, owner=None) -> AppContext | None:
        for ctx in self.contexts.values():
            if ctx.descriptor.app_name == app_name and ctx.state in (INSTANTIATING, RUNNING):
                if owner is None or owner in ctx.members:
                    return ctx
        return None

    def join_existing(self, owner, app_name: str) -> AppContext:
        ctx = self.running_context(app_name)
        if ctx is None or ctx.state != RUNNING or not ctx.descriptor.joinable:
            raise NoRunningInstance(app_name)
        if owner not in ctx.members:
            ctx.members.append(owner)
        return ctx

    # -- app plane -----------------------------------------------------
    def _ran_delay(self, ue_id: str, direction: str, size: int):
        if self.ran is None or ue_id not in self.ran.ues:
            return 0.0
        return self.ran.transport_delay(ue_id, direction, size)

    def send_to_app(self, ue_id: str, endpoint: str, message, size: int = 100) -> bool:
        """UE -> MEC app over the uplink. Returns False if the message was lost."""
        delay = self._ran_delay(ue_id, "ul", size)
        if delay is LOST:
            return False
        self.engine.schedule_in(delay, self._deliver_to_app, endpoint, ue_id, message)
        return True

    def _deliver_to_app(self, endpoint: str, ue_id: str, message) -> None:
        app = self.endpoints.get(endpoint)
        if app is None:
            logger.debug("no app at %s; dropping message from %s", endpoint, ue_id)
            return
        app.on_ue_message(ue_id, message)

    def send_to_ue(self, ue_id: str, message, size: int = 100) -> bool:
        """MEC app -> UE over the downlink. Returns False if the message was lost."""
        delay = self._ran_delay(ue_id, "dl", size)
        if delay is LOST:
            return False
        self.engine.schedule_in(delay, self._deliver_to_ue, ue_id, message)
        return True

    def _deliver_to_ue(self, ue_id: str, message) -> None:
        handler = self.ue_handlers.get(ue_id)
        if handler is not None:
            handler(message)


def _as_int(value):
    try:
        return int(value)
    except (TypeError, ValueError):
        return value


# -- device app ---------------------------------------------------------------

class DeviceApp:
    """UE-side lifecycle agent speaking the ``START``/``STOP`` datagram protocol.

    Requests reach the UALCMP over the UE's radio link, so replies include the
    simulated uplink and downlink delays. The control plane is reliable: a lost
    message is retransmitted after ``retransmit`` seconds.
    """

    def __init__(self, system: MecSystem, ue_id: str, retransmit: float = 1.0):
        self.system = system
        self.ue_id = ue_id
        self.retransmit = retransmit

    def handle(self, datagram, reply: Callable[[str], None]) -> None:
        if isinstance(datagram, bytes):
            datagram = datagram.decode("ascii", errors="replace")
        parts = datagram.strip().split()
        if len(parts) != 2 or parts[0] not in ("START", "STOP"):
            reply("NACK unknown-command")
            return
        verb, name = parts
        self._over_ran("ul", self._at_ualcmp, verb, name, reply)

    def _over_ran(self, direction: str, handler, *args) -> None:
        delay = self.system._ran_delay(self.ue_id, direction, 200)
        if delay is LOST:
            self.system.engine.schedule_in(self.retransmit, self._over_ran, direction, handler, *args)
            return
        self.system.engine.schedule_in(delay, handler, *args)

    def _respond(self, reply, text: str) -> None:
        self._over_ran("dl", reply, text)

    def _at_ualcmp(self, verb: str, name: str, reply) -> None:
        system = self.system
        try:
            if verb == "START":
                existing = system.running_context(name)
                if existing is not None and existing.descriptor.joinable and existing.state == RUNNING:
                    ctx = system.join_existing(self.ue_id, name)
                    self._respond(reply, f"ACK {ctx.endpoint}")
                    return
                system.create_app_context(
                    self.ue_id, name, lambda ctx: self._respond(reply, f"ACK {ctx.endpoint}"))
            else:
                ctx = system.running_context(name, owner=self.ue_id)
                if ctx is None:
                    raise UnknownContext(name)
                # a shared instance lives until its last member leaves
                if len(ctx.members) > 1:
                    ctx.members.remove(self.ue_id)
                    self._respond(reply, "ACK")
                    return
                system.delete_app_context(ctx.context_id, lambda ctx: self._respond(reply, "ACK"))
        except UnknownApp:
            self._respond(reply, "NACK unknown-app")
        except PlacementFailed:
            self._respond(reply, "NACK placement-failed")
        except UnknownContext:
            self._respond(reply, "NACK no-context")


# -- internal MEC app scaffold ------------------------------------------------

class MecApp:
    """Base for internal MEC apps; override the ``on_*`` hooks.

    Handles service lookup through the registry, request routing through the
    target service's queue, compute(N) on the hosting MEC host and messaging
    towards UEs.
    """

    def __init__(self, system: MecSystem, context: AppContext):
        self.system = system
        self.context = context
        self.engine = system.engine
        self.host: MecHost = system.hosts[context.host_id]
        self.app_id = context.app_instance_id
        self.params = system.app_params.get(context.descriptor.app_name, {})
        self.running = True

    # hooks
    def on_start(self) -> None:
        pass

    def on_stop(self) -> None:
        self.running = False

    def on_registry_response(self, services: list) -> None:
        pass

    def on_service_response(self, request) -> None:
        pass

    def on_notification(self, notification: dict) -> None:
        pass

    def on_ue_message(self, ue_id: str, message) -> None:
        pass

    def on_compute_done(self, task) -> None:
        pass

    # helpers
    @property
    def endpoint(self) -> str:
        return self.context.endpoint

    def compute(self, instructions: float, tag=None) -> float:
        def done(task):
            if self.running:
                task.tag = tag
                self.on_compute_done(task)
        return self.host.compute(self.app_id, instructions, done)

    def query_registry(self, name: str | None = None) -> None:
        def back(req):
            if self.running:
                self.on_registry_response(req.response.body)
        self._platform(self.system.registry, "services",
                       {"ser_name": name, "local_host": self.host.host_id}, back)

    def request(self, service_name: str, kind: str, params: dict | None = None,
                callback: Callable | None = None, is_foreground: bool = True):
        """Send a request to the nearest instance of ``service_name``."""
        svc = self.system.service(service_name, self.host.host_id)

        def back(req):
            if self.running:
                (callback or self.on_service_response)(req)
        self._platform(svc, kind, params or {}, back, is_foreground)

    def _platform(self, svc: MecServiceBase, kind, params, back, is_foreground=True) -> None:
        hop = self.system.platform_delay
        sent = self.engine.now

        def arrive():
            def respond(req):
                req.sent_at = sent
                if hop:
                    self.engine.schedule_in(hop, back, req)
                else:
                    back(req)
            svc.request(kind, params, requester=self.endpoint, on_response=respond,
                        is_foreground=is_foreground)
        if hop:
            self.engine.schedule_in(hop, arrive)
        else:
            arrive()

    def send_to_ue(self, ue_id: str, message, size: int = 100) -> bool:
        return self.system.send_to_ue(ue_id, message, size)


def response_ok(req) -> bool:
    resp = req.response
    return isinstance(resp, Response) and resp.ok
