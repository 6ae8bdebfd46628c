"""Scenario files: loading, validation, world building and result emission.

A scenario is a YAML document (format ``version: 1``)::

    version: 1
    seed: 1
    mode: sim                 # sim | realtime
    pace: 1.0                 # realtime only
    duration: 180             # simulated seconds
    ran: {mobility_period: 0.1, l2_period: 1.0}
    system: {instantiation_delay: 0.0, termination_delay: 0.0, platform_delay: 0.0}
    cells:
      - {id: gnb1, position: [0, 0, 0]}
    hosts:
      - id: host1
        capacity: {cpu: 1.0e+10, ram: 8.0e+9, disk: 1.0e+11}
        scheduling: segregation    # segregation | fair-sharing
        dummy_load: 0              # cpu rate held by an always-busy load
    services:
      - name: LocationService      # LocationService | RNIService
        host: host1
        service_time: {mean: 0.01, distribution: exponential}
        background:                # optional
          mode: generator          # generator | explicit
          apps: 300                # background app count ...
          rate: 0.024              # ... each issuing Poisson requests at this rate
          lambda_b: 7.2            # or give the aggregate rate directly (generator only)
          lambda_f: 6.0            # optional; derived from foreground apps otherwise
    apps:
      - name: FgApp
        provider: PeriodicRequester  # EchoApp | PeriodicRequester | PoissonRequester | WarningAlertApp
        compute: {cpu: 1.0e+6, ram: 1.0e+6, disk: 1.0e+6}
        services_required: [LocationService]
        instances: 3               # contexts created at t=0 by the scenario itself
        joinable: false
        external: {address: 127.0.0.1, port: 5000}   # emulated endpoint instead of a provider
        params: {period: 0.5, kind: users}
    ues:
      - id: car1
        mobility: {model: linear, start: [0, 0, 0], velocity: [10, 0, 0]}
        transport: {dl: 0.002, ul: 0.002, loss_prob: 0.0}
        apps:
          - {type: warning_alert, app: WarningAlert, center: [100, 0, 0], radius: 20, start_at: 1.0}
    stats: {cdf: [fg_response_time]}

Mobility models: ``stationary`` (position), ``linear`` (start, velocity,
t0), ``waypoint`` (waypoints, speed, t0) and ``trace`` (file, ue).
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import apps as app_classes
from .compute import FAIR_SHARING, SEGREGATION, MecHost, ResourceVector
from .engine import Engine
from .lifecycle import AppDescriptor, MecSystem
from .ran import (LinearMobility, Ran, Stationary, TransportProfile, WaypointMobility,
                  load_mobility_trace)
from .servicequeue import BackgroundModel, ServiceTimeModel
from .services import LocationService, Rnis
from .stats import Stats

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SERVICE_CLASSES = {"LocationService": LocationService, "RNIService": Rnis}
APP_PROVIDERS = {name: getattr(app_classes, name) for name in
                 ("EchoApp", "PeriodicRequester", "PoissonRequester", "WarningAlertApp")}
UE_APP_TYPES = ("warning_alert",)
BACKGROUND_APP = "BackgroundApp"


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = f"line {line}: " if line is not None else ""
        where += f"{field}: " if field else ""
        super().__init__(where + message)
        self.line = line
        self.field = field


class ValidationError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class ScenarioConfig:
    doc: dict
    source: str | None = None

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def mode(self) -> str:
        return self.doc["mode"]

    @property
    def duration(self) -> float:
        return self.doc["duration"]

    def with_overrides(self, **changes) -> "ScenarioConfig":
        doc = copy.deepcopy(self.doc)
        doc.update({k: v for k, v in changes.items() if v is not None})
        return ScenarioConfig(validate(doc), self.source)


# -- loading ------------------------------------------------------------------

def bundled(name: str) -> Path:
    """Path of a scenario shipped with the package (``bg_validation``, ``danger_zone``, ...)."""
    return Path(str(resources.files("mecsim") / "scenarios" / f"{name}.yaml"))


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    return ScenarioConfig(validate(parse(text)), str(path))


def parse(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(str(getattr(exc, "problem", None) or exc),
                         line=mark.line + 1 if mark else None) from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ParseError("top level must be a mapping", line=1)
    return doc


_DEFAULTS = {"version": FORMAT_VERSION, "seed": 0, "mode": "sim", "pace": 1.0, "duration": 10.0,
             "ran": {}, "system": {}, "cells": [], "hosts": [], "services": [], "apps": [],
             "ues": [], "stats": {}}


def validate(doc: dict) -> dict:
    """Fill defaults and check every invariant; raise :class:`ValidationError` listing all failures."""
    doc = {**copy.deepcopy(_DEFAULTS), **doc}
    errors: list[str] = []

    def check(cond, msg):
        if not cond:
            errors.append(msg)
        return cond

    check(doc["version"] == FORMAT_VERSION, f"version: unsupported format version {doc['version']!r}")
    check(doc["mode"] in ("sim", "realtime"), f"mode: must be sim or realtime, got {doc['mode']!r}")
    check(_num(doc["duration"]) and doc["duration"] >= 0, "duration: must be a non-negative number")
    check(_num(doc["pace"]) and doc["pace"] > 0, "pace: must be positive")
    check(isinstance(doc["seed"], int), "seed: must be an integer")
    unknown = set(doc) - set(_DEFAULTS) - {"gateway"}
    check(not unknown, f"unknown top-level keys: {sorted(unknown)}")

    cells = _ids(doc, "cells", errors)
    hosts = _ids(doc, "hosts", errors)
    ue_ids = _ids(doc, "ues", errors)
    app_names = _ids(doc, "apps", errors, key="name")

    for i, cell in enumerate(doc["cells"]):
        check(_position(cell.get("position")), f"cells[{i}].position: expected [x, y, z]")
    for i, host in enumerate(doc["hosts"]):
        try:
            ResourceVector.of(host.get("capacity", {}))
        except (TypeError, ValueError) as exc:
            errors.append(f"hosts[{i}].capacity: {exc}")
        check(host.get("scheduling", SEGREGATION) in (SEGREGATION, FAIR_SHARING),
              f"hosts[{i}].scheduling: must be {SEGREGATION} or {FAIR_SHARING}")

    if not isinstance(doc["services"], list) or not all(isinstance(s, dict) for s in doc["services"]):
        errors.append("services: must be a list of mappings")
        doc["services"] = []
    lambda_f = _foreground_rates(doc)
    seen_services = set()
    for i, svc in enumerate(doc["services"]):
        where = f"services[{i}]"
        name, host = svc.get("name"), svc.get("host")
        check(name in SERVICE_CLASSES, f"{where}.name: unknown service {name!r}")
        check(host in hosts, f"{where}.host: unknown host {host!r}")
        check((name, host) not in seen_services, f"{where}: duplicate service {name} on {host}")
        seen_services.add((name, host))
        st = svc.get("service_time", {})
        try:
            ServiceTimeModel(st.get("mean", 0.01), st.get("distribution", "exponential"))
        except (TypeError, ValueError, AttributeError) as exc:
            errors.append(f"{where}.service_time: {exc}")
            continue
        bg = svc.get("background")
        if bg is None:
            continue
        mode = bg.get("mode", "generator")
        if not check(mode in ("generator", "explicit"), f"{where}.background.mode: must be generator or explicit"):
            continue
        lb = background_rate(bg)
        if not check(lb is not None and lb >= 0, f"{where}.background: give apps and rate, or lambda_b"):
            continue
        check(mode == "generator" or "apps" in bg, f"{where}.background: explicit mode needs apps and rate")
        lf = bg.get("lambda_f", lambda_f.get(name, 0.0))
        mu = 1.0 / st.get("mean", 0.01)
        check(lf + lb < mu, f"{where}: unstable: lambda_f + lambda_b = {lf + lb:g} >= mu = {mu:g}")

    services = {s.get("name") for s in doc["services"]}
    for i, app in enumerate(doc["apps"]):
        where = f"apps[{i}]"
        if "external" in app:
            ext = app["external"]
            check(isinstance(ext, dict) and "address" in ext and "port" in ext,
                  f"{where}.external: needs address and port")
        else:
            check(app.get("provider") in APP_PROVIDERS,
                  f"{where}.provider: unknown provider {app.get('provider')!r}")
        for s in app.get("services_required", []):
            check(s in services, f"{where}.services_required: unknown service {s!r}")
        check(isinstance(app.get("instances", 0), int) and app.get("instances", 0) >= 0,
              f"{where}.instances: must be a non-negative integer")
        svc = app.get("params", {}).get("service")
        check(svc is None or svc in services, f"{where}.params.service: unknown service {svc!r}")

    for i, ue in enumerate(doc["ues"]):
        where = f"ues[{i}]"
        _check_mobility(ue.get("mobility", {"model": "stationary", "position": [0, 0, 0]}),
                        f"{where}.mobility", errors)
        try:
            TransportProfile.of(ue.get("transport"))
        except (TypeError, ValueError) as exc:
            errors.append(f"{where}.transport: {exc}")
        for j, ua in enumerate(ue.get("apps", [])):
            check(ua.get("type") in UE_APP_TYPES, f"{where}.apps[{j}].type: unknown UE app {ua.get('type')!r}")
            check(ua.get("app") in app_names, f"{where}.apps[{j}].app: unknown app {ua.get('app')!r}")
    check(not doc["ues"] or cells, "ues: at least one cell is required when UEs are declared")
    gw = doc.get("gateway") or {}
    for ue in gw.get("device_apps", {}):
        check(ue in ue_ids, f"gateway.device_apps: unknown UE {ue!r}")

    if errors:
        raise ValidationError(errors)
    return doc


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _position(p) -> bool:
    return isinstance(p, (list, tuple)) and len(p) in (2, 3) and all(_num(v) for v in p)


def _ids(doc, section, errors, key="id") -> set:
    items = doc[section]
    if not isinstance(items, list):
        errors.append(f"{section}: must be a list")
        doc[section] = []
        return set()
    seen = set()
    for i, item in enumerate(items):
        if not isinstance(item, dict) or key not in item:
            errors.append(f"{section}[{i}]: missing {key}")
            continue
        if item[key] in seen:
            errors.append(f"{section}[{i}]: duplicate {key} {item[key]!r}")
        seen.add(item[key])
    doc[section] = [x for x in items if isinstance(x, dict)]
    return seen


def _check_mobility(m, where, errors) -> None:
    try:
        build_mobility(m, check_files=False)
    except (TypeError, ValueError, KeyError) as exc:
        errors.append(f"{where}: {exc}")


def background_rate(bg: dict) -> float | None:
    if "lambda_b" in bg:
        return float(bg["lambda_b"])
    if "apps" in bg and "rate" in bg:
        return bg["apps"] * float(bg["rate"])
    return None


def _foreground_rates(doc) -> dict[str, float]:
    """Configured foreground request rate per service name, from requester apps."""
    rates: dict[str, float] = {}
    for app in doc["apps"]:
        params = app.get("params", {})
        n = app.get("instances", 0)
        if app.get("provider") == "PeriodicRequester" and params.get("foreground", True):
            r = 1.0 / params.get("period", 0.5)
        elif app.get("provider") == "PoissonRequester" and params.get("foreground", True):
            r = float(params.get("rate", 0.0))
        else:
            continue
        svc = params.get("service", "LocationService")
        rates[svc] = rates.get(svc, 0.0) + n * r
    return rates


def build_mobility(spec: dict, check_files: bool = True, ue_id: str | None = None):
    model = spec.get("model", "stationary")
    if model == "stationary":
        return Stationary(spec.get("position", [0, 0, 0]))
    if model == "linear":
        return LinearMobility(spec["start"], spec["velocity"], spec.get("t0", 0.0))
    if model == "waypoint":
        return WaypointMobility(spec["waypoints"], spec["speed"], spec.get("t0", 0.0))
    if model == "trace":
        if "file" not in spec:
            raise ValueError("trace mobility needs a file")
        if not check_files:
            return None
        traces = load_mobility_trace(spec["file"])
        key = spec.get("ue", ue_id)
        if key not in traces:
            raise ValueError(f"trace {spec['file']} has no records for {key!r}")
        return traces[key]
    raise ValueError(f"unknown mobility model {model!r}")


# -- world --------------------------------------------------------------------

@dataclass
class World:
    config: ScenarioConfig
    engine: Engine
    ran: Ran
    system: MecSystem
    stats: Stats
    ue_apps: list = field(default_factory=list)
    timeline: app_classes.Timeline = field(default_factory=app_classes.Timeline)
    app_events: int = 0
    gateway: object = None

    def service_report(self) -> dict:
        out = {}
        for (name, host), svc in sorted(self.system.services.items()):
            q = svc.queue
            entry = {"mu": q.service_time.mu, "mean_service_time": q.service_time.mean,
                     "service_time_distribution": str(q.service_time.distribution)}
            if q.background is not None:
                entry.update(lambda_f=q.background.lambda_f, lambda_b=q.background.lambda_b,
                             rho=q.background.rho)
            out[f"{host}/{name}"] = entry
        return out


def build_world(config: ScenarioConfig, engine: Engine | None = None) -> World:
    doc = config.doc
    engine = engine or Engine(doc["seed"])
    ran_opts = doc["ran"]
    ran = Ran(engine, mobility_period=ran_opts.get("mobility_period", 0.1),
              l2_period=ran_opts.get("l2_period", 1.0),
              l2_capacity=ran_opts.get("l2_capacity", 1024))
    for cell in doc["cells"]:
        ran.add_cell(cell["id"], cell["position"])
    for ue in doc["ues"]:
        mob = build_mobility(ue.get("mobility", {}), ue_id=ue["id"])
        ran.add_ue(ue["id"], mobility=mob, transport=ue.get("transport"))

    hosts = []
    for i, h in enumerate(doc["hosts"]):
        host = MecHost(h["id"], ResourceVector.of(h.get("capacity", {})), engine,
                       scheduling=h.get("scheduling", SEGREGATION),
                       address=h.get("address", f"10.0.{5 + i}.2"))
        if h.get("dummy_load"):
            host.install_dummy_load(float(h["dummy_load"]))
        hosts.append(host)
    sysopts = doc["system"]
    system = MecSystem(engine, hosts, ran=ran,
                       instantiation_delay=sysopts.get("instantiation_delay", 0.0),
                       termination_delay=sysopts.get("termination_delay", 0.0),
                       platform_delay=sysopts.get("platform_delay", 0.0))
    stats = Stats()
    system.stats = stats
    world = World(config, engine, ran, system, stats)

    lambda_f = _foreground_rates(doc)
    explicit = []
    for svc in doc["services"]:
        st = svc.get("service_time", {})
        model = ServiceTimeModel(st.get("mean", 0.01), st.get("distribution", "exponential"))
        bg = svc.get("background")
        background = None
        if bg is not None and bg.get("mode", "generator") == "generator":
            background = BackgroundModel(bg.get("lambda_f", lambda_f.get(svc["name"], 0.0)),
                                         background_rate(bg), 1.0 / model.mean)
        elif bg is not None:
            explicit.append((svc, bg))
        cls = SERVICE_CLASSES[svc["name"]]
        system.add_service(cls(engine, ran, svc["host"], service_time=model, background=background,
                               capacity=svc.get("capacity")))

    for name, cls in APP_PROVIDERS.items():
        system.register_app_class(name, cls)
    for app in doc["apps"]:
        desc = {"appId": app.get("id", app["name"]), "appName": app["name"],
                "appProvider": app.get("provider", ""),
                "appServiceRequired": app.get("services_required", []),
                "virtualComputeDescriptor": app.get("compute", {}),
                "joinable": app.get("joinable", False)}
        if "external" in app:
            desc["emulatedMecApplication"] = {"ipAddress": app["external"]["address"],
                                              "port": app["external"]["port"]}
        system.onboard(desc)
        params = dict(app.get("params", {}))
        if app.get("provider") == "WarningAlertApp":
            params.setdefault("timeline", world.timeline)
        system.app_params[app["name"]] = params
    for svc, bg in explicit:
        _onboard_background(system, svc, bg)

    def counted(*_):
        world.app_events += 1
    system.listeners.append(counted)
    for svc in system.services.values():
        svc.queue.departure_listeners.append(counted)

    for app in doc["apps"]:
        for _ in range(app.get("instances", 0)):
            system.create_app_context("scenario", app["name"])
    for svc, bg in explicit:
        for _ in range(bg["apps"]):
            system.create_app_context("scenario", _background_name(svc))

    for ue in doc["ues"]:
        for ua in ue.get("apps", []):
            world.ue_apps.append(app_classes.WarningAlertUeApp(
                system, ue["id"], ua["center"], ua["radius"], world.timeline,
                app_name=ua["app"], start_at=ua.get("start_at", 0.0)))
    if doc["cells"] or doc["ues"]:
        ran.start()
    return world


def _background_name(svc: dict) -> str:
    return f"{BACKGROUND_APP}/{svc['host']}/{svc['name']}"


def _onboard_background(system: MecSystem, svc: dict, bg: dict) -> None:
    """Explicit population: ``apps`` full MEC apps each issuing Poisson requests at ``rate``."""
    name = _background_name(svc)
    system.onboard(AppDescriptor(name, name, ResourceVector(0.0, 0.0, 0.0), "PoissonRequester",
                                 [svc["name"]]))
    system.app_params[name] = {"service": svc["name"], "kind": bg.get("kind", "background"),
                               "rate": float(bg["rate"]), "foreground": False}


# -- running ------------------------------------------------------------------

@dataclass
class RunResult:
    world: World
    out_dir: Path | None
    manifest: dict


def run(config: ScenarioConfig, out_dir=None, *, on_ready=None) -> RunResult:
    """Execute ``config`` and, when ``out_dir`` is given, write CSV, CDF and manifest files.

    ``on_ready(world)`` runs after the world is built, before time advances
    (real-time mode uses it to attach external endpoints).
    """
    doc = config.doc
    t0 = time.perf_counter()
    world = build_world(config)
    engine = world.engine
    overruns = 0
    if doc["mode"] == "realtime":
        from .gateway import Gateway

        gw_opts = doc.get("gateway") or {}
        world.gateway = Gateway(world.system, host=gw_opts.get("host", "127.0.0.1"),
                                http_port=gw_opts.get("http_port", 0)).start()
        for ue, port in (gw_opts.get("device_apps") or {}).items():
            addr = world.gateway.bind_device_app(ue, port or 0)
            logger.info("device app of %s listening on udp %s:%d", ue, *addr)
        logger.info("gateway listening on %s", world.gateway.base_url)
        try:
            if on_ready is not None:
                on_ready(world)
            rt = engine.run_realtime(doc["pace"], until=doc["duration"])
            overruns = rt.overruns
        finally:
            world.gateway.close()
    else:
        if on_ready is not None:
            on_ready(world)
        engine.run_until(doc["duration"])
    wall = time.perf_counter() - t0
    manifest = {"format_version": FORMAT_VERSION, "scenario": config.source, "seed": doc["seed"],
                "mode": doc["mode"], "pace": doc["pace"], "duration": doc["duration"],
                "wall_time": wall, "events": engine.dispatched, "overruns": overruns,
                "app_events": world.app_events, "services": world.service_report(),
                "streams": world.stats.streams()}
    out = None
    if out_dir is not None:
        out = write_results(world, manifest, out_dir)
    return RunResult(world, out, manifest)


def write_results(world: World, manifest: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world.stats.write_csv(out)
    cdf = world.config.doc["stats"].get("cdf")
    for stream in world.stats.streams():
        if (stream in cdf) if cdf is not None else stream.endswith("response_time"):
            world.stats.write_cdf(stream, out)
    if world.timeline.events:
        with (out / "timeline.csv").open("w") as fh:
            fh.write("time,actor,event,detail\n")
            for t, actor, event, detail in world.timeline.events:
                fh.write(f"{t!r},{actor},{event},{'' if detail is None else str(detail).replace(',', ' ')}\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out

