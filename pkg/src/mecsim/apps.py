"""Reference internal MEC apps and in-simulation UE apps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .lifecycle import DeviceApp, MecApp, MecSystem, response_ok

logger = logging.getLogger(__name__)


class EchoApp(MecApp):
    """Replies to every UE message; ``instructions`` > 0 adds a compute() first."""

    def on_ue_message(self, ue_id, message):
        n = self.params.get("instructions", 0)
        if n:
            self.compute(n, tag=(ue_id, message))
        else:
            self.send_to_ue(ue_id, message)

    def on_compute_done(self, task):
        ue_id, message = task.tag
        self.send_to_ue(ue_id, message)


class PeriodicRequester(MecApp):
    """Issues a request to a MEC service every ``period`` seconds.

    params: service, kind, request (dict), period, offset (default: random
    phase in [0, period)), foreground (bool), stream (stat stream name).
    """

    def on_start(self):
        p = self.params
        self.service = p.get("service", "LocationService")
        self.kind = p.get("kind", "users")
        self.request_params = dict(p.get("request", {}))
        self.foreground = p.get("foreground", True)
        self.stream = p.get("stream", "fg_response_time" if self.foreground else None)
        self.rng = self.engine.rng(f"app/{self.context.descriptor.app_name}")
        self.sent = 0
        self.engine.schedule_in(self.first_delay(), self._tick)

    def first_delay(self) -> float:
        offset = self.params.get("offset")
        return self.rng.uniform(0, self.params.get("period", 0.5)) if offset is None else offset

    def next_delay(self) -> float:
        return self.params.get("period", 0.5)

    def _tick(self):
        if not self.running:
            return
        self.sent += 1
        sent = self.engine.now
        self.request(self.service, self.kind, self.request_params,
                     callback=lambda req: self._done(req, sent),
                     is_foreground=self.foreground)
        self.engine.schedule_in(self.next_delay(), self._tick)

    def _done(self, req, sent):
        stats = self.system.stats
        if self.stream and stats is not None:
            stats.record(self.stream, self.engine.now, self.engine.now - sent,
                         app=self.context.descriptor.app_name, host=self.host.host_id,
                         service=self.service)


class PoissonRequester(PeriodicRequester):
    """Like :class:`PeriodicRequester` with exponential inter-request times of ``rate``."""

    def first_delay(self) -> float:
        return self.next_delay()

    def next_delay(self) -> float:
        return self.rng.exponential(1.0 / self.params["rate"])


# -- danger-zone warning ------------------------------------------------------

@dataclass
class Timeline:
    events: list = field(default_factory=list)

    def add(self, time: float, actor: str, event: str, detail=None) -> None:
        self.events.append((time, actor, event, detail))

    def names(self, actor: str | None = None) -> list[str]:
        return [e[2] for e in self.events if actor is None or e[1] == actor]


class WarningAlertApp(MecApp):
    """MEC app warning UEs when they enter and then leave a danger zone.

    A UE sends ``{"type": "start", "ueId", "center", "radius"}``. The app
    subscribes for *entering*; on that notification it warns the UE and
    switches the subscription to *leaving*; on leaving it warns again.
    Several UEs may share one instance, each with its own subscription.
    """

    def on_start(self):
        self.timeline: Timeline | None = self.params.get("timeline")
        self.subs: dict[int, str] = {}  # subscription id -> UE id

    def _log(self, ue_id, event, detail=None):
        if self.timeline is not None:
            self.timeline.add(self.engine.now, ue_id, event, detail)

    def on_ue_message(self, ue_id, message):
        if not isinstance(message, dict) or message.get("type") != "start":
            return
        ue = message.get("ueId", ue_id)
        self.request("LocationService", "subscribe_area", {
            "ueId": ue, "center": message["center"], "radius": message["radius"],
            "direction": "entering", "callback": self._notified},
            callback=lambda req: self._subscribed(ue, req))

    def _subscribed(self, ue_id, req):
        if response_ok(req):
            self.subs[req.response.body["subscriptionId"]] = ue_id
            self._log(ue_id, "SUBSCRIBE", "entering")
        else:
            logger.warning("subscription for %s failed: %s", ue_id, req.response)

    def _notified(self, notification):
        if self.running:
            self.on_notification(notification)

    def on_notification(self, notification):
        sub_id, event = notification["subscriptionId"], notification["event"]
        ue_id = self.subs.get(sub_id, notification.get("ueId"))
        self._log(ue_id, "NOTIFY", event)
        self.send_to_ue(ue_id, {"type": "warning", "event": event,
                                "position": notification["position"]})
        if event == "entering":
            self.request("LocationService", "modify_area",
                         {"subscriptionId": sub_id, "direction": "leaving"},
                         callback=lambda req: self._modified(ue_id, req))

    def _modified(self, ue_id, req):
        if response_ok(req):
            self._log(ue_id, "MODIFY", "leaving")

    def on_stop(self):
        super().on_stop()
        loc = self.system.service("LocationService", self.host.host_id)
        for sub_id in self.subs:
            if sub_id in loc.subscriptions:
                loc.unsubscribe(sub_id)


class WarningAlertUeApp:
    """In-simulation UE app: START via the device app, arm the zone, STOP after leaving."""

    def __init__(self, system: MecSystem, ue_id: str, center, radius: float,
                 timeline: Timeline, app_name: str = "WarningAlert", start_at: float = 0.0):
        self.system = system
        self.ue_id = ue_id
        self.center = center
        self.radius = radius
        self.timeline = timeline
        self.app_name = app_name
        self.device_app = DeviceApp(system, ue_id)
        self.endpoint = None
        self.warnings: list[str] = []
        system.ue_handlers[ue_id] = self.on_message
        system.engine.schedule_in(start_at, self.start)

    def _log(self, event, detail=None):
        self.timeline.add(self.system.engine.now, self.ue_id, event, detail)

    def start(self):
        self._log("START", self.app_name)
        self.device_app.handle(f"START {self.app_name}", self._on_start_reply)

    def _log_reply(self, text: str):
        verb, _, detail = text.partition(" ")
        self._log(verb, detail or None)

    def _on_start_reply(self, text: str):
        self._log_reply(text)
        if not text.startswith("ACK"):
            return
        self.endpoint = text.split()[1]
        self.system.send_to_app(self.ue_id, self.endpoint, {
            "type": "start", "ueId": self.ue_id, "center": self.center, "radius": self.radius})

    def on_message(self, message):
        if isinstance(message, dict) and message.get("type") == "warning":
            self.warnings.append(message["event"])
            self._log("UE_INFORMED", message["event"])
            if message["event"] == "leaving":
                self.stop()

    def stop(self):
        self._log("STOP", self.app_name)
        self.device_app.handle(f"STOP {self.app_name}", self._on_stop_reply)

    def _on_stop_reply(self, text: str):
        self._log_reply(text)
