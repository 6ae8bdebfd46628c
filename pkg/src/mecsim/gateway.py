"""Real-time bridge between external programs and a running simulation.

Network I/O happens on server threads. Every request is handed to the event
loop with :meth:`Engine.post` and the thread waits until the corresponding
simulated response fires, so external clients see simulated queueing and
transport delays in wall-clock time.
"""
from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .engine import ModeError
from .lifecycle import (DeviceApp, MecSystem, PlacementFailed, UnknownApp, UnknownContext)
from .ran import LOST
from .services import Response

logger = logging.getLogger(__name__)

PREFIX = "/v1"


@dataclass
class CallbackRegistration:
    subscription_id: int
    url: str
    failures: int = 0
    delivered: int = 0
    disabled: bool = False


class Gateway:
    """HTTP (Mx2, Mp1, RNIS, Location) and UDP (device app) front-end for a :class:`MecSystem`."""

    def __init__(self, system: MecSystem, *, host: str = "127.0.0.1", http_port: int = 0,
                 timeout: float = 30.0, retries: int = 3, retry_backoff: float = 1.0):
        self.system = system
        self.engine = system.engine
        self.host = host
        self.timeout = timeout
        self.retries = retries
        self.retry_backoff = retry_backoff
        self.callbacks: dict[int, CallbackRegistration] = {}
        self.relays: dict[tuple[str, str], UdpRelay] = {}
        self._udp: list[_UdpEndpoint] = []
        self.device_apps: dict[str, tuple[str, int]] = {}  # UE id -> UDP address
        self._http = ThreadingHTTPServer((host, http_port), _make_handler(self))
        self._http.daemon_threads = True
        self._threads: list[threading.Thread] = []
        self._outbox: queue.Queue = queue.Queue()
        for svc in system.services.values():
            if hasattr(svc, "url_sender"):
                svc.url_sender = self._queue_callback

    # -- lifecycle -----------------------------------------------------
    @property
    def http_address(self) -> tuple[str, int]:
        return self._http.server_address[:2]

    @property
    def base_url(self) -> str:
        h, p = self.http_address
        return f"http://{h}:{p}"

    def start(self) -> "Gateway":
        for target in (self._http.serve_forever, self._callback_worker):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def close(self) -> None:
        self._http.shutdown()
        self._http.server_close()
        self._outbox.put(None)
        for ep in self._udp:
            ep.close()
        for relay in self.relays.values():
            relay.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # -- engine hand-off -----------------------------------------------
    def submit(self, fn, *args) -> tuple[int, object]:
        """Run ``fn(future, *args)`` on the event loop and wait for its result."""
        if self.engine.mode != "realtime":
            return 503, {"error": "mode: gateway requires real-time mode"}
        if self.engine.lagging:
            return 503, {"error": "overrun: simulation is lagging behind wall clock"}
        fut: Future = Future()

        def run():
            try:
                fn(fut, *args)
            except Exception as exc:  # handler errors must not kill the loop
                logger.exception("gateway handler failed")
                if not fut.done():
                    fut.set_result((500, {"error": str(exc)}))
        try:
            self.engine.post(run)
        except ModeError:
            return 503, {"error": "mode: gateway requires real-time mode"}
        try:
            return fut.result(self.timeout)
        except FutureTimeout:
            return 504, {"error": "timeout"}

    # -- HTTP routing (runs on the event loop) -------------------------
    def route(self, fut: Future, method: str, path: str, query: dict, body) -> None:
        parts = [p for p in path.split("/") if p]
        if parts[:1] != ["v1"]:
            fut.set_result((404, {"error": "not found"}))
            return
        parts = parts[1:]
        try:
            if parts[:2] == ["mx2", "app_contexts"]:
                self._mx2(fut, method, parts[2:], body)
            elif parts == ["mp1", "services"] and method == "GET":
                params = {"ser_name": _first(query, "ser_name")}
                self._service_call(fut, self.system.registry, "services", params,
                                   transform=self._rewrite_services)
            elif parts == ["rni", "queries", "layer2_meas"] and method == "GET":
                params = {"cell_ids": _list(query, "cell_id"), "ue_ids": _list(query, "ue_id"),
                          "aggregator": _first(query, "aggregator") or "average"}
                if _first(query, "window"):
                    params["window"] = float(_first(query, "window"))
                if _list(query, "measure"):
                    params["measures"] = _list(query, "measure")
                self._service_call(fut, self.system.service("RNIService"), "layer2_meas", params)
            elif parts == ["location", "queries", "users"] and method == "GET":
                params = {"ue_ids": _list(query, "ue_id"), "cell_ids": _list(query, "cell_id")}
                self._service_call(fut, self.system.service("LocationService"), "users", params)
            elif parts[:3] == ["location", "subscriptions", "area"]:
                self._area(fut, method, parts[3:], body)
            else:
                fut.set_result((404, {"error": "not found"}))
        except LookupError as exc:
            fut.set_result((404, {"error": str(exc)}))
        except (ValueError, TypeError) as exc:
            fut.set_result((400, {"error": str(exc)}))

    def _service_call(self, fut, svc, kind, params, transform=None) -> None:
        def done(req):
            resp: Response = req.response
            body = transform(resp.body) if transform and resp.ok else resp.body
            fut.set_result((resp.status, body))
        svc.request(kind, params, requester="gateway", on_response=done)

    def _rewrite_services(self, body: list) -> list:
        for entry in body:
            uri = f"{self.base_url}{PREFIX}/{_SERVICE_PATHS.get(entry['serName'], '')}".rstrip("/")
            entry["transportInfo"]["endpoint"]["uris"] = [uri]
        return body

    def _mx2(self, fut, method, rest, body) -> None:
        system = self.system
        if method == "POST" and not rest:
            if not isinstance(body, dict) or "appName" not in body:
                fut.set_result((400, {"error": "body must carry appName"}))
                return
            owner = body.get("associateDevAppId", "external-device-app")
            try:
                system.create_app_context(owner, body["appName"],
                                          lambda ctx: fut.set_result((201, ctx.as_dict())))
            except UnknownApp:
                fut.set_result((404, {"error": f"unknown app {body['appName']!r}"}))
            except PlacementFailed as exc:
                fut.set_result((403, {"error": str(exc)}))
        elif method == "DELETE" and len(rest) == 1:
            try:
                system.delete_app_context(rest[0], lambda ctx: fut.set_result((204, None)))
            except UnknownContext:
                fut.set_result((404, {"error": f"unknown context {rest[0]}"}))
        elif method == "GET" and len(rest) == 1:
            ctx = system.contexts.get(_int(rest[0]))
            fut.set_result((200, ctx.as_dict()) if ctx else (404, {"error": "unknown context"}))
        else:
            fut.set_result((405, {"error": "method not allowed"}))

    def _area(self, fut, method, rest, body) -> None:
        loc = self.system.service("LocationService")
        if method == "POST" and not rest:
            if not isinstance(body, dict):
                raise ValueError("JSON object body required")
            params = dict(body)
            params["callback"] = body.get("callbackUrl")

            def registered(req):
                if req.response.ok:
                    sid = req.response.body["subscriptionId"]
                    self.callbacks[sid] = CallbackRegistration(sid, body.get("callbackUrl"))
                fut.set_result((req.response.status, req.response.body))
            loc.request("subscribe_area", params, requester="gateway", on_response=registered)
        elif method == "PUT" and len(rest) == 1:
            params = dict(body or {}, subscriptionId=_int(rest[0]))
            self._service_call(fut, loc, "modify_area", params)
        elif method == "DELETE" and len(rest) == 1:
            self._service_call(fut, loc, "delete_area", {"subscriptionId": _int(rest[0])})
        elif method == "GET" and len(rest) == 1:
            sub = loc.subscriptions.get(_int(rest[0]))
            fut.set_result((200, sub.as_dict()) if sub else (404, {"error": "unknown subscription"}))
        else:
            fut.set_result((405, {"error": "method not allowed"}))

    # -- callbacks -----------------------------------------------------
    def _queue_callback(self, sub, payload: dict) -> None:
        reg = self.callbacks.setdefault(sub.sub_id, CallbackRegistration(sub.sub_id, sub.callback))
        reg.url = sub.callback
        if not reg.disabled:
            self._outbox.put((reg, payload))

    def _callback_worker(self) -> None:
        while True:
            item = self._outbox.get()
            if item is None:
                return
            self.deliver_callback(*item)

    def deliver_callback(self, reg: CallbackRegistration, payload: dict) -> bool:
        """POST ``payload`` to the callback URL, retrying; disable the subscription on failure."""
        data = json.dumps(payload).encode()
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.retry_backoff)
            req = urllib.request.Request(reg.url, data=data, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=5) as resp:
                    resp.read()
                reg.delivered += 1
                return True
            except (urllib.error.URLError, OSError) as exc:
                reg.failures += 1
                logger.info("callback %s attempt %d failed: %s", reg.url, attempt + 1, exc)
        reg.disabled = True
        logger.warning("disabling subscription %s after %d failed deliveries",
                       reg.subscription_id, reg.failures)
        self._disable(reg.subscription_id)
        return False

    def _disable(self, sub_id: int) -> None:
        def off():
            loc = self.system.service("LocationService")
            sub = loc.subscriptions.get(sub_id)
            if sub is not None:
                sub.active = False
        try:
            self.engine.post(off)
        except ModeError:
            off()

    # -- UDP -----------------------------------------------------------
    def bind_device_app(self, ue_id: str, port: int = 0) -> tuple[str, int]:
        """Expose the device app of simulated UE ``ue_id`` on a UDP port."""
        device = DeviceApp(self.system, ue_id)
        ep = _UdpEndpoint(self.host, port, lambda data, addr, ep: self.serve_device_udp(device, data, addr, ep))
        self._udp.append(ep)
        self.device_apps[ue_id] = ep.address
        return ep.address

    def serve_device_udp(self, device: DeviceApp, data: bytes, addr, ep: "_UdpEndpoint") -> None:
        """Hand one device-app datagram to the event loop; the reply goes back to ``addr``."""
        if self.engine.mode != "realtime":
            ep.sendto(b"NACK mode", addr)
            return

        def reply(text: str):
            if text.startswith("ACK ") and len(text.split()) == 2:
                text = self._relay_ack(device.ue_id, text)
            ep.sendto(text.encode("ascii"), addr)
        try:
            self.engine.post(device.handle, data, reply)
        except ModeError:
            ep.sendto(b"NACK mode", addr)

    def _relay_ack(self, ue_id: str, text: str) -> str:
        endpoint = text.split()[1]
        ctx = next((c for c in self.system.contexts.values()
                    if c.endpoint == endpoint and c.descriptor.external), None)
        if ctx is None:
            return text
        key = (ue_id, endpoint)
        relay = self.relays.get(key)
        if relay is None:
            relay = self.relays[key] = UdpRelay(self, ue_id, (ctx.address, ctx.port), self.host)
        h, p = relay.address
        return f"ACK {h}:{p}"


_SERVICE_PATHS = {"LocationService": "location", "RNIService": "rni",
                  "ServiceRegistry": "mp1"}


class _UdpEndpoint:
    def __init__(self, host: str, port: int, on_datagram):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.2)
        self.on_datagram = on_datagram
        self._closed = False
        self._lock = threading.Lock()
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def sendto(self, data: bytes, addr) -> None:
        with self._lock:
            if not self._closed:
                self.sock.sendto(data, addr)

    def _loop(self) -> None:
        while not self._closed:
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                self.on_datagram(data, addr, self)
            except Exception:
                logger.exception("UDP handler failed")

    def close(self) -> None:
        with self._lock:
            self._closed = True
        self.thread.join(timeout=1)
        self.sock.close()


class UdpRelay:
    """Forwards UE <-> external MEC app datagrams with the UE's simulated RAN delay."""

    def __init__(self, gateway: Gateway, ue_id: str, target: tuple[str, int], host: str):
        self.gateway = gateway
        self.ue_id = ue_id
        self.target = target
        self.ue_addr = None
        self.forwarded = {"ul": 0, "dl": 0, "lost": 0}
        self.ep = _UdpEndpoint(host, 0, self._datagram)

    @property
    def address(self):
        return self.ep.address

    def close(self):
        self.ep.close()

    def _datagram(self, data: bytes, addr, ep) -> None:
        if tuple(addr[:2]) == tuple(self.target):
            if self.ue_addr is None:
                return
            direction, dest = "dl", self.ue_addr
        else:
            self.ue_addr = addr
            direction, dest = "ul", self.target
        engine = self.gateway.engine

        def hop():
            delay = self.gateway.system.ran.transport_delay(self.ue_id, direction, len(data))
            if delay is LOST:
                self.forwarded["lost"] += 1
                return
            self.forwarded[direction] += 1
            engine.schedule_in(delay, ep.sendto, data, dest)
        try:
            engine.post(hop)
        except ModeError:
            pass


def _make_handler(gw: Gateway):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("http: " + fmt, *args)

        def _body(self):
            n = int(self.headers.get("Content-Length") or 0)
            if not n:
                return None
            return json.loads(self.rfile.read(n))

        def _handle(self, method):
            url = urlsplit(self.path)
            try:
                body = self._body()
            except (ValueError, UnicodeDecodeError):
                return self._send(400, {"error": "malformed JSON"})
            status, payload = gw.submit(gw.route, method, url.path, parse_qs(url.query), body)
            self._send(status, payload)

        def _send(self, status, payload):
            data = b"" if payload is None else json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._handle("GET")

        def do_POST(self):
            self._handle("POST")

        def do_PUT(self):
            self._handle("PUT")

        def do_DELETE(self):
            self._handle("DELETE")

    return Handler


def _first(query: dict, key: str):
    vals = query.get(key)
    return vals[0] if vals else None


def _list(query: dict, key: str) -> list[str]:
    out = []
    for v in query.get(key, ()):
        out += [x for x in v.split(",") if x]
    return out


def _int(value):
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ValueError(f"bad id {value!r}") from None
