"""Stand-alone danger-zone UE app and MEC app that talk to a :class:`Gateway`.

They use only sockets, HTTP and JSON, the same way production clients
would, and log to a shared :class:`Timeline` with wall-clock timestamps.
"""
from __future__ import annotations

import json
import logging
import socket
import threading
import time
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .apps import Timeline

logger = logging.getLogger(__name__)


def _http(method: str, url: str, body=None, timeout: float = 10.0):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        raw = resp.read()
        return resp.status, (json.loads(raw) if raw else None)


class ExternalWarningAlertApp:
    """External MEC app: UDP towards UEs, HTTP towards the MEC platform.

    Only the Service Registry URL is configured; the Location Service is
    discovered through it.
    """

    def __init__(self, registry_url: str, timeline: Timeline, host: str = "127.0.0.1"):
        self.registry_url = registry_url
        self.timeline = timeline
        self._lock = threading.Lock()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, 0))
        self.sock.settimeout(0.2)
        self.callbacks = ThreadingHTTPServer((host, 0), self._callback_handler())
        self.callbacks.daemon_threads = True
        self.location_url = None
        self.subscriptions: dict[int, dict] = {}  # sub id -> {"ue": ..., "addr": ...}
        self._closed = False
        self._threads = [threading.Thread(target=self._udp_loop, daemon=True),
                         threading.Thread(target=self.callbacks.serve_forever, daemon=True)]

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    @property
    def callback_url(self) -> str:
        h, p = self.callbacks.server_address[:2]
        return f"http://{h}:{p}/notify"

    def start(self):
        for t in self._threads:
            t.start()
        return self

    def close(self):
        self._closed = True
        self.callbacks.shutdown()
        self.callbacks.server_close()
        self._threads[0].join(timeout=1)
        self.sock.close()

    def _log(self, ue, event, detail=None):
        self.timeline.add(time.monotonic(), ue, event, detail)

    def _discover(self) -> str:
        if self.location_url is None:
            _, services = _http("GET", f"{self.registry_url}?ser_name=LocationService")
            self.location_url = services[0]["transportInfo"]["endpoint"]["uris"][0]
        return self.location_url

    def _udp_loop(self):
        while not self._closed:
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                msg = json.loads(data)
            except ValueError:
                continue
            if msg.get("type") == "start":
                threading.Thread(target=self._arm, args=(msg, addr), daemon=True).start()

    def _arm(self, msg: dict, addr):
        ue = msg["ueId"]
        status, sub = _http("POST", f"{self._discover()}/subscriptions/area", {
            "ueId": ue, "center": msg["center"], "radius": msg["radius"],
            "direction": "entering", "callbackUrl": self.callback_url})
        if status != 201:
            logger.warning("subscription refused: %s %s", status, sub)
            return
        with self._lock:
            self.subscriptions[sub["subscriptionId"]] = {"ue": ue, "addr": addr}
        self._log(ue, "SUBSCRIBE", "entering")

    def _notified(self, note: dict):
        with self._lock:
            info = self.subscriptions.get(note["subscriptionId"])
        if info is None:
            return
        ue, event = info["ue"], note["event"]
        self._log(ue, "NOTIFY", event)
        warning = {"type": "warning", "event": event, "position": note["position"]}
        self.sock.sendto(json.dumps(warning).encode(), info["addr"])
        if event == "entering":
            status, _ = _http("PUT", f"{self._discover()}/subscriptions/area/{note['subscriptionId']}",
                              {"direction": "leaving"})
            if status == 200:
                self._log(ue, "MODIFY", "leaving")

    def _callback_handler(self):
        app = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def do_POST(self):
                n = int(self.headers.get("Content-Length") or 0)
                note = json.loads(self.rfile.read(n))
                self.send_response(204)
                self.send_header("Content-Length", "0")
                self.end_headers()
                threading.Thread(target=app._notified, args=(note,), daemon=True).start()

        return Handler


class ExternalWarningAlertUeApp:
    """External UE app following the START / use / STOP pattern over UDP."""

    def __init__(self, device_app: tuple[str, int], ue_id: str, center, radius: float,
                 timeline: Timeline, app_name: str = "WarningAlert", timeout: float = 30.0,
                 on_done=None):
        self.device_app = device_app
        self.ue_id = ue_id
        self.center = center
        self.radius = radius
        self.timeline = timeline
        self.app_name = app_name
        self.timeout = timeout
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.warnings: list[str] = []
        self.error: Exception | None = None
        self.on_done = on_done
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _log(self, event, detail=None):
        self.timeline.add(time.monotonic(), self.ue_id, event, detail)

    def start(self):
        self.thread.start()
        return self

    def join(self, timeout=None):
        self.thread.join(timeout)

    def _recv(self) -> bytes:
        self.sock.settimeout(self.timeout)
        data, _ = self.sock.recvfrom(65535)
        return data

    def _run(self):
        try:
            self._log("START", self.app_name)
            self.sock.sendto(f"START {self.app_name}".encode(), self.device_app)
            reply = self._recv().decode()
            self._log_reply(reply)
            if not reply.startswith("ACK"):
                return
            host, port = reply.split()[1].rsplit(":", 1)
            mec_app = (host, int(port))
            self.sock.sendto(json.dumps({"type": "start", "ueId": self.ue_id, "center": self.center,
                                         "radius": self.radius}).encode(), mec_app)
            while "leaving" not in self.warnings:
                msg = json.loads(self._recv())
                if msg.get("type") == "warning":
                    self.warnings.append(msg["event"])
                    self._log("UE_INFORMED", msg["event"])
            self._log("STOP", self.app_name)
            self.sock.sendto(f"STOP {self.app_name}".encode(), self.device_app)
            self._log_reply(self._recv().decode())
        except Exception as exc:
            self.error = exc
            logger.warning("external UE app %s failed: %s", self.ue_id, exc)
        finally:
            self.sock.close()
            if self.on_done is not None:
                self.on_done(self)

    def _log_reply(self, reply: str):
        verb, _, detail = reply.partition(" ")
        self._log(verb, detail or None)
