import json
import socket
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from scipy import stats

from mecsim.apps import EchoApp
from mecsim.compute import MecHost, ResourceVector
from mecsim.engine import Engine
from mecsim.gateway import Gateway
from mecsim.lifecycle import MecSystem
from mecsim.ran import LinearMobility, Ran
from mecsim.servicequeue import BackgroundModel, ServiceTimeModel
from mecsim.services import LocationService, Rnis

ECHO = {"appId": "echo-1", "appName": "Echo", "appProvider": "EchoApp",
        "virtualComputeDescriptor": {"cpu": 100}}


def build(service_time=0.005, background=None, ue_speed=0.0, transport=0.002, cpu=1000):
    eng = Engine(0)
    ran = Ran(eng, mobility_period=0.05, l2_period=0.5)
    ran.add_cell("c1", (0, 0, 0))
    ran.add_ue("car", mobility=LinearMobility((-20, 0, 0), (ue_speed, 0, 0)),
               transport={"dl": transport, "ul": transport})
    host = MecHost("h1", ResourceVector(cpu, 1e9, 1e9), eng)
    system = MecSystem(eng, [host], ran=ran, instantiation_delay=0.05, termination_delay=0.05)
    st = ServiceTimeModel(service_time, "constant" if background is None else "exponential")
    system.add_service(LocationService(eng, ran, "h1", service_time=st, background=background))
    system.add_service(Rnis(eng, ran, "h1", service_time=ServiceTimeModel(service_time, "constant")))
    system.register_app_class("EchoApp", EchoApp)
    system.onboard(ECHO)
    ran.start()
    return eng, system


class Live:
    """Runs the engine in real time on a background thread behind a gateway."""

    def __init__(self, eng, system, **kw):
        self.eng = eng
        self.gw = Gateway(system, **kw)

    def __enter__(self):
        self.gw.start()
        self.thread = threading.Thread(target=self.eng.run_realtime, args=(1.0,), daemon=True)
        self.thread.start()
        deadline = time.monotonic() + 5
        while self.eng.mode != "realtime" and time.monotonic() < deadline:
            time.sleep(0.005)
        return self

    def __exit__(self, *exc):
        self.eng.stop()
        self.thread.join(5)
        self.gw.close()

    def http(self, method, path, body=None):
        return http(method, self.gw.base_url + path, body)


def http(method, url, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            raw = resp.read()
            return resp.status, json.loads(raw) if raw else None
    except urllib.error.HTTPError as err:
        raw = err.read()
        return err.code, json.loads(raw) if raw else None


class Sink:
    """Local HTTP server recording callback POSTs."""

    def __init__(self):
        received = self.received = []

        class H(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers["Content-Length"])
                received.append(json.loads(self.rfile.read(n)))
                self.send_response(204)
                self.end_headers()

            def log_message(self, *a):
                pass
        self.server = HTTPServer(("127.0.0.1", 0), H)
        threading.Thread(target=self.server.serve_forever, daemon=True).start()
        self.url = "http://127.0.0.1:%d/notify" % self.server.server_address[1]

    def close(self):
        self.server.shutdown()
        self.server.server_close()


def wait_for(cond, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not cond() and time.monotonic() < deadline:
        time.sleep(0.01)
    return cond()


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- mode safety ----------------------------------------------------------------

def test_gateway_refuses_traffic_outside_realtime():
    eng, system = build()
    with Gateway(system) as gw:
        status, body = http("GET", gw.base_url + "/v1/mp1/services")
        assert status == 503 and "mode" in body["error"]
        addr = gw.bind_device_app("car")
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.settimeout(2)
            s.sendto(b"START Echo", addr)
            assert s.recvfrom(100)[0] == b"NACK mode"


# -- Mx2 -------------------------------------------------------------------------

def test_mx2_create_and_delete():
    eng, system = build()
    with Live(eng, system) as live:
        status, ctx = live.http("POST", "/v1/mx2/app_contexts", {"appName": "Echo"})
        assert status == 201 and ctx["state"] == "running"
        assert ctx["userAppInstanceInfo"]["referenceURI"]
        cid = ctx["contextId"]
        assert live.http("GET", f"/v1/mx2/app_contexts/{cid}")[0] == 200
        assert live.http("DELETE", f"/v1/mx2/app_contexts/{cid}")[0] == 204
        assert live.http("DELETE", f"/v1/mx2/app_contexts/{cid}")[0] == 404
        assert live.http("POST", "/v1/mx2/app_contexts", {"appName": "Nope"})[0] == 404
        assert live.http("POST", "/v1/mx2/app_contexts", {"name": "Echo"})[0] == 400
        assert live.http("GET", "/v1/nothing")[0] == 404


def test_mx2_placement_failure_is_403():
    eng, system = build(cpu=150)
    with Live(eng, system) as live:
        assert live.http("POST", "/v1/mx2/app_contexts", {"appName": "Echo"})[0] == 201
        assert live.http("POST", "/v1/mx2/app_contexts", {"appName": "Echo"})[0] == 403


def test_malformed_json_is_400():
    eng, system = build()
    with Live(eng, system) as live:
        req = urllib.request.Request(live.gw.base_url + "/v1/mx2/app_contexts", data=b"{oops",
                                     method="POST")
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req, timeout=5)
        assert err.value.code == 400


# -- service APIs ----------------------------------------------------------------

def test_registry_lists_reachable_service_uris():
    eng, system = build()
    with Live(eng, system) as live:
        status, services = live.http("GET", "/v1/mp1/services?ser_name=LocationService")
        assert status == 200 and len(services) == 1
        uri = services[0]["transportInfo"]["endpoint"]["uris"][0]
        assert uri == live.gw.base_url + "/v1/location"
        status, body = http("GET", uri + "/queries/users?ue_id=car")
        assert status == 200 and body["users"][0]["ueId"] == "car"
        assert live.http("GET", "/v1/location/queries/users?ue_id=ghost")[0] == 404


def test_location_response_latency_follows_service_time():
    eng, system = build(service_time=0.100)
    with Live(eng, system) as live:
        t0 = time.monotonic()
        status, _ = live.http("GET", "/v1/location/queries/users")
        elapsed = time.monotonic() - t0
        assert status == 200
        assert 0.095 <= elapsed < 0.5


def test_rnis_layer2_over_http():
    eng, system = build()
    with Live(eng, system) as live:
        time.sleep(0.6)
        status, body = live.http("GET", "/v1/rni/queries/layer2_meas?cell_id=c1&aggregator=last-sample")
        assert status == 200
        assert body["cellInfo"][0]["cellId"] == "c1"
        assert live.http("GET", "/v1/rni/queries/layer2_meas?cell_id=zz")[0] == 404
        assert live.http("GET", "/v1/rni/queries/layer2_meas?measure=jitter")[0] == 400


def test_area_subscription_callbacks_and_modify():
    eng, system = build(ue_speed=20.0)
    sink, other = Sink(), Sink()
    try:
        with Live(eng, system) as live:
            status, sub = live.http("POST", "/v1/location/subscriptions/area",
                                    {"ueId": "car", "center": {"x": 0, "y": 0, "z": 0},
                                     "radius": 5, "callbackUrl": sink.url})
            assert status == 201
            sid = sub["subscriptionId"]
            live.http("POST", "/v1/location/subscriptions/area",
                      {"ueId": "car", "center": {"x": 0}, "radius": 5, "callbackUrl": other.url})
            assert wait_for(lambda: len(sink.received) == 1 and len(other.received) == 1)
            note = sink.received[0]
            assert note["subscriptionId"] == sid and note["event"] == "entering"
            assert note["ueId"] == "car" and "position" in note and "timestamp" in note
            status, body = live.http("PUT", f"/v1/location/subscriptions/area/{sid}",
                                     {"direction": "leaving"})
            assert status == 200 and body["direction"] == "leaving"
            assert wait_for(lambda: len(sink.received) == 2)
            assert sink.received[1]["event"] == "leaving"
            assert live.gw.callbacks[sid].delivered == 2
            assert live.http("DELETE", f"/v1/location/subscriptions/area/{sid}")[0] == 204
            assert live.http("GET", f"/v1/location/subscriptions/area/{sid}")[0] == 404
            assert live.http("PUT", "/v1/location/subscriptions/area/abc", {})[0] == 400
            bad = live.http("POST", "/v1/location/subscriptions/area",
                            {"ueId": "car", "center": {"x": 0}, "radius": -1, "callbackUrl": sink.url})
            assert bad[0] == 400
    finally:
        sink.close()
        other.close()


def test_unreachable_callback_is_retried_then_disabled():
    eng, system = build(ue_speed=20.0)
    dead = f"http://127.0.0.1:{free_port()}/cb"
    with Live(eng, system, retry_backoff=0.05) as live:
        _, sub = live.http("POST", "/v1/location/subscriptions/area",
                           {"ueId": "car", "center": {"x": 0}, "radius": 5, "callbackUrl": dead})
        sid = sub["subscriptionId"]
        assert wait_for(lambda: live.gw.callbacks[sid].disabled)
        reg = live.gw.callbacks[sid]
        assert reg.failures == 4 and reg.delivered == 0
        loc = system.service("LocationService")
        assert wait_for(lambda: not loc.subscriptions[sid].active)


def test_congestion_is_visible_to_external_clients():
    def latencies(lambda_b):
        eng, system = build(service_time=0.010,
                            background=BackgroundModel(1.0, lambda_b, 100.0))
        out = []
        with Live(eng, system) as live:
            for _ in range(40):
                t0 = time.monotonic()
                live.http("GET", "/v1/location/queries/users?ue_id=car")
                out.append(time.monotonic() - t0)
        return out
    low, high = latencies(19.0), latencies(79.0)
    assert stats.mannwhitneyu(high, low, alternative="greater").pvalue < 0.01


# -- UDP device app --------------------------------------------------------------

def test_device_app_over_udp():
    eng, system = build(transport=0.020)
    with Live(eng, system) as live:
        addr = live.gw.bind_device_app("car")
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.settimeout(3)
            t0 = time.monotonic()
            s.sendto(b"START Echo", addr)
            reply = s.recvfrom(200)[0].decode()
            elapsed = time.monotonic() - t0
            assert reply.startswith("ACK ") and ":" in reply
            assert elapsed >= 0.05 + 0.040 - 0.005       # instantiation + uplink + downlink
            s.sendto(b"STOP Echo", addr)
            assert s.recvfrom(200)[0] == b"ACK"
            s.sendto(b"STA", addr)
            assert s.recvfrom(200)[0] == b"NACK unknown-command"


def test_external_app_traffic_is_relayed_with_ran_delay():
    eng, system = build(transport=0.030)
    app = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    app.bind(("127.0.0.1", 0))
    app.settimeout(3)
    system.onboard({"appId": "ext", "appName": "Ext", "virtualComputeDescriptor": {"cpu": 1},
                    "emulatedMecApplication": {"ipAddress": "127.0.0.1",
                                               "port": app.getsockname()[1]}})
    try:
        with Live(eng, system) as live:
            addr = live.gw.bind_device_app("car")
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as ue:
                ue.settimeout(3)
                ue.sendto(b"START Ext", addr)
                reply = ue.recvfrom(200)[0].decode()
                host, port = reply.split()[1].split(":")
                assert int(port) != app.getsockname()[1]          # relay, not the app itself
                t0 = time.monotonic()
                ue.sendto(b"hello", (host, int(port)))
                data, relay_addr = app.recvfrom(100)
                assert data == b"hello"
                app.sendto(b"warn", relay_addr)
                assert ue.recvfrom(100)[0] == b"warn"
                assert time.monotonic() - t0 >= 0.060 - 0.005
    finally:
        app.close()
