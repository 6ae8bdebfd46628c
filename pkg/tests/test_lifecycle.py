import json

import pytest
from hypothesis import given, settings, strategies as st

from mecsim.apps import EchoApp
from mecsim.compute import MecHost, ResourceVector
from mecsim.engine import Engine
from mecsim.lifecycle import (LIFECYCLE_ORDER, AppDescriptor, DeviceApp, DuplicateAppId,
                              MalformedDescriptor, MecSystem, NoRunningInstance, Orchestrator,
                              PlacementFailed, UnknownApp, UnknownContext, load_descriptor)
from mecsim.ran import Ran
from mecsim.services import LocationService

ECHO = {"appId": "echo-1", "appName": "Echo", "appProvider": "EchoApp",
        "virtualComputeDescriptor": {"cpu": 100, "ram": 10, "disk": 10}}
EXTERNAL = {"appId": "ext-1", "appName": "WarningAlert",
            "virtualComputeDescriptor": {"cpu": 100},
            "emulatedMecApplication": {"ipAddress": "192.168.1.7", "port": 4500}}


def system(n_hosts=1, cpu=1000, inst=0.5, term=0.25, ran=None, **kw):
    eng = kw.pop("engine", None) or Engine(0)
    hosts = [MecHost(f"h{i + 1}", ResourceVector(cpu, 1e6, 1e6), eng, address=f"10.0.{i}.2")
             for i in range(n_hosts)]
    sys_ = MecSystem(eng, hosts, ran=ran, instantiation_delay=inst, termination_delay=term, **kw)
    sys_.register_app_class("EchoApp", EchoApp)
    return eng, sys_


# -- descriptors -------------------------------------------------------------

def test_descriptor_roundtrip(tmp_path):
    d = AppDescriptor.from_dict(EXTERNAL)
    assert d.external and d.emulated_endpoint == ("192.168.1.7", 4500)
    assert AppDescriptor.from_dict(d.to_dict()) == d
    path = tmp_path / "app.json"
    path.write_text(json.dumps(dict(ECHO, appServiceRequired=[{"serName": "LocationService"}])))
    loaded = load_descriptor(path)
    assert loaded.app_service_required == ["LocationService"]
    assert not loaded.external


@pytest.mark.parametrize("doc", [
    {k: v for k, v in ECHO.items() if k != "virtualComputeDescriptor"},
    {k: v for k, v in ECHO.items() if k != "appProvider"},
    dict(ECHO, virtualComputeDescriptor={"cpu": -1}),
    dict(EXTERNAL, emulatedMecApplication={"ipAddress": "x"}),
])
def test_malformed_descriptors(doc):
    with pytest.raises(MalformedDescriptor):
        AppDescriptor.from_dict(doc)


def test_malformed_json_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(MalformedDescriptor):
        load_descriptor(path)


def test_onboarding_rules():
    _, s = system()
    s.onboard(ECHO)
    assert s.onboard(EXTERNAL).external
    with pytest.raises(DuplicateAppId):
        s.onboard(dict(ECHO, appName="Echo2"))
    with pytest.raises(MalformedDescriptor):
        s.onboard(dict(ECHO, appId="x", appName="X", appProvider="Nope"))


# -- contexts ----------------------------------------------------------------

def test_internal_context_runs_after_instantiation_delay():
    eng, s = system()
    s.onboard(ECHO)
    done = []
    ctx = s.create_app_context("dev", "Echo", done.append)
    assert ctx.state == "instantiating"
    eng.run_until(0.49)
    assert ctx.state == "instantiating"
    eng.run_until(0.5)
    assert ctx.state == "running" and done == [ctx]
    assert ctx.host_id == "h1" and ctx.address == "10.0.0.2" and ctx.port is not None
    assert s.hosts["h1"].allocated.cpu_rate == 100


def test_external_context_skips_admission():
    eng, s = system()
    s.onboard(EXTERNAL)
    before = s.hosts["h1"].allocated
    ctx = s.create_app_context("dev", "WarningAlert")
    eng.run_until(1)
    assert ctx.endpoint == "192.168.1.7:4500" and ctx.host_id is None
    assert s.hosts["h1"].allocated == before
    s.delete_app_context(ctx.context_id)
    eng.run_until(2)
    assert s.hosts["h1"].allocated == before
    assert ctx.context_id not in s.contexts


def test_unknown_app_and_full_hosts():
    eng, s = system(cpu=150)
    s.onboard(ECHO)
    with pytest.raises(UnknownApp):
        s.create_app_context("dev", "Nope")
    s.create_app_context("dev", "Echo")
    with pytest.raises(PlacementFailed):
        s.create_app_context("dev2", "Echo")


def test_delete_releases_and_second_delete_fails():
    eng, s = system()
    s.onboard(ECHO)
    ctx = s.create_app_context("dev", "Echo")
    eng.run_until(1)
    s.delete_app_context(ctx.context_id)
    assert ctx.state == "terminating"
    assert s.hosts["h1"].allocated.cpu_rate == 100      # released only after the delay
    eng.run_until(1.25)
    assert ctx.state == "terminated"
    assert s.hosts["h1"].allocated.cpu_rate == 0
    assert ctx.history == list(LIFECYCLE_ORDER)
    with pytest.raises(UnknownContext):
        s.delete_app_context(ctx.context_id)


# -- placement ---------------------------------------------------------------

def test_least_utilised_host_wins():
    eng, s = system(n_hosts=2)
    s.hosts["h1"].install_dummy_load(900)
    s.hosts["h2"].install_dummy_load(200)
    s.onboard(ECHO)
    assert s.create_app_context("dev", "Echo").host_id == "h2"


def test_equal_utilisation_picks_lowest_id():
    eng, s = system(n_hosts=3)
    s.onboard(ECHO)
    assert s.create_app_context("dev", "Echo").host_id == "h1"


def test_required_service_decides_placement():
    eng = Engine()
    ran = Ran(eng)
    eng, s = system(n_hosts=2, engine=eng, ran=ran)
    s.hosts["h2"].install_dummy_load(500)
    s.add_service(LocationService(eng, ran, "h2"))
    s.onboard(dict(ECHO, appServiceRequired=["LocationService"]))
    assert s.create_app_context("dev", "Echo").host_id == "h2"
    relaxed = Orchestrator(list(s.hosts.values()), s.registry, strict=False)
    assert relaxed.choose_best_mec_host(s.descriptors["Echo"]).host_id == "h1"


def test_pluggable_policy():
    class LastHost(Orchestrator):
        def choose_best_mec_host(self, descriptor):
            return self.feasible_hosts(descriptor)[-1]
    eng = Engine()
    hosts = [MecHost(f"h{i}", ResourceVector(1000, 1e6, 1e6), eng) for i in (1, 2)]
    s = MecSystem(eng, hosts, orchestrator=LastHost(hosts))
    s.register_app_class("EchoApp", EchoApp)
    s.onboard(ECHO)
    assert s.create_app_context("dev", "Echo").host_id == "h2"


# -- join ----------------------------------------------------------------------

def test_join_existing():
    eng, s = system()
    s.onboard(dict(ECHO, joinable=True))
    with pytest.raises(NoRunningInstance):
        s.join_existing("b", "Echo")
    ctx = s.create_app_context("a", "Echo")
    eng.run_until(1)
    joined = [s.join_existing(f"u{i}", "Echo") for i in range(5)]
    assert all(j is ctx for j in joined)
    assert len(s.contexts) == 1 and len(s.apps) == 1


def test_non_joinable_app_refuses_join():
    eng, s = system()
    s.onboard(ECHO)
    s.create_app_context("a", "Echo")
    eng.run_until(1)
    with pytest.raises(NoRunningInstance):
        s.join_existing("b", "Echo")


# -- device app ----------------------------------------------------------------

def ran_world(transport=0.010, **kw):
    eng = Engine(0)
    ran = Ran(eng, l2_period=None)
    ran.add_cell("c", (0, 0, 0))
    ran.add_ue("ue1", transport={"dl": transport, "ul": transport, **kw})
    ran.add_ue("ue2", transport={"dl": transport, "ul": transport})
    return system(engine=eng, ran=ran)


def test_device_app_start_stop_protocol():
    eng, s = ran_world()
    s.onboard(ECHO)
    dev = DeviceApp(s, "ue1")
    replies = []
    dev.handle(b"START Echo", lambda r: replies.append((eng.now, r)))
    eng.run_until(2)
    t, text = replies[0]
    ctx = next(iter(s.contexts.values()))
    assert text == f"ACK {ctx.endpoint}"
    assert t == pytest.approx(0.5 + 0.020)
    dev.handle("STOP Echo", lambda r: replies.append((eng.now, r)))
    eng.run_until(4)
    assert replies[1][1] == "ACK"
    assert replies[1][0] == pytest.approx(2 + 0.25 + 0.020)


@pytest.mark.parametrize("datagram,reply", [
    ("FROB X", "NACK unknown-command"),
    ("START", "NACK unknown-command"),
    (b"\xff\xfe", "NACK unknown-command"),
    ("START Nope", "NACK unknown-app"),
    ("STOP Echo", "NACK no-context"),
])
def test_device_app_nacks(datagram, reply):
    eng, s = ran_world()
    s.onboard(ECHO)
    replies = []
    DeviceApp(s, "ue1").handle(datagram, replies.append)
    eng.run_until(2)
    assert replies == [reply]


def test_device_app_placement_failure():
    eng, s = ran_world()
    s.onboard(dict(ECHO, virtualComputeDescriptor={"cpu": 5000}))
    replies = []
    DeviceApp(s, "ue1").handle("START Echo", replies.append)
    eng.run_until(2)
    assert replies == ["NACK placement-failed"]


def test_second_device_joins_joinable_app():
    eng, s = ran_world()
    s.onboard(dict(ECHO, joinable=True))
    replies = []
    DeviceApp(s, "ue1").handle("START Echo", replies.append)
    eng.run_until(1)
    DeviceApp(s, "ue2").handle("START Echo", replies.append)
    eng.run_until(2)
    assert replies[0] == replies[1] and len(s.contexts) == 1
    DeviceApp(s, "ue2").handle("STOP Echo", replies.append)
    eng.run_until(3)
    assert replies[2] == "ACK" and len(s.contexts) == 1


def test_lossy_uplink_is_retransmitted():
    eng, s = ran_world(loss_prob=0.5)
    s.onboard(ECHO)
    replies = []
    DeviceApp(s, "ue1", retransmit=0.1).handle("START Echo", replies.append)
    eng.run_until(60)
    assert len(replies) == 1 and replies[0].startswith("ACK ")


# -- app scaffold --------------------------------------------------------------

def test_echo_round_trip_is_two_transport_delays():
    eng, s = ran_world(transport=0.015)
    s.onboard(ECHO)
    ctx = s.create_app_context("ue1", "Echo")
    eng.run_until(1)
    got = []
    s.ue_handlers["ue1"] = lambda m: got.append((eng.now, m))
    s.send_to_app("ue1", ctx.endpoint, "ping")
    eng.run_until(2)
    assert got == [(pytest.approx(1.030), "ping")]


def test_compute_adds_instructions_over_rate():
    eng, s = ran_world(transport=0.015)
    s.onboard(ECHO)
    s.app_params["Echo"] = {"instructions": 50}
    ctx = s.create_app_context("ue1", "Echo")
    eng.run_until(1)
    got = []
    s.ue_handlers["ue1"] = lambda m: got.append(eng.now)
    s.send_to_app("ue1", ctx.endpoint, "ping")
    eng.run_until(3)
    assert got == [pytest.approx(1.030 + 50 / 100)]


@settings(max_examples=40, deadline=None)
@given(ops=st.lists(st.tuples(st.sampled_from(["create", "delete", "wait"]), st.integers(0, 5)),
                    max_size=30))
def test_lifecycle_order_and_conservation(ops):
    eng, s = system(n_hosts=2, cpu=300, inst=0.3, term=0.2)
    s.onboard(ECHO)
    s.onboard(EXTERNAL)
    s.hosts["h2"].install_dummy_load(100)
    every = []
    s.listeners.append(lambda ctx: every.append(ctx))
    for op, k in ops:
        if op == "create":
            try:
                s.create_app_context(f"d{k}", "Echo" if k % 2 else "WarningAlert")
            except PlacementFailed:
                pass
        elif op == "delete":
            running = [c for c in s.contexts.values() if c.state == "running"]
            if running:
                s.delete_app_context(running[k % len(running)].context_id)
        else:
            eng.run_until(eng.now + 0.1 * k)
        for h in s.hosts.values():
            # dummy loads are allocations too
            assert h.allocated.cpu_rate <= h.capacity.cpu_rate
    for ctx in {id(c): c for c in every}.values():
        assert ctx.history == list(LIFECYCLE_ORDER[:len(ctx.history)])
