import pytest
from hypothesis import assume, given, settings, strategies as st

from mecsim.compute import (FAIR_SHARING, SEGREGATION, AdmissionRejected, MecHost,
                            NonPositiveInstructions, ResourceVector, UnknownApp)
from mecsim.engine import Engine


def host(R=1000.0, ram=1e9, disk=1e9, scheduling=SEGREGATION, engine=None):
    return MecHost("h", ResourceVector(R, ram, disk), engine, scheduling=scheduling)


def test_admission_boundary_is_inclusive():
    h = host()
    h.admit(ResourceVector(700))
    h.admit(ResourceVector(300))
    assert h.allocated.cpu_rate == 1000


def test_admission_rejects_cpu_overflow():
    h = host()
    h.admit(ResourceVector(700))
    with pytest.raises(AdmissionRejected) as exc:
        h.admit(ResourceVector(301))
    assert exc.value.component == "cpu"
    assert h.allocated.cpu_rate == 700  # nothing partially allocated


def test_admission_names_ram_and_disk():
    h = host(ram=100, disk=100)
    with pytest.raises(AdmissionRejected) as exc:
        h.admit(ResourceVector(1, 101, 0))
    assert exc.value.component == "ram"
    with pytest.raises(AdmissionRejected) as exc:
        h.admit(ResourceVector(1, 0, 101))
    assert exc.value.component == "disk"


def test_negative_request_is_invalid():
    with pytest.raises(ValueError):
        ResourceVector(-1)
    assert ResourceVector.of({"cpu": 5, "ram": 1}) == ResourceVector(5, 1, 0)


def test_segregation_runs_at_stipulated_rate():
    eng = Engine()
    h = host(R=1e7, engine=eng)
    a = h.admit(ResourceVector(1e6))
    b = h.admit(ResourceVector(5e6))
    h.compute(b, 1e9)
    assert h.compute(a, 1e6) == 1.0


def test_fair_sharing_arithmetic():
    eng = Engine()
    h = host(R=100, scheduling=FAIR_SHARING, engine=eng)
    a1 = h.admit(ResourceVector(20))
    a2 = h.admit(ResourceVector(30))
    h.admit(ResourceVector(50))          # admitted but idle: not active
    h.compute(a2, 1e6)                   # a2 now has a running task
    assert h.effective_rate(a1) == 40.0
    assert h.compute(a1, 80) == 2.0


def test_fair_sharing_at_full_admission_gives_stipulated_rate():
    h = host(R=100, scheduling=FAIR_SHARING, engine=Engine())
    ids = [h.admit(ResourceVector(r)) for r in (20, 30, 50)]
    for i in ids[1:]:
        h.compute(i, 1e6)
    assert h.effective_rate(ids[0]) == 20.0


def test_dummy_load_counts_under_fair_sharing_only():
    h = host(R=100, scheduling=FAIR_SHARING, engine=Engine())
    h.install_dummy_load(50)
    app = h.admit(ResourceVector(25))
    assert h.effective_rate(app) == pytest.approx(100 / 3)
    s = host(R=100, engine=Engine())
    s.install_dummy_load(50)
    assert s.effective_rate(s.admit(ResourceVector(25))) == 25
    with pytest.raises(AdmissionRejected):
        host(R=100).install_dummy_load(101)


def test_release_restores_sum_and_cancels_tasks():
    eng = Engine()
    h = host(engine=eng)
    a = h.admit(ResourceVector(100))
    before = h.allocated
    b = h.admit(ResourceVector(200))
    done = []
    h.compute(b, 1000, done.append)
    h.release(b)
    assert h.allocated == before
    eng.run_until(100)
    assert done == []
    with pytest.raises(UnknownApp):
        h.release(b)
    assert a in h.allocations


def test_compute_errors():
    h = host(engine=Engine())
    a = h.admit(ResourceVector(10))
    with pytest.raises(NonPositiveInstructions):
        h.compute(a, 0)
    with pytest.raises(UnknownApp):
        h.compute("nope", 10)


def test_tasks_of_one_app_run_back_to_back():
    eng = Engine()
    h = host(engine=eng)
    a = h.admit(ResourceVector(10))
    assert h.compute(a, 10) == 1.0
    assert h.compute(a, 20) == 3.0
    finished = []
    h.allocations[a].tasks[0].callback = lambda t: finished.append(eng.now)
    eng.run_until(5)
    assert finished == [1.0]


def test_rate_is_frozen_at_call_time():
    eng = Engine()
    h = host(R=100, scheduling=FAIR_SHARING, engine=eng)
    a = h.admit(ResourceVector(50))
    t = h.compute(a, 100)                # alone: 100 ips
    b = h.admit(ResourceVector(50))
    h.compute(b, 1000)                   # later contention does not move a's completion
    assert t == 1.0
    assert h.allocations[a].tasks[0].completes_at == 1.0


@settings(max_examples=200)
@given(R=st.floats(1.0, 1e9), shares=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8),
       fill=st.floats(0.05, 1.0))
def test_fair_share_formula_property(R, shares, fill):
    rates = [R * fill * s / sum(shares) for s in shares]
    assume(sum(rates) <= R)     # float rounding can push a full fill just past R
    h = host(R=R, scheduling=FAIR_SHARING, engine=Engine())
    ids = [h.admit(ResourceVector(r)) for r in rates]
    for i in ids[1:]:
        h.compute(i, 1e12)
    total = sum(rates)
    got = h.effective_rate(ids[0])
    assert got == pytest.approx(rates[0] * R / total, rel=1e-12)
    assert got >= rates[0] * (1 - 1e-12)
    assert h.allocated.cpu_rate <= R * (1 + 1e-12)


@settings(max_examples=100)
@given(r=st.floats(1.0, 1e6), n=st.floats(1.0, 1e9),
       others=st.lists(st.tuples(st.floats(1.0, 1e5), st.floats(1.0, 1e9)), max_size=5))
def test_segregation_isolation(r, n, others):
    def completion(with_contention):
        eng = Engine()
        h = host(R=1e7, engine=eng)
        app = h.admit(ResourceVector(r))
        if with_contention:
            for rate, work in others:
                h.compute(h.admit(ResourceVector(rate)), work)
        return h.compute(app, n)
    assert completion(False) == completion(True)
