import threading
import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mecsim.engine import Engine, ModeError, OverrunWarning, SchedulingInPast, make_rng, to_us


def test_schedule_at_now_dispatches_at_now():
    eng = Engine()
    seen = []
    eng.schedule_at(0.0, lambda: seen.append(eng.now))
    assert eng.run_until(0.0) == 1
    assert seen == [0.0]


def test_equal_times_dispatch_in_insertion_order():
    eng = Engine()
    seen = []
    eng.schedule_at(1.0, seen.append, "A")
    eng.schedule_at(1.0, seen.append, "B")
    eng.run_until(5)
    assert seen == ["A", "B"]


def test_scheduling_in_the_past_is_rejected():
    eng = Engine()
    eng.run_until(1.0)
    with pytest.raises(SchedulingInPast):
        eng.schedule_at(0.5, lambda: None)
    with pytest.raises(SchedulingInPast):
        eng.schedule_in(-0.1, lambda: None)


def test_run_until_on_empty_queue_moves_clock():
    eng = Engine()
    assert eng.run_until(10) == 0
    assert eng.now == 10.0


def test_run_until_stops_at_t_end():
    eng = Engine()
    for t in (1, 2, 3):
        eng.schedule_at(t, lambda: None)
    assert eng.run_until(2) == 2
    assert eng.now == 2.0
    assert len(eng) == 1


def test_follow_up_inside_window_runs_in_same_call():
    eng = Engine()
    seen = []
    eng.schedule_at(1.0, lambda: eng.schedule_at(1.5, seen.append, eng.now))
    assert eng.run_until(2) == 2
    assert seen == [1.0]


def test_cancelled_event_is_skipped():
    eng = Engine()
    seen = []
    ev = eng.schedule_at(1.0, seen.append, 1)
    eng.schedule_at(2.0, seen.append, 2)
    ev.cancel()
    assert eng.run_until(3) == 1
    assert seen == [2]


def test_microsecond_resolution():
    eng = Engine()
    seen = []
    eng.schedule_at(0.000002, seen.append, "b")
    eng.schedule_at(0.000001, seen.append, "a")
    eng.run_until(1)
    assert seen == ["a", "b"]
    assert to_us(0.1 + 0.2) == 300_000


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 3)), max_size=60))
def test_dispatch_order_is_time_then_insertion(items):
    eng = Engine(trace=True)
    seen = []
    for i, (t, _) in enumerate(items):
        eng.schedule_at(t / 10, seen.append, (t, i))
    eng.run_until(10)
    assert seen == sorted(seen)
    times = [fire for fire, _, _ in eng.trace]
    assert times == sorted(times)


def test_rng_streams_are_reproducible_and_distinct():
    a = Engine(42).rng("bg").random(5)
    b = Engine(42).rng("bg").random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, Engine(42).rng("svc").random(5))
    assert not np.array_equal(a, Engine(43).rng("bg").random(5))
    eng = Engine(42)
    assert eng.rng("bg") is eng.rng("bg")
    assert np.array_equal(make_rng(42, "bg").random(5), a)


def test_event_trace_is_identical_across_runs():
    def scenario():
        eng = Engine(7, trace=True)
        rng = eng.rng("arrivals")

        def tick(n):
            if n < 200:
                eng.schedule_in(rng.exponential(0.1), tick, n + 1)
        eng.schedule_at(0, tick, 0)
        eng.run_until(100)
        return eng.trace
    assert scenario() == scenario()


def test_post_requires_realtime():
    with pytest.raises(ModeError):
        Engine().post(lambda: None)


def test_realtime_never_runs_ahead_of_wall_clock():
    eng = Engine()
    lags = []

    def fire():
        lags.append(time.monotonic() - (start + eng.now))
    for i in range(1, 6):
        eng.schedule_at(i * 0.1, fire)
    start = time.monotonic()
    stats = eng.run_realtime(1.0, until=0.5)
    wall = time.monotonic() - start
    assert stats.dispatched == 5
    assert min(lags) >= -0.002
    assert wall >= 0.5
    assert eng.now == 0.5
    assert eng.mode == "sim"


def test_pace_two_halves_wall_time():
    eng = Engine()
    for i in range(1, 11):
        eng.schedule_at(i * 0.1, lambda: None)
    t0 = time.monotonic()
    eng.run_realtime(2.0, until=1.0)
    wall = time.monotonic() - t0
    assert 0.5 <= wall < 0.8


def test_busy_handler_counts_overruns():
    eng = Engine(overrun_threshold=0.01)

    def busy():
        time.sleep(0.05)
    for i in range(1, 5):
        eng.schedule_at(i * 0.01, busy)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        stats = eng.run_realtime(1.0, until=0.1)
    assert stats.overruns > 0
    assert any(issubclass(w.category, OverrunWarning) for w in caught)


def test_posted_work_lands_at_mapped_time():
    eng = Engine()
    seen = []
    eng.schedule_at(0.2, lambda: None)

    def worker():
        time.sleep(0.1)
        eng.post(lambda: seen.append(eng.now))
    threading.Thread(target=worker).start()
    stats = eng.run_realtime(1.0, until=0.3)
    assert stats.ingress == 1
    assert len(seen) == 1 and 0.09 <= seen[0] <= 0.2


def test_stop_returns_from_realtime_loop():
    eng = Engine()
    threading.Timer(0.1, eng.stop).start()
    t0 = time.monotonic()
    eng.run_realtime(1.0)
    assert time.monotonic() - t0 < 1.0
