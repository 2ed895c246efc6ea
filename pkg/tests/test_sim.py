from __future__ import annotations

import numpy as np
import pytest

from ibasim.sim import (
    Event,
    EventKind,
    RngStream,
    SchedulingError,
    SimulationError,
    Simulator,
    micros,
    millis,
    seconds,
)


def _recording(sim: Simulator, kind: EventKind, seen: list[tuple[int, object]]) -> None:
    sim.register(kind, lambda event: seen.append((event.fire_at, event.payload)))


def test_events_dispatch_in_time_order() -> None:
    sim = Simulator()
    seen: list[tuple[int, object]] = []
    _recording(sim, EventKind.AGENT_TICK, seen)
    sim.at(30, EventKind.AGENT_TICK, "c")
    sim.at(10, EventKind.AGENT_TICK, "a")
    sim.at(20, EventKind.AGENT_TICK, "b")
    assert sim.run_until(100) == 3
    assert seen == [(10, "a"), (20, "b"), (30, "c")]
    assert sim.clock == 100


def test_equal_time_events_keep_insertion_order() -> None:
    sim = Simulator()
    seen: list[tuple[int, object]] = []
    _recording(sim, EventKind.GRANT_START, seen)
    _recording(sim, EventKind.GRANT_END, seen)
    sim.at(5, EventKind.GRANT_END, "first")
    sim.at(5, EventKind.GRANT_START, "second")
    sim.run_until(5)
    assert [payload for _, payload in seen] == ["first", "second"]


def test_run_until_leaves_later_events_queued() -> None:
    sim = Simulator()
    seen: list[tuple[int, object]] = []
    _recording(sim, EventKind.AGENT_TICK, seen)
    sim.at(10, EventKind.AGENT_TICK)
    sim.at(11, EventKind.AGENT_TICK)
    assert sim.run_until(10) == 1
    assert sim.peek_time() == 11
    assert len(sim) == 1


def test_schedule_before_clock_is_rejected() -> None:
    sim = Simulator(clock=100)
    with pytest.raises(SchedulingError):
        sim.at(99, EventKind.AGENT_TICK)
    stored = sim.at(100, EventKind.AGENT_TICK)
    assert stored.seq == 0


def test_handlers_may_schedule_at_current_time() -> None:
    sim = Simulator()
    seen: list[int] = []

    def _chain(event: Event) -> None:
        seen.append(event.fire_at)
        if len(seen) < 3:
            sim.at(event.fire_at, EventKind.AGENT_TICK)

    sim.register(EventKind.AGENT_TICK, _chain)
    sim.at(7, EventKind.AGENT_TICK)
    sim.run_until(7)
    assert seen == [7, 7, 7]


def test_handler_failure_is_wrapped_with_event() -> None:
    sim = Simulator()

    def _boom(event: Event) -> None:
        raise RuntimeError("broken handler")

    sim.register(EventKind.REPORT_RECEIVED, _boom)
    sim.at(3, EventKind.REPORT_RECEIVED, (1, 0))
    with pytest.raises(SimulationError) as excinfo:
        sim.run_until(10)
    assert excinfo.value.event.kind is EventKind.REPORT_RECEIVED
    assert excinfo.value.event.fire_at == 3
    assert isinstance(excinfo.value.__cause__, RuntimeError)


def test_missing_handler_is_a_simulation_error() -> None:
    sim = Simulator()
    sim.at(1, EventKind.LOAD_PROFILE_TICK)
    with pytest.raises(SimulationError):
        sim.run_until(1)


def test_pop_returns_none_when_empty() -> None:
    sim = Simulator()
    assert sim.pop() is None
    sim.at(4, EventKind.AGENT_TICK, "x")
    event = sim.pop()
    assert event is not None and event.payload == "x"


def test_trace_is_identical_across_runs() -> None:
    def _trace() -> list[tuple[int, int, str]]:
        sim = Simulator(record_trace=True)
        sim.register(EventKind.AGENT_TICK, lambda event: None)
        rng = RngStream(9, 5).generator()
        for t in rng.integers(0, 1_000, size=50):
            sim.at(int(t), EventKind.AGENT_TICK)
        sim.run_until(1_000)
        return sim.trace

    assert _trace() == _trace()


def test_rng_stream_depends_only_on_seed_stream_and_substream() -> None:
    a = RngStream(42, 1000).generator(3).random(5)
    b = RngStream(42, 1000).generator(3).random(5)
    c = RngStream(42, 1001).generator(3).random(5)
    d = RngStream(42, 1000).generator(4).random(5)
    e = RngStream(43, 1000).generator(3).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert not np.array_equal(a, e)


def test_time_helpers_round_to_nanoseconds() -> None:
    assert seconds(0.8) == 800_000_000
    assert millis(1.5) == 1_500_000
    assert micros(150) == 150_000
