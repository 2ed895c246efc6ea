"""Deterministic discrete-event kernel.

Time is integer nanoseconds. Events are ordered by ``(fire_at, seq)`` where
``seq`` is a per-simulator insertion counter, so equal-time events dispatch in
the order they were scheduled.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

import numpy as np

LOGGER = logging.getLogger(__name__)

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

RTT_STREAM = 0
AGENT_STREAM = 1
ONU_TRAFFIC_STREAM_BASE = 1000


class EventKind(str, Enum):
    PACKET_ARRIVAL = "packet-arrival"
    REPORT_RECEIVED = "report-received"
    GRANT_START = "grant-start"
    GRANT_END = "grant-end"
    AGENT_TICK = "agent-tick"
    LOAD_PROFILE_TICK = "load-profile-tick"


class SchedulingError(RuntimeError):
    """An event was scheduled before the current clock."""


class SimulationError(RuntimeError):
    """A handler failed; carries the event that was being dispatched."""

    def __init__(self, event: "Event", cause: BaseException) -> None:
        super().__init__(f"handler for {event} failed: {cause}")
        self.event = event


@dataclass(frozen=True)
class Event:
    fire_at: int
    kind: EventKind
    payload: Any = None
    seq: int = -1

    def __str__(self) -> str:
        return f"event({self.kind.value} @ {self.fire_at} ns, seq={self.seq})"


Handler = Callable[[Event], None]


@dataclass
class Simulator:
    clock: int = 0
    record_trace: bool = False
    trace: list[tuple[int, int, str]] = field(default_factory=list)
    _queue: list[tuple[int, int, Event]] = field(default_factory=list, repr=False)
    _seq: int = 0
    _handlers: dict[EventKind, Handler] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self._queue)

    def register(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, event: Event) -> Event:
        if event.fire_at < self.clock:
            raise SchedulingError(f"cannot schedule {event} before clock={self.clock}")
        stored = Event(fire_at=event.fire_at, kind=event.kind, payload=event.payload, seq=self._seq)
        self._seq += 1
        heapq.heappush(self._queue, (stored.fire_at, stored.seq, stored))
        return stored

    def at(self, fire_at: int, kind: EventKind, payload: Any = None) -> Event:
        return self.schedule(Event(fire_at=fire_at, kind=kind, payload=payload))

    def peek_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def pop(self) -> Event | None:
        if not self._queue:
            return None
        _, _, event = heapq.heappop(self._queue)
        return event

    def run_until(self, t_end: int) -> int:
        if t_end < self.clock:
            raise SchedulingError(f"run_until({t_end}) is before clock={self.clock}")
        dispatched = 0
        while self._queue and self._queue[0][0] <= t_end:
            _, _, event = heapq.heappop(self._queue)
            self.clock = event.fire_at
            if self.record_trace:
                self.trace.append((event.fire_at, event.seq, event.kind.value))
            handler = self._handlers.get(event.kind)
            if handler is None:
                raise SimulationError(event, LookupError(f"no handler for {event.kind.value}"))
            try:
                handler(event)
            except SimulationError:
                raise
            except Exception as exc:
                LOGGER.debug("Handler failed on %s", event, exc_info=True)
                raise SimulationError(event, exc) from exc
            dispatched += 1
        self.clock = t_end
        return dispatched


@dataclass(frozen=True)
class RngStream:
    """Named random stream: draws depend only on ``(seed, stream_id, substream)``."""

    seed: int
    stream_id: int

    def generator(self, substream: int = 0) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            entropy=self.seed & 0xFFFF_FFFF_FFFF_FFFF,
            spawn_key=(self.stream_id, substream),
        )
        return np.random.Generator(np.random.PCG64(sequence))


def seconds(value: float) -> int:
    return int(round(value * NS_PER_S))


def millis(value: float) -> int:
    return int(round(value * NS_PER_MS))


def micros(value: float) -> int:
    return int(round(value * NS_PER_US))
