"""Upstream DBA: ONU queues, REPORT/GATE polling and first-fit wavelength scheduling.

All scheduling happens on the OLT receive timeline. An ONU that is granted a
burst starting at ``start_at`` begins transmitting at ``start_at - upstream``
on its own clock, where ``upstream`` is its upstream half of the RTT.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Any, Callable, Sequence

import numpy as np

from .metrics import GRANT_COLUMNS, LatencyBatch
from .sim import NS_PER_S, NS_PER_US, Event, EventKind, Simulator
from .traffic import MAX_PACKET_BYTES, OnuTrafficSource

LOGGER = logging.getLogger(__name__)


class UnknownOnuError(LookupError):
    """An operation named an ONU id that is not part of the network."""


class WMaxRejectedError(ValueError):
    """A W_max below the largest packet size would strand full-size packets."""


@dataclass(frozen=True)
class PonConfig:
    n_onus: int = 32
    n_wavelengths: int = 2
    line_rate: float = 25e9
    guard: int = 1_000
    rtt_range: tuple[int, int] = (100_000, 200_000)
    default_w_max: int = 30_000
    processing: int = 0
    control_bytes: int = 64

    def problems(self) -> list[str]:
        issues: list[str] = []
        if self.n_onus < 1:
            issues.append("pon.n_onus must be >= 1")
        if self.n_wavelengths < 1:
            issues.append("pon.n_wavelengths must be >= 1")
        if self.line_rate <= 0:
            issues.append("pon.line_rate_bps must be > 0")
        if self.guard <= 0:
            issues.append("pon.guard_ns must be > 0")
        low, high = self.rtt_range
        if low < 0 or high < low:
            issues.append(f"pon.rtt_range_us must be ordered and non-negative (got {low}..{high} ns)")
        if self.default_w_max < MAX_PACKET_BYTES:
            issues.append(f"pon.default_w_max_bytes must be >= {MAX_PACKET_BYTES}")
        if self.processing < 0:
            issues.append("pon.processing_ns must be >= 0")
        if self.control_bytes < 0:
            issues.append("pon.control_bytes must be >= 0")
        return issues

    def as_dict(self) -> dict[str, Any]:
        return {
            "n_onus": self.n_onus,
            "n_wavelengths": self.n_wavelengths,
            "line_rate_bps": self.line_rate,
            "guard_ns": self.guard,
            "rtt_range_us": [self.rtt_range[0] / NS_PER_US, self.rtt_range[1] / NS_PER_US],
            "default_w_max_bytes": self.default_w_max,
            "processing_ns": self.processing,
            "control_bytes": self.control_bytes,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PonConfig":
        base = cls()
        rtt = data.get("rtt_range_us")
        rtt_range = (
            (int(round(float(rtt[0]) * NS_PER_US)), int(round(float(rtt[1]) * NS_PER_US)))
            if rtt is not None
            else base.rtt_range
        )
        return cls(
            n_onus=int(data.get("n_onus", base.n_onus)),
            n_wavelengths=int(data.get("n_wavelengths", base.n_wavelengths)),
            line_rate=float(data.get("line_rate_bps", base.line_rate)),
            guard=int(data.get("guard_ns", base.guard)),
            rtt_range=rtt_range,
            default_w_max=int(data.get("default_w_max_bytes", base.default_w_max)),
            processing=int(data.get("processing_ns", base.processing)),
            control_bytes=int(data.get("control_bytes", base.control_bytes)),
        )


@dataclass(frozen=True)
class Grant:
    onu_id: int
    wavelength: int
    start_at: int
    size: int
    duration: int
    w_max: int
    issued_at: int = 0

    @property
    def end_at(self) -> int:
        return self.start_at + self.duration


@dataclass
class WavelengthState:
    index: int
    busy_until: int = 0
    bursts: int = 0
    busy_ns: int = 0


def size_grant(request: int, w_max: int) -> int:
    if request < 0 or w_max <= 0:
        raise ValueError(f"invalid grant request {request} / cap {w_max}")
    return min(request, w_max)


def burst_duration(size: int, line_rate: float) -> int:
    if size < 0:
        raise ValueError(f"burst size must be >= 0 (got {size})")
    if float(line_rate).is_integer():
        rate = int(line_rate)
        return -(-size * 8 * NS_PER_S // rate)
    return math.ceil(size * 8 * NS_PER_S / line_rate)


def _offsets_ns(cum_bytes: np.ndarray, line_rate: float) -> np.ndarray:
    if float(line_rate).is_integer():
        rate = int(line_rate)
        return -(-cum_bytes * (8 * NS_PER_S) // rate)
    return np.ceil(cum_bytes * (8.0 * NS_PER_S / line_rate)).astype(np.int64)


def first_fit_schedule(
    duration: int, earliest: int, channels: Sequence[WavelengthState], guard: int
) -> tuple[int, int]:
    """Place a burst on the channel with the earliest feasible start; ties go to the lowest index."""
    if not channels:
        raise ValueError("no wavelengths to schedule on")
    best_index = 0
    best_start = max(earliest, channels[0].busy_until + guard)
    for channel in channels[1:]:
        candidate = max(earliest, channel.busy_until + guard)
        if candidate < best_start:
            best_index, best_start = channel.index, candidate
    chosen = channels[best_index]
    chosen.busy_until = best_start + duration
    chosen.bursts += 1
    chosen.busy_ns += duration
    return best_index, best_start


class OnuQueue:
    """FIFO of packet batches. Packets are visible only from their ``arrive_at`` on."""

    def __init__(self) -> None:
        # Each chunk: (arrive times, sizes, inclusive cumulative bytes); all time-sorted.
        self._chunks: deque[tuple[np.ndarray, np.ndarray, np.ndarray]] = deque()
        self._head = 0
        self.appended_packets = 0
        self.appended_bytes = 0
        self.sent_packets = 0
        self.sent_bytes = 0
        self.last_sent_arrival = -1

    def push(self, times: np.ndarray, sizes: np.ndarray) -> None:
        if len(times) == 0:
            return
        if self._chunks and times[0] < self._chunks[-1][0][-1]:
            raise ValueError("arrival batches must be pushed in time order")
        cum = np.cumsum(sizes, dtype=np.int64)
        self._chunks.append((times, sizes, cum))
        self.appended_packets += len(times)
        self.appended_bytes += int(cum[-1])

    def _future(self, t: int) -> tuple[int, int]:
        """Packets and bytes already pushed with ``arrive_at > t``."""
        packets = bytes_ = 0
        for index in range(len(self._chunks) - 1, -1, -1):
            times, _, cum = self._chunks[index]
            first = self._head if index == 0 else 0
            cut = int(np.searchsorted(times, t, side="right"))
            cut = max(cut, first)
            if cut < len(times):
                before = int(cum[cut - 1]) if cut > 0 else 0
                packets += len(times) - cut
                bytes_ += int(cum[-1]) - before
            if cut > 0 and times[cut - 1] <= t:
                break
        return packets, bytes_

    def arrived_until(self, t: int) -> tuple[int, int]:
        packets, bytes_ = self._future(t)
        return self.appended_packets - packets, self.appended_bytes - bytes_

    def queued_packets(self, t: int) -> int:
        return self.arrived_until(t)[0] - self.sent_packets

    def queued_bytes(self, t: int) -> int:
        return self.arrived_until(t)[1] - self.sent_bytes

    @property
    def pending_packets(self) -> int:
        return self.appended_packets - self.sent_packets

    def pop_fifo(self, limit: int, ready_at: int) -> tuple[np.ndarray, np.ndarray]:
        """Dequeue the longest FIFO prefix that arrived by ``ready_at`` and fits in ``limit`` bytes."""
        times_out: list[np.ndarray] = []
        sizes_out: list[np.ndarray] = []
        remaining = limit
        while self._chunks and remaining > 0:
            times, sizes, cum = self._chunks[0]
            head = self._head
            ready = int(np.searchsorted(times, ready_at, side="right"))
            if ready <= head:
                break
            base = int(cum[head - 1]) if head > 0 else 0
            fits = int(np.searchsorted(cum[head:ready] - base, remaining, side="right"))
            if fits == 0:
                break
            end = head + fits
            times_out.append(times[head:end])
            sizes_out.append(sizes[head:end])
            taken = int(cum[end - 1]) - base
            remaining -= taken
            if end == len(times):
                self._chunks.popleft()
                self._head = 0
            else:
                self._head = end
            if end < ready or end < len(times):
                break
        if not times_out:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty
        times_sent = np.concatenate(times_out)
        sizes_sent = np.concatenate(sizes_out)
        self.sent_packets += len(times_sent)
        self.sent_bytes += limit - remaining
        return times_sent, sizes_sent


@dataclass
class OnuState:
    onu_id: int
    rtt: int
    w_max: int
    queue: OnuQueue = field(default_factory=OnuQueue)
    source: OnuTrafficSource | None = None

    @property
    def downstream(self) -> int:
        return self.rtt // 2

    @property
    def upstream(self) -> int:
        return self.rtt - self.downstream

    def queued_bytes(self, t: int) -> int:
        return self.queue.queued_bytes(t)


@dataclass
class GrantAudit:
    """Streaming check of scheduler invariants over every grant and delivery."""

    guard: int
    overlaps: int = 0
    gap_violations: int = 0
    cap_violations: int = 0
    fifo_violations: int = 0
    causality_violations: int = 0
    grants: int = 0
    trace: IO[str] | None = None
    _last_end: dict[int, int] = field(default_factory=dict)
    _last_arrival: dict[int, int] = field(default_factory=dict)
    _writer: Any = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.trace is not None:
            self._writer = csv.writer(self.trace, lineterminator="\n")
            self._writer.writerow(GRANT_COLUMNS)

    def on_grant(self, grant: Grant) -> None:
        self.grants += 1
        last_end = self._last_end.get(grant.wavelength)
        if last_end is not None:
            if grant.start_at < last_end:
                self.overlaps += 1
            elif grant.start_at < last_end + self.guard:
                self.gap_violations += 1
        self._last_end[grant.wavelength] = grant.end_at
        if grant.size > grant.w_max:
            self.cap_violations += 1
        if self._writer is not None:
            self._writer.writerow(
                [
                    grant.onu_id,
                    grant.wavelength,
                    grant.start_at,
                    grant.size,
                    grant.duration,
                    grant.w_max,
                ]
            )

    def on_delivery(self, batch: LatencyBatch, line_rate: float) -> None:
        if not len(batch):
            return
        previous = self._last_arrival.get(batch.onu_id, -1)
        if batch.arrive[0] < previous or np.any(np.diff(batch.arrive) < 0):
            self.fifo_violations += 1
        self._last_arrival[batch.onu_id] = int(batch.arrive[-1])
        own = _offsets_ns(batch.size, line_rate)
        self.causality_violations += int(np.count_nonzero(batch.depart < batch.arrive + own))

    def conservation_errors(self, onus: Sequence[OnuState], delivered: int) -> int:
        """ONUs whose generated packets differ from delivered plus still queued."""
        errors = 0
        sent = 0
        for onu in onus:
            generated = onu.source.generated_packets if onu.source is not None else None
            if generated is not None and generated != onu.queue.appended_packets:
                errors += 1
            if onu.queue.sent_packets + onu.queue.pending_packets != onu.queue.appended_packets:
                errors += 1
            sent += onu.queue.sent_packets
        if sent != delivered:
            errors += 1
        return errors

    @property
    def violations(self) -> int:
        return (
            self.overlaps
            + self.gap_violations
            + self.cap_violations
            + self.fifo_violations
            + self.causality_violations
        )

    def counters(self) -> dict[str, int]:
        return {
            "grants": self.grants,
            "overlaps": self.overlaps,
            "gap_violations": self.gap_violations,
            "cap_violations": self.cap_violations,
            "fifo_violations": self.fifo_violations,
            "causality_violations": self.causality_violations,
        }


DeliverySink = Callable[[LatencyBatch, Grant], None]


class PonNetwork:
    """OLT scheduler plus ONU queues, driven by the simulator's grant and report events."""

    def __init__(
        self,
        cfg: PonConfig,
        sim: Simulator,
        onus: Sequence[OnuState],
        *,
        audit: GrantAudit | None = None,
        sink: DeliverySink | None = None,
    ) -> None:
        self.cfg = cfg
        self.sim = sim
        self.onus = list(onus)
        self.channels = [WavelengthState(index) for index in range(cfg.n_wavelengths)]
        self.audit = audit
        self.sink = sink
        sim.register(EventKind.REPORT_RECEIVED, self._on_report)
        sim.register(EventKind.GRANT_START, self._on_grant_start)
        sim.register(EventKind.GRANT_END, self._on_grant_end)

    def onu(self, onu_id: int) -> OnuState:
        if not 0 <= onu_id < len(self.onus):
            raise UnknownOnuError(f"unknown ONU id {onu_id} (network has {len(self.onus)})")
        return self.onus[onu_id]

    def bootstrap(self, at: int = 0) -> None:
        """Queue an initial empty REPORT from every ONU so polling starts."""
        for onu in self.onus:
            self.sim.at(at, EventKind.REPORT_RECEIVED, (onu.onu_id, 0))

    def handle_report(self, onu_id: int, reported_bytes: int, t_receive: int) -> Grant:
        onu = self.onu(onu_id)
        size = size_grant(reported_bytes, onu.w_max)
        duration = burst_duration(size + self.cfg.control_bytes, self.cfg.line_rate)
        # The GATE needs the downstream half to reach the ONU and the burst the upstream half back.
        earliest = t_receive + self.cfg.processing + onu.downstream + onu.upstream
        wavelength, start = first_fit_schedule(duration, earliest, self.channels, self.cfg.guard)
        grant = Grant(
            onu_id=onu_id,
            wavelength=wavelength,
            start_at=start,
            size=size,
            duration=duration,
            w_max=onu.w_max,
            issued_at=t_receive,
        )
        if self.audit is not None:
            self.audit.on_grant(grant)
        self.sim.at(start, EventKind.GRANT_START, grant)
        self.sim.at(grant.end_at, EventKind.GRANT_END, grant)
        return grant

    def execute_grant(self, grant: Grant) -> LatencyBatch:
        onu = self.onu(grant.onu_id)
        tx_start = grant.start_at - onu.upstream
        arrive, sizes = onu.queue.pop_fifo(grant.size, tx_start)
        if len(arrive):
            depart = grant.start_at + _offsets_ns(np.cumsum(sizes, dtype=np.int64), self.cfg.line_rate)
        else:
            depart = np.empty(0, dtype=np.int64)
        return LatencyBatch(grant.onu_id, arrive, depart, sizes)

    def residual_report(self, grant: Grant) -> int:
        """Queue depth the ONU reports at the end of its burst, on its own clock."""
        onu = self.onu(grant.onu_id)
        return onu.queue.queued_bytes(grant.end_at - onu.upstream)

    def set_w_max(self, onu_id: int, w_max: int) -> int:
        onu = self.onu(onu_id)
        if w_max < MAX_PACKET_BYTES:
            raise WMaxRejectedError(
                f"W_max {w_max} B for ONU {onu_id} is below the {MAX_PACKET_BYTES} B packet size"
            )
        previous = onu.w_max
        if w_max != previous:
            onu.w_max = w_max
            LOGGER.debug("ONU %d W_max %d -> %d at %d ns", onu_id, previous, w_max, self.sim.clock)
        return previous

    def _on_report(self, event: Event) -> None:
        onu_id, reported = event.payload
        self.handle_report(onu_id, reported, event.fire_at)

    def _on_grant_start(self, event: Event) -> None:
        grant: Grant = event.payload
        batch = self.execute_grant(grant)
        if self.audit is not None:
            self.audit.on_delivery(batch, self.cfg.line_rate)
        if self.sink is not None:
            self.sink(batch, grant)

    def _on_grant_end(self, event: Event) -> None:
        grant: Grant = event.payload
        self.handle_report(grant.onu_id, self.residual_report(grant), event.fire_at)


def assign_rtts(cfg: PonConfig, rng: np.random.Generator) -> list[int]:
    low, high = cfg.rtt_range
    return [int(v) for v in rng.integers(low, high, size=cfg.n_onus, endpoint=True)]
