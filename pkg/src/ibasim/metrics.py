"""Latency samples, windowed statistics, run summaries and CSV outputs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .sim import NS_PER_S, NS_PER_US

LOGGER = logging.getLogger(__name__)

TIMESERIES_COLUMNS = (
    "window_start_ns",
    "onu_id",
    "count",
    "mean_latency_ns",
    "p99_latency_ns",
    "max_latency_ns",
    "delivered_bytes",
)
SUMMARY_COLUMNS = (
    "onu_id",
    "packets",
    "mean_latency_ns",
    "p99_latency_ns",
    "max_latency_ns",
    "throughput_bps",
)
AGENT_LOG_COLUMNS = ("tick_time_ns", "state_bin", "action_w_max_bytes", "reward", "epsilon")
QTABLE_COLUMNS = ("state_bin", "w_max_bytes", "q_value", "visits")
GRANT_COLUMNS = (
    "onu_id",
    "wavelength",
    "start_ns",
    "size_bytes",
    "duration_ns",
    "w_max_bytes",
)


class OutputError(RuntimeError):
    """Writing a result file failed."""


@dataclass(frozen=True)
class LatencySample:
    onu_id: int
    arrive_at: int
    depart_at: int
    size: int

    @property
    def latency(self) -> int:
        return self.depart_at - self.arrive_at


@dataclass(frozen=True)
class LatencyBatch:
    """The packets delivered by one burst, as parallel arrays."""

    onu_id: int
    arrive: np.ndarray
    depart: np.ndarray
    size: np.ndarray

    def __len__(self) -> int:
        return int(self.arrive.size)

    @property
    def latency(self) -> np.ndarray:
        return self.depart - self.arrive

    def samples(self) -> Iterator[LatencySample]:
        for arrive, depart, size in zip(
            self.arrive.tolist(), self.depart.tolist(), self.size.tolist()
        ):
            yield LatencySample(self.onu_id, arrive, depart, size)


@dataclass(frozen=True)
class WindowStats:
    window_start: int
    window_len: int
    onu_id: int
    count: int
    mean_latency: float
    p99_latency: int
    max_latency: int
    delivered_bytes: int

    @property
    def empty(self) -> bool:
        return self.count == 0

    def as_row(self) -> list[str]:
        return [
            str(self.window_start),
            str(self.onu_id),
            str(self.count),
            f"{self.mean_latency:.3f}",
            str(self.p99_latency),
            str(self.max_latency),
            str(self.delivered_bytes),
        ]


def nearest_rank(sorted_values: np.ndarray | Sequence[int], fraction: float) -> int:
    """Element at 1-based rank ``ceil(fraction * n)`` of an ascending sequence."""
    n = len(sorted_values)
    if n == 0:
        return 0
    rank = max(1, math.ceil(round(fraction * n, 9)))
    return int(sorted_values[min(rank, n) - 1])


def _stats_from_arrays(
    latency: np.ndarray, size: np.ndarray, onu_id: int, window_start: int, window_len: int
) -> WindowStats:
    if latency.size == 0:
        return WindowStats(window_start, window_len, onu_id, 0, 0.0, 0, 0, 0)
    ordered = np.sort(latency)
    return WindowStats(
        window_start=window_start,
        window_len=window_len,
        onu_id=onu_id,
        count=int(latency.size),
        mean_latency=float(np.sum(latency, dtype=np.int64)) / latency.size,
        p99_latency=nearest_rank(ordered, 0.99),
        max_latency=int(ordered[-1]),
        delivered_bytes=int(np.sum(size, dtype=np.int64)),
    )


def window_stats(
    samples: Iterable[LatencySample], onu_id: int, window_start: int, window_len: int
) -> WindowStats:
    selected = [s for s in samples if s.onu_id == onu_id]
    latency = np.fromiter((s.latency for s in selected), dtype=np.int64, count=len(selected))
    size = np.fromiter((s.size for s in selected), dtype=np.int64, count=len(selected))
    return _stats_from_arrays(latency, size, onu_id, window_start, window_len)


@dataclass
class _LatencyHistogram:
    """Exact counts of latencies rounded up to whole microseconds."""

    values: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    counts: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def add(self, latency: np.ndarray) -> None:
        if latency.size == 0:
            return
        micros = -(-latency // NS_PER_US)
        merged = np.concatenate([self.values, micros])
        weights = np.concatenate([self.counts, np.ones(micros.size, dtype=np.int64)])
        self.values, inverse = np.unique(merged, return_inverse=True)
        self.counts = np.bincount(inverse.ravel(), weights=weights).astype(np.int64)

    def percentile_ns(self, fraction: float) -> int:
        total = int(self.counts.sum())
        if total == 0:
            return 0
        rank = max(1, math.ceil(round(fraction * total, 9)))
        index = int(np.searchsorted(np.cumsum(self.counts), rank, side="left"))
        return int(self.values[index]) * NS_PER_US


@dataclass
class OnuSummary:
    onu_id: int
    packets: int = 0
    latency_sum: int = 0
    max_latency: int = 0
    delivered_bytes: int = 0
    histogram: _LatencyHistogram = field(default_factory=_LatencyHistogram, repr=False)

    @property
    def mean_latency(self) -> float:
        return self.latency_sum / self.packets if self.packets else 0.0

    @property
    def p99_latency(self) -> int:
        return min(self.histogram.percentile_ns(0.99), self.max_latency)

    def throughput_bps(self, duration: int) -> float:
        return self.delivered_bytes * 8.0 * NS_PER_S / duration if duration > 0 else 0.0

    def as_row(self, duration: int) -> list[str]:
        return [
            str(self.onu_id),
            str(self.packets),
            f"{self.mean_latency:.3f}",
            str(self.p99_latency),
            str(self.max_latency),
            f"{self.throughput_bps(duration):.3f}",
        ]


@dataclass
class GrantCounters:
    grants: int = 0
    granted_bytes: int = 0
    sent_bytes: int = 0
    burst_ns: int = 0

    def record(self, granted: int, sent: int, duration: int) -> None:
        self.grants += 1
        self.granted_bytes += granted
        self.sent_bytes += sent
        self.burst_ns += duration


class IntervalProbe:
    """Holds one ONU's deliveries until an observer drains everything up to a time."""

    def __init__(self, onu_id: int) -> None:
        self.onu_id = onu_id
        self._depart: list[np.ndarray] = []
        self._latency: list[np.ndarray] = []

    def add(self, batch: LatencyBatch) -> None:
        if batch.onu_id == self.onu_id and len(batch):
            self._depart.append(batch.depart)
            self._latency.append(batch.latency)

    def drain_until(self, t: int) -> np.ndarray:
        if not self._depart:
            return np.empty(0, dtype=np.int64)
        depart = np.concatenate(self._depart)
        latency = np.concatenate(self._latency)
        mask = depart <= t
        self._depart = [depart[~mask]] if not mask.all() else []
        self._latency = [latency[~mask]] if not mask.all() else []
        return latency[mask]


class MetricsCollector:
    """Append-only sink for deliveries; closes fixed windows as the clock passes them.

    A sample belongs to the window containing its ``depart_at``. The last
    window of a run also takes deliveries of bursts that straddle the end.
    """

    def __init__(self, n_onus: int, window_len: int, duration: int) -> None:
        if window_len <= 0:
            raise ValueError("window length must be > 0")
        self.n_onus = n_onus
        self.window_len = window_len
        self.duration = duration
        self.windows: list[WindowStats] = []
        self.onus = [OnuSummary(onu_id) for onu_id in range(n_onus)]
        self.grants = GrantCounters()
        self.probes: list[IntervalProbe] = []
        self._next_start = 0
        self._pending: list[list[LatencyBatch]] = [[] for _ in range(n_onus)]
        self._last_start = max(0, (duration - 1) // window_len * window_len)

    def add_probe(self, probe: IntervalProbe) -> IntervalProbe:
        self.probes.append(probe)
        return probe

    def ingest(self, batch: LatencyBatch, now: int) -> None:
        """Record one burst's deliveries; ``now`` is the burst start on the OLT timeline."""
        if len(batch):
            self._pending[batch.onu_id].append(batch)
            for probe in self.probes:
                probe.add(batch)
        while self._next_start < self._last_start and self._next_start + self.window_len <= now:
            self._close_window(self._next_start + self.window_len)

    def _close_window(self, end: int | None) -> None:
        start = self._next_start
        for onu_id in range(self.n_onus):
            pending = self._pending[onu_id]
            if pending:
                depart = np.concatenate([b.depart for b in pending])
                arrive = np.concatenate([b.arrive for b in pending])
                size = np.concatenate([b.size for b in pending])
            else:
                depart = arrive = size = np.empty(0, dtype=np.int64)
            if end is not None:
                mask = depart < end
                keep = ~mask
                self._pending[onu_id] = (
                    [LatencyBatch(onu_id, arrive[keep], depart[keep], size[keep])]
                    if keep.any()
                    else []
                )
                arrive, depart, size = arrive[mask], depart[mask], size[mask]
            else:
                self._pending[onu_id] = []
            latency = depart - arrive
            stats = _stats_from_arrays(latency, size, onu_id, start, self.window_len)
            self.windows.append(stats)
            summary = self.onus[onu_id]
            if stats.count:
                summary.packets += stats.count
                summary.latency_sum += int(np.sum(latency, dtype=np.int64))
                summary.max_latency = max(summary.max_latency, stats.max_latency)
                summary.delivered_bytes += stats.delivered_bytes
                summary.histogram.add(latency)
        self._next_start = start + self.window_len

    def finish(self) -> None:
        while self._next_start < self._last_start:
            self._close_window(self._next_start + self.window_len)
        if self._next_start == self._last_start:
            self._close_window(None)

    @property
    def delivered_packets(self) -> int:
        return sum(s.packets for s in self.onus)

    @property
    def delivered_bytes(self) -> int:
        return sum(s.delivered_bytes for s in self.onus)


@dataclass(frozen=True)
class RunSummary:
    duration: int
    n_wavelengths: int
    line_rate: float
    guard: int
    delivered_packets: int
    delivered_bytes: int
    grants: int
    granted_bytes: int
    sent_bytes: int
    managed_onu_id: int
    managed_mean_latency: float
    managed_p99_latency: int
    managed_max_latency: int
    target_latency: int
    audit: dict[str, int]

    @property
    def capacity_bits(self) -> float:
        return self.n_wavelengths * self.line_rate * self.duration / NS_PER_S

    @property
    def utilization(self) -> float:
        return self.delivered_bytes * 8.0 / self.capacity_bits if self.capacity_bits else 0.0

    @property
    def grant_fill(self) -> float:
        return self.sent_bytes / self.granted_bytes if self.granted_bytes else 0.0

    @property
    def guard_overhead(self) -> float:
        span = self.n_wavelengths * self.duration
        return self.grants * self.guard / span if span else 0.0

    def as_dict(self) -> dict[str, Any]:
        return {
            "duration_ns": self.duration,
            "delivered_packets": self.delivered_packets,
            "delivered_bytes": self.delivered_bytes,
            "grants": self.grants,
            "granted_bytes": self.granted_bytes,
            "sent_bytes": self.sent_bytes,
            "utilization": round(self.utilization, 9),
            "grant_fill": round(self.grant_fill, 9),
            "guard_overhead": round(self.guard_overhead, 9),
            "managed_onu_id": self.managed_onu_id,
            "managed_mean_latency_ns": round(self.managed_mean_latency, 3),
            "managed_p99_latency_ns": self.managed_p99_latency,
            "managed_max_latency_ns": self.managed_max_latency,
            "target_latency_ns": self.target_latency,
            "audit": dict(sorted(self.audit.items())),
        }


def summarize_run(
    collector: MetricsCollector,
    *,
    n_wavelengths: int,
    line_rate: float,
    guard: int,
    managed_onu_id: int,
    target_latency: int,
    audit: dict[str, int] | None = None,
) -> RunSummary:
    managed = collector.onus[managed_onu_id]
    return RunSummary(
        duration=collector.duration,
        n_wavelengths=n_wavelengths,
        line_rate=line_rate,
        guard=guard,
        delivered_packets=collector.delivered_packets,
        delivered_bytes=collector.delivered_bytes,
        grants=collector.grants.grants,
        granted_bytes=collector.grants.granted_bytes,
        sent_bytes=collector.grants.sent_bytes,
        managed_onu_id=managed_onu_id,
        managed_mean_latency=managed.mean_latency,
        managed_p99_latency=managed.p99_latency,
        managed_max_latency=managed.max_latency,
        target_latency=target_latency,
        audit=dict(audit or {}),
    )


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow(row)
    except OSError as exc:
        raise OutputError(f"failed writing {path}: {exc}") from exc
    return path


def emit_timeseries(windows: Iterable[WindowStats], path: Path) -> Path:
    ordered = list(windows)
    starts = [w.window_start for w in ordered]
    if starts != sorted(starts):
        raise ValueError("window starts must be monotone")
    return write_csv(path, TIMESERIES_COLUMNS, (w.as_row() for w in ordered))


def emit_summary(collector: MetricsCollector, path: Path) -> Path:
    return write_csv(
        path, SUMMARY_COLUMNS, (s.as_row(collector.duration) for s in collector.onus)
    )


def read_csv(path: Path) -> list[dict[str, str]]:
    try:
        with path.open("r", encoding="utf-8", newline="") as handle:
            return list(csv.DictReader(handle))
    except OSError as exc:
        raise OutputError(f"failed reading {path}: {exc}") from exc
