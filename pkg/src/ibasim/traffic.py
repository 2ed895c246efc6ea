"""Self-similar per-ONU traffic from aggregated Pareto ON/OFF substreams."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .sim import NS_PER_S, RngStream

LOGGER = logging.getLogger(__name__)

MIN_PACKET_BYTES = 64
MAX_PACKET_BYTES = 1518


class CalibrationError(ValueError):
    """The requested load cannot be produced by the configured substreams."""


class NonstationarySeriesError(ValueError):
    """A count series is constant or dominated by a trend."""


@dataclass(frozen=True)
class PacketSizeModel:
    kind: str = "uniform"
    low: int = MIN_PACKET_BYTES
    high: int = MAX_PACKET_BYTES
    sizes: tuple[int, ...] = ()
    weights: tuple[float, ...] = ()

    def problems(self) -> list[str]:
        issues: list[str] = []
        if self.kind == "uniform":
            if not MIN_PACKET_BYTES <= self.low <= self.high <= MAX_PACKET_BYTES:
                issues.append(
                    f"packet_size range [{self.low}, {self.high}] must lie within "
                    f"[{MIN_PACKET_BYTES}, {MAX_PACKET_BYTES}]"
                )
        elif self.kind == "discrete":
            if not self.sizes or len(self.sizes) != len(self.weights):
                issues.append("packet_size.sizes and packet_size.weights must be non-empty and aligned")
            elif any(not MIN_PACKET_BYTES <= s <= MAX_PACKET_BYTES for s in self.sizes):
                issues.append(
                    f"packet_size.sizes must lie within [{MIN_PACKET_BYTES}, {MAX_PACKET_BYTES}]"
                )
            elif any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
                issues.append("packet_size.weights must be non-negative with a positive sum")
        else:
            issues.append(f"unknown packet_size.kind: {self.kind!r}")
        return issues

    @property
    def probabilities(self) -> np.ndarray:
        weights = np.asarray(self.weights, dtype=np.float64)
        return weights / weights.sum()

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return (self.low + self.high) / 2.0
        return float(np.dot(np.asarray(self.sizes, dtype=np.float64), self.probabilities))

    @property
    def second_moment(self) -> float:
        if self.kind == "uniform":
            values = np.arange(self.low, self.high + 1, dtype=np.float64)
            return float(np.mean(values * values))
        sizes = np.asarray(self.sizes, dtype=np.float64)
        return float(np.dot(sizes * sizes, self.probabilities))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.integers(self.low, self.high, size=count, endpoint=True, dtype=np.int64)
        index = rng.choice(len(self.sizes), size=count, p=self.probabilities)
        return np.asarray(self.sizes, dtype=np.int64)[index]

    def as_dict(self) -> dict[str, Any]:
        if self.kind == "uniform":
            return {"kind": "uniform", "low": self.low, "high": self.high}
        return {"kind": "discrete", "sizes": list(self.sizes), "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PacketSizeModel":
        kind = str(data.get("kind", "uniform"))
        if kind == "discrete":
            return cls(
                kind=kind,
                sizes=tuple(int(s) for s in data.get("sizes", ())),
                weights=tuple(float(w) for w in data.get("weights", ())),
            )
        return cls(
            kind=kind,
            low=int(data.get("low", MIN_PACKET_BYTES)),
            high=int(data.get("high", MAX_PACKET_BYTES)),
        )


TRIMODAL_SIZE_MODEL = PacketSizeModel(
    kind="discrete", sizes=(64, 594, 1518), weights=(0.6, 0.1, 0.3)
)


@dataclass(frozen=True)
class SubstreamConfig:
    shape_on: float = 1.4
    shape_off: float = 1.4
    min_on: int = 100_000
    # Filled in by calibrate_streams(); None means the substream never turns on.
    min_off: float | None = None
    peak_rate: float = 2e9

    def problems(self) -> list[str]:
        issues: list[str] = []
        for name, shape in (("shape_on", self.shape_on), ("shape_off", self.shape_off)):
            if not 1.0 < shape <= 2.0:
                issues.append(f"traffic.{name} must satisfy 1 < shape <= 2 (got {shape})")
        if self.min_on <= 0:
            issues.append("traffic.min_on_us must be > 0")
        if self.peak_rate <= 0:
            issues.append("traffic.peak_rate_bps must be > 0")
        return issues


@dataclass(frozen=True)
class OnuTrafficConfig:
    n_substreams: int = 16
    substream: SubstreamConfig = field(default_factory=SubstreamConfig)
    load: float = 0.0
    max_rate: float = 2e9
    packet_size_model: PacketSizeModel = field(default_factory=PacketSizeModel)

    def problems(self) -> list[str]:
        issues = self.substream.problems() + self.packet_size_model.problems()
        if self.n_substreams < 1:
            issues.append("traffic.n_substreams must be >= 1")
        if self.load < 0:
            issues.append("traffic load must be >= 0")
        if self.max_rate <= 0:
            issues.append("traffic.max_rate_bps must be > 0")
        return issues

    def with_load(self, load: float) -> "OnuTrafficConfig":
        return replace(self, load=load)


@dataclass
class Packet:
    onu_id: int
    size: int
    arrive_at: int
    depart_at: int | None = None

    @property
    def latency(self) -> int | None:
        if self.depart_at is None:
            return None
        return self.depart_at - self.arrive_at


def pareto_sample(shape: float, minimum: float, u: float) -> float:
    if shape <= 1.0:
        raise ValueError(f"Pareto shape must be > 1 (got {shape})")
    if minimum <= 0:
        raise ValueError(f"Pareto minimum must be > 0 (got {minimum})")
    if not 0.0 < u < 1.0:
        raise ValueError(f"uniform draw must lie in (0, 1) (got {u})")
    return minimum * u ** (-1.0 / shape)


def open_unit(rng: np.random.Generator) -> float:
    """Uniform draw on the open interval (0, 1)."""
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return float(u)


def pareto_mean(shape: float, minimum: float) -> float:
    return shape * minimum / (shape - 1.0)


def mean_overrun_ns(cfg: OnuTrafficConfig) -> float:
    """Mean time by which an ON period overshoots its sampled length.

    The last packet of a burst always completes, so the overshoot is the
    residual transmission time of a length-biased packet.
    """
    model = cfg.packet_size_model
    residual_bytes = model.second_moment / (2.0 * model.mean)
    return residual_bytes * 8.0 * NS_PER_S / cfg.substream.peak_rate


def on_fraction(cfg: OnuTrafficConfig) -> float:
    return cfg.load * cfg.max_rate / (cfg.n_substreams * cfg.substream.peak_rate)


def calibrate_streams(cfg: OnuTrafficConfig) -> SubstreamConfig:
    """Solve for the OFF-period minimum that yields ``load * max_rate`` on average.

    E[ON] is held fixed so the burst structure does not change with load.
    """
    if cfg.load < 0:
        raise CalibrationError(f"load must be >= 0 (got {cfg.load})")
    if cfg.n_substreams < 1:
        raise CalibrationError("n_substreams must be >= 1")
    fraction = on_fraction(cfg)
    if fraction > 1.0:
        raise CalibrationError(
            f"load {cfg.load} needs an ON fraction of {fraction:.3f} > 1 with "
            f"{cfg.n_substreams} substreams at {cfg.substream.peak_rate:.3g} b/s peak"
        )
    if fraction == 0.0:
        return replace(cfg.substream, min_off=None)
    sub = cfg.substream
    mean_on = pareto_mean(sub.shape_on, sub.min_on) + mean_overrun_ns(cfg)
    mean_off = mean_on * (1.0 - fraction) / fraction
    return replace(sub, min_off=mean_off * (sub.shape_off - 1.0) / sub.shape_off)


def expected_rate(cfg: OnuTrafficConfig, sub: SubstreamConfig) -> float:
    if sub.min_off is None:
        return 0.0
    mean_on = pareto_mean(sub.shape_on, sub.min_on) + mean_overrun_ns(cfg)
    mean_off = pareto_mean(sub.shape_off, sub.min_off) if sub.min_off > 0 else 0.0
    return cfg.n_substreams * sub.peak_rate * mean_on / (mean_on + mean_off)


class Substream:
    """One ON/OFF source. Emits whole packets back-to-back at peak rate while ON."""

    def __init__(
        self, cfg: OnuTrafficConfig, sub: SubstreamConfig, rng: np.random.Generator, start: int = 0
    ) -> None:
        self.cfg = cfg
        self.sub = sub
        self.rng = rng
        self.frontier = start
        self._times = np.empty(0, dtype=np.int64)
        self._sizes = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self._next_on = bool(rng.random() < on_fraction(cfg)) if sub.min_off is not None else False
        self.idle = sub.min_off is None

    def recalibrate(self, cfg: OnuTrafficConfig, sub: SubstreamConfig, now: int) -> None:
        self.cfg = cfg
        self.sub = sub
        if sub.min_off is None:
            return
        if self.idle:
            self.idle = False
            self.frontier = max(self.frontier, now)
            self._next_on = False

    def _on_period(self) -> tuple[np.ndarray, np.ndarray]:
        start = self.frontier
        duration = pareto_sample(self.sub.shape_on, self.sub.min_on, open_unit(self.rng))
        ns_per_byte = 8.0 * NS_PER_S / self.sub.peak_rate
        mean_size = self.cfg.packet_size_model.mean
        sizes = np.empty(0, dtype=np.int64)
        elapsed = np.empty(0, dtype=np.float64)
        offset = 0.0
        while offset < duration:
            batch = int(math.ceil((duration - offset) / (mean_size * ns_per_byte))) + 4
            drawn = self.cfg.packet_size_model.sample(self.rng, batch)
            cum = offset + np.cumsum(drawn * ns_per_byte)
            sizes = np.concatenate([sizes, drawn])
            elapsed = np.concatenate([elapsed, cum])
            offset = float(cum[-1])
        count = int(np.searchsorted(elapsed, duration, side="left")) + 1
        times = start + np.ceil(elapsed[:count]).astype(np.int64)
        self.frontier = int(times[-1])
        return times, sizes[:count]

    def _off_period(self) -> None:
        if self.sub.min_off is None:
            self.idle = True
            return
        if self.sub.min_off > 0:
            gap = pareto_sample(self.sub.shape_off, self.sub.min_off, open_unit(self.rng))
            self.frontier += int(math.ceil(gap))

    def _advance(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self._next_on:
            self._next_on = False
            return self._on_period()
        self._off_period()
        self._next_on = not self.idle
        return None

    def generate_until(self, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """Arrivals with ``arrive_at <= horizon`` not returned before."""
        times = [self._times[self._cursor :]]
        sizes = [self._sizes[self._cursor :]]
        while not self.idle and self.frontier <= horizon:
            burst = self._advance()
            if burst is not None:
                times.append(burst[0])
                sizes.append(burst[1])
        if self.idle:
            self.frontier = max(self.frontier, horizon)
        all_times = np.concatenate(times)
        all_sizes = np.concatenate(sizes)
        cut = int(np.searchsorted(all_times, horizon, side="right"))
        self._times, self._sizes, self._cursor = all_times, all_sizes, cut
        return all_times[:cut], all_sizes[:cut]

    def next_packet(self, onu_id: int = 0) -> Packet | None:
        while self._cursor >= len(self._times):
            if self.idle:
                return None
            burst = self._advance()
            if burst is not None:
                self._times, self._sizes, self._cursor = burst[0], burst[1], 0
        packet = Packet(
            onu_id=onu_id,
            size=int(self._sizes[self._cursor]),
            arrive_at=int(self._times[self._cursor]),
        )
        self._cursor += 1
        return packet


class OnuTrafficSource:
    """Merged arrivals of one ONU's substreams, materialized in time-ordered batches."""

    def __init__(self, onu_id: int, cfg: OnuTrafficConfig, stream: RngStream) -> None:
        self.onu_id = onu_id
        self.cfg = cfg
        self.calibrated = calibrate_streams(cfg)
        self.substreams = [
            Substream(cfg, self.calibrated, stream.generator(substream=k))
            for k in range(cfg.n_substreams)
        ]
        self.generated_packets = 0
        self.generated_bytes = 0

    def recalibrate(self, load: float, now: int) -> None:
        if load == self.cfg.load:
            return
        self.cfg = self.cfg.with_load(load)
        self.calibrated = calibrate_streams(self.cfg)
        for substream in self.substreams:
            substream.recalibrate(self.cfg, self.calibrated, now)
        LOGGER.debug("ONU %d recalibrated to load %.4f at %d ns", self.onu_id, load, now)

    def generate_until(self, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        parts = [substream.generate_until(horizon) for substream in self.substreams]
        times = np.concatenate([p[0] for p in parts])
        sizes = np.concatenate([p[1] for p in parts])
        order = np.argsort(times, kind="stable")
        times, sizes = times[order], sizes[order]
        self.generated_packets += len(times)
        self.generated_bytes += int(sizes.sum())
        return times, sizes


def offered_rate(sizes: np.ndarray, span_ns: int) -> float:
    if span_ns <= 0:
        raise ValueError("span must be > 0")
    return float(np.sum(sizes, dtype=np.int64)) * 8.0 * NS_PER_S / span_ns


def bin_counts(times: np.ndarray, bin_ns: int, span_ns: int) -> np.ndarray:
    n_bins = span_ns // bin_ns
    index = np.asarray(times, dtype=np.int64) // bin_ns
    index = index[index < n_bins]
    return np.bincount(index, minlength=n_bins)


def hurst_estimate(counts: np.ndarray, levels: list[int] | np.ndarray) -> float:
    """Variance-time Hurst estimate: ``H = 1 + slope / 2`` on log-log axes."""
    series = np.asarray(counts, dtype=np.float64)
    if series.size < 10_000:
        raise ValueError(f"need at least 10^4 bins (got {series.size})")
    agg = np.unique(np.asarray(levels, dtype=np.int64))
    if agg.size < 2 or agg[0] < 1 or agg[-1] / agg[0] < 100:
        raise ValueError("aggregation levels must be >= 1 and span at least two decades")
    if np.all(series == series[0]):
        raise NonstationarySeriesError("count series is constant")
    trend = np.corrcoef(np.arange(series.size, dtype=np.float64), series)[0, 1]
    if abs(trend) > 0.9:
        raise NonstationarySeriesError(f"count series is trend-dominated (r={trend:.3f})")

    variances: list[float] = []
    used: list[int] = []
    for m in agg:
        blocks = series.size // int(m)
        if blocks < 2:
            continue
        means = series[: blocks * int(m)].reshape(blocks, int(m)).mean(axis=1)
        var = float(means.var())
        if var > 0:
            variances.append(var)
            used.append(int(m))
    if len(used) < 2:
        raise NonstationarySeriesError("too few aggregation levels with non-zero variance")
    slope = np.polyfit(np.log10(used), np.log10(variances), 1)[0]
    return float(1.0 + slope / 2.0)
