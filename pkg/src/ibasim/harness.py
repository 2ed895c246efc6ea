"""Scenario runner: builds a network from a ScenarioConfig, runs it and writes results."""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Any, Sequence

import anyio
import anyio.to_process
import numpy as np

from .config import ConfigError, LoadProfile, ScenarioConfig, Settings
from .metrics import (
    IntervalProbe,
    LatencyBatch,
    MetricsCollector,
    OutputError,
    RunSummary,
    emit_summary,
    emit_timeseries,
    read_csv,
    summarize_run,
)
from .pon import Grant, GrantAudit, OnuState, PonNetwork, assign_rtts
from .rl import Observation, QTable, SarsaAgent, read_qtable, write_agent_log, write_qtable
from .sim import (
    AGENT_STREAM,
    NS_PER_MS,
    NS_PER_S,
    ONU_TRAFFIC_STREAM_BASE,
    RTT_STREAM,
    Event,
    EventKind,
    RngStream,
    Simulator,
)
from .traffic import OnuTrafficConfig, OnuTrafficSource, bin_counts, expected_rate, hurst_estimate

LOGGER = logging.getLogger(__name__)

TIMESERIES_FILE = "latency_timeseries.csv"
AGENT_LOG_FILE = "agent_log.csv"
QTABLE_FILE = "qtable.csv"
SUMMARY_FILE = "summary.csv"
GRANTS_FILE = "grants.csv"
RESOLVED_CONFIG_FILE = "resolved_config.json"
RUN_SUMMARY_FILE = "run_summary.json"


class CompareError(ValueError):
    """Run directories cannot be compared."""


@dataclass(frozen=True)
class GuardBudget:
    laser_off: int = 34
    laser_on: int = 27
    tia_settle: int = 48
    cdr_lock: int = 16
    margin: int = 0

    @property
    def total(self) -> int:
        return self.laser_off + self.laser_on + self.tia_settle + self.cdr_lock + self.margin

    def as_dict(self) -> dict[str, int]:
        return {
            "laser_off_ns": self.laser_off,
            "laser_on_ns": self.laser_on,
            "tia_settle_ns": self.tia_settle,
            "cdr_lock_ns": self.cdr_lock,
            "margin_ns": self.margin,
            "total_ns": self.total,
        }


@dataclass(frozen=True)
class GuardVerdict:
    budget: GuardBudget
    guard: int

    @property
    def total(self) -> int:
        return self.budget.total

    @property
    def safe(self) -> bool:
        return self.total <= self.guard

    @property
    def label(self) -> str:
        return "SAFE" if self.safe else "UNSAFE"


def guard_budget(budget: GuardBudget, guard: int = 1_000) -> GuardVerdict:
    components = (budget.laser_off, budget.laser_on, budget.tia_settle, budget.cdr_lock, budget.margin)
    if any(value < 0 for value in components):
        raise ValueError("guard budget components must be >= 0")
    return GuardVerdict(budget=budget, guard=guard)


def load_profile_at(profile: LoadProfile, t: int) -> float:
    if profile.kind == "fixed":
        return profile.load
    times = np.asarray([p[0] for p in profile.breakpoints], dtype=np.float64)
    loads = np.asarray([p[1] for p in profile.breakpoints], dtype=np.float64)
    # np.interp holds the end values outside the breakpoint span.
    return float(np.interp(float(t), times, loads))


@dataclass(frozen=True)
class RunResult:
    output_dir: Path
    summary: RunSummary
    files: dict[str, Path]
    events: int
    wall_seconds: float

    @property
    def meets_target(self) -> bool:
        return self.summary.managed_mean_latency <= self.summary.target_latency


class ScenarioRun:
    """One simulation of a validated scenario; owns every module's state."""

    def __init__(
        self,
        cfg: ScenarioConfig,
        *,
        qtable: QTable | None = None,
        grant_trace: IO[str] | None = None,
    ) -> None:
        self.cfg = cfg
        self.sim = Simulator()
        pon = cfg.pon
        self.managed_onu_id = cfg.agent.managed_onu_id
        start_load = load_profile_at(cfg.load_profile, 0)
        rtts = assign_rtts(pon, RngStream(cfg.seed, RTT_STREAM).generator())
        self.onus = [
            OnuState(
                onu_id=onu_id,
                rtt=rtts[onu_id],
                w_max=pon.default_w_max,
                source=OnuTrafficSource(
                    onu_id,
                    cfg.traffic.with_load(cfg.load_for(onu_id, start_load)),
                    RngStream(cfg.seed, ONU_TRAFFIC_STREAM_BASE + onu_id),
                ),
            )
            for onu_id in range(pon.n_onus)
        ]
        self.metrics = MetricsCollector(pon.n_onus, cfg.window, cfg.duration)
        self.audit = GrantAudit(guard=pon.guard, trace=grant_trace)
        self.network = PonNetwork(pon, self.sim, self.onus, audit=self.audit, sink=self._deliver)
        self.agent = SarsaAgent(cfg.agent, RngStream(cfg.seed, AGENT_STREAM).generator(), qtable=qtable)
        self.probe = IntervalProbe(self.managed_onu_id)
        if cfg.agent.enabled:
            self.metrics.add_probe(self.probe)
        self.events = 0
        self._profiled = [
            onu.onu_id for onu in self.onus if not any(i == onu.onu_id for i, _ in cfg.overrides)
        ]
        self._last_arrived = 0
        self.sim.register(EventKind.PACKET_ARRIVAL, self._on_refill)
        self.sim.register(EventKind.AGENT_TICK, self._on_agent_tick)
        self.sim.register(EventKind.LOAD_PROFILE_TICK, self._on_profile_tick)

    def _deliver(self, batch: LatencyBatch, grant: Grant) -> None:
        self.metrics.grants.record(grant.size, int(batch.size.sum()), grant.duration)
        self.metrics.ingest(batch, grant.start_at)

    def _on_refill(self, event: Event) -> None:
        horizon = event.fire_at + self.cfg.refill
        for onu in self.onus:
            assert onu.source is not None
            onu.queue.push(*onu.source.generate_until(horizon))
        if horizon <= self.cfg.duration:
            self.sim.at(horizon, EventKind.PACKET_ARRIVAL)

    def observe(self, now: int) -> Observation:
        """Managed ONU's offered load and deliveries since the previous observation."""
        onu = self.onus[self.managed_onu_id]
        arrived = onu.queue.arrived_until(now)[1]
        interval_bytes = arrived - self._last_arrived
        self._last_arrived = arrived
        capacity_bits = self.cfg.traffic.max_rate * self.cfg.agent.interval / NS_PER_S
        return Observation.from_latencies(interval_bytes * 8.0 / capacity_bits, self.probe.drain_until(now))

    def _on_agent_tick(self, event: Event) -> None:
        now = event.fire_at
        self.agent.tick(
            self.observe(now),
            now,
            apply=lambda w_max: self.network.set_w_max(self.managed_onu_id, w_max),
        )
        following = now + self.cfg.agent.interval
        if following <= self.cfg.duration:
            self.sim.at(following, EventKind.AGENT_TICK)

    def _on_profile_tick(self, event: Event) -> None:
        now = event.fire_at
        load = load_profile_at(self.cfg.load_profile, now)
        for onu_id in self._profiled:
            source = self.onus[onu_id].source
            assert source is not None
            source.recalibrate(load, now)
        LOGGER.info("Load profile at %.3f s: %.4f", now / NS_PER_S, load)
        following = now + self.cfg.profile_tick
        if following <= self.cfg.duration:
            self.sim.at(following, EventKind.LOAD_PROFILE_TICK)

    def run(self) -> RunSummary:
        cfg = self.cfg
        self.sim.at(0, EventKind.PACKET_ARRIVAL)
        self.network.bootstrap(0)
        if cfg.agent.enabled and cfg.agent.interval <= cfg.duration:
            self.sim.at(cfg.agent.interval, EventKind.AGENT_TICK)
        if cfg.load_profile.kind == "dynamic" and self._profiled and cfg.profile_tick <= cfg.duration:
            self.sim.at(cfg.profile_tick, EventKind.LOAD_PROFILE_TICK)
        self.events = self.sim.run_until(cfg.duration)
        self.metrics.finish()
        audit = self.audit.counters()
        audit["conservation_errors"] = self.audit.conservation_errors(
            self.onus, self.metrics.delivered_packets
        )
        return summarize_run(
            self.metrics,
            n_wavelengths=cfg.pon.n_wavelengths,
            line_rate=cfg.pon.line_rate,
            guard=cfg.pon.guard,
            managed_onu_id=self.managed_onu_id,
            target_latency=cfg.agent.target_latency,
            audit=audit,
        )


def default_output_dir(cfg: ScenarioConfig, settings: Settings | None = None) -> Path:
    if cfg.output_dir is not None:
        return Path(cfg.output_dir)
    settings = settings or Settings()
    return Path(settings.output_root) / f"{cfg.name}-seed{cfg.seed}"


def _load_initial_qtable(cfg: ScenarioConfig) -> QTable | None:
    if cfg.agent.initial_qtable is None:
        return None
    try:
        return read_qtable(Path(cfg.agent.initial_qtable), cfg.agent.action_set, cfg.agent.n_state_bins)
    except (OutputError, ValueError, KeyError) as exc:
        raise ConfigError([f"agent.initial_qtable: {exc}"]) from exc


def run_scenario(cfg: ScenarioConfig, output_dir: Path | None = None) -> RunResult:
    cfg.validate()
    qtable = _load_initial_qtable(cfg)
    out = output_dir if output_dir is not None else default_output_dir(cfg)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    LOGGER.info("Running scenario %s (seed %d, %.3f s) into %s", cfg.name, cfg.seed, cfg.duration / NS_PER_S, out)
    started = time.perf_counter()
    trace: IO[str] | None = None
    touched: list[Path] = []

    def target(name: str) -> Path:
        path = out / name
        touched.append(path)
        return path

    try:
        files: dict[str, Path] = {}
        if cfg.trace_grants:
            files["grants"] = target(GRANTS_FILE)
            trace = files["grants"].open("w", encoding="utf-8", newline="")
        run = ScenarioRun(cfg, qtable=qtable, grant_trace=trace)
        summary = run.run()
        files["timeseries"] = emit_timeseries(run.metrics.windows, target(TIMESERIES_FILE))
        files["agent_log"] = write_agent_log(run.agent.log, target(AGENT_LOG_FILE))
        files["qtable"] = write_qtable(run.agent.table, cfg.agent.action_set, target(QTABLE_FILE))
        files["summary"] = emit_summary(run.metrics, target(SUMMARY_FILE))
        files["resolved_config"] = target(RESOLVED_CONFIG_FILE)
        files["resolved_config"].write_text(cfg.to_json(), encoding="utf-8")
        files["run_summary"] = target(RUN_SUMMARY_FILE)
        files["run_summary"].write_text(
            json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except BaseException:
        if trace is not None:
            trace.close()
            trace = None
        if created:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for path in touched:
                path.unlink(missing_ok=True)
        raise
    finally:
        if trace is not None:
            trace.close()
    wall = time.perf_counter() - started
    LOGGER.info(
        "Scenario %s finished: %d events in %.1f s, managed ONU mean latency %.1f us",
        cfg.name,
        run.events,
        wall,
        summary.managed_mean_latency / 1_000,
    )
    return RunResult(output_dir=out, summary=summary, files=files, events=run.events, wall_seconds=wall)


@dataclass(frozen=True)
class RunComparison:
    run: str
    name: str
    agent: bool
    target_latency: int
    mean_latency: float
    p99_latency: int
    max_latency: int
    windows: int
    pct_under_target: float
    tail_mean_latency: float

    def as_dict(self) -> dict[str, Any]:
        return {
            "run": self.run,
            "name": self.name,
            "agent": "on" if self.agent else "off",
            "target_latency_ns": self.target_latency,
            "mean_latency_ns": round(self.mean_latency, 3),
            "p99_latency_ns": self.p99_latency,
            "max_latency_ns": self.max_latency,
            "windows": self.windows,
            "pct_under_target": round(self.pct_under_target, 3),
            "tail_mean_latency_ns": round(self.tail_mean_latency, 3),
        }


def _load_run(run_dir: Path) -> tuple[ScenarioConfig, list[dict[str, str]], list[dict[str, str]]]:
    config_path = run_dir / RESOLVED_CONFIG_FILE
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
        cfg = ScenarioConfig.from_dict(data)
        windows = read_csv(run_dir / TIMESERIES_FILE)
        summary = read_csv(run_dir / SUMMARY_FILE)
    except (OSError, OutputError, ValueError) as exc:
        raise CompareError(f"{run_dir} is not a complete run directory: {exc}") from exc
    return cfg, windows, summary


def compare_runs(run_dirs: Sequence[Path], tail_fraction: float = 1.0) -> list[RunComparison]:
    if not run_dirs:
        raise CompareError("no run directories given")
    if not 0.0 < tail_fraction <= 1.0:
        raise CompareError(f"tail fraction must lie in (0, 1] (got {tail_fraction})")
    loaded = [(Path(d), *_load_run(Path(d))) for d in run_dirs]
    window_lens = {cfg.window for _, cfg, _, _ in loaded}
    if len(window_lens) > 1:
        raise CompareError(
            "runs use different window lengths: "
            + ", ".join(f"{w / NS_PER_MS:g} ms" for w in sorted(window_lens))
        )
    rows: list[RunComparison] = []
    for run_dir, cfg, windows, summary in loaded:
        managed = str(cfg.agent.managed_onu_id)
        series = sorted(
            (int(w["window_start_ns"]), int(w["count"]), float(w["mean_latency_ns"]))
            for w in windows
            if w["onu_id"] == managed
        )
        tail = series[len(series) - math.ceil(len(series) * tail_fraction) :]
        active = [(count, mean) for _, count, mean in tail if count > 0]
        under = sum(1 for _, _, mean in tail if mean <= cfg.agent.target_latency)
        counted = sum(count for count, _ in active)
        own = next((s for s in summary if s["onu_id"] == managed), None)
        if own is None:
            raise CompareError(f"{run_dir} has no summary row for ONU {managed}")
        rows.append(
            RunComparison(
                run=str(run_dir),
                name=cfg.name,
                agent=cfg.agent.enabled,
                target_latency=cfg.agent.target_latency,
                mean_latency=float(own["mean_latency_ns"]),
                p99_latency=int(own["p99_latency_ns"]),
                max_latency=int(own["max_latency_ns"]),
                windows=len(tail),
                pct_under_target=100.0 * under / len(tail) if tail else 0.0,
                tail_mean_latency=sum(c * m for c, m in active) / counted if counted else 0.0,
            )
        )
    return rows


def _run_in_worker(data: dict[str, Any], output_dir: str) -> dict[str, Any]:
    result = run_scenario(ScenarioConfig.from_dict(data), Path(output_dir))
    return {"output_dir": output_dir, "seed": data["seed"], **result.summary.as_dict()}


async def _sweep(
    cfg: ScenarioConfig, seeds: Sequence[int], root: Path, max_parallel: int
) -> list[dict[str, Any]]:
    limiter = anyio.CapacityLimiter(max_parallel)
    results: dict[int, dict[str, Any]] = {}

    async def _one(seed: int) -> None:
        data = replace(cfg, seed=seed).as_dict()
        results[seed] = await anyio.to_process.run_sync(
            _run_in_worker, data, str(root / f"seed-{seed}"), limiter=limiter
        )

    async with anyio.create_task_group() as tg:
        for seed in seeds:
            tg.start_soon(_one, seed)
    return [results[seed] for seed in seeds]


def sweep(
    cfg: ScenarioConfig, seeds: Sequence[int], root: Path, max_parallel: int | None = None
) -> list[dict[str, Any]]:
    """Run one scenario over several seeds, each in its own worker process and directory."""
    if not seeds:
        raise ConfigError(["sweep needs at least one seed"])
    if len(set(seeds)) != len(seeds):
        raise ConfigError(["sweep seeds must be distinct"])
    cfg.validate()
    parallel = max_parallel if max_parallel is not None else Settings().max_parallel
    return anyio.run(_sweep, cfg, list(seeds), root, max(1, parallel))


@dataclass(frozen=True)
class TrafficCheck:
    load: float
    duration: int
    packets: int
    offered_bps: float
    expected_bps: float
    hurst: float | None

    @property
    def rate_error(self) -> float:
        return self.offered_bps / self.expected_bps - 1.0 if self.expected_bps else 0.0


def traffic_check(
    traffic: OnuTrafficConfig,
    *,
    load: float,
    duration: int,
    seed: int,
    bin_ns: int = 1 * NS_PER_MS,
) -> TrafficCheck:
    """Generate one ONU's traffic alone and report its offered rate and Hurst estimate."""
    cfg = traffic.with_load(load)
    source = OnuTrafficSource(0, cfg, RngStream(seed, ONU_TRAFFIC_STREAM_BASE))
    counts = np.zeros(duration // bin_ns, dtype=np.int64)
    total_bytes = 0
    horizon = 0
    while horizon < duration:
        horizon = min(horizon + NS_PER_S, duration)
        times, sizes = source.generate_until(horizon)
        keep = times < duration
        total_bytes += int(np.sum(sizes[keep], dtype=np.int64))
        counts += bin_counts(times[keep], bin_ns, duration)
    hurst: float | None
    try:
        levels = np.unique(np.logspace(0, 3, 16).astype(np.int64))
        hurst = hurst_estimate(counts, levels)
    except ValueError as exc:
        LOGGER.info("No Hurst estimate: %s", exc)
        hurst = None
    return TrafficCheck(
        load=load,
        duration=duration,
        packets=source.generated_packets,
        offered_bps=total_bytes * 8.0 * NS_PER_S / duration,
        expected_bps=expected_rate(cfg, source.calibrated),
        hurst=hurst,
    )
