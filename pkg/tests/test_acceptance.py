from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ibasim.config import PRESETS, LoadProfile, ScenarioConfig, with_overrides
from ibasim.harness import compare_runs, load_profile_at, run_scenario, sweep
from ibasim.metrics import read_csv
from ibasim.sim import NS_PER_MS, NS_PER_S

pytestmark = [pytest.mark.slow, pytest.mark.integration]

SEEDS = [1, 2, 3, 4, 5]


def _managed_series(run_dir: Path, cfg: ScenarioConfig) -> list[tuple[int, int, float]]:
    managed = str(cfg.agent.managed_onu_id)
    return sorted(
        (int(row["window_start_ns"]), int(row["count"]), float(row["mean_latency_ns"]))
        for row in read_csv(run_dir / "latency_timeseries.csv")
        if row["onu_id"] == managed
    )


@pytest.mark.parametrize("target_ms", [1, 3])
def test_desk_agent_holds_target_in_final_quarter(tmp_path: Path, target_ms: int) -> None:
    cfg = with_overrides(PRESETS["desk"], seed=42, target_latency=target_ms * NS_PER_MS)
    run_scenario(cfg, tmp_path / f"target-{target_ms}")
    [row] = compare_runs([tmp_path / f"target-{target_ms}"], tail_fraction=0.25)
    assert row.windows == 50
    assert row.pct_under_target >= 90.0


def test_fixed_w_max_degrades_on_ramp_while_agent_holds(tmp_path: Path) -> None:
    ramp = PRESETS["desk-ramp"]
    fixed = with_overrides(ramp, agent_enabled=False, w_max=30_000)
    fixed_runs = sweep(fixed, SEEDS, tmp_path / "fixed")
    agent_runs = sweep(ramp, SEEDS, tmp_path / "agent")

    def segment(start_ns: int, low: float, high: float) -> bool:
        return low <= load_profile_at(ramp.load_profile, start_ns) <= high

    passed = 0
    for fixed_run, agent_run in zip(fixed_runs, agent_runs):
        fixed_series = _managed_series(Path(fixed_run["output_dir"]), fixed)
        active = [(start, mean) for start, count, mean in fixed_series if count]
        baseline = [mean for start, mean in active if start >= NS_PER_S and segment(start, 0.0, 0.4)]
        loaded = [mean for start, mean in active if segment(start, 0.8, 1.0)]
        degraded = float(np.mean(loaded)) > 10 * float(np.mean(baseline))

        agent_series = _managed_series(Path(agent_run["output_dir"]), ramp)
        high = [mean for start, _, mean in agent_series if segment(start, 0.8, 1.0)]
        held = sum(mean <= ramp.agent.target_latency for mean in high) >= 0.8 * len(high)
        passed += degraded and held
    assert passed >= 4


def test_full_topology_keeps_scheduler_invariants_at_saturation(tmp_path: Path) -> None:
    cfg = replace(PRESETS["desk"], load_profile=LoadProfile.fixed(0.95), seed=42)
    assert (cfg.pon.n_onus, cfg.pon.line_rate, cfg.duration) == (32, 25e9, 20 * NS_PER_S)
    result = run_scenario(cfg, tmp_path / "saturated")
    audit = result.summary.audit
    assert audit["grants"] > 0
    for key in (
        "overlaps",
        "gap_violations",
        "cap_violations",
        "fifo_violations",
        "causality_violations",
        "conservation_errors",
    ):
        assert audit[key] == 0, key
    capacity = cfg.pon.n_wavelengths * cfg.pon.line_rate * cfg.duration / NS_PER_S
    assert result.summary.delivered_bytes * 8 < capacity
