from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pytest
from click.testing import CliRunner

import ibasim.cli as cli
from ibasim.cli import _render_comparison, main
from ibasim.config import PRESETS, ScenarioConfig
from ibasim.harness import RunComparison

SMALL_SCENARIO = """
name = "small"
duration_s = 0.2

[pon]
n_onus = 8
line_rate_bps = 2.5e9

[agent]
interval_ms = 50

[load_profile]
kind = "fixed"
load = 0.3
"""


def _scenario(tmp_path: Path, text: str = SMALL_SCENARIO) -> Path:
    path = tmp_path / "small.toml"
    path.write_text(text, encoding="utf-8")
    return path


def _row(**changes: Any) -> RunComparison:
    base: dict[str, Any] = dict(
        run="runs/a",
        name="desk",
        agent=True,
        target_latency=1_000_000,
        mean_latency=750_000.0,
        p99_latency=1_800_000,
        max_latency=4_000_000,
        windows=12,
        pct_under_target=83.3333,
        tail_mean_latency=600_000.0,
    )
    base.update(changes)
    return RunComparison(**base)


def test_help_lists_every_command() -> None:
    result = CliRunner().invoke(main, ["-h"])
    assert result.exit_code == 0
    for command in ("run", "validate", "guard-budget", "compare", "sweep", "traffic-check"):
        assert command in result.output


def test_guard_budget_default_is_safe() -> None:
    result = CliRunner().invoke(main, ["guard-budget"])
    assert result.exit_code == 0
    assert "total_ns" in result.output and "125" in result.output
    assert "Verdict: SAFE" in result.output


def test_guard_budget_json_output() -> None:
    result = CliRunner().invoke(main, ["guard-budget", "--format", "json", "--margin", "75"])
    assert result.exit_code == 0
    data = json.loads(result.output)
    assert data["total_ns"] == 200
    assert data["verdict"] == "SAFE"


def test_guard_budget_unsafe_exits_with_code() -> None:
    result = CliRunner().invoke(main, ["guard-budget", "--margin", "900"])
    assert result.exit_code == cli.EXIT_UNSAFE_GUARD
    assert "Verdict: UNSAFE" in result.output


def test_validate_preset_and_show() -> None:
    runner = CliRunner()
    result = runner.invoke(main, ["validate", "--preset", "reference"])
    assert result.exit_code == 0
    assert "Scenario reference is valid: 32 ONUs, 2 wavelengths, 60 s, agent on" in result.output
    shown = runner.invoke(main, ["validate", "--preset", "reference", "--show"])
    assert shown.exit_code == 0
    assert json.loads(shown.output) == json.loads(PRESETS["reference"].to_json())


def test_validate_defaults_to_desk_preset() -> None:
    result = CliRunner().invoke(main, ["validate"])
    assert result.exit_code == 0
    assert "Scenario desk is valid" in result.output


def test_validate_invalid_file_exits_with_config_code(tmp_path: Path) -> None:
    path = _scenario(tmp_path, "duration_s = 0\n\n[pon]\nguard_ns = 0\n")
    result = CliRunner().invoke(main, ["validate", str(path)])
    assert result.exit_code == cli.EXIT_INVALID_CONFIG
    assert "duration_s must be > 0" in result.output
    assert "pon.guard_ns must be > 0" in result.output


def test_run_writes_results_and_compare_reads_them(tmp_path: Path) -> None:
    runner = CliRunner()
    out = tmp_path / "run"
    result = runner.invoke(main, ["run", str(_scenario(tmp_path)), "--seed", "5", "--output", str(out)])
    assert result.exit_code == 0, result.output
    assert f"Results written to {out}" in result.output
    assert "Managed ONU 2: mean latency" in result.output
    assert "audit violations" not in result.output
    assert json.loads((out / "resolved_config.json").read_text(encoding="utf-8"))["seed"] == 5

    compared = runner.invoke(main, ["compare", str(out), "--format", "json"])
    assert compared.exit_code == 0, compared.output
    [row] = json.loads(compared.output)
    assert row["name"] == "small"
    assert row["agent"] == "on"
    assert row["target_latency_ns"] == 1_000_000

    report = tmp_path / "reports" / "compare.md"
    written = runner.invoke(main, ["compare", str(out), "--format", "markdown", "--output", str(report)])
    assert written.exit_code == 0
    assert report.read_text(encoding="utf-8").startswith("# Latency Comparison")


def test_run_passes_overrides_to_the_harness(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    seen: list[ScenarioConfig] = []

    def _fail(cfg: ScenarioConfig) -> None:
        seen.append(cfg)
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run_scenario", _fail)
    result = CliRunner().invoke(
        main,
        [
            "run",
            "--preset",
            "desk",
            "--agent",
            "off",
            "--w-max",
            "60000",
            "--load",
            "0.4",
            "--duration",
            "2",
            "--target-latency",
            "3",
        ],
    )
    assert result.exit_code == cli.EXIT_RUN_FAILED
    assert "Simulation failed: disk on fire" in result.output
    [cfg] = seen
    assert cfg.agent.enabled is False
    assert cfg.pon.default_w_max == 60_000
    assert cfg.load_profile.load == 0.4
    assert cfg.duration == 2_000_000_000
    assert cfg.agent.target_latency == 3_000_000


def test_run_rejects_invalid_override() -> None:
    result = CliRunner().invoke(main, ["run", "--preset", "desk", "--w-max", "100"])
    assert result.exit_code == cli.EXIT_INVALID_CONFIG


def test_compare_without_runs_fails() -> None:
    result = CliRunner().invoke(main, ["compare"])
    assert result.exit_code == cli.EXIT_COMPARE_FAILED
    assert "no run directories given" in result.output


def test_sweep_reports_each_seed(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    captured: dict[str, Any] = {}

    def _fake_sweep(cfg: ScenarioConfig, seeds: list[int], root: Path, max_parallel: int | None) -> list[dict[str, Any]]:
        captured.update(seeds=seeds, root=root, max_parallel=max_parallel, agent=cfg.agent.enabled)
        return [
            {
                "seed": seed,
                "managed_mean_latency_ns": 500_000.0,
                "managed_p99_latency_ns": 2_000_000,
                "output_dir": str(root / f"seed-{seed}"),
            }
            for seed in seeds
        ]

    monkeypatch.setattr(cli, "sweep", _fake_sweep)
    result = CliRunner().invoke(
        main,
        ["sweep", "--preset", "desk", "--agent", "off", "--seed", "1", "--seed", "2", "--output", str(tmp_path), "--max-parallel", "2"],
    )
    assert result.exit_code == 0, result.output
    assert captured == {"seeds": [1, 2], "root": tmp_path, "max_parallel": 2, "agent": False}
    assert "seed 1: mean 0.500 ms, p99 2.000 ms" in result.output
    assert "seed 2:" in result.output


def test_traffic_check_short_run_has_no_hurst() -> None:
    result = CliRunner().invoke(
        main, ["traffic-check", "--preset", "desk", "--duration", "0.5", "--load", "0.5", "--format", "json"]
    )
    assert result.exit_code == 0, result.output
    data = json.loads(result.output)
    assert data["hurst"] is None
    assert data["packets"] > 0
    assert data["expected_bps"] == pytest.approx(1e9)


def test_render_comparison_formats() -> None:
    rows = [_row(), _row(run="runs/b", agent=False, mean_latency=2_500_000.0, pct_under_target=10.0)]
    table = _render_comparison(rows, "table").splitlines()
    assert table[0].split() == ["run", "agent", "target", "mean", "p99", "max", "under%"]
    assert "off" in table[2] and "2.500m" in table[2]

    csv_lines = _render_comparison(rows, "csv").splitlines()
    assert csv_lines[0].startswith("run,name,agent,target_latency_ns,mean_latency_ns")
    assert csv_lines[1].startswith("runs/a,desk,on,1000000,750000.0")

    markdown = _render_comparison(rows, "markdown").splitlines()
    assert markdown[0] == "# Latency Comparison"
    assert markdown[4] == "| runs/a | on | 1 | 0.750 | 1.800 | 4.000 | 83.3 |"

    assert json.loads(_render_comparison(rows, "json"))[1]["agent"] == "off"
    assert _render_comparison([], "csv") == ""
