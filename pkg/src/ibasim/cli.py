from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path
from typing import Any, Sequence

import click

from .config import PRESETS, ConfigError, ScenarioConfig, Settings, load_scenario, with_overrides
from .harness import (
    CompareError,
    GuardBudget,
    RunComparison,
    compare_runs,
    guard_budget,
    run_scenario,
    sweep,
    traffic_check,
)
from .sim import NS_PER_MS, NS_PER_S, millis, seconds

CONTEXT_SETTINGS = {"help_option_names": ["-h", "--help"], "max_content_width": 110}


@click.group(context_settings=CONTEXT_SETTINGS)
def main() -> None:
    """
    ibasim: NG-EPON upstream simulator with RL-tuned bandwidth caps.

    Core workflow:
      1) Check a scenario (`validate`) and the guard interval it assumes (`guard-budget`)
      2) Run it with the agent on and off (`run`, or `sweep` over seeds)
      3) Compare the runs' managed-ONU latency against the target (`compare`)

    Use `ibasim <command> -h` for command-specific help and examples.
    """


EXIT_INVALID_CONFIG = 10
EXIT_UNSAFE_GUARD = 11
EXIT_RUN_FAILED = 12
EXIT_COMPARE_FAILED = 13


class ExitCodedClickException(click.ClickException):
    exit_code = 1


class InvalidConfigError(ExitCodedClickException):
    exit_code = EXIT_INVALID_CONFIG


class UnsafeGuardError(ExitCodedClickException):
    exit_code = EXIT_UNSAFE_GUARD


class RunFailedError(ExitCodedClickException):
    exit_code = EXIT_RUN_FAILED


class CompareFailedError(ExitCodedClickException):
    exit_code = EXIT_COMPARE_FAILED


def _enable_debug(debug: bool) -> None:
    if debug:
        logging.basicConfig(level=logging.DEBUG)


def _resolve_scenario(
    scenario_path: Path | None,
    preset: str | None,
    *,
    seed: int | None = None,
    duration_s: float | None = None,
    agent: str | None = None,
    target_latency_ms: float | None = None,
    w_max: int | None = None,
    load: float | None = None,
    output: Path | None = None,
) -> ScenarioConfig:
    if scenario_path is None and preset is None:
        preset = "desk"
    try:
        cfg = load_scenario(scenario_path, preset)
        return with_overrides(
            cfg,
            seed=seed,
            duration=None if duration_s is None else seconds(duration_s),
            agent_enabled=None if agent is None else agent == "on",
            target_latency=None if target_latency_ms is None else millis(target_latency_ms),
            w_max=w_max,
            load=load,
            output_dir=None if output is None else str(output),
        )
    except ConfigError as exc:
        raise InvalidConfigError(str(exc)) from exc


_scenario_argument = click.argument(
    "scenario_path",
    required=False,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
_preset_option = click.option(
    "--preset",
    type=click.Choice(sorted(PRESETS)),
    default=None,
    help="Built-in scenario to start from (default: desk when no file is given)",
)


@main.command("run", context_settings=CONTEXT_SETTINGS)
@_scenario_argument
@_preset_option
@click.option("--seed", type=int, default=None, help="Override the scenario seed")
@click.option("--duration", "duration_s", type=click.FloatRange(min=0.0), default=None, help="Simulated seconds")
@click.option("--agent", type=click.Choice(["on", "off"]), default=None, help="Enable or disable the W_max agent")
@click.option(
    "--target-latency",
    "target_latency_ms",
    type=click.FloatRange(min=0.0, min_open=True),
    default=None,
    help="Managed-ONU latency target in milliseconds",
)
@click.option("--w-max", type=int, default=None, help="Fixed W_max in bytes for every ONU")
@click.option("--load", type=click.FloatRange(min=0.0), default=None, help="Replace the load profile with a fixed load")
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=None, help="Run directory")
@click.option("--debug", is_flag=True, help="Enable debug logging")
def run_command(
    scenario_path: Path | None,
    preset: str | None,
    seed: int | None,
    duration_s: float | None,
    agent: str | None,
    target_latency_ms: float | None,
    w_max: int | None,
    load: float | None,
    output: Path | None,
    debug: bool,
) -> None:
    """
    Run one scenario and write its CSV results.

    Examples:
      ibasim run --preset desk --agent on --target-latency 1
      ibasim run scenarios/ramp.toml --agent off --w-max 30000 --seed 7
    """
    _enable_debug(debug)
    cfg = _resolve_scenario(
        scenario_path,
        preset,
        seed=seed,
        duration_s=duration_s,
        agent=agent,
        target_latency_ms=target_latency_ms,
        w_max=w_max,
        load=load,
        output=output,
    )
    try:
        result = run_scenario(cfg)
    except ConfigError as exc:
        raise InvalidConfigError(str(exc)) from exc
    except Exception as exc:
        if debug:
            raise
        raise RunFailedError(f"Simulation failed: {exc}") from exc

    summary = result.summary
    verdict = "within" if result.meets_target else "ABOVE"
    click.echo(f"📝 Results written to {result.output_dir}")
    click.echo(
        f"Managed ONU {summary.managed_onu_id}: mean latency "
        f"{summary.managed_mean_latency / NS_PER_MS:.3f} ms ({verdict} target "
        f"{summary.target_latency / NS_PER_MS:g} ms), p99 {summary.managed_p99_latency / NS_PER_MS:.3f} ms"
    )
    click.echo(
        f"Utilization {summary.utilization:.3f}, grant fill {summary.grant_fill:.3f}, "
        f"guard overhead {summary.guard_overhead:.4f}, {result.events} events in {result.wall_seconds:.1f} s"
    )
    violations = {k: v for k, v in summary.audit.items() if k != "grants" and v}
    if violations:
        click.echo("⚠️ Scheduler audit violations: " + ", ".join(f"{k}={v}" for k, v in sorted(violations.items())))


@main.command("validate", context_settings=CONTEXT_SETTINGS)
@_scenario_argument
@_preset_option
@click.option("--show", is_flag=True, help="Print the resolved scenario as JSON")
def validate_command(scenario_path: Path | None, preset: str | None, show: bool) -> None:
    """
    Check a scenario without running it.

    Examples:
      ibasim validate scenarios/ramp.toml
      ibasim validate --preset reference --show
    """
    cfg = _resolve_scenario(scenario_path, preset)
    if show:
        click.echo(cfg.to_json().rstrip("\n"))
        return
    click.echo(
        f"✅ Scenario {cfg.name} is valid: {cfg.pon.n_onus} ONUs, {cfg.pon.n_wavelengths} wavelengths, "
        f"{cfg.duration / NS_PER_S:g} s, agent {'on' if cfg.agent.enabled else 'off'}"
    )


@main.command("guard-budget", context_settings=CONTEXT_SETTINGS)
@click.option("--laser-off", type=click.IntRange(min=0), default=34, show_default=True, help="Laser fall time (ns)")
@click.option("--laser-on", type=click.IntRange(min=0), default=27, show_default=True, help="Laser rise time (ns)")
@click.option("--tia-settle", type=click.IntRange(min=0), default=48, show_default=True, help="Receiver gain setting (ns)")
@click.option("--cdr-lock", type=click.IntRange(min=0), default=16, show_default=True, help="Burst-mode CDR lock (ns)")
@click.option("--margin", type=click.IntRange(min=0), default=0, show_default=True, help="Extra safety margin (ns)")
@click.option("--guard", type=click.IntRange(min=1), default=1_000, show_default=True, help="Configured guard (ns)")
@click.option("--format", "output_format", type=click.Choice(["table", "json"]), default="table")
def guard_budget_command(
    laser_off: int,
    laser_on: int,
    tia_settle: int,
    cdr_lock: int,
    margin: int,
    guard: int,
    output_format: str,
) -> None:
    """Sum the burst-mode transition times and check them against the guard interval."""
    verdict = guard_budget(GuardBudget(laser_off, laser_on, tia_settle, cdr_lock, margin), guard)
    if output_format == "json":
        click.echo(json.dumps({**verdict.budget.as_dict(), "guard_ns": guard, "verdict": verdict.label}, indent=2))
    else:
        for key, value in verdict.budget.as_dict().items():
            click.echo(f"{key:<14} {value:>6}")
        click.echo(f"{'guard_ns':<14} {guard:>6}")
        click.echo(f"Verdict: {verdict.label}")
    if not verdict.safe:
        raise UnsafeGuardError(f"Guard budget {verdict.total} ns exceeds the {guard} ns guard interval")


@main.command("compare", context_settings=CONTEXT_SETTINGS)
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option(
    "--format",
    "output_format",
    type=click.Choice(["table", "json", "csv", "markdown"]),
    default="table",
)
@click.option(
    "--tail-fraction",
    type=click.FloatRange(min=0.0, max=1.0, min_open=True),
    default=1.0,
    show_default=True,
    help="Only count the final fraction of windows toward '% under target'",
)
@click.option("--output", "output_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
def compare_command(
    run_dirs: tuple[Path, ...], output_format: str, tail_fraction: float, output_path: Path | None
) -> None:
    """
    Compare managed-ONU latency across run directories.

    Examples:
      ibasim compare runs/desk-seed42 runs/desk-fixed-seed42
      ibasim compare runs/* --tail-fraction 0.25 --format markdown
    """
    try:
        rows = compare_runs(list(run_dirs), tail_fraction=tail_fraction)
    except CompareError as exc:
        raise CompareFailedError(str(exc)) from exc
    rendered = _render_comparison(rows, output_format)
    if output_path:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(rendered + "\n", encoding="utf-8")
        click.echo(f"📝 Comparison written to {output_path}")
    else:
        click.echo(rendered)


@main.command("sweep", context_settings=CONTEXT_SETTINGS)
@_scenario_argument
@_preset_option
@click.option("--seed", "seeds", type=int, multiple=True, required=True, help="Seed to run (repeatable)")
@click.option("--agent", type=click.Choice(["on", "off"]), default=None)
@click.option("--duration", "duration_s", type=click.FloatRange(min=0.0), default=None, help="Simulated seconds")
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=None, help="Root directory")
@click.option("--max-parallel", type=click.IntRange(min=1), default=None, help="Worker processes")
@click.option("--debug", is_flag=True, help="Enable debug logging")
def sweep_command(
    scenario_path: Path | None,
    preset: str | None,
    seeds: tuple[int, ...],
    agent: str | None,
    duration_s: float | None,
    output: Path | None,
    max_parallel: int | None,
    debug: bool,
) -> None:
    """
    Run one scenario over several seeds in parallel worker processes.

    Examples:
      ibasim sweep --preset desk-ramp --agent off --seed 1 --seed 2 --seed 3
    """
    _enable_debug(debug)
    cfg = _resolve_scenario(scenario_path, preset, agent=agent, duration_s=duration_s)
    root = output if output is not None else Path(Settings().output_root) / f"{cfg.name}-sweep"
    try:
        results = sweep(cfg, list(seeds), root, max_parallel)
    except ConfigError as exc:
        raise InvalidConfigError(str(exc)) from exc
    except Exception as exc:
        if debug:
            raise
        raise RunFailedError(f"Sweep failed: {exc}") from exc
    for item in results:
        click.echo(
            f"seed {item['seed']}: mean {item['managed_mean_latency_ns'] / NS_PER_MS:.3f} ms, "
            f"p99 {item['managed_p99_latency_ns'] / NS_PER_MS:.3f} ms -> {item['output_dir']}"
        )


@main.command("traffic-check", context_settings=CONTEXT_SETTINGS)
@_scenario_argument
@_preset_option
@click.option("--load", type=click.FloatRange(min=0.0), default=0.5, show_default=True)
@click.option("--duration", "duration_s", type=click.FloatRange(min=0.0, min_open=True), default=60.0, show_default=True)
@click.option("--seed", type=int, default=None, help="Override the scenario seed")
@click.option("--bin-ms", type=click.FloatRange(min=0.0, min_open=True), default=1.0, show_default=True)
@click.option("--format", "output_format", type=click.Choice(["table", "json"]), default="table")
def traffic_check_command(
    scenario_path: Path | None,
    preset: str | None,
    load: float,
    duration_s: float,
    seed: int | None,
    bin_ms: float,
    output_format: str,
) -> None:
    """Generate one ONU's traffic on its own and report offered rate and Hurst estimate."""
    cfg = _resolve_scenario(scenario_path, preset, seed=seed)
    try:
        check = traffic_check(
            cfg.traffic, load=load, duration=seconds(duration_s), seed=cfg.seed, bin_ns=millis(bin_ms)
        )
    except ValueError as exc:
        raise InvalidConfigError(f"Traffic check failed: {exc}") from exc
    data: dict[str, Any] = {
        "load": check.load,
        "duration_s": check.duration / NS_PER_S,
        "packets": check.packets,
        "offered_bps": round(check.offered_bps, 1),
        "expected_bps": round(check.expected_bps, 1),
        "rate_error": round(check.rate_error, 6),
        "hurst": None if check.hurst is None else round(check.hurst, 4),
    }
    if output_format == "json":
        click.echo(json.dumps(data, indent=2))
        return
    for key, value in data.items():
        click.echo(f"{key:<13} {'n/a' if value is None else value}")


def _render_comparison(rows: Sequence[RunComparison], output_format: str) -> str:
    if output_format == "json":
        return json.dumps([row.as_dict() for row in rows], indent=2)
    if output_format == "csv":
        return _render_csv(rows)
    if output_format == "markdown":
        return _render_markdown(rows)
    lines = [
        f"{'run':<32} {'agent':<5} {'target':>8} {'mean':>9} {'p99':>9} {'max':>9} {'under%':>7}"
    ]
    for row in rows:
        lines.append(
            f"{row.run[-32:]:<32} {'on' if row.agent else 'off':<5} "
            f"{row.target_latency / NS_PER_MS:>7g}m "
            f"{row.mean_latency / NS_PER_MS:>8.3f}m "
            f"{row.p99_latency / NS_PER_MS:>8.3f}m "
            f"{row.max_latency / NS_PER_MS:>8.3f}m "
            f"{row.pct_under_target:>7.1f}"
        )
    return "\n".join(lines)


def _render_csv(rows: Sequence[RunComparison]) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    if not rows:
        return ""
    columns = list(rows[0].as_dict())
    writer.writerow(columns)
    for row in rows:
        data = row.as_dict()
        writer.writerow([data[column] for column in columns])
    return output.getvalue().rstrip("\n")


def _render_markdown(rows: Sequence[RunComparison]) -> str:
    lines = [
        "# Latency Comparison",
        "",
        "| Run | Agent | Target (ms) | Mean (ms) | p99 (ms) | Max (ms) | % windows under target |",
        "| --- | --- | ---: | ---: | ---: | ---: | ---: |",
    ]
    for row in rows:
        lines.append(
            f"| {row.run} | {'on' if row.agent else 'off'} | {row.target_latency / NS_PER_MS:g} | "
            f"{row.mean_latency / NS_PER_MS:.3f} | {row.p99_latency / NS_PER_MS:.3f} | "
            f"{row.max_latency / NS_PER_MS:.3f} | {row.pct_under_target:.1f} |"
        )
    return "\n".join(lines)
