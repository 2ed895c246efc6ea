from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .pon import PonConfig
from .rl import AgentConfig
from .sim import NS_PER_MS, NS_PER_S, NS_PER_US, millis, seconds
from .traffic import OnuTrafficConfig, PacketSizeModel, SubstreamConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib  # type: ignore[import-not-found]


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        return default
    return value if value > 0 else default


@dataclass(frozen=True)
class Settings:
    output_root: str = field(default_factory=lambda: os.environ.get("IBASIM_OUTPUT_ROOT", "runs"))
    # Worker processes used by `ibasim sweep`
    max_parallel: int = field(default_factory=lambda: _env_int("IBASIM_MAX_PARALLEL", 4))
    window_ms: int = field(default_factory=lambda: _env_int("IBASIM_WINDOW_MS", 100))

    @property
    def window(self) -> int:
        return self.window_ms * NS_PER_MS


class ConfigError(ValueError):
    """A scenario failed validation. ``problems`` lists every violation found."""

    def __init__(self, problems: list[str]) -> None:
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  - " + "\n  - ".join(self.problems))


# Synthetic hourly shape of residential upstream demand; not measured data.
DIURNAL_SHAPE = (
    0.55, 0.45, 0.35, 0.28, 0.22, 0.20, 0.25, 0.35, 0.45, 0.50, 0.55, 0.60,
    0.62, 0.60, 0.60, 0.62, 0.65, 0.70, 0.78, 0.85, 0.90, 0.92, 0.85, 0.70,
)  # fmt: skip


@dataclass(frozen=True)
class LoadProfile:
    kind: str = "fixed"
    load: float = 0.7
    breakpoints: tuple[tuple[int, float], ...] = ()
    label: str = ""

    @classmethod
    def fixed(cls, load: float) -> "LoadProfile":
        return cls(kind="fixed", load=load)

    @classmethod
    def dynamic(cls, breakpoints: list[tuple[int, float]], label: str = "") -> "LoadProfile":
        return cls(kind="dynamic", load=0.0, breakpoints=tuple(breakpoints), label=label)

    @property
    def peak(self) -> float:
        if self.kind == "fixed":
            return self.load
        return max((load for _, load in self.breakpoints), default=0.0)

    def problems(self) -> list[str]:
        issues: list[str] = []
        if self.kind == "fixed":
            if self.load < 0:
                issues.append("load_profile.load must be >= 0")
        elif self.kind == "dynamic":
            if not self.breakpoints:
                issues.append("load_profile.breakpoints must not be empty")
            times = [t for t, _ in self.breakpoints]
            if times != sorted(times):
                issues.append("load_profile.breakpoints must be sorted by time")
            if any(load < 0 for _, load in self.breakpoints):
                issues.append("load_profile.breakpoints loads must be >= 0")
        else:
            issues.append(f"load_profile.kind must be 'fixed' or 'dynamic' (got {self.kind!r})")
        return issues

    def as_dict(self) -> dict[str, Any]:
        if self.kind == "fixed":
            return {"kind": "fixed", "load": self.load}
        return {
            "kind": self.kind,
            "breakpoints": [[t / NS_PER_S, load] for t, load in self.breakpoints],
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LoadProfile":
        kind = str(data.get("kind", "fixed"))
        if kind == "fixed":
            return cls.fixed(float(data.get("load", cls.load)))
        points = [(seconds(float(t)), float(load)) for t, load in data.get("breakpoints", [])]
        return cls(kind=kind, load=0.0, breakpoints=tuple(points), label=str(data.get("label", "")))


def diurnal_profile(duration: int, shape: tuple[float, ...] = DIURNAL_SHAPE) -> LoadProfile:
    """A synthetic day compressed into ``duration``: one breakpoint per hour."""
    step = duration // len(shape)
    points = [(hour * step, load) for hour, load in enumerate(shape)]
    return LoadProfile.dynamic(points, label="synthetic diurnal (not measured data)")


def _traffic_as_dict(traffic: OnuTrafficConfig, overrides: tuple[tuple[int, float], ...]) -> dict[str, Any]:
    sub = traffic.substream
    data: dict[str, Any] = {
        "n_substreams": traffic.n_substreams,
        "shape_on": sub.shape_on,
        "shape_off": sub.shape_off,
        "min_on_us": sub.min_on / NS_PER_US,
        "peak_rate_bps": sub.peak_rate,
        "max_rate_bps": traffic.max_rate,
        "packet_size": traffic.packet_size_model.as_dict(),
    }
    if overrides:
        data["overrides"] = {str(onu_id): {"load": load} for onu_id, load in overrides}
    return data


def _traffic_from_dict(data: Mapping[str, Any]) -> tuple[OnuTrafficConfig, tuple[tuple[int, float], ...]]:
    base = OnuTrafficConfig()
    sub = SubstreamConfig(
        shape_on=float(data.get("shape_on", base.substream.shape_on)),
        shape_off=float(data.get("shape_off", base.substream.shape_off)),
        min_on=int(round(float(data.get("min_on_us", base.substream.min_on / NS_PER_US)) * NS_PER_US)),
        peak_rate=float(data.get("peak_rate_bps", base.substream.peak_rate)),
    )
    size_data = data.get("packet_size")
    traffic = OnuTrafficConfig(
        n_substreams=int(data.get("n_substreams", base.n_substreams)),
        substream=sub,
        max_rate=float(data.get("max_rate_bps", base.max_rate)),
        packet_size_model=(
            PacketSizeModel.from_dict(size_data) if size_data is not None else base.packet_size_model
        ),
    )
    overrides = tuple(
        sorted((int(onu_id), float(entry["load"])) for onu_id, entry in data.get("overrides", {}).items())
    )
    return traffic, overrides


_TOP_LEVEL_KEYS = {
    "name",
    "duration_s",
    "seed",
    "output_dir",
    "window_ms",
    "refill_ms",
    "profile_tick_ms",
    "trace_grants",
    "pon",
    "traffic",
    "agent",
    "load_profile",
}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    pon: PonConfig = field(default_factory=PonConfig)
    traffic: OnuTrafficConfig = field(default_factory=OnuTrafficConfig)
    overrides: tuple[tuple[int, float], ...] = ()
    agent: AgentConfig = field(default_factory=AgentConfig)
    load_profile: LoadProfile = field(default_factory=LoadProfile)
    duration: int = 20 * NS_PER_S
    seed: int = 42
    output_dir: str | None = None
    window: int = field(default_factory=lambda: Settings().window)
    refill: int = 10 * NS_PER_MS
    profile_tick: int = 1 * NS_PER_S
    trace_grants: bool = False

    def problems(self) -> list[str]:
        issues = self.pon.problems() + self.traffic.problems() + self.agent.problems()
        issues += self.load_profile.problems()
        if self.duration <= 0:
            issues.append("duration_s must be > 0")
        if self.window <= 0:
            issues.append("window_ms must be > 0")
        if self.refill <= 0:
            issues.append("refill_ms must be > 0")
        if self.profile_tick <= 0:
            issues.append("profile_tick_ms must be > 0")
        if not 0 <= self.agent.managed_onu_id < self.pon.n_onus:
            issues.append(
                f"agent.managed_onu_id must be < pon.n_onus ({self.agent.managed_onu_id} >= {self.pon.n_onus})"
            )
        for onu_id, load in self.overrides:
            if not 0 <= onu_id < self.pon.n_onus:
                issues.append(f"traffic.overrides.{onu_id} names an ONU outside 0..{self.pon.n_onus - 1}")
            if load < 0:
                issues.append(f"traffic.overrides.{onu_id}.load must be >= 0")
        ceiling = self.traffic.n_substreams * self.traffic.substream.peak_rate / self.traffic.max_rate
        peak = max([self.load_profile.peak] + [load for _, load in self.overrides])
        if peak > ceiling:
            issues.append(
                f"peak load {peak} exceeds what {self.traffic.n_substreams} substreams can offer ({ceiling:g})"
            )
        return issues

    def validate(self) -> "ScenarioConfig":
        issues = self.problems()
        if issues:
            raise ConfigError(issues)
        return self

    def load_for(self, onu_id: int, profile_load: float) -> float:
        for override_id, load in self.overrides:
            if override_id == onu_id:
                return load
        return profile_load

    def as_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "name": self.name,
            "duration_s": self.duration / NS_PER_S,
            "seed": self.seed,
            "window_ms": self.window / NS_PER_MS,
            "refill_ms": self.refill / NS_PER_MS,
            "profile_tick_ms": self.profile_tick / NS_PER_MS,
            "trace_grants": self.trace_grants,
            "pon": self.pon.as_dict(),
            "traffic": _traffic_as_dict(self.traffic, self.overrides),
            "agent": self.agent.as_dict(),
            "load_profile": self.load_profile.as_dict(),
        }
        if self.output_dir is not None:
            data["output_dir"] = self.output_dir
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        unknown = sorted(set(data) - _TOP_LEVEL_KEYS)
        if unknown:
            raise ConfigError([f"unknown scenario key: {key}" for key in unknown])
        base = cls()
        try:
            traffic, overrides = _traffic_from_dict(data.get("traffic", {}))
            return cls(
                name=str(data.get("name", base.name)),
                pon=PonConfig.from_dict(data.get("pon", {})),
                traffic=traffic,
                overrides=overrides,
                agent=AgentConfig.from_dict(data.get("agent", {})),
                load_profile=LoadProfile.from_dict(data.get("load_profile", {})),
                duration=seconds(float(data["duration_s"])) if "duration_s" in data else base.duration,
                seed=int(data.get("seed", base.seed)),
                output_dir=data.get("output_dir"),
                window=millis(float(data["window_ms"])) if "window_ms" in data else base.window,
                refill=millis(float(data["refill_ms"])) if "refill_ms" in data else base.refill,
                profile_tick=(
                    millis(float(data["profile_tick_ms"]))
                    if "profile_tick_ms" in data
                    else base.profile_tick
                ),
                trace_grants=bool(data.get("trace_grants", base.trace_grants)),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError([f"malformed scenario value: {exc}"]) from exc

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


# The cold-start pick on an all-zero table is the lowest rung, which equals the
# default W_max. Windows over target score down to reward_min, so the greedy
# policy climbs to the first rung that keeps scoring positive. Exploration is
# gone well before the final quarter of a 400-tick run.
DESK_ACTIONS = (30000, 60000, 100000, 160000)

DESK_AGENT = AgentConfig(
    interval=50 * NS_PER_MS,
    epsilon=0.1,
    epsilon_decay=0.98,
    epsilon_min=0.0,
    action_set=DESK_ACTIONS,
    n_state_bins=4,
    reward_min=-10.0,
)


def _desk(**changes: Any) -> ScenarioConfig:
    base = ScenarioConfig(
        name="desk",
        agent=DESK_AGENT,
        load_profile=LoadProfile.fixed(0.7),
        duration=20 * NS_PER_S,
    )
    return replace(base, **changes)


PRESETS: dict[str, ScenarioConfig] = {
    "reference": ScenarioConfig(
        name="reference",
        load_profile=LoadProfile.fixed(1.0),
        duration=60 * NS_PER_S,
    ),
    "desk": _desk(),
    "desk-ramp": _desk(
        name="desk-ramp",
        load_profile=LoadProfile.dynamic([(0, 0.3), (20 * NS_PER_S, 0.95)], label="linear ramp"),
    ),
    "diurnal": _desk(
        name="diurnal",
        duration=24 * NS_PER_S,
        load_profile=diurnal_profile(24 * NS_PER_S),
    ),
}


def _deep_merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict) and key != "load_profile":
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_scenario_file(path: Path) -> dict[str, Any]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigError([f"{path} must contain a table of settings"])
    return data


def load_scenario(path: Path | None = None, preset: str | None = None) -> ScenarioConfig:
    """Layer a scenario file over a preset (or the defaults) and validate the result."""
    if preset is not None and preset not in PRESETS:
        raise ConfigError([f"unknown preset {preset!r} (choose from {', '.join(sorted(PRESETS))})"])
    data = PRESETS[preset].as_dict() if preset is not None else {}
    if path is not None:
        data = _deep_merge(data, read_scenario_file(path))
        data.setdefault("name", path.stem)
    return ScenarioConfig.from_dict(data).validate()


def with_overrides(
    cfg: ScenarioConfig,
    *,
    seed: int | None = None,
    duration: int | None = None,
    agent_enabled: bool | None = None,
    target_latency: int | None = None,
    w_max: int | None = None,
    load: float | None = None,
    output_dir: str | None = None,
) -> ScenarioConfig:
    agent = cfg.agent
    if agent_enabled is not None:
        agent = replace(agent, enabled=agent_enabled)
    if target_latency is not None:
        agent = replace(agent, target_latency=target_latency)
    updated = replace(
        cfg,
        agent=agent,
        seed=cfg.seed if seed is None else seed,
        duration=cfg.duration if duration is None else duration,
        pon=cfg.pon if w_max is None else replace(cfg.pon, default_w_max=w_max),
        load_profile=cfg.load_profile if load is None else LoadProfile.fixed(load),
        output_dir=cfg.output_dir if output_dir is None else output_dir,
    )
    return updated.validate()
