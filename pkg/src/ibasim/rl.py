"""Tabular SARSA agent that picks the managed ONU's W_max every adjustment interval."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .metrics import AGENT_LOG_COLUMNS, QTABLE_COLUMNS, nearest_rank, read_csv, write_csv
from .sim import NS_PER_MS
from .traffic import MAX_PACKET_BYTES

LOGGER = logging.getLogger(__name__)

DEFAULT_ACTIONS = (5000, 8000, 12800, 20500, 32800, 52400, 83900, 160000)
REWARD_STATISTICS = ("mean", "p99")


@dataclass(frozen=True)
class AgentConfig:
    enabled: bool = True
    managed_onu_id: int = 2
    target_latency: int = 1 * NS_PER_MS
    interval: int = 800 * NS_PER_MS
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.3
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.02
    action_set: tuple[int, ...] = DEFAULT_ACTIONS
    n_state_bins: int = 11
    reward_statistic: str = "mean"
    reward_min: float = -5.0
    reward_max: float = 1.0
    initial_qtable: str | None = None

    def problems(self) -> list[str]:
        issues: list[str] = []
        if self.target_latency <= 0:
            issues.append("agent.target_latency_ms must be > 0")
        if self.interval <= 0:
            issues.append("agent.interval_ms must be > 0")
        if not 0.0 < self.alpha <= 1.0:
            issues.append("agent.alpha must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            issues.append("agent.gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            issues.append("agent.epsilon must lie in [0, 1]")
        if not 0.0 < self.epsilon_decay <= 1.0:
            issues.append("agent.epsilon_decay must lie in (0, 1]")
        if not 0.0 <= self.epsilon_min <= 1.0:
            issues.append("agent.epsilon_min must lie in [0, 1]")
        if not self.action_set:
            issues.append("agent.action_set_bytes must not be empty")
        elif any(b <= a for a, b in zip(self.action_set, self.action_set[1:])):
            issues.append("agent.action_set_bytes must be strictly increasing")
        elif self.action_set[0] < MAX_PACKET_BYTES:
            issues.append(f"agent.action_set_bytes values must be >= {MAX_PACKET_BYTES}")
        if self.n_state_bins < 2:
            issues.append("agent.n_state_bins must be >= 2")
        if self.reward_statistic not in REWARD_STATISTICS:
            issues.append(f"agent.reward_statistic must be one of {', '.join(REWARD_STATISTICS)}")
        if self.reward_min >= self.reward_max:
            issues.append("agent.reward_min must be below agent.reward_max")
        return issues

    def as_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "enabled": self.enabled,
            "managed_onu_id": self.managed_onu_id,
            "target_latency_ms": self.target_latency / NS_PER_MS,
            "interval_ms": self.interval / NS_PER_MS,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "epsilon_decay": self.epsilon_decay,
            "epsilon_min": self.epsilon_min,
            "action_set_bytes": list(self.action_set),
            "n_state_bins": self.n_state_bins,
            "reward_statistic": self.reward_statistic,
            "reward_min": self.reward_min,
            "reward_max": self.reward_max,
        }
        if self.initial_qtable is not None:
            data["initial_qtable"] = self.initial_qtable
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AgentConfig":
        base = cls()

        def _ms(key: str, default: int) -> int:
            return int(round(float(data[key]) * NS_PER_MS)) if key in data else default

        return cls(
            enabled=bool(data.get("enabled", base.enabled)),
            managed_onu_id=int(data.get("managed_onu_id", base.managed_onu_id)),
            target_latency=_ms("target_latency_ms", base.target_latency),
            interval=_ms("interval_ms", base.interval),
            alpha=float(data.get("alpha", base.alpha)),
            gamma=float(data.get("gamma", base.gamma)),
            epsilon=float(data.get("epsilon", base.epsilon)),
            epsilon_decay=float(data.get("epsilon_decay", base.epsilon_decay)),
            epsilon_min=float(data.get("epsilon_min", base.epsilon_min)),
            action_set=tuple(int(v) for v in data.get("action_set_bytes", base.action_set)),
            n_state_bins=int(data.get("n_state_bins", base.n_state_bins)),
            reward_statistic=str(data.get("reward_statistic", base.reward_statistic)),
            reward_min=float(data.get("reward_min", base.reward_min)),
            reward_max=float(data.get("reward_max", base.reward_max)),
            initial_qtable=data.get("initial_qtable"),
        )


@dataclass(frozen=True)
class Observation:
    avg_load: float
    mean_latency: float
    sample_count: int
    p99_latency: int = 0

    @classmethod
    def from_latencies(cls, avg_load: float, latencies: np.ndarray) -> "Observation":
        if latencies.size == 0:
            return cls(avg_load=avg_load, mean_latency=0.0, sample_count=0)
        return cls(
            avg_load=avg_load,
            mean_latency=float(np.sum(latencies, dtype=np.int64)) / latencies.size,
            sample_count=int(latencies.size),
            p99_latency=nearest_rank(np.sort(latencies), 0.99),
        )


@dataclass(frozen=True)
class AgentStep:
    """One SARSA transition. ``state``/``action``/``reward`` are None on the first tick."""

    tick_time: int
    state: int | None
    action: int | None
    reward: float | None
    next_state: int
    next_action: int
    epsilon: float
    w_max: int

    def as_row(self) -> list[str]:
        reward = "" if self.reward is None else f"{self.reward:.6f}"
        return [
            str(self.tick_time),
            str(self.next_state),
            str(self.w_max),
            reward,
            f"{self.epsilon:.6f}",
        ]


@dataclass(frozen=True)
class QRecord:
    state_bin: int
    w_max_bytes: int
    q_value: float
    visits: int

    def as_row(self) -> list[str]:
        return [str(self.state_bin), str(self.w_max_bytes), repr(self.q_value), str(self.visits)]


@dataclass
class QTable:
    values: np.ndarray
    visits: np.ndarray

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "QTable":
        return cls(
            values=np.zeros((n_states, n_actions), dtype=np.float64),
            visits=np.zeros((n_states, n_actions), dtype=np.int64),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def export(self, action_set: Sequence[int]) -> list[QRecord]:
        n_states, n_actions = self.shape
        if len(action_set) != n_actions:
            raise ValueError("action set does not match the table width")
        return [
            QRecord(s, int(action_set[a]), float(self.values[s, a]), int(self.visits[s, a]))
            for s in range(n_states)
            for a in range(n_actions)
        ]

    @classmethod
    def from_records(
        cls, records: Iterable[QRecord], action_set: Sequence[int], n_states: int
    ) -> "QTable":
        table = cls.zeros(n_states, len(action_set))
        column = {w: i for i, w in enumerate(action_set)}
        for record in records:
            if record.w_max_bytes not in column or not 0 <= record.state_bin < n_states:
                raise ValueError(
                    f"Q-table record ({record.state_bin}, {record.w_max_bytes}) is outside the table"
                )
            if not math.isfinite(record.q_value):
                raise ValueError(f"non-finite Q value at state {record.state_bin}")
            a = column[record.w_max_bytes]
            table.values[record.state_bin, a] = record.q_value
            table.visits[record.state_bin, a] = record.visits
        return table


def discretize_state(avg_load: float, n_state_bins: int) -> int:
    if avg_load < 0 or not math.isfinite(avg_load):
        raise ValueError(f"load must be a finite value >= 0 (got {avg_load})")
    return min(int(math.floor(avg_load * n_state_bins)), n_state_bins - 1)


def compute_reward(
    obs: Observation,
    target: int,
    *,
    statistic: str = "mean",
    reward_min: float = -5.0,
    reward_max: float = 1.0,
) -> float:
    if obs.sample_count == 0:
        return reward_max
    latency = obs.mean_latency if statistic == "mean" else float(obs.p99_latency)
    return float(min(max(1.0 - latency / target, reward_min), reward_max))


def select_action(q_row: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy. Always consumes one uniform draw; exploring consumes one more."""
    if len(q_row) == 0:
        raise ValueError("empty Q row")
    if rng.random() < epsilon:
        return int(rng.integers(len(q_row)))
    # np.argmax returns the first maximum, i.e. the smallest W_max on ties.
    return int(np.argmax(q_row))


def sarsa_update(q: QTable, step: AgentStep, alpha: float, gamma: float) -> float:
    if step.state is None or step.action is None or step.reward is None:
        raise ValueError("cannot update from a step without a previous state-action pair")
    if not (math.isfinite(step.reward) and math.isfinite(alpha) and math.isfinite(gamma)):
        raise ValueError("non-finite reward or hyperparameter")
    n_states, n_actions = q.shape
    for s, a in ((step.state, step.action), (step.next_state, step.next_action)):
        if not (0 <= s < n_states and 0 <= a < n_actions):
            raise IndexError(f"state/action ({s}, {a}) outside a {n_states}x{n_actions} table")
    current_q = q.values[step.state, step.action]
    next_q = q.values[step.next_state, step.next_action]
    td_target = step.reward + gamma * next_q
    td_error = td_target - current_q
    updated = current_q + alpha * td_error
    q.values[step.state, step.action] = updated
    q.visits[step.state, step.action] += 1
    return float(updated)


@dataclass
class SarsaAgent:
    cfg: AgentConfig
    rng: np.random.Generator
    qtable: QTable | None = None
    epsilon: float = field(init=False)
    log: list[AgentStep] = field(default_factory=list, init=False)
    _previous: tuple[int, int] | None = field(default=None, init=False)

    def __post_init__(self) -> None:
        if self.qtable is None:
            self.qtable = QTable.zeros(self.cfg.n_state_bins, len(self.cfg.action_set))
        self.epsilon = self.cfg.epsilon

    @property
    def table(self) -> QTable:
        assert self.qtable is not None
        return self.qtable

    @property
    def current_action(self) -> int | None:
        return self._previous[1] if self._previous is not None else None

    def learn_step(self, state: int, reward: float | None, now: int = 0) -> AgentStep:
        """Choose the action for ``state`` and, when possible, update the previous pair with ``reward``."""
        epsilon = self.epsilon
        action = select_action(self.table.values[state], epsilon, self.rng)
        previous = self._previous
        step = AgentStep(
            tick_time=now,
            state=previous[0] if previous is not None else None,
            action=previous[1] if previous is not None else None,
            reward=reward if previous is not None else None,
            next_state=state,
            next_action=action,
            epsilon=epsilon,
            w_max=self.cfg.action_set[action],
        )
        if previous is not None and reward is not None:
            sarsa_update(self.table, step, self.cfg.alpha, self.cfg.gamma)
        self.epsilon = max(self.epsilon * self.cfg.epsilon_decay, self.cfg.epsilon_min)
        self._previous = (state, action)
        self.log.append(step)
        return step

    def tick(
        self, obs: Observation, now: int, apply: Callable[[int], Any] | None = None
    ) -> int:
        state = discretize_state(obs.avg_load, self.cfg.n_state_bins)
        reward = None
        if self._previous is not None:
            reward = compute_reward(
                obs,
                self.cfg.target_latency,
                statistic=self.cfg.reward_statistic,
                reward_min=self.cfg.reward_min,
                reward_max=self.cfg.reward_max,
            )
        step = self.learn_step(state, reward, now)
        LOGGER.debug(
            "Agent tick at %d ns: load=%.3f state=%d reward=%s W_max=%d eps=%.4f",
            now,
            obs.avg_load,
            state,
            "-" if reward is None else f"{reward:.4f}",
            step.w_max,
            step.epsilon,
        )
        if apply is not None:
            apply(step.w_max)
        return step.w_max


def agent_tick(
    obs: Observation, agent: SarsaAgent, now: int, apply: Callable[[int], Any] | None = None
) -> int:
    return agent.tick(obs, now, apply)


def q_table_export(q: QTable, action_set: Sequence[int]) -> list[QRecord]:
    return q.export(action_set)


def write_agent_log(steps: Iterable[AgentStep], path: Path) -> Path:
    return write_csv(path, AGENT_LOG_COLUMNS, (step.as_row() for step in steps))


def write_qtable(q: QTable, action_set: Sequence[int], path: Path) -> Path:
    return write_csv(path, QTABLE_COLUMNS, (r.as_row() for r in q.export(action_set)))


def read_qtable(path: Path, action_set: Sequence[int], n_states: int) -> QTable:
    records = [
        QRecord(
            state_bin=int(row["state_bin"]),
            w_max_bytes=int(row["w_max_bytes"]),
            q_value=float(row["q_value"]),
            visits=int(row["visits"]),
        )
        for row in read_csv(path)
    ]
    return QTable.from_records(records, action_set, n_states)
