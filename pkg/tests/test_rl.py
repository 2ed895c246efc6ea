from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ibasim.rl import (
    DEFAULT_ACTIONS,
    AgentConfig,
    AgentStep,
    Observation,
    QTable,
    SarsaAgent,
    agent_tick,
    compute_reward,
    discretize_state,
    q_table_export,
    read_qtable,
    sarsa_update,
    select_action,
    write_agent_log,
    write_qtable,
)
from ibasim.sim import NS_PER_MS, RngStream


def _step(state: int, action: int, reward: float, next_state: int, next_action: int) -> AgentStep:
    return AgentStep(0, state, action, reward, next_state, next_action, 0.0, DEFAULT_ACTIONS[next_action])


@pytest.mark.parametrize(("load", "expected"), [(0.0, 0), (0.55, 6), (0.999, 10), (1.0, 10), (2.75, 10)])
def test_discretize_state(load: float, expected: int) -> None:
    assert discretize_state(load, 11) == expected


def test_discretize_state_rejects_negative_load() -> None:
    with pytest.raises(ValueError):
        discretize_state(-0.1, 11)


def test_compute_reward_shape() -> None:
    target = NS_PER_MS
    assert compute_reward(Observation(0.5, 0.0, 10), target) == 1.0
    assert compute_reward(Observation(0.5, float(target), 10), target) == 0.0
    assert compute_reward(Observation(0.5, 10.0 * target, 10), target) == -5.0
    assert compute_reward(Observation(0.5, 0.0, 0), target) == 1.0
    p99 = Observation(0.5, 0.5 * target, 10, p99_latency=2 * target)
    assert compute_reward(p99, target, statistic="p99") == pytest.approx(-1.0)


def test_select_action_greedy_ties_go_to_lowest_index() -> None:
    rng = RngStream(0, 1).generator()
    assert select_action(np.array([0.1, 0.9, 0.3]), 0.0, rng) == 1
    assert select_action(np.zeros(8), 0.0, rng) == 0
    assert select_action(np.array([0.5, 0.9, 0.9]), 0.0, rng) == 1


def test_select_action_greedy_is_scale_invariant() -> None:
    rng = RngStream(0, 1).generator()
    row = np.array([-0.2, 0.7, 0.4, 0.7])
    assert select_action(row, 0.0, rng) == select_action(row * 37.5, 0.0, rng)


@pytest.mark.statistical
def test_select_action_explores_uniformly() -> None:
    rng = RngStream(5, 1).generator()
    draws = np.array([select_action(np.array([0.0, 1.0, 2.0, 3.0]), 1.0, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / draws.size
    assert np.all(np.abs(freq - 0.25) < 0.01)


def test_sarsa_update_examples() -> None:
    q = QTable.zeros(2, 2)
    assert sarsa_update(q, _step(0, 0, 0.0, 1, 1), 0.1, 0.9) == 0.0
    assert sarsa_update(q, _step(0, 1, 1.0, 1, 1), 0.1, 0.9) == pytest.approx(0.1)
    q.values[1, 0] = 0.5
    q.values[0, 1] = 1.0
    before = q.values.copy()
    assert sarsa_update(q, _step(1, 0, -1.0, 0, 1), 0.1, 0.9) == pytest.approx(0.44)
    changed = np.argwhere(q.values != before)
    assert changed.tolist() == [[1, 0]]
    assert q.visits[1, 0] == 1


def test_sarsa_update_rejects_bad_input() -> None:
    q = QTable.zeros(2, 2)
    with pytest.raises(ValueError):
        sarsa_update(q, _step(0, 0, float("nan"), 1, 1), 0.1, 0.9)
    with pytest.raises(IndexError):
        sarsa_update(q, _step(0, 5, 1.0, 1, 1), 0.1, 0.9)


def test_first_tick_selects_without_update() -> None:
    cfg = AgentConfig(epsilon=0.0, epsilon_min=0.0)
    agent = SarsaAgent(cfg, RngStream(1, 1).generator())
    applied: list[int] = []
    w_max = agent_tick(Observation(0.3, 0.0, 0), agent, 0, applied.append)
    assert w_max == DEFAULT_ACTIONS[0]
    assert applied == [DEFAULT_ACTIONS[0]]
    assert agent.log[0].reward is None
    assert not agent.table.values.any()


def test_epsilon_decays_every_tick_to_floor() -> None:
    cfg = AgentConfig(epsilon=0.3, epsilon_decay=0.5, epsilon_min=0.05)
    agent = SarsaAgent(cfg, RngStream(1, 1).generator())
    for k in range(5):
        agent.tick(Observation(0.5, 0.0, 1), k)
    assert [step.epsilon for step in agent.log] == pytest.approx([0.3, 0.15, 0.075, 0.05, 0.05])


def test_applied_action_matches_logged_next_action() -> None:
    cfg = AgentConfig(interval=50 * NS_PER_MS)
    agent = SarsaAgent(cfg, RngStream(9, 1).generator())
    applied: list[int] = []
    rng = np.random.default_rng(4)
    for k in range(200):
        obs = Observation(float(rng.uniform(0, 1.2)), float(rng.uniform(0, 3 * NS_PER_MS)), 10)
        agent.tick(obs, k, applied.append)
    assert applied == [cfg.action_set[step.next_action] for step in agent.log]
    for previous, step in zip(agent.log, agent.log[1:]):
        assert (step.state, step.action) == (previous.next_state, previous.next_action)
    bound = max(abs(cfg.reward_min), abs(cfg.reward_max)) / (1 - cfg.gamma)
    assert np.all(np.abs(agent.table.values) <= bound)


def test_identical_seed_replays_identical_actions() -> None:
    def _actions(seed: int) -> list[int]:
        agent = SarsaAgent(AgentConfig(), RngStream(seed, 1).generator())
        for k in range(100):
            agent.tick(Observation((k % 11) / 10, k * 20_000.0, 5), k)
        return [step.next_action for step in agent.log]

    assert _actions(42) == _actions(42)


def _reference_sarsa(
    transitions: np.ndarray, rewards: np.ndarray, ticks: int, seed: int, cfg: AgentConfig
) -> np.ndarray:
    """Plain step-by-step SARSA sharing only the random stream with the agent."""
    rng = RngStream(seed, 1).generator()
    q = [[0.0] * 3 for _ in range(3)]
    epsilon = cfg.epsilon

    def choose(state: int) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(3))
        row = q[state]
        best = 0
        for a in range(1, 3):
            if row[a] > row[best]:
                best = a
        return best

    state = 0
    action = choose(state)
    epsilon = max(epsilon * cfg.epsilon_decay, cfg.epsilon_min)
    for _ in range(ticks):
        next_state = int(transitions[state, action])
        reward = float(rewards[state, action])
        next_action = choose(next_state)
        q[state][action] = q[state][action] + cfg.alpha * (
            (reward + cfg.gamma * q[next_state][next_action]) - q[state][action]
        )
        epsilon = max(epsilon * cfg.epsilon_decay, cfg.epsilon_min)
        state, action = next_state, next_action
    return np.array(q)


def test_agent_matches_reference_sarsa_on_toy_mdp() -> None:
    transitions = np.array([[1, 2, 0], [2, 0, 1], [0, 1, 2]])
    rewards = np.array([[0.5, -1.0, 0.0], [1.0, 0.2, -0.5], [-0.3, 0.8, 0.1]])
    cfg = AgentConfig(
        action_set=(2000, 4000, 8000),
        n_state_bins=3,
        epsilon=0.1,
        epsilon_decay=1.0,
        epsilon_min=0.1,
    )
    ticks = 10_000
    agent = SarsaAgent(cfg, RngStream(77, 1).generator())
    state = 0
    step = agent.learn_step(state, None)
    for _ in range(ticks):
        action = step.next_action
        next_state = int(transitions[state, action])
        step = agent.learn_step(next_state, float(rewards[state, action]))
        state = next_state
    expected = _reference_sarsa(transitions, rewards, ticks, 77, cfg)
    assert np.max(np.abs(agent.table.values - expected)) <= 1e-12
    assert int(agent.table.visits.sum()) == ticks


def test_qtable_export_and_round_trip(tmp_path: Path) -> None:
    fresh = QTable.zeros(11, 8)
    records = q_table_export(fresh, DEFAULT_ACTIONS)
    assert len(records) == 88
    assert all(r.q_value == 0.0 and r.visits == 0 for r in records)
    assert [(r.state_bin, r.w_max_bytes) for r in records[:2]] == [(0, 5000), (0, 8000)]

    sarsa_update(fresh, AgentStep(0, 3, 2, 1.0, 4, 1, 0.1, 8000), 0.1, 0.9)
    nonzero = [r for r in q_table_export(fresh, DEFAULT_ACTIONS) if r.q_value != 0.0]
    assert [(r.state_bin, r.w_max_bytes) for r in nonzero] == [(3, 12800)]

    fresh.values[:] = np.random.default_rng(8).normal(size=(11, 8)) / 3.0
    path = write_qtable(fresh, DEFAULT_ACTIONS, tmp_path / "qtable.csv")
    loaded = read_qtable(path, DEFAULT_ACTIONS, 11)
    assert np.array_equal(loaded.values, fresh.values)
    assert np.array_equal(loaded.visits, fresh.visits)


def test_agent_log_blank_reward_on_first_tick(tmp_path: Path) -> None:
    agent = SarsaAgent(AgentConfig(epsilon=0.0, epsilon_min=0.0), RngStream(2, 1).generator())
    agent.tick(Observation(0.2, 0.0, 0), 50 * NS_PER_MS)
    agent.tick(Observation(0.2, 0.5 * NS_PER_MS, 4), 100 * NS_PER_MS)
    lines = write_agent_log(agent.log, tmp_path / "agent_log.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "tick_time_ns,state_bin,action_w_max_bytes,reward,epsilon"
    assert lines[1] == "50000000,2,5000,,0.000000"
    assert lines[2] == "100000000,2,5000,0.500000,0.000000"


def test_agent_config_problems_and_round_trip() -> None:
    assert AgentConfig(action_set=(8000, 5000)).problems()
    assert AgentConfig(action_set=(1000, 5000)).problems()
    assert AgentConfig(gamma=1.0).problems()
    assert AgentConfig(reward_statistic="max").problems()
    cfg = AgentConfig(target_latency=3 * NS_PER_MS, interval=50 * NS_PER_MS, managed_onu_id=5)
    assert AgentConfig.from_dict(cfg.as_dict()) == cfg
