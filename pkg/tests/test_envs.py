import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decmarl.envs import (ACTION_DIM, SpreadConfig, SpreadState, TrajectoryRecorder, action_to_force, agent_rewards,
                          collisions, observation_dim, spread_reset, spread_step)

CFG = SpreadConfig()


def state_of(positions, targets, velocities=None):
    positions = np.asarray(positions, float)
    v = np.zeros_like(positions) if velocities is None else np.asarray(velocities, float)
    return SpreadState(positions, v, np.asarray(targets, float), 0)


def test_reset_layout():
    s = spread_reset(3, np.random.default_rng(0))
    assert s.positions.shape == (3, 2) and s.targets.shape == (3, 2)
    assert np.all(s.velocities == 0) and s.step_count == 0
    assert np.all(np.abs(s.positions) <= 1) and np.all(np.abs(s.targets) <= 1)
    t = spread_reset(3, np.random.default_rng(0))
    np.testing.assert_array_equal(s.positions, t.positions)
    np.testing.assert_array_equal(s.targets, t.targets)
    assert s.observation().shape == (observation_dim(3),)


def test_distance_term_345():
    s = state_of([[0, 0]], [[0.3, 0.4]])
    assert agent_rewards(s)[0] == pytest.approx(-0.5)


def test_collision_penalty_each_agent():
    s = state_of([[0, 0], [0.1, 0], [1, 1]], [[0, 0], [0.1, 0], [1, 1]])
    np.testing.assert_allclose(agent_rewards(s), [-1, -1, 0])
    assert collisions(np.array([[0, 0], [0.15, 0]]), 0.15).tolist() == [False, False]


def test_zero_action_statics():
    s = state_of([[0, 0], [0.5, 0.5]], [[0.3, 0.4], [0.5, 0.5]])
    nxt, r, per = spread_step(s, np.zeros((2, ACTION_DIM)))
    np.testing.assert_array_equal(nxt.positions, s.positions)
    assert r == pytest.approx(-0.25) and nxt.step_count == 1


def test_wrong_action_shape():
    s = spread_reset(2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        spread_step(s, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        spread_step(s, np.zeros((3, ACTION_DIM)))


def test_force_mapping_ignores_first_component():
    a = np.array([0.9, 0.5, 0.2, -0.3, 0.4])
    np.testing.assert_allclose(action_to_force(a), [0.3, -0.7])
    b = a.copy()
    b[0] = -0.9
    np.testing.assert_array_equal(action_to_force(a), action_to_force(b))


def test_dynamics_double_integrator():
    s = state_of([[0, 0]], [[1, 1]], velocities=[[0.2, 0.0]])
    a = np.array([[0, 1, 0, 0, 0]], float)
    nxt, _, _ = spread_step(s, a)
    v = 0.2 * CFG.damping + 1.0 * CFG.dt
    np.testing.assert_allclose(nxt.velocities, [[v, 0]])
    np.testing.assert_allclose(nxt.positions, [[v * CFG.dt, 0]])


actions_st = st.integers(0, 10_000).map(lambda k: np.tanh(np.random.default_rng(k).normal(size=(3, ACTION_DIM)) * 2))


@given(st.integers(0, 10_000), actions_st)
@settings(max_examples=60)
def test_invariants_hold_along_rollouts(seed, actions):
    s = spread_reset(3, np.random.default_rng(seed))
    for _ in range(30):
        s, r, per = spread_step(s, actions)
        assert r == float(per.mean())
        assert np.all(np.abs(s.positions) <= CFG.arena)
        assert np.all(np.linalg.norm(s.velocities, axis=1) <= CFG.max_speed + 1e-12)


@given(st.integers(0, 10_000), actions_st, st.permutations(range(3)))
@settings(max_examples=60)
def test_permutation_symmetry(seed, actions, perm):
    s = spread_reset(3, np.random.default_rng(seed))
    perm = list(perm)
    p = SpreadState(s.positions[perm], s.velocities[perm], s.targets[perm], 0)
    a, r, per = spread_step(s, actions)
    b, r2, per2 = spread_step(p, actions[perm])
    np.testing.assert_allclose(per2, per[perm], atol=1e-12)
    assert r2 == pytest.approx(r, abs=1e-12)


@given(st.integers(0, 10_000), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
@settings(max_examples=60)
def test_translation_invariance(seed, dx, dy):
    s = spread_reset(3, np.random.default_rng(seed))
    shift = np.array([dx, dy])
    moved = SpreadState(s.positions + shift, s.velocities, s.targets + shift, 0)
    np.testing.assert_allclose(agent_rewards(moved), agent_rewards(s), atol=1e-12)


def test_bit_exact_determinism():
    s = spread_reset(3, np.random.default_rng(3))
    a = np.tanh(np.random.default_rng(4).normal(size=(3, ACTION_DIM)))
    n1, r1, _ = spread_step(s.copy(), a)
    n2, r2, _ = spread_step(s.copy(), a)
    assert np.array_equal(n1.positions, n2.positions) and np.array_equal(n1.velocities, n2.velocities) and r1 == r2


def test_trajectory_csv(tmp_path):
    rec = TrajectoryRecorder()
    s = spread_reset(2, np.random.default_rng(0))
    s, _, per = spread_step(s, np.zeros((2, ACTION_DIM)))
    rec.record(0, s, per)
    rec.write_csv(tmp_path / "traj.csv")
    rows = list(csv.DictReader(open(tmp_path / "traj.csv")))
    assert list(rows[0]) == ["episode", "step", "agent", "x", "y", "reward"]
    assert float(rows[1]["x"]) == s.positions[1, 0] and float(rows[1]["reward"]) == per[1]
