import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from summitirl.envs.grid import generate_grid
from summitirl.rl import (Policy, QLearningParams, QTable, QTableCache, greedy_policy, q_learn, simulate,
                          simulate_summaries, train_policy)

from oracles import chi_square_p, optimal_policy_probs, value_iteration


def test_learned_policy_walks_shortest_path():
    g = generate_grid(3, 0, seed=0, p_slip=0.0)
    policy = train_policy(g, QLearningParams.for_grid(3), 1)
    dist = g.distance_to_goal()
    rng = np.random.default_rng(0)
    for s in g.boundary_cells():
        for _ in range(5):
            traj = simulate(g, policy, rng, start=s)
            assert traj.length == dist[s]


def test_corner_start_takes_two_steps():
    g = generate_grid(3, 0, seed=0, p_slip=0.0)
    policy = Policy(optimal_policy_probs(g))
    traj = simulate(g, policy, np.random.default_rng(3), start=g.cell(0, 0))
    assert traj.length == 2 and traj.states[-1] == g.goal


@pytest.mark.parametrize("w,nf,seed", [(5, 0, 0), (3, 1, 4), (5, 1, 2), (5, 1, 9)])
def test_greedy_values_match_value_iteration(w, nf, seed):
    g = generate_grid(w, nf, seed=seed, theta=[-0.6] * nf)
    q = q_learn(g, QLearningParams.for_grid(w), 17)
    oracle = value_iteration(g, discount=0.99)
    learned = q.state_values()
    visited = np.asarray(q.visits).sum(axis=1) > 0
    visited[g.goal] = False
    assert np.max(np.abs(learned[visited] - oracle[visited])) <= 0.05


def test_training_is_deterministic():
    g = generate_grid(5, 1, seed=1, theta=[-0.5])
    p = QLearningParams.for_grid(5, episodes=3000)
    a, b = q_learn(g, p, 99), q_learn(g, p, 99)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.visits, b.visits)
    assert a.history == b.history and len(a.history) == 6


def test_greedy_policy_examples():
    values = np.array([[1.0, 0.5, 0.5, 0.2], [1.0, 1.0, 0.2, 0.2], [0.0, 0.0, 0.0, 0.0]])
    visits = np.array([[1, 1, 1, 1], [3, 1, 0, 0], [0, 0, 0, 0]])
    pi = greedy_policy(QTable(values, visits)).probs
    np.testing.assert_allclose(pi[0], [1, 0, 0, 0])
    np.testing.assert_allclose(pi[1], [0.5, 0.5, 0, 0])
    np.testing.assert_allclose(pi[2], [0.25] * 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4).map(lambda v: np.round(v, 1)))
def test_policy_rows_are_distributions(row):
    pi = greedy_policy(QTable(np.array([row]), np.ones((1, 4), dtype=int))).probs
    assert abs(pi.sum() - 1.0) <= 1e-9 and np.all(pi >= 0)
    assert set(np.flatnonzero(pi)) == set(np.flatnonzero(row == row.max()))


def test_policy_rejects_non_distributions():
    with pytest.raises(ValueError):
        Policy(np.array([[0.5, 0.6, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        Policy(np.array([[1.5, -0.5, 0.0, 0.0]]))


def test_params_validation():
    with pytest.raises(ValueError):
        QLearningParams(episodes=10, discount=0.0)
    with pytest.raises(ValueError):
        QLearningParams(episodes=10, learning_rate=1.5)
    with pytest.raises(ValueError):
        QLearningParams(episodes=10, exploration_rate=-0.1)
    assert QLearningParams.for_grid(7).episodes == 14000
    assert QLearningParams.for_menu(paper_scale=True).episodes == 5_000_000


def test_rollouts_satisfy_trajectory_invariants():
    g = generate_grid(5, 1, seed=2, p_slip=0.05, theta=[-0.4])
    policy = train_policy(g, QLearningParams.for_grid(5), 0)
    rng = np.random.default_rng(8)
    for _ in range(200):
        traj = simulate(g, policy, rng)
        assert traj.states[0] in g.boundary_cells()
        assert traj.length <= g.t_max
        for s, a, s2 in zip(traj.states, traj.actions, traj.states[1:]):
            assert g.transition_pmf(s, a).get(s2, 0.0) > 0.0
            assert policy.probs[s, a] > 0.0


def test_deterministic_setup_gives_unique_trajectory():
    g = generate_grid(5, 0, seed=0, p_slip=0.0)
    policy = Policy(optimal_policy_probs(g))
    start = g.cell(2, 0)
    trajs = {simulate(g, policy, np.random.default_rng(k), start=start) for k in range(10)}
    assert len(trajs) == 1


def test_rollout_successors_follow_pmf():
    g = generate_grid(3, 0, seed=0, p_slip=0.2)
    probs = optimal_policy_probs(g)
    s, a = g.cell(0, 1), 2  # pushing into the left wall
    probs[s] = 0.0
    probs[s, a] = 1.0
    policy = Policy(probs)
    rng = np.random.default_rng(21)
    firsts = np.array([simulate(g, policy, rng, start=s).states[1] for _ in range(100_000)])
    expected = np.zeros(g.n_states)
    for t, p in g.transition_pmf(s, a).items():
        expected[t] = p
    assert chi_square_p(np.bincount(firsts, minlength=g.n_states), expected) > 1e-3


def test_fast_rollouts_agree_with_python_rollouts():
    g = generate_grid(5, 1, seed=3, theta=[-0.7])
    policy = train_policy(g, QLearningParams.for_grid(5), 4)
    fast = simulate_summaries(g, policy, 20_000, 5)
    rng = np.random.default_rng(6)
    slow = [g.summarize(simulate(g, policy, rng)) for _ in range(20_000)]
    _, _, t_fast = fast.grid_arrays()
    t_slow = np.array([s.steps for s in slow])
    assert abs(t_fast.mean() - t_slow.mean()) < 4 * np.sqrt(t_fast.var() / 20_000 + t_slow.var() / 20_000)


@settings(max_examples=15, deadline=None)
@given(st.tuples(st.floats(-1, 0), st.floats(-1, 0)), st.tuples(st.floats(0, 0.5), st.floats(0, 0.5)))
def test_more_negative_weights_never_raise_values(theta, delta):
    g = generate_grid(3, 2, seed=5, theta=list(theta))
    worse = g.with_theta(np.array(theta) - np.array(delta))
    assert np.all(value_iteration(worse) <= value_iteration(g) + 1e-9)


def test_qtable_persistence(tmp_path):
    g = generate_grid(3, 1, seed=0, theta=[-0.2])
    p = QLearningParams.for_grid(3, episodes=500)
    q = q_learn(g, p, 1)
    q.save(tmp_path / "q.npz")
    back = QTable.load(tmp_path / "q.npz")
    assert np.array_equal(back.values, q.values) and back.meta == q.meta
    cache = QTableCache(tmp_path / "cache")
    first = cache.get_or_train(g, p, 1)
    assert len(list((tmp_path / "cache").iterdir())) == 1
    second = cache.get_or_train(g, p, 1)
    assert np.array_equal(first.values, second.values)
    assert cache.key(g, p, 1) != cache.key(g.with_theta([-0.3]), p, 1)
