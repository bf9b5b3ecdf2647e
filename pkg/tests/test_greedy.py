import math

import numpy as np
import pytest
from scipy import stats

from conftest import make_dataset
from dpgreedy.data import dataset_cost, planted_clusters
from dpgreedy.geometry import BallHierarchy, uniform_in_ball
from dpgreedy.greedy import (BallValues, ExactSelector, ExponentialSelector, NoisyMaxSelector,
                             ValueOracle, ball_value, ball_value_query, centralized_dp_greedy,
                             greedy_epsilon_prime, run_greedy, select_max_up_to_theta)
from dpgreedy.summation import ConfigurationError, NoiseModel, PrivacyBudget, laplace_sum


def test_exact_selector_breaks_ties_by_key():
    keys = np.array([[2, 5], [1, 9], [1, 3]])
    assert ExactSelector().choose(np.array([1.0, 1.0, 1.0]), keys, 0, None) == 2
    assert ExactSelector().choose(np.array([1.0, 2.0, 1.0]), keys, 0, None) == 1


def test_all_zero_values_fall_back_to_lowest_key():
    keys = np.array([[3], [1], [2]])
    assert select_max_up_to_theta([0.0, 0.0, 0.0], ExactSelector(), keys=keys) == 1


def test_select_needs_candidates():
    with pytest.raises(ValueError):
        select_max_up_to_theta([], ExactSelector())


def test_exponential_selector_frequencies():
    vals = np.array([0.0, 1.0, 2.0, 3.0])
    sel = ExponentialSelector(1.0)
    rng = np.random.default_rng(0)
    draws = [sel.choose(vals, None, 0, rng) for _ in range(20_000)]
    p = np.exp(vals / 2)
    p /= p.sum()
    obs = np.bincount(draws, minlength=4)
    assert stats.chisquare(obs, p * len(draws)).pvalue > 1e-3


def test_exponential_selector_group_weight():
    # one explicit zero-valued candidate against a group of three zero-valued balls
    sel = ExponentialSelector(1.0)
    rng = np.random.default_rng(1)
    hits = sum(sel.choose(np.array([0.0]), None, 3.0, rng) == -1 for _ in range(20_000))
    assert hits / 20_000 == pytest.approx(0.75, abs=0.015)


def test_exponential_selector_rejects_bad_epsilon():
    with pytest.raises(ConfigurationError):
        ExponentialSelector(0.0)


def test_noisy_max_without_noise_is_exact():
    sel = NoisyMaxSelector()
    assert not sel.needs_group
    assert sel.choose(np.array([0.5, 3.0, 1.0]), np.arange(3)[:, None], 0, None) == 1


def test_noisy_max_group_wins_against_small_values():
    sel = NoisyMaxSelector(NoiseModel("laplace", 5.0))
    rng = np.random.default_rng(2)
    assert sel.choose(np.array([0.1]), np.zeros((1, 1)), 1e6, rng) == -1
    assert sel.last_group_value > 0.1


def test_ball_values_match_direct_sums(rng):
    pts = uniform_in_ball(rng, 120, 2)
    data = make_dataset(pts, rng.integers(1, 3, size=120))
    h = BallHierarchy(2, max_level=5)
    vals = BallValues.from_data(data, h)
    for lvl in range(1, 6):
        lt = vals.levels[lvl]
        for i in rng.choice(len(lt.values), size=min(10, len(lt.values)), replace=False):
            assert lt.values[i] == pytest.approx(ball_value(data, lt.centers[i], lt.radius))


def test_ball_value_query_agrees_with_from_data(rng):
    pts = uniform_in_ball(rng, 60, 2)
    data = make_dataset(pts)
    h = BallHierarchy(2, max_level=4)
    table = laplace_sum(ball_value_query(h), data, epsilon=1.0, noise=False)
    direct = BallValues.from_data(data, h)
    from_table = BallValues.from_table(table, h)
    for lvl in range(1, 5):
        a, b = direct.levels[lvl], from_table.levels[lvl]
        assert np.array_equal(a.idx, b.idx)
        assert np.allclose(a.values, b.values)


def test_two_far_clusters_get_one_center_each():
    pts = np.array([[-0.6, 0.0]] * 20 + [[0.6, 0.0]] * 20) + np.linspace(0, 0.01, 40)[:, None]
    data = make_dataset(pts)
    # the forbidden radius is 100 r, so heads must come from levels with 100 r < 1.2
    h = BallHierarchy(2, max_level=9)
    sol = run_greedy(data, 2, ValueOracle.exact(data, h), h, rng=0)
    xs = sorted(sol.centers[:, 0])
    assert xs[0] < -0.4 and xs[1] > 0.4


def test_single_point_first_center_nearby():
    data = make_dataset([[0.3, -0.2]])
    h = BallHierarchy(2, max_level=6)
    sol = run_greedy(data, 1, ValueOracle.exact(data, h), h, rng=0)
    assert np.linalg.norm(sol.centers[0] - [0.3, -0.2]) <= h.radius(6)


def test_prefix_costs_do_not_increase():
    data, _, _ = planted_clusters(300, 3, rng=np.random.default_rng(5))
    h = BallHierarchy(2, 300)
    sol = run_greedy(data, 6, ValueOracle.exact(data, h), h, rng=0)
    costs = [dataset_cost(data, sol.prefix(k)) for k in range(1, 7)]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    assert sol.K == 6 and len(sol.degenerate) == 6


def test_exact_greedy_deterministic():
    data, _, _ = planted_clusters(200, 3, rng=np.random.default_rng(6))
    h = BallHierarchy(2, 200)
    a = run_greedy(data, 3, ValueOracle.exact(data, h), h, rng=0).centers
    b = run_greedy(data, 3, ValueOracle.exact(data, h), h, rng=99).centers
    assert np.array_equal(a, b)


def test_centers_respect_forbidden_rule():
    data, _, _ = planted_clusters(300, 4, rng=np.random.default_rng(7))
    h = BallHierarchy(2, 300)
    sol = run_greedy(data, 4, ValueOracle.exact(data, h), h, rng=0)
    for i, seq in enumerate(sol.sequences):
        if not seq:
            continue
        head_level = seq[0][0]
        r = h.radius(head_level)
        head = h.ball(head_level, seq[0][1:]).center
        for c in sol.centers[:i]:
            assert np.linalg.norm(np.asarray(head) - c) > h.forbidden_scale * r


def test_bad_K():
    data = make_dataset([[0.0, 0.0], [0.1, 0.0]])
    h = BallHierarchy(2, 2)
    with pytest.raises(ValueError):
        run_greedy(data, 3, ValueOracle.exact(data, h), h)
    with pytest.raises(ValueError):
        run_greedy(data, 0, ValueOracle.exact(data, h), h)


def test_greedy_epsilon_prime():
    assert greedy_epsilon_prime(1.0, 1000, 1e-6) == pytest.approx(1 / (4 * math.log(1e9)))
    with pytest.raises(ConfigurationError):
        greedy_epsilon_prime(1.0, 10, 0.0)


def test_centralized_greedy_charges_once():
    data, _, _ = planted_clusters(200, 2, rng=np.random.default_rng(8))
    budget = PrivacyBudget(1.0, 1e-6)
    sol = centralized_dp_greedy(data, 3, budget, rng=1)
    assert sol.K == 3
    assert len(budget.ledger) == 1
    assert budget.ledger[0].mechanism == "exponential-greedy"
    assert budget.spent_epsilon == pytest.approx(1.0)


def test_greedy_on_noisy_table_runs():
    data, _, _ = planted_clusters(200, 2, rng=np.random.default_rng(9))
    h = BallHierarchy(2, 200)
    table = laplace_sum(ball_value_query(h), data, epsilon=1.0, rng=3)
    sol = run_greedy(None, 3, ValueOracle.noisy_table(table, h, n=data.n), h, rng=4)
    assert sol.centers.shape == (3, 2)
    assert np.all(np.linalg.norm(sol.centers, axis=1) <= 1 + h.radius(h.max_level))
