import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from dpgreedy.summation import (BudgetError, ConfigurationError, ContinualTree, HorizonError,
                                NoiseModel, PrivacyBudget, QueryError, SummationQuery,
                                aggregate_by_key, continual_sum, exact_sum, gaussian_sigma,
                                gaussian_sum, group_privacy_lift, laplace_scale, laplace_sum,
                                lemma_tree_bound, node_interval, tree_decomposition, tree_levels)


def bins_query(width=0.25, b=1, dim=1):
    """Each point falls in b interval sets; the value is a constant unit vector."""

    def incidence(points):
        x = points[:, 0]
        base = np.floor(x / width).astype(np.int64)
        rows = np.repeat(np.arange(len(points)), b)
        keys = (base[:, None] + 1000 * np.arange(b)[None]).reshape(-1, 1)
        vecs = np.zeros((len(rows), dim))
        vecs[:, 0] = 1.0
        return rows, keys, vecs

    return SummationQuery(incidence, dim, b, name="bins")


def loop_sums(points, weights, width=0.25, b=1):
    out = {}
    for p, w in zip(points, weights):
        base = int(math.floor(p[0] / width))
        for j in range(b):
            out[(base + 1000 * j,)] = out.get((base + 1000 * j,), 0.0) + w
    return out


@pytest.mark.parametrize("b", [1, 2, 3])
def test_exact_sum_matches_loop(rng, b):
    pts = rng.uniform(-1, 1, size=(200, 1))
    w = rng.integers(1, 4, size=200)
    table = exact_sum(bins_query(b=b), make_dataset(pts, w))
    assert {k: v[0] for k, v in table.as_dict().items()} == pytest.approx(loop_sums(pts, w, b=b))


def test_aggregate_by_key_order_and_sums():
    keys = np.array([[3], [1], [3], [2]])
    vecs = np.array([[1.0], [2.0], [4.0], [8.0]])
    uk, s = aggregate_by_key(keys, vecs)
    assert uk.ravel().tolist() == [1, 2, 3]
    assert s.ravel().tolist() == [2.0, 8.0, 5.0]


def test_query_validation():
    bad = SummationQuery(lambda p: (np.array([0, 0]), np.array([[1], [2]]), np.ones((2, 1))), 1, 1)
    with pytest.raises(QueryError):
        bad.validate(make_dataset([[0.0]]))
    big = SummationQuery(lambda p: (np.array([0]), np.array([[1]]), np.full((1, 1), 2.0)), 1, 1)
    with pytest.raises(QueryError):
        big.validate(make_dataset([[0.0]]))


def test_laplace_variance():
    q = bins_query()
    data = make_dataset([[0.1]])
    eps = 0.7
    draws = []
    for s in range(4000):
        t = laplace_sum(q, data, epsilon=eps, rng=s)
        draws.append(t.lookup((0,))[0] - 1.0)
    scale = laplace_scale(1, 1, eps)
    # 4000 draws put the sample variance within about 4% (one sd) of the truth
    assert np.var(draws) == pytest.approx(2 * scale ** 2, rel=0.12)
    big = NoiseModel("laplace", scale).sample(np.random.default_rng(0), 200_000)
    assert np.var(big) == pytest.approx(2 * scale ** 2, rel=0.05)


def test_gaussian_sigma_and_variance():
    sigma = gaussian_sigma(1, 1.0, 1e-6)
    assert sigma == pytest.approx(math.sqrt(2 * math.log(1.25e6)) * 2)
    x = NoiseModel("gaussian", sigma).sample(np.random.default_rng(1), 200_000)
    assert np.var(x) == pytest.approx(sigma ** 2, rel=0.05)
    with pytest.raises(ConfigurationError):
        gaussian_sigma(1, 1.0, 0.0)


def test_multi_term_noise_std():
    m = NoiseModel("laplace", 2.0, terms=3)
    x = m.sample(np.random.default_rng(2), 100_000)
    assert np.std(x) == pytest.approx(m.std, rel=0.05)


def test_untouched_keys_get_memoized_noise():
    t = laplace_sum(bins_query(), make_dataset([[0.1]]), epsilon=1.0, rng=3)
    a = t.lookup((77,))
    assert a[0] != 0.0
    assert t.lookup((77,))[0] == a[0]
    assert (77,) not in t


def test_noise_disabled_is_exact_and_marked():
    budget = PrivacyBudget(1.0)
    pts = [[0.1], [0.2], [0.9]]
    t = laplace_sum(bins_query(), make_dataset(pts), budget, noise=False)
    assert t.lookup((0,))[0] == 2.0
    assert budget.ledger[0].mechanism == "laplace:noise-disabled"
    assert budget.ledger[0].private is False


def test_gaussian_sum_charges_delta():
    budget = PrivacyBudget(1.0, 1e-5)
    gaussian_sum(bins_query(), make_dataset([[0.1]]), budget, rng=0)
    assert budget.spent_delta == pytest.approx(1e-5)
    assert budget.remaining_epsilon == pytest.approx(0.0)


def test_group_lift_structure(rng):
    pts = rng.uniform(-1, 1, size=(50, 1))
    w = rng.integers(1, 3, size=50)
    data = make_dataset(pts, w)
    lift = group_privacy_lift(bins_query(b=3), data)
    assert lift.size == 3 * data.n
    assert np.all(np.bincount(lift.source) == 3)
    assert lift.epsilon_factor == pytest.approx(1 / 3)
    assert lift.delta_factor == pytest.approx(1 / 9)
    lifted = {k: v[0] for k, v in lift.sums().as_dict().items()}
    assert lifted == pytest.approx(loop_sums(pts, w, b=3))


def test_group_lift_pads():
    def sparse(points):
        # first point in two sets, second in none
        return np.array([0, 0]), np.array([[1], [2]]), np.ones((2, 1))

    q = SummationQuery(sparse, 1, 2)
    lift = group_privacy_lift(q, make_dataset([[0.0], [0.5]]))
    assert lift.is_pad.tolist() == [False, False, True, True]
    assert np.all(lift.vectors[lift.is_pad] == 0)


# -- budget ----------------------------------------------------------------

def test_budget_composition_and_overspend():
    b = PrivacyBudget(1.0, 1e-6)
    b.charge("a", 0.4)
    b.charge("b", 0.6, 1e-6)
    assert b.spent_epsilon == pytest.approx(1.0)
    with pytest.raises(BudgetError):
        b.charge("c", 1e-3)
    with pytest.raises(BudgetError):
        PrivacyBudget(1.0, 1e-6).charge("d", 0.1, 2e-6)


def test_child_budgets_forward_charges():
    root = PrivacyBudget(1.0)
    runs = root.split(4)
    for r in runs:
        r.charge("x", 0.25)
    assert [e.mechanism for e in root.ledger] == [f"run{i}/x" for i in range(4)]
    assert root.spent_epsilon == pytest.approx(1.0)
    with pytest.raises(BudgetError):
        runs[0].charge("y", 0.01)


def test_detached_absorb():
    root = PrivacyBudget(1.0)
    part = root.detached(0.5, label="p")
    part.charge("m", 0.5)
    assert root.ledger == []
    root.absorb(part)
    assert root.ledger[0].mechanism == "p/m"


@pytest.mark.parametrize("eps,delta", [(0, 0), (-1, 0), (1, 1), (1, -0.1)])
def test_budget_rejects_bad_parameters(eps, delta):
    with pytest.raises(ConfigurationError):
        PrivacyBudget(eps, delta)


# -- tree mechanism -----------------------------------------------------

def test_tree_levels():
    assert tree_levels(1) == 1
    assert tree_levels(7) == 3
    assert tree_levels(8) == 4
    with pytest.raises(ValueError):
        tree_levels(0)


@given(st.integers(1, 1024))
@settings(max_examples=200, deadline=None)
def test_decomposition_partitions_prefix(t):
    nodes = tree_decomposition(t, 1024)
    covered = []
    for node in nodes:
        lo, hi = node_interval(node)
        covered.extend(range(lo, hi + 1))
    assert covered == list(range(1, t + 1))
    assert len(nodes) == bin(t).count("1")


def test_decomposition_beyond_horizon():
    with pytest.raises(HorizonError):
        tree_decomposition(9, 8)


@pytest.mark.parametrize("T", [1, 5, 16, 33])
def test_tree_noise_free_matches_prefix_sums(rng, T):
    tree = ContinualTree(T, 2, None, noise=False)
    running = {}
    for t in range(1, T + 1):
        keys = rng.integers(0, 4, size=(3, 1))
        vecs = rng.normal(size=(3, 2))
        tree.step(keys, vecs)
        for k, v in zip(keys, vecs):
            running[int(k[0])] = running.get(int(k[0]), 0) + v
        got = tree.query(t).as_dict()
        assert set(got) == {(k,) for k in running}
        for k, v in running.items():
            assert np.allclose(got[(k,)], v, atol=1e-12)


def test_tree_insert_delete_returns_to_zero():
    tree = ContinualTree(8, 1, None, noise=False)
    tree.step([[5]], [[1.0]])
    tree.step([[5]], [[-1.0]])
    assert tree.query(1).lookup((5,))[0] == 1.0
    assert tree.query(2).lookup((5,))[0] == 0.0


def test_tree_noise_is_the_node_sum():
    T = 16
    tree = ContinualTree(T, 1, None, epsilon=1.0, delta=0.0, seed=4)
    tree.step([[0]], [[0.0]])
    for _ in range(T - 1):
        tree.step()
    # noise at t = 8 comes from one node, at t = 15 from four nodes
    noise = [tree.query(t).lookup((0,))[0] for t in range(1, T + 1)]
    assert noise[7] != noise[14]
    assert tree._offsets[0, 0, 0] == 0.0


def test_tree_noise_deterministic_in_seed():
    a = ContinualTree(8, 1, None, epsilon=1.0, seed=11)
    b = ContinualTree(8, 1, None, epsilon=1.0, seed=11)
    for tr in (a, b):
        tr.step([[3]], [[1.0]])
    assert a.query(1).lookup((3,))[0] == b.query(1).lookup((3,))[0]


def test_tree_horizon_and_query_errors():
    tree = ContinualTree(2, 1, None, noise=False)
    tree.step()
    with pytest.raises(HorizonError):
        tree.query(2)
    tree.step()
    with pytest.raises(HorizonError):
        tree.step()


def test_tree_charges_once():
    b = PrivacyBudget(1.0, 1e-6)
    ContinualTree(8, 1, b, epsilon=0.5, delta=5e-7, name="t")
    assert len(b.ledger) == 1
    assert b.ledger[0].mechanism == "t:continual-gaussian"


def test_continual_sum_stream():
    q = bins_query()
    stream = [("ins", [0.1]), ("nop", None), ("ins", [0.15]), ("del", [0.1])]
    tables = continual_sum(q, stream, None, 4, noise=False)
    assert [t.lookup((0,))[0] for t in tables] == [1.0, 1.0, 2.0, 1.0]
    with pytest.raises(HorizonError):
        continual_sum(q, stream, None, 3, noise=False)


def test_lemma_tree_bound_holds_empirically():
    T = 64
    bound = lemma_tree_bound(T, 1.0, 1e-6, beta=0.05)
    fails = 0
    for s in range(100):
        tree = ContinualTree(T, 1, None, epsilon=1.0, delta=1e-6, seed=s)
        tree.step([[0]], [[0.0]])
        for _ in range(T - 1):
            tree.step()
        err = max(abs(tree.query(t).lookup((0,))[0]) for t in range(1, T + 1))
        fails += err > bound
    assert fails <= 10
