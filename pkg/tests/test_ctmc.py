from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdns import targets as tg
from pdns.approximator import ScoreNetSpec, init_params
from pdns.baselines import exact_score_fn
from pdns.ctmc import mask_corrupt, rollout_discrete, unmask_prob
from pdns.metrics import logz_estimate, tv_distance
from pdns.ou import TerminalReward


def test_unmask_prob_examples():
    assert unmask_prob(0.0, 0.25) == 0.25
    assert unmask_prob(0.75, 0.25) == 1.0
    assert unmask_prob(0.5, 0.25) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        unmask_prob(0.9, 0.25)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(1, 50))
def test_expected_unmaskings_telescope(K, d):
    dt = 1.0 / K
    alive, total = 1.0, 0.0
    for k in range(K):
        p = unmask_prob(k * dt, dt)
        total += alive * p
        alive *= 1 - p
    assert d * total == pytest.approx(d, rel=1e-9)
    assert alive == pytest.approx(0.0, abs=1e-12)


def test_uniform_net_zero_weight_and_jump_count():
    spec = ScoreNetSpec(6, 3, hidden=(8,))
    store = init_params(spec, np.random.default_rng(0))
    rec = rollout_discrete(store, spec, 16, 200, np.random.default_rng(1))
    np.testing.assert_allclose(rec.log_rn, 0.0, atol=1e-12)
    np.testing.assert_array_equal(rec.n_jumps, 6)
    assert np.all(rec.x_T < 3)
    ref = rollout_discrete(None, spec, 16, 200, np.random.default_rng(1))
    np.testing.assert_array_equal(ref.log_rn, 0.0)
    np.testing.assert_array_equal(ref.n_jumps, 6)


# score table of a 2-site binary chain, keyed by the visible state
_TABLE = {
    (2, 2): [[0.7, 0.3], [0.2, 0.8]],
    (0, 2): [[0.5, 0.5], [0.9, 0.1]],
    (1, 2): [[0.5, 0.5], [0.4, 0.6]],
    (2, 0): [[0.5, 0.5], [0.5, 0.5]],
    (2, 1): [[0.1, 0.9], [0.5, 0.5]],
}


def _table_score(x):
    return np.array([_TABLE.get(tuple(r), [[0.5, 0.5], [0.5, 0.5]]) for r in np.asarray(x).tolist()])


def _exact_order_value_law():
    law = {}
    for first in (0, 1):
        second = 1 - first
        for a in (0, 1):
            state = [2, 2]
            p1 = _TABLE[(2, 2)][first][a]
            state[first] = a
            for b in (0, 1):
                p2 = _TABLE[tuple(state)][second][b]
                vals = [0, 0]
                vals[first], vals[second] = a, b
                law[(first, *vals)] = 0.5 * p1 * p2
    return law


def test_enumeration_oracle_orders_and_values():
    spec = ScoreNetSpec(2, 2, hidden=(2,))
    rng = np.random.default_rng(0)
    n = 100_000
    rec = rollout_discrete(_table_score, spec, 128, n, rng, record_order=True)
    o = rec.order
    coin = rng.integers(0, 2, n)  # ties (same step) are ordered at random
    first = np.where(o[:, 0] < o[:, 1], 0, np.where(o[:, 0] > o[:, 1], 1, coin))
    counts = Counter(zip(first.tolist(), rec.x_T[:, 0].tolist(), rec.x_T[:, 1].tolist()))
    law = _exact_order_value_law()
    keys = sorted(law)
    emp = np.array([counts[k] / n for k in keys])
    assert tv_distance(emp, [law[k] for k in keys]) < 0.02


def test_terminal_law_matches_marginalization_d3():
    t = tg.DiscreteTarget("Potts", 3, np.array([[0, 1], [1, 2]]), 1.0, 3, 0.8, None)
    states, probs, _ = tg.enumerate_exact(t)
    spec = ScoreNetSpec(3, 3, hidden=(2,))
    rec = rollout_discrete(exact_score_fn(t), spec, 128, 100_000, np.random.default_rng(2))
    emp = np.bincount(tg.state_index(t, rec.x_T), minlength=len(states)) / len(rec)
    assert tv_distance(emp, probs) < 0.02


def _random_net(d, N, seed, scale=1.5):
    spec = ScoreNetSpec(d, N, hidden=(8,))
    store = init_params(spec, np.random.default_rng(seed), zero_last=False)
    for p in store.params:
        p *= scale
    return store, spec


def test_martingale_identity():
    store, spec = _random_net(4, 3, 0)
    rec = rollout_discrete(store, spec, 32, 100_000, np.random.default_rng(3))
    w = np.exp(rec.log_rn)
    assert abs(w.mean() - 1) < 4 * w.std() / np.sqrt(w.size)


def test_weight_depends_only_on_order_and_values():
    store, spec = _random_net(3, 2, 1)
    rec = rollout_discrete(store, spec, 6, 4000, np.random.default_rng(4), record_order=True)
    groups = defaultdict(list)
    for o, x, lw in zip(rec.order, rec.x_T, rec.log_rn):
        rank = tuple(np.unique(o, return_inverse=True)[1].tolist())
        groups[(rank, tuple(x.tolist()))].append(lw)
    assert len(groups) > 10
    for vals in groups.values():
        np.testing.assert_allclose(vals, vals[0], rtol=1e-12, atol=1e-12)


def test_exact_conditionals_recover_partition_function():
    t = tg.ising(3, 0.3)
    spec = ScoreNetSpec(9, 2, hidden=(2,))
    rec = rollout_discrete(exact_score_fn(t), spec, 128, 20_000, np.random.default_rng(5))
    est, _ = logz_estimate(rec, TerminalReward(t))
    assert abs(np.exp(est - tg.enumerate_exact(t)[2]) - 1) < 0.02


def test_zero_score_rows_are_floored():
    spec = ScoreNetSpec(2, 2, hidden=(2,))

    def hard(x):
        s = np.zeros((len(x), 2, 2))
        s[:, :, 0] = 1.0
        return s

    rec = rollout_discrete(hard, spec, 4, 50, np.random.default_rng(0))
    np.testing.assert_array_equal(rec.x_T, 0)
    assert np.all(np.isfinite(rec.log_rn))
    assert rec.n_floored > 0


def test_mask_corrupt_examples():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, 10_000)
    np.testing.assert_array_equal(mask_corrupt(x, 1.0, rng, 2), 2)
    m = (mask_corrupt(x, 0.5, rng, 2) == 2).sum()
    assert abs(m - 5000) <= 4 * np.sqrt(10_000 * 0.25)
    a = mask_corrupt(x, 0.3, np.random.default_rng(7), 2)
    b = mask_corrupt(x, 0.3, np.random.default_rng(7), 2)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        mask_corrupt(x, 0.0, rng, 2)
    rows = mask_corrupt(np.zeros((2, 500), dtype=int), np.array([1.0, 0.1]), rng, 2)
    assert np.all(rows[0] == 2) and (rows[1] == 2).mean() < 0.2
