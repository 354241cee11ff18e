import numpy as np
import pytest
from scipy.integrate import solve_ivp

from pdns import targets as tg
from pdns.approximator import ControlNetSpec, init_params
from pdns.ou import OUSchedule, TerminalReward
from pdns.sde import Rollout, annealed_rollout, rollout, soc_cost


def constant_control(d, c):
    spec = ControlNetSpec(d, hidden=(4,), time_features=1)
    store = init_params(spec, np.random.default_rng(0))
    store.params[-1][:] = c
    return store, spec


def random_control(d, seed=0, scale=0.5):
    spec = ControlNetSpec(d, hidden=(16,), time_features=2)
    store = init_params(spec, np.random.default_rng(seed), zero_last=False)
    for p in store.params:
        p *= scale
    return store, spec


def test_zero_control_has_zero_weight():
    spec = ControlNetSpec(2, hidden=(8,), time_features=2)
    store = init_params(spec, np.random.default_rng(0))
    rec = rollout(store, spec, OUSchedule(K=20), 50, np.random.default_rng(1))
    np.testing.assert_array_equal(rec.log_rn, 0.0)
    np.testing.assert_array_equal(rec.control_energy, 0.0)


def test_martingale_identity():
    store, spec = random_control(2)
    rec = rollout(store, spec, OUSchedule(K=50), 100_000, np.random.default_rng(2))
    w = np.exp(rec.log_rn)
    se = w.std() / np.sqrt(w.size)
    assert abs(w.mean() - 1) < 3 * se
    assert np.all(rec.control_energy >= 0)


@pytest.mark.parametrize("seed", [3, 4])
def test_martingale_identity_other_nets(seed):
    store, spec = random_control(1, seed)
    rec = rollout(store, spec, OUSchedule(K=40), 20_000, np.random.default_rng(seed))
    w = np.exp(rec.log_rn)
    assert abs(w.mean() - 1) < 4 * w.std() / np.sqrt(w.size)


def _mean_ode(sched, c):
    sol = solve_ivp(lambda t, m: -0.5 * sched.alpha(t) * m + sched.sigma(t) * c, (0, sched.T), [0.0], rtol=1e-12, atol=1e-12)
    return sol.y[0, -1]


def test_constant_control_terminal_mean():
    c = 0.7
    sched = OUSchedule(K=400)
    store, spec = constant_control(1, c)
    x = rollout(store, spec, sched, 100_000, np.random.default_rng(0)).x_T[:, 0]
    assert abs(x.mean() - _mean_ode(sched, c)) < 4 * x.std() / np.sqrt(x.size)


def test_discretization_is_first_order():
    # same seed => identical Brownian draws; additive noise cancels exactly in the difference
    c = 1.0
    store, spec = constant_control(1, c)
    means = []
    for K in (5, 10, 20, 40, 80):
        s = OUSchedule(1.0, 1.0, 3.0, 1.0, K, memoryless_tol=0.9)
        a = rollout(store, spec, s, 1000, np.random.default_rng(K)).x_T
        b = rollout(None, None, s, 1000, np.random.default_rng(K), dim=1).x_T
        means.append(float((a - b).mean()))
    diffs = np.abs(np.diff(means))
    ratios = diffs[:-1] / diffs[1:]
    assert np.all((ratios >= 1.5) & (ratios <= 3.0)), ratios
    exact = _mean_ode(OUSchedule(1.0, 1.0, 3.0, 1.0, 2, memoryless_tol=0.9), c)
    assert abs(means[-1] - exact) < abs(means[0] - exact)


def test_reproducible_bitwise():
    store, spec = random_control(3)
    a = rollout(store, spec, OUSchedule(K=30), 64, np.random.default_rng(9))
    b = rollout(store, spec, OUSchedule(K=30), 64, np.random.default_rng(9))
    np.testing.assert_array_equal(a.x_T, b.x_T)
    np.testing.assert_array_equal(a.log_rn, b.log_rn)


def test_rollout_validation():
    with pytest.raises(ValueError):
        rollout(None, None, OUSchedule(), 0, np.random.default_rng(0), dim=1)
    with pytest.raises(ValueError):
        rollout(None, None, OUSchedule(), 5, np.random.default_rng(0))


def test_soc_cost_examples():
    flat = TerminalReward(tg.many_well(3, beta=0.0), include_constants=False)
    rec = rollout(None, None, OUSchedule(K=500), 50_000, np.random.default_rng(0), dim=3)
    rec.control_energy = np.zeros(len(rec.log_rn))
    assert soc_cost(rec, flat) == pytest.approx(-1.5, abs=0.02)
    one = Rollout(np.zeros((1, 1)), np.zeros(1), np.array([2.0]))
    tr = TerminalReward(tg.gmm([[0.0]], 1.0, beta=0.0), include_constants=False)
    assert soc_cost(one, tr) == pytest.approx(2.0)  # r(0) = 0
    # r(1) = 1/2, and the Gaussian constant shifts r by log sqrt(2 pi)
    x = np.array([[1.0]])
    rec = Rollout(x, np.zeros(1), np.array([2.0]))
    base = soc_cost(rec, tr)
    assert base == pytest.approx(2.0 - 0.5)
    shifted = TerminalReward(tg.gmm([[0.0]], 1.0, beta=0.0), include_constants=True)
    assert soc_cost(rec, shifted) == pytest.approx(base - 0.5 * np.log(2 * np.pi))


def test_soc_cost_accepts_record_list():
    rec = Rollout(np.zeros((2, 1)), np.zeros(2), np.array([1.0, 3.0]))
    tr = TerminalReward(tg.gmm([[0.0]], 1.0, beta=0.0), include_constants=False)
    assert soc_cost(list(rec), tr) == pytest.approx(2.0)


def test_annealed_rollout_examples():
    # a flat potential is improper; the target equal to nu is the meaningful null case
    nu = TerminalReward(tg.gmm([[0.0, 0.0]], 1.5), sigma_bar=1.5)
    x = annealed_rollout(nu, OUSchedule(sigma_bar=1.5, K=500), 50_000, np.random.default_rng(0))
    np.testing.assert_allclose(x.mean(0), 0.0, atol=0.03)
    np.testing.assert_allclose(x.var(0), 2.25, rtol=0.03)
    tr = TerminalReward(tg.gmm([[2.0]], 0.5))
    y = annealed_rollout(tr, OUSchedule(K=100), 5000, np.random.default_rng(1))
    assert 1.5 <= y.mean() <= 2.5
    assert annealed_rollout(tr, OUSchedule(), 0, np.random.default_rng(0)).shape == (0, 1)
