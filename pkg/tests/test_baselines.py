import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import chisquare

from pdns import kernels
from pdns import targets as tg
from pdns._kernels_py import mh_sweeps as py_mh, sw_sweeps as py_sw
from pdns.baselines import (
    ChainConfig,
    cut_value,
    exact_interpolant,
    exact_score_fn,
    maxcut_brute,
    mh_chain,
    neighbor_table,
    sw_bond_probability,
    sw_chain,
)
from pdns.metrics import magnetization, tv_distance, two_point_corr

CFG = ChainConfig(burn_in=200, thin=5, n_samples=100, chains=100, seed=0)
# 4e4 draws from 2000 independent chains: magnetization at beta = 0.6 is bimodal with
# per-sample spread ~0.8, and MH flips the global sign only every few hundred sweeps
CFG3 = ChainConfig(burn_in=500, thin=100, n_samples=20, chains=2000, seed=0)


def _check_against_enumeration(samples, t, tol=0.02):
    """Magnetization and mean energy per site against exact enumeration."""
    states, p, _ = tg.enumerate_exact(t)
    assert abs(magnetization(samples, None, t.variant, t.q) - magnetization(states, p, t.variant, t.q)) < tol
    e_exact = float((p * tg.potential(t, states)).sum())
    assert abs(tg.potential(t, samples).mean() - e_exact) / t.n_sites < tol


@pytest.mark.parametrize("chain", [mh_chain, sw_chain])
def test_beta_zero_uniform(chain):
    t = tg.ising(3, 0.0)
    x = chain(t, ChainConfig(burn_in=10, thin=3, n_samples=100, chains=200, seed=1))
    counts = np.bincount(tg.state_index(t, x), minlength=512)
    assert chisquare(counts).pvalue > 0.01


def test_sw_bond_probability():
    assert sw_bond_probability(tg.ising(3, 0.0)) == 0.0
    assert sw_bond_probability(tg.ising(3, 0.5)) == pytest.approx(1 - np.exp(-1.0))
    with pytest.raises(ValueError):
        sw_chain(tg.maxcut(3, [(0, 1)], 1.0), CFG)


def test_sw_concentrates_at_low_temperature():
    t = tg.ising(3, 2.0)
    x = sw_chain(t, CFG)
    aligned = (x.sum(1) == 0) | (x.sum(1) == 9)
    assert aligned.mean() >= 0.95


@pytest.mark.parametrize("chain", [mh_chain, sw_chain])
@pytest.mark.parametrize("beta", [0.0, 0.3, 0.6])
@pytest.mark.parametrize("make", [lambda b: tg.ising(3, b), lambda b: tg.potts(3, 3, b)], ids=["ising", "potts"])
def test_chains_match_enumeration(chain, beta, make):
    t = make(beta)
    _check_against_enumeration(chain(t, CFG3), t)


def test_mh_ising_magnetization_beta03():
    t = tg.ising(3, 0.3)
    x = mh_chain(t, CFG)
    assert abs(magnetization(x)) < 0.02


def test_sw_two_point_beta03():
    t = tg.ising(3, 0.3)
    x = sw_chain(t, CFG)
    states, p, _ = tg.enumerate_exact(t)
    for r in (1,):
        assert abs(two_point_corr(x, 3, r) - two_point_corr(states, 3, r, p)) < 0.02


def test_mh_maxcut_runs():
    edges = tg.random_graph(6, 0.5, 0)
    t = tg.maxcut(6, edges, 0.0)
    x = mh_chain(t, ChainConfig(burn_in=10, thin=2, n_samples=50, chains=40, seed=0))
    counts = np.bincount(tg.state_index(t, x), minlength=64)
    assert chisquare(counts).pvalue > 0.01


def test_mh_and_sw_agree_on_8x8():
    t = tg.ising(8, 0.44)
    cfg = ChainConfig(burn_in=1000, thin=10, n_samples=100, chains=50, seed=3)
    a = magnetization(mh_chain(t, cfg), absolute=True)
    b = magnetization(sw_chain(t, cfg), absolute=True)
    assert abs(a - b) < 0.03


def test_exact_interpolant_examples():
    t = tg.ising(3, 0.6)
    _, p = exact_interpolant(t, 1.0)
    np.testing.assert_allclose(p, 1 / 512)
    _, p0 = exact_interpolant(t, 0.0)
    np.testing.assert_allclose(p0, tg.enumerate_exact(t)[1], rtol=1e-12)
    states, p = exact_interpolant(t, 0.5)
    # second pass: sum over states in log space without any shared code
    logp = []
    for s in tg.iter_states(t):
        x = np.array(s)
        spins = 2 * x.reshape(3, 3) - 1
        e = -(spins * np.roll(spins, -1, 1)).sum() - (spins * np.roll(spins, -1, 0)).sum()
        logp.append(0.5 * -0.6 * e + 0.5 * np.log(1 / 512))
    logp = np.array(logp)
    np.testing.assert_allclose(p, np.exp(logp - logsumexp(logp)), rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        exact_interpolant(t, 1.5)


@pytest.mark.parametrize("beta", [0.3, 0.6])
def test_interpolant_continuity(beta):
    t = tg.ising(3, beta)
    for lam in np.linspace(0, 0.99, 12):
        assert tv_distance(exact_interpolant(t, lam)[1], exact_interpolant(t, lam + 0.01)[1]) < 0.05


def test_maxcut_examples():
    assert maxcut_brute(3, [(0, 1), (1, 2), (0, 2)])[0] == 2
    best, x = maxcut_brute(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    assert best == 4 and cut_value([(0, 1), (1, 2), (2, 3), (3, 0)], x)[0] == 4
    assert maxcut_brute(5, np.zeros((0, 2), dtype=int))[0] == 0
    with pytest.raises(ValueError):
        maxcut_brute(21, [(0, 1)])


def test_maxcut_matches_energy_enumeration():
    edges = tg.random_graph(10, 0.5, 4)
    t = tg.maxcut(10, edges, 1.0)
    best, _ = maxcut_brute(10, edges)
    assert best == -tg.potential(t, tg.all_states(t)).min()


def test_exact_score_rows():
    t = tg.ising(2, 0.5)
    score = exact_score_fn(t)
    s = score(np.full((1, 4), 2))
    np.testing.assert_allclose(s.sum(-1), 1.0)
    np.testing.assert_allclose(s, 0.5)  # spin-flip symmetry with nothing visible
    states, p, _ = tg.enumerate_exact(t)
    x = np.array([[1, 2, 2, 2]])
    marg = p[states[:, 0] == 1]
    st1 = states[states[:, 0] == 1]
    expect = marg[st1[:, 1] == 1].sum() / marg.sum()
    assert score(x)[0, 1, 1] == pytest.approx(expect)


def test_neighbor_table():
    tab = neighbor_table(tg.ising(3, 0.1))
    assert tab.shape == (9, 4)
    assert sorted(tab[0].tolist()) == [1, 2, 3, 6]


def test_chain_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(thin=0)


@pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")
@pytest.mark.parametrize("potts", [0, 1])
def test_mh_kernel_parity(potts):
    t = tg.potts(4, 3, 0.7) if potts else tg.ising(4, 0.7)
    nbr = neighbor_table(t)
    rng = np.random.default_rng(0)
    C, S, n = 20, 6, t.n_sites
    x = rng.integers(0, t.alphabet, (C, n)).astype(np.int8)
    site = rng.integers(0, n, (S, C, n))
    prop = rng.integers(0, t.alphabet, site.shape) if potts else np.zeros_like(site)
    u = rng.random(site.shape)
    span = 4 if potts else 8
    table = np.minimum(1.0, np.exp(0.7 * np.arange(-span, span + 1)))
    a, b = x.copy(), x.copy()
    na = kernels.compiled.mh_sweeps(a, nbr, site, prop, u, table, span, potts)
    nb = py_mh(b, nbr, site, prop, u, table, span, potts)
    np.testing.assert_array_equal(a, b)
    assert na == nb


@pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")
def test_sw_kernel_parity():
    t = tg.ising(5, 0.5)
    edges = np.ascontiguousarray(t.edges, dtype=np.int64)
    rng = np.random.default_rng(1)
    C, S = 15, 4
    x = rng.integers(0, 2, (C, t.n_sites)).astype(np.int8)
    bond_u = rng.random((S, C, len(edges)))
    newval = rng.integers(0, 2, (S, C, t.n_sites))
    a, b = x.copy(), x.copy()
    kernels.compiled.sw_sweeps(a, edges, bond_u, newval, 0.6)
    py_sw(b, edges, bond_u, newval, 0.6)
    np.testing.assert_array_equal(a, b)


def test_pure_python_fallback_selected_by_env():
    env = dict(os.environ, PDNS_PURE_PYTHON="1")
    code = (
        "import numpy as np; from pdns import kernels, targets as tg; from pdns.baselines import mh_chain, ChainConfig;"
        "x = mh_chain(tg.ising(3, 0.3), ChainConfig(20, 2, 5, 4, 0)); print(kernels.BACKEND_NAME, x.shape)"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split()[0] == "numpy"


@pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")
def test_backends_give_identical_chains():
    env = dict(os.environ, PDNS_PURE_PYTHON="1")
    code = (
        "import numpy as np, sys; from pdns import targets as tg; from pdns.baselines import sw_chain, ChainConfig;"
        "x = sw_chain(tg.ising(3, 0.4), ChainConfig(20, 2, 5, 4, 7)); sys.stdout.write(x.tobytes().hex())"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    here = sw_chain(tg.ising(3, 0.4), ChainConfig(20, 2, 5, 4, 7))
    assert out.stdout == here.tobytes().hex()
