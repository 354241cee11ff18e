"""Time the compiled MCMC kernels against the numpy fallback on identical inputs.

    python3 benchmarks/bench_kernels.py [--L 16] [--chains 64] [--sweeps 20] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from pdns import _kernels_py as fallback
from pdns import kernels
from pdns import targets as tg
from pdns.baselines import neighbor_table, sw_bond_probability


def mh_inputs(t, chains, sweeps, seed=0):
    rng = np.random.default_rng(seed)
    potts = int(t.variant == "Potts")
    nbr = neighbor_table(t)
    span = nbr.shape[1] if potts else 2 * nbr.shape[1]
    table = np.minimum(1.0, np.exp(t.beta * t.J * np.arange(-span, span + 1)))
    x = rng.integers(0, t.alphabet, (chains, t.n_sites)).astype(np.int8)
    site = rng.integers(0, t.n_sites, (sweeps, chains, t.n_sites))
    prop = rng.integers(0, t.alphabet, site.shape) if potts else np.zeros_like(site)
    u = rng.random(site.shape)
    return x, (nbr, site, prop, u, table, span, potts)


def sw_inputs(t, chains, sweeps, seed=0):
    rng = np.random.default_rng(seed)
    edges = np.ascontiguousarray(t.edges, dtype=np.int64)
    x = rng.integers(0, t.alphabet, (chains, t.n_sites)).astype(np.int8)
    bond_u = rng.random((sweeps, chains, len(edges)))
    newval = rng.integers(0, t.alphabet, (sweeps, chains, t.n_sites))
    return x, (edges, bond_u, newval, float(sw_bond_probability(t)))


def bench(fn, x0, args, repeat):
    def run():
        fn(x0.copy(), *args)

    return min(timeit.repeat(run, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=int, default=16)
    ap.add_argument("--chains", type=int, default=64)
    ap.add_argument("--sweeps", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    if kernels.compiled is None:
        print("compiled extension not available; build it with `pip install -e .` first")
        return
    cases = [
        ("mh ising", kernels.compiled.mh_sweeps, fallback.mh_sweeps, mh_inputs, tg.ising(a.L, 0.44)),
        ("mh potts", kernels.compiled.mh_sweeps, fallback.mh_sweeps, mh_inputs, tg.potts(a.L, 3, 1.0)),
        ("sw ising", kernels.compiled.sw_sweeps, fallback.sw_sweeps, sw_inputs, tg.ising(a.L, 0.44)),
        ("sw potts", kernels.compiled.sw_sweeps, fallback.sw_sweeps, sw_inputs, tg.potts(a.L, 3, 1.0)),
    ]
    print(f"L={a.L} chains={a.chains} sweeps={a.sweeps} (best of {a.repeat})")
    print(f"{'kernel':<10}{'cython s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, fast, slow, make, t in cases:
        x0, args = make(t, a.chains, a.sweeps)
        xa, xb = x0.copy(), x0.copy()
        fast(xa, *args)
        slow(xb, *args)
        assert np.array_equal(xa, xb), f"{name}: backends disagree"
        tf, ts = bench(fast, x0, args, a.repeat), bench(slow, x0, args, a.repeat)
        print(f"{name:<10}{tf:>12.4f}{ts:>12.4f}{ts / tf:>9.1f}x")


if __name__ == "__main__":
    main()
