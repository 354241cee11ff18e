"""Ground-truth generators: MH and Swendsen-Wang chains, exact interpolants, brute-force max-cut."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .targets import DiscreteTarget, all_states, potential

MAX_BRUTE_VERTICES = 20


@dataclass(frozen=True)
class ChainConfig:
    burn_in: int = 10_000
    thin: int = 10
    n_samples: int = 100
    chains: int = 100
    seed: int = 0
    block: int = 32

    def __post_init__(self):
        if min(self.thin, self.n_samples, self.chains, self.block) < 1 or self.burn_in < 0:
            raise ValueError("chain counts must be positive (burn-in nonnegative)")


def neighbor_table(target: DiscreteTarget) -> np.ndarray:
    """Padded neighbour lists (``-1`` fill); multi-edges appear with multiplicity."""
    e = target.edges
    n = target.n_sites
    lists = [[] for _ in range(n)]
    for a, b in e.tolist():
        lists[a].append(b)
        lists[b].append(a)
    D = max((len(l) for l in lists), default=0) or 1
    tab = np.full((n, D), -1, dtype=np.int64)
    for i, l in enumerate(lists):
        tab[i, : len(l)] = l
    return tab


def _mh_setup(target: DiscreteTarget):
    """Map the target onto (potts flag, coupling) with ``dV = -J k`` for integer ``k``."""
    if target.variant == "Ising":
        return 0, target.J
    if target.variant == "Potts":
        return 1, target.J
    # max-cut: V = -#cut = sum 1[x_i == x_j] - |E|, a Potts model with J = -1
    return 1, -1.0


def _run_chains(target, cfg: ChainConfig, step):
    """Drive ``step(x, n_sweeps, rng)`` through burn-in and thinned collection."""
    rng = np.random.default_rng(cfg.seed)
    x = rng.integers(0, target.alphabet, size=(cfg.chains, target.n_sites)).astype(np.int8)
    left = cfg.burn_in
    while left > 0:
        s = min(left, cfg.block)
        step(x, s, rng)
        left -= s
    out = np.empty((cfg.n_samples, cfg.chains, target.n_sites), dtype=np.int8)
    for i in range(cfg.n_samples):
        left = cfg.thin
        while left > 0:
            s = min(left, cfg.block)
            step(x, s, rng)
            left -= s
        out[i] = x
    return out.transpose(1, 0, 2).reshape(-1, target.n_sites)


def mh_chain(target: DiscreteTarget, cfg: ChainConfig) -> np.ndarray:
    """Single-site Metropolis samples, ``(chains * n_samples, n_sites)``, grouped by chain.

    One sweep is ``n_sites`` proposals at uniformly random sites. Ising proposes
    a flip; Potts proposes a uniform value (possibly the current one).
    """
    potts, J = _mh_setup(target)
    nbr = neighbor_table(target)
    D = nbr.shape[1]
    span = D if potts else 2 * D
    ks = np.arange(-span, span + 1)
    table = np.minimum(1.0, np.exp(np.clip(target.beta * J * ks, -700, 700)))
    n = target.n_sites

    def step(x, S, rng):
        site = rng.integers(0, n, size=(S, x.shape[0], n))
        prop = rng.integers(0, target.alphabet, size=site.shape) if potts else np.zeros_like(site)
        u = rng.random(site.shape)
        kernels.mh_sweeps(x, nbr, site, prop, u, table, span, potts)

    return _run_chains(target, cfg, step)


def sw_bond_probability(target: DiscreteTarget) -> float:
    if target.variant == "Ising":
        return 1.0 - np.exp(-2.0 * target.beta * target.J)
    return 1.0 - np.exp(-target.beta * target.J)


def sw_chain(target: DiscreteTarget, cfg: ChainConfig) -> np.ndarray:
    """Swendsen-Wang cluster samples; same layout as :func:`mh_chain`."""
    if target.variant == "MaxCut" or target.J <= 0:
        raise ValueError("Swendsen-Wang needs a ferromagnetic Ising or Potts target")
    p = float(sw_bond_probability(target))
    edges = np.ascontiguousarray(target.edges, dtype=np.int64)

    def step(x, S, rng):
        bond_u = rng.random((S, x.shape[0], len(edges)))
        newval = rng.integers(0, target.alphabet, size=(S, x.shape[0], target.n_sites))
        kernels.sw_sweeps(x, edges, bond_u, newval, p)

    return _run_chains(target, cfg, step)


def exact_interpolant(target: DiscreteTarget, lam: float):
    """States and probabilities of ``pi^(1 - lam) nu^lam`` with ``nu`` uniform."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    states = all_states(target)
    logp = (1.0 - lam) * (-target.beta * potential(target, states)) if target.beta else np.zeros(len(states))
    return states, np.exp(logp - logsumexp(logp))


def cut_value(edges, x) -> np.ndarray:
    e = np.asarray(edges).reshape(-1, 2)
    x = np.atleast_2d(x)
    return (x[:, e[:, 0]] != x[:, e[:, 1]]).sum(1)


def maxcut_brute(n_vertices: int, edges) -> tuple[int, np.ndarray]:
    """Exhaustive maximum cut; vertex 0 is pinned to side 0 by symmetry."""
    if n_vertices > MAX_BRUTE_VERTICES:
        raise ValueError(f"brute force limited to {MAX_BRUTE_VERTICES} vertices, got {n_vertices}")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if n_vertices <= 1 or len(e) == 0:
        return 0, np.zeros(n_vertices, dtype=np.int8)
    best, best_x = -1, None
    total = 1 << (n_vertices - 1)
    shifts = np.arange(n_vertices - 1, dtype=np.int64)
    chunk = 1 << 16
    for start in range(0, total, chunk):
        codes = np.arange(start, min(total, start + chunk), dtype=np.int64)
        bits = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.int8)
        x = np.concatenate([np.zeros((len(codes), 1), dtype=np.int8), bits], axis=1)
        cuts = cut_value(e, x)
        i = int(np.argmax(cuts))
        if cuts[i] > best:
            best, best_x = int(cuts[i]), x[i].copy()
    return best, best_x


def exact_score_fn(target: DiscreteTarget, lam: float = 0.0):
    """Exact masked conditionals of ``pi^(1 - lam) nu^lam`` as a score callable.

    Row ``i`` of the returned score for a masked sequence is the law of site
    ``i`` given the unmasked entries. Usable wherever a score network is.
    """
    states, probs = exact_interpolant(target, lam)
    states = states.astype(np.int64)
    N, mask = target.alphabet, target.alphabet
    onehot = np.eye(N)[states]  # (S, d, N)

    def score(x):
        x = np.atleast_2d(x)
        visible = x != mask
        ok = ((states[None, :, :] == x[:, None, :]) | ~visible[:, None, :]).all(-1)
        w = ok * probs[None, :]
        out = np.einsum("bs,sdn->bdn", w, onehot)
        return out / out.sum(-1, keepdims=True)

    return score
