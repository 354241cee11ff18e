"""Energy functions for continuous and discrete Boltzmann targets ``pi ~ exp(-beta V)``.

Continuous states are float vectors; batched inputs have shape ``(n, d)``.
Discrete states are integer index sequences over ``0..N-1``: Ising and
max-cut use ``{0, 1}`` (spin ``2x - 1``), Potts uses ``0..q-1``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

CONTINUOUS_VARIANTS = ("MW", "Funnel", "GMM", "MoS", "DW4", "LJ")
DISCRETE_VARIANTS = ("Ising", "Potts", "MaxCut")
MAX_ENUMERATION = 2**20


@dataclass(frozen=True)
class ContinuousTarget:
    variant: str
    dim: int
    params: dict = field(default_factory=dict)
    beta: float = 1.0
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.variant not in CONTINUOUS_VARIANTS:
            raise ValueError(f"unknown continuous variant {self.variant!r}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        p = self.params
        if self.variant == "MW" and p.get("delta", 4.0) <= 0:
            raise ValueError("MW needs delta > 0")
        if self.variant == "Funnel" and p.get("sigma", 3.0) <= 0:
            raise ValueError("Funnel needs sigma > 0")
        if self.variant in ("GMM", "MoS"):
            centers = np.asarray(p["centers"], dtype=float)
            if centers.ndim != 2 or centers.shape[1] != self.dim:
                raise ValueError(f"{self.variant} centers must have shape (m, {self.dim})")
        if self.variant == "DW4" and self.dim != 2 * p.get("n_particles", 4):
            raise ValueError("DW4 dimension must be 2 * n_particles (8 for four particles)")
        if self.variant == "LJ" and self.dim != 3 * p.get("n_particles", 13):
            raise ValueError("LJ dimension must be 3 * n_particles")

    @property
    def is_discrete(self) -> bool:
        return False


@dataclass(frozen=True)
class DiscreteTarget:
    variant: str
    n_sites: int
    edges: np.ndarray = field(repr=False, compare=False)
    J: float = 1.0
    q: int = 2
    beta: float = 1.0
    L: int | None = None

    def __post_init__(self):
        if self.variant not in DISCRETE_VARIANTS:
            raise ValueError(f"unknown discrete variant {self.variant!r}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.variant != "Potts" and self.q != 2:
            raise ValueError(f"{self.variant} is binary (q = 2)")
        if self.q < 2:
            raise ValueError("need at least two states")

    @property
    def is_discrete(self) -> bool:
        return True

    @property
    def alphabet(self) -> int:
        return self.q


# ---------------------------------------------------------------------------
# constructors


def many_well(dim: int = 5, delta: float = 4.0, beta: float = 1.0, grad_clip: float = 100.0) -> ContinuousTarget:
    return ContinuousTarget("MW", dim, {"delta": delta}, beta, grad_clip)


def funnel(dim: int = 10, sigma: float = 3.0, beta: float = 1.0, grad_clip: float = 100.0) -> ContinuousTarget:
    return ContinuousTarget("Funnel", dim, {"sigma": sigma}, beta, grad_clip)


def gmm(centers, scale: float = 1.0, beta: float = 1.0, grad_clip: float = 100.0) -> ContinuousTarget:
    c = np.atleast_2d(np.asarray(centers, dtype=float))
    return ContinuousTarget("GMM", c.shape[1], {"centers": c.tolist(), "scale": scale}, beta, grad_clip)


def random_centers(dim: int, m: int, half_width: float, seed: int) -> list[list[float]]:
    rng = np.random.default_rng(seed)
    return rng.uniform(-half_width, half_width, size=(m, dim)).tolist()


def mixture_of_students(centers, df: float = 2.0, beta: float = 1.0, grad_clip: float = 100.0) -> ContinuousTarget:
    c = np.atleast_2d(np.asarray(centers, dtype=float))
    return ContinuousTarget("MoS", c.shape[1], {"centers": c.tolist(), "df": df}, beta, grad_clip)


def double_well_4(a=0.0, b=-4.0, c=0.9, d0=1.0, tau=1.0, beta=1.0, grad_clip=100.0) -> ContinuousTarget:
    params = {"a": a, "b": b, "c": c, "d0": d0, "tau": tau, "n_particles": 4, "spatial": 2}
    return ContinuousTarget("DW4", 8, params, beta, grad_clip)


def lennard_jones(n_particles=13, r_m=1.0, eps=1.0, c=0.5, tau=1.0, beta=1.0, grad_clip=100.0) -> ContinuousTarget:
    params = {"r_m": r_m, "eps": eps, "c": c, "tau": tau, "n_particles": n_particles, "spatial": 3}
    return ContinuousTarget("LJ", 3 * n_particles, params, beta, grad_clip)


def lattice_edges(L: int) -> np.ndarray:
    """Right and down neighbours on a periodic ``L x L`` lattice (``2 L^2`` edges)."""
    idx = np.arange(L * L).reshape(L, L)
    right = np.stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()], axis=1)
    down = np.stack([idx.ravel(), np.roll(idx, -1, axis=0).ravel()], axis=1)
    return np.concatenate([right, down])


def ising(L: int, beta: float, J: float = 1.0) -> DiscreteTarget:
    return DiscreteTarget("Ising", L * L, lattice_edges(L), J, 2, beta, L)


def potts(L: int, q: int, beta: float, J: float = 1.0) -> DiscreteTarget:
    return DiscreteTarget("Potts", L * L, lattice_edges(L), J, q, beta, L)


def maxcut(n_vertices: int, edges, beta: float) -> DiscreteTarget:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if np.any(e[:, 0] == e[:, 1]):
        raise ValueError("max-cut graph must not contain self loops")
    canon = {tuple(sorted(p)) for p in e.tolist()}
    if len(canon) != len(e):
        raise ValueError("max-cut graph must not contain duplicate edges")
    if e.size and (e.min() < 0 or e.max() >= n_vertices):
        raise ValueError("edge endpoint out of range")
    return DiscreteTarget("MaxCut", n_vertices, e, 1.0, 2, beta, None)


def random_graph(n_vertices: int, p: float, seed: int) -> np.ndarray:
    """Erdos-Renyi ``G(n, p)`` edge list, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n_vertices, k=1)
    keep = rng.random(iu.size) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


# ---------------------------------------------------------------------------
# continuous energies


def _pairwise(x: np.ndarray, n: int, k: int):
    pos = x.reshape(x.shape[0], n, k)
    iu, ju = np.triu_indices(n, k=1)
    diff = pos[:, iu, :] - pos[:, ju, :]
    dist = np.sqrt((diff**2).sum(-1))
    return pos, iu, ju, diff, dist


def _continuous_energy_and_grad(target: ContinuousTarget, x: np.ndarray, want_grad: bool):
    p = target.params
    v = target.variant
    if v == "MW":
        delta = p.get("delta", 4.0)
        e = ((x**2 - delta) ** 2).sum(-1)
        g = 4.0 * x * (x**2 - delta) if want_grad else None
        return e, g
    if v == "Funnel":
        sigma = p.get("sigma", 3.0)
        x1, rest = x[:, 0], x[:, 1:]
        sq = (rest**2).sum(-1)
        e = x1**2 / (2 * sigma**2) + 0.5 * (target.dim - 1) * x1 + 0.5 * np.exp(-x1) * sq
        g = None
        if want_grad:
            g = np.empty_like(x)
            g[:, 0] = x1 / sigma**2 + 0.5 * (target.dim - 1) - 0.5 * np.exp(-x1) * sq
            g[:, 1:] = np.exp(-x1)[:, None] * rest
        return e, g
    if v == "GMM":
        mu = np.asarray(p["centers"], dtype=float)
        s2 = p.get("scale", 1.0) ** 2
        diff = x[:, None, :] - mu[None, :, :]
        logc = -0.5 * (diff**2).sum(-1) / s2
        e = -logsumexp(logc, axis=1) + np.log(len(mu))
        g = None
        if want_grad:
            w = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
            g = (w[:, :, None] * diff).sum(1) / s2
        return e, g
    if v == "MoS":
        mu = np.asarray(p["centers"], dtype=float)
        df = p.get("df", 2.0)
        diff = x[:, None, :] - mu[None, :, :]
        q = 1.0 + (diff**2).sum(-1) / df
        expo = 0.5 * (df + target.dim)
        logc = -expo * np.log(q)
        e = -logsumexp(logc, axis=1) + np.log(len(mu))
        g = None
        if want_grad:
            w = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
            g = (w[:, :, None] * (2 * expo / df) * diff / q[:, :, None]).sum(1)
        return e, g
    if v == "DW4":
        n, k = p.get("n_particles", 4), p.get("spatial", 2)
        a, b, c, d0, tau = p.get("a", 0.0), p.get("b", -4.0), p.get("c", 0.9), p.get("d0", 1.0), p.get("tau", 1.0)
        pos, iu, ju, diff, dist = _pairwise(x, n, k)
        s = dist - d0
        e = (a * s + b * s**2 + c * s**4).sum(-1) / (2 * tau)
        g = None
        if want_grad:
            dedr = (a + 2 * b * s + 4 * c * s**3) / (2 * tau)
            g = _pair_grad(dedr, dist, diff, iu, ju, n, k)
        return e, g
    if v == "LJ":
        n, k = p.get("n_particles", 13), p.get("spatial", 3)
        rm, eps, c, tau = p.get("r_m", 1.0), p.get("eps", 1.0), p.get("c", 0.5), p.get("tau", 1.0)
        pos, iu, ju, diff, dist = _pairwise(x, n, k)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv6 = (rm / dist) ** 6
            pair = inv6**2 - 2.0 * inv6
            pair = np.where(dist == 0, np.inf, pair)
            com = pos - pos.mean(axis=1, keepdims=True)
            e = eps / (2 * tau) * pair.sum(-1) + 0.5 * c * (com**2).sum((1, 2))
            g = None
            if want_grad:
                dedr = eps / (2 * tau) * (-12.0 * inv6**2 + 12.0 * inv6) / dist
                g = _pair_grad(dedr, dist, diff, iu, ju, n, k) + c * com.reshape(x.shape)
        return e, g
    raise AssertionError(v)


def _pair_grad(dedr, dist, diff, iu, ju, n, k):
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (dedr / dist)[:, :, None] * diff
    g = np.zeros((diff.shape[0], n, k))
    np.add.at(g, (slice(None), iu), f)
    np.add.at(g, (slice(None), ju), -f)
    return g.reshape(diff.shape[0], n * k)


# ---------------------------------------------------------------------------
# discrete energies


def _discrete_energy(target: DiscreteTarget, x: np.ndarray) -> np.ndarray:
    if x.min(initial=0) < 0 or x.max(initial=0) >= target.alphabet:
        raise ValueError(f"states must lie in 0..{target.alphabet - 1}")
    e = target.edges
    if e.size == 0:
        return np.zeros(x.shape[0])
    a, b = x[:, e[:, 0]], x[:, e[:, 1]]
    if target.variant == "Ising":
        sa, sb = 2 * a.astype(np.int64) - 1, 2 * b.astype(np.int64) - 1
        return -target.J * (sa * sb).sum(-1).astype(float)
    if target.variant == "Potts":
        return -target.J * (a == b).sum(-1).astype(float)
    return -(a != b).sum(-1).astype(float)


def potential(target, x) -> np.ndarray | float:
    """``V(x)`` for one state (returns a float) or a batch (returns ``(n,)``)."""
    arr = np.asarray(x)
    single = arr.ndim == 1
    batch = np.atleast_2d(arr)
    if target.is_discrete:
        if batch.shape[1] != target.n_sites:
            raise ValueError(f"expected {target.n_sites} sites, got {batch.shape[1]}")
        e = _discrete_energy(target, batch)
    else:
        if batch.shape[1] != target.dim:
            raise ValueError(f"expected dimension {target.dim}, got {batch.shape[1]}")
        e, _ = _continuous_energy_and_grad(target, batch.astype(float), want_grad=False)
    return float(e[0]) if single else e


def potential_grad(target: ContinuousTarget, x, clip: bool = True) -> np.ndarray:
    """Analytic ``grad V``, rescaled per state so its norm is at most ``grad_clip``."""
    if target.is_discrete:
        raise TypeError("gradients exist only for continuous targets")
    arr = np.asarray(x, dtype=float)
    batch = np.atleast_2d(arr)
    _, g = _continuous_energy_and_grad(target, batch, want_grad=True)
    if np.any(np.isnan(g)):
        raise FloatingPointError("NaN in potential gradient")
    g = np.where(np.isinf(g), np.sign(g) * 1e300, g)
    if clip and np.isfinite(target.grad_clip):
        norm = np.sqrt((g**2).sum(-1, keepdims=True))
        scale = np.minimum(1.0, target.grad_clip / np.maximum(norm, 1e-300))
        g = g * scale
    return g[0] if arr.ndim == 1 else g


def log_target(target, x):
    """Unnormalized log density ``-beta V(x)``."""
    v = potential(target, x)
    if target.beta == 0:
        return 0.0 if np.ndim(v) == 0 else np.zeros_like(v)
    return -target.beta * v


# ---------------------------------------------------------------------------
# exact enumeration


def state_space_size(target: DiscreteTarget) -> int:
    return target.alphabet**target.n_sites


def all_states(target: DiscreteTarget) -> np.ndarray:
    size = state_space_size(target)
    if size > MAX_ENUMERATION:
        raise ValueError(
            f"state space has {target.alphabet}^{target.n_sites} = {size} states; "
            f"enumeration limited to {MAX_ENUMERATION}"
        )
    # row i is the base-N expansion of i, most significant site first
    digits = np.arange(size)[:, None] // target.alphabet ** np.arange(target.n_sites - 1, -1, -1)[None, :]
    return (digits % target.alphabet).astype(np.int8)


def enumerate_exact(target: DiscreteTarget):
    """All states with exact Boltzmann probabilities and ``log Z``."""
    states = all_states(target)
    logw = -target.beta * potential(target, states) if target.beta else np.zeros(len(states))
    logz = float(logsumexp(logw))
    return states, np.exp(logw - logz), logz


def state_index(target: DiscreteTarget, x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`all_states` row ordering."""
    x = np.atleast_2d(x).astype(np.int64)
    weights = target.alphabet ** np.arange(target.n_sites - 1, -1, -1)
    return x @ weights


def iter_states(target: DiscreteTarget):
    """Lazy state iterator (slow; used as an independent summation order)."""
    return itertools.product(range(target.alphabet), repeat=target.n_sites)
