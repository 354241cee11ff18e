"""Proximal weights, step-size schedulers, ESS and the replay buffer.

Stage ``k`` either chases the proximal optimum (``"eta"``: log weight
``gamma_k * (r + log_rn)`` with ``gamma_k = eta_k / (eta_k + 1)``) or the
geometric interpolant (``"lambda"``: ``(1 - lambda_k) r + log_rn``). The two
are tied together by ``lambda_k = lambda_{k-1} / (eta_k + 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .ou import terminal_reward

WEIGHT_FLOOR = 1e-300


def gamma_of(eta: float) -> float:
    return 1.0 if math.isinf(eta) else eta / (eta + 1.0)


def eta_of(gamma: float) -> float:
    return math.inf if gamma >= 1.0 else gamma / (1.0 - gamma)


@dataclass
class SchedulerState:
    mode: str = "predefined"  # or "adaptive"
    target_variant: str = "lambda"  # or "eta"
    k: int = 0
    lambda_history: list = field(default_factory=lambda: [1.0])
    eta_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("predefined", "adaptive"):
            raise ValueError(f"unknown scheduler mode {self.mode!r}")
        if self.target_variant not in ("eta", "lambda"):
            raise ValueError(f"unknown proximal target {self.target_variant!r}")

    @property
    def lam(self) -> float:
        return self.lambda_history[-1]

    @property
    def eta(self) -> float:
        return self.eta_history[-1] if self.eta_history else math.nan

    @property
    def gamma(self) -> float:
        return gamma_of(self.eta)

    def push(self, eta: float) -> tuple[float, float]:
        """Advance one stage with step size ``eta``; returns ``(eta, lambda)``."""
        if not eta > 0:
            raise ValueError("proximal step size must be positive")
        lam = self.lam / (eta + 1.0)
        self.eta_history.append(float(eta))
        self.lambda_history.append(lam)
        self.k += 1
        return eta, lam


def linear_lambdas(n_stages: int, n_refine: int = 0) -> list[float]:
    """``lambda_k`` decreasing linearly from 1 to 0 over ``n_stages``, then zeros."""
    return [1.0 - k / n_stages for k in range(1, n_stages + 1)] + [0.0] * n_refine


def predefined_eta(state: SchedulerState, lambdas, k: int) -> tuple[float, float]:
    """Step size that realizes the scheduled ``lambda_k`` (``inf`` once it hits 0)."""
    if k != state.k + 1:
        raise ValueError(f"stage {k} requested but scheduler is at stage {state.k}")
    if k > len(lambdas):
        raise ValueError(f"schedule has only {len(lambdas)} stages")
    prev, lam = state.lam, float(lambdas[k - 1])
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda_{k} = {lam} outside [0, 1]")
    if lam > prev:
        raise ValueError(f"lambda schedule increases at stage {k}: {prev} -> {lam}")
    if lam == 0.0:
        eta = math.inf
    elif lam == prev:
        raise ValueError(f"lambda_{k} equals lambda_{k - 1}; eta would be 0")
    else:
        eta = prev / lam - 1.0
    return state.push(eta)


def base_log_weight(records, tr) -> np.ndarray:
    """``r(x_T) + log dP_ref/dP_model`` per record."""
    return terminal_reward(tr, records.x_T) + records.log_rn


def proximal_log_weight(log_rn, r, state: SchedulerState):
    log_rn = np.asarray(log_rn, dtype=float)
    r = np.asarray(r, dtype=float)
    if state.target_variant == "eta":
        return state.gamma * (r + log_rn)
    return (1.0 - state.lam) * r + log_rn


def normalize_and_ess(log_ws):
    """Self-normalized weights and ``ESS = 1 / (M sum w^2)`` in ``[1/M, 1]``."""
    lw = np.asarray(log_ws, dtype=float)
    if lw.size == 0:
        raise ValueError("no weights")
    if not np.any(np.isfinite(lw)):
        raise ValueError("all log weights are -inf or non-finite")
    w = np.exp(lw - logsumexp(lw))
    ess = 1.0 / (lw.size * float(np.sum(w**2)))
    return w, min(ess, 1.0)


def kl_estimate(w) -> float:
    """``-(1/M) sum log(M w_j)`` for normalized weights ``w``."""
    w = np.maximum(np.asarray(w, dtype=float), WEIGHT_FLOOR)
    M = w.size
    return float(-np.mean(np.log(M * w)))


def _kl_of_gamma(base: np.ndarray, gamma: float) -> float:
    # -mean(log(M w)) with w = softmax(gamma * base), written without exp
    return float(logsumexp(gamma * base) - np.log(base.size) - gamma * base.mean())


def adaptive_eta(base_log_weights, eps: float, tol: float = 1e-3) -> tuple[float, float]:
    """Largest tempering ``gamma`` with KL estimate ``<= eps``; returns ``(eta, gamma)``."""
    if eps <= 0:
        raise ValueError("trust radius must be positive")
    base = np.asarray(base_log_weights, dtype=float)
    base = base[np.isfinite(base)]
    if base.size < 2:
        raise ValueError("need at least two finite base log weights")
    if _kl_of_gamma(base, 1.0) <= eps:
        return math.inf, 1.0
    lo, hi = 0.0, 1.0
    if _kl_of_gamma(base, tol * 1e-3) > eps:
        raise ValueError("KL estimate exceeds the trust radius for vanishing gamma")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _kl_of_gamma(base, mid) <= eps:
            lo = mid
        else:
            hi = mid
    gamma = lo if lo > 0 else 0.5 * hi
    return eta_of(gamma), gamma


@dataclass
class ReplayBuffer:
    states: np.ndarray
    log_raw_weight: np.ndarray
    weights: np.ndarray
    stage: int = 0
    refresh_count: int = 0
    n_dropped: int = 0

    @classmethod
    def from_log_weights(cls, states, log_w, stage: int = 0, max_weight: float | None = None) -> "ReplayBuffer":
        log_w = np.asarray(log_w, dtype=float)
        keep = np.isfinite(log_w)
        states = np.asarray(states)[keep]
        log_w = log_w[keep]
        w, _ = normalize_and_ess(log_w)
        if max_weight is not None:
            w = _cap(w, max_weight)
        return cls(states, log_w, w, stage, 0, int((~keep).sum()))

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def ess(self) -> float:
        return 1.0 / (len(self.weights) * float(np.sum(self.weights**2)))

    def sample_batch(self, size: int, rng: np.random.Generator):
        """Uniform minibatch indices with weights rescaled so their mean is one."""
        idx = rng.choice(len(self), size=size, replace=size > len(self))
        return self.states[idx], self.weights[idx] * len(self)


def _cap(w: np.ndarray, cap: float) -> np.ndarray:
    """Clip normalized weights at ``cap`` and spread the excess over the rest (water filling)."""
    if cap * w.size < 1.0:
        raise ValueError(f"weight cap {cap} is below 1/M")
    w = w / w.sum()
    for _ in range(w.size):
        over = w > cap
        if not over.any():
            break
        excess = float((w[over] - cap).sum())
        w = np.where(over, cap, w)
        free = w < cap
        if not free.any():
            break
        mass = w[free].sum()
        w[free] += excess * (w[free] / mass if mass > 0 else 1.0 / free.sum())
    return w


def resample(buffer: ReplayBuffer, rng: np.random.Generator, method: str = "multinomial") -> ReplayBuffer:
    """Draw ``N`` entries proportional to the weights; the output carries uniform weights."""
    N = len(buffer)
    w = buffer.weights
    if method == "multinomial":
        idx = rng.choice(N, size=N, p=w / w.sum())
    elif method == "systematic":
        u = (rng.random() + np.arange(N)) / N
        idx = np.minimum(np.searchsorted(np.cumsum(w), u), N - 1)
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return ReplayBuffer(
        buffer.states[idx],
        np.zeros(N),
        np.full(N, 1.0 / N),
        buffer.stage,
        buffer.refresh_count,
        buffer.n_dropped,
    )


def stage_log_line(k, lam, eta, ess_local, ess_global, kl, n_dropped, **extra) -> dict:
    line = {
        "k": int(k),
        "lambda": float(lam),
        "eta_or_inf": None if math.isnan(eta) else ("inf" if math.isinf(eta) else float(eta)),
        "ess_local": float(ess_local),
        "ess_global": float(ess_global),
        "kl_estimate": float(kl),
        "n_dropped": int(n_dropped),
    }
    line.update(extra)
    return line
