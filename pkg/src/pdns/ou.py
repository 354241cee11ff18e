"""Memoryless Ornstein-Uhlenbeck reference ``dX = -a_t/2 X dt + s sqrt(a_t) dW``.

``a_t`` is linear between ``alpha_min`` and ``alpha_max`` and the initial
law is the stationary ``N(0, s^2 I)``, so every marginal of the reference is
that Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import targets as tg


@dataclass(frozen=True)
class OUSchedule:
    sigma_bar: float = 1.0
    alpha_min: float = 0.1
    alpha_max: float = 10.0
    T: float = 1.0
    K: int = 100
    memoryless_tol: float = 0.1

    def __post_init__(self):
        if self.sigma_bar <= 0:
            raise ValueError("sigma_bar must be positive")
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 < alpha_min <= alpha_max")
        if self.K < 2:
            raise ValueError("need at least two time steps")
        if self.T <= 0:
            raise ValueError("T must be positive")
        bT = np.exp(-0.5 * self.integral(self.T))
        if bT >= self.memoryless_tol:
            raise ValueError(
                f"reference is not memoryless enough: B_T = {bT:.4f} >= {self.memoryless_tol}"
            )

    def alpha(self, t):
        s = np.asarray(t, dtype=float) / self.T
        return (1.0 - s) * self.alpha_min + s * self.alpha_max

    def sigma(self, t):
        return self.sigma_bar * np.sqrt(self.alpha(t))

    def integral(self, t):
        """``A(t) = int_0^t alpha_s ds`` (exact for the linear schedule)."""
        t = np.asarray(t, dtype=float)
        return self.alpha_min * t + 0.5 * (self.alpha_max - self.alpha_min) * t**2 / self.T

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)


def _check_time(sched: OUSchedule, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValueError(f"time outside [0, {sched.T}]")
    return t


def schedule_integral(sched: OUSchedule, t):
    """Return ``(A(t), B(t), C(t))`` with ``B = exp(-A(t)/2)``, ``C = exp(-(A(T)-A(t))/2)``."""
    t = _check_time(sched, t)
    a = sched.integral(t)
    return a, np.exp(-0.5 * a), np.exp(-0.5 * (sched.integral(sched.T) - a))


def ref_marginal(sched: OUSchedule, t):
    """Mean and standard deviation of the (stationary) reference marginal at ``t``."""
    _check_time(sched, t)
    return 0.0, sched.sigma_bar


def bridge_coefficients(sched: OUSchedule, t):
    _, B, C = schedule_integral(sched, t)
    BT = np.exp(-0.5 * sched.integral(sched.T))
    denom = 1.0 - BT**2
    if np.any(denom < 1e-12):
        raise FloatingPointError("degenerate bridge: 1 - B_T^2 underflow")
    c0 = B * (1.0 - C**2) / denom
    cT = C * (1.0 - B**2) / denom
    var = sched.sigma_bar**2 * (1.0 - B**2) * (1.0 - C**2) / denom
    return c0, cT, var


def bridge_sample(sched: OUSchedule, x0, xT, t, rng: np.random.Generator):
    """Exact draw from the reference bridge pinned at ``x0`` (time 0) and ``xT`` (time T).

    ``t`` may be a scalar or one time per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=float)
    xT = np.asarray(xT, dtype=float)
    t = _check_time(sched, t)
    if np.ndim(t) == 0:
        if t == 0.0:
            return x0.copy()
        if t == sched.T:
            return xT.copy()
    c0, cT, var = bridge_coefficients(sched, t)
    if np.ndim(t) == 1:
        c0, cT, var = c0[:, None], cT[:, None], var[:, None]
    out = c0 * x0 + cT * xT + np.sqrt(var) * rng.standard_normal(x0.shape)
    if np.ndim(t) == 1:
        out = np.where((t == 0.0)[:, None], x0, out)
        out = np.where((t == sched.T)[:, None], xT, out)
    return out


def cond_score(sched: OUSchedule, x_t, x_T, t):
    """``grad_{x_t} log p_ref(x_T | x_t)``; singular at ``t = T``."""
    t = _check_time(sched, t)
    if np.any(t >= sched.T):
        raise ValueError("conditional score is singular at t = T")
    _, _, C = schedule_integral(sched, t)
    if np.ndim(t) == 1:
        C = C[:, None]
    x_t = np.asarray(x_t, dtype=float)
    x_T = np.asarray(x_T, dtype=float)
    return -C * (C * x_t - x_T) / (sched.sigma_bar**2 * (1.0 - C**2))


@dataclass(frozen=True)
class TerminalReward:
    """``r = -beta V - log nu`` with ``nu = N(0, s^2 I)`` (continuous) or uniform (discrete).

    For discrete targets the uniform ``log nu`` is a constant and is dropped.
    """

    target: object
    sigma_bar: float = 1.0
    include_constants: bool = True

    def __call__(self, x):
        return terminal_reward(self, x)


def terminal_reward(tr: TerminalReward, x):
    lt = tg.log_target(tr.target, x)
    if tr.target.is_discrete:
        return lt
    x = np.asarray(x, dtype=float)
    d = tr.target.dim
    out = lt + (x**2).sum(-1) / (2 * tr.sigma_bar**2)
    if tr.include_constants:
        out = out + 0.5 * d * np.log(2 * np.pi * tr.sigma_bar**2)
    return out


def annealed_drift(tr: TerminalReward, sched: OUSchedule, t: float, x):
    """Drift of the annealed warm-start SDE.

    Langevin-type drift ``(a_t s^2 / 2) grad log rho_t`` for the geometric path
    ``rho_t ~ mu^(1 - t/T) pi^(t/T)``. At ``t = 0`` it equals the OU base drift.
    """
    x = np.asarray(x, dtype=float)
    w = t / sched.T
    a = sched.alpha(t)
    mu_term = x / sched.sigma_bar**2
    if w > 0:
        tgt = tr.target
        grad_term = tgt.beta * tg.potential_grad(tgt, x) if tgt.beta else np.zeros_like(x)
    else:
        grad_term = 0.0
    return -0.5 * a * sched.sigma_bar**2 * ((1.0 - w) * mu_term + w * grad_term)
