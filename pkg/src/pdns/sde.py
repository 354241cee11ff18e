"""Euler-Maruyama rollouts of the controlled OU SDE with online Girsanov weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import ControlNetSpec, forward_control
from .ou import OUSchedule, TerminalReward, annealed_drift, terminal_reward

MAX_DROP_FRACTION = 0.01


@dataclass
class TrajectoryRecord:
    x_T: np.ndarray
    log_rn_ref_over_model: float
    control_energy: float
    seed_tag: int = 0


@dataclass
class Rollout:
    """Struct-of-arrays batch of :class:`TrajectoryRecord`."""

    x_T: np.ndarray
    log_rn: np.ndarray
    control_energy: np.ndarray
    n_dropped: int = 0
    seed_tag: int = 0

    def __len__(self) -> int:
        return len(self.log_rn)

    def __getitem__(self, i) -> TrajectoryRecord:
        return TrajectoryRecord(self.x_T[i], float(self.log_rn[i]), float(self.control_energy[i]), self.seed_tag)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _seed_tag(rng: np.random.Generator) -> int:
    state = rng.bit_generator.state.get("state", {})
    val = state.get("state", 0) if isinstance(state, dict) else state
    return int(val) & 0xFFFFFFFF


def _finish(x, log_rn, energy, bad, seed_tag):
    n = len(log_rn)
    n_bad = int(bad.sum())
    if n and n_bad > MAX_DROP_FRACTION * n:
        raise RuntimeError(f"{n_bad} of {n} trajectories became non-finite (> {MAX_DROP_FRACTION:.0%})")
    keep = ~bad
    return Rollout(x[keep], log_rn[keep], energy[keep], n_bad, seed_tag)


def rollout(params, spec: ControlNetSpec | None, sched: OUSchedule, n: int, rng: np.random.Generator, dim: int | None = None) -> Rollout:
    """Simulate ``n`` controlled paths; ``params=None`` means ``u == 0``.

    Each step uses one Brownian increment ``dW`` for both the state update and
    the log-weight ``-(|u|^2 dt / 2 + u . dW)``, so the accumulated weight is
    the exact density ratio of the discretized reference and model chains.
    """
    if n < 1:
        raise ValueError("need n >= 1 trajectories")
    d = spec.input_dim if spec is not None else dim
    if d is None:
        raise ValueError("dimension required when no control net is given")
    tag = _seed_tag(rng)
    dt = sched.dt
    sqdt = np.sqrt(dt)
    x = sched.sigma_bar * rng.standard_normal((n, d))
    log_rn = np.zeros(n)
    energy = np.zeros(n)
    bad = np.zeros(n, dtype=bool)
    for k in range(sched.K):
        t = k * dt
        a = sched.alpha(t)
        sig = sched.sigma_bar * np.sqrt(a)
        dW = sqdt * rng.standard_normal((n, d))
        if params is None:
            x = x - 0.5 * a * x * dt + sig * dW
            continue
        if bad.any():
            x[bad] = 0.0
        u = np.asarray(forward_control(params, spec, t, x), dtype=np.float64)
        uu = 0.5 * (u * u).sum(1) * dt
        log_rn -= uu + (u * dW).sum(1)
        energy += uu
        x = x + (-0.5 * a * x + sig * u) * dt + sig * dW
        bad |= ~np.isfinite(x).all(1) | ~np.isfinite(log_rn)
    bad |= ~np.isfinite(x).all(1)
    return _finish(x, log_rn, energy, bad, tag)


def soc_cost(records: Rollout, tr: TerminalReward) -> float:
    """Monte Carlo estimate of ``E[int |u|^2/2 dt - r(X_T)]`` (diagnostic only)."""
    if isinstance(records, Rollout):
        energy, xT = records.control_energy, records.x_T
    else:
        energy = np.array([r.control_energy for r in records])
        xT = np.array([r.x_T for r in records])
    return float(np.mean(energy - terminal_reward(tr, xT)))


def annealed_rollout(tr: TerminalReward, sched: OUSchedule, n: int, rng: np.random.Generator) -> np.ndarray:
    """Terminal states of the annealed warm-start SDE (no weights)."""
    d = tr.target.dim
    if n == 0:
        return np.zeros((0, d))
    dt = sched.dt
    sqdt = np.sqrt(dt)
    x = sched.sigma_bar * rng.standard_normal((n, d))
    bad = np.zeros(n, dtype=bool)
    for k in range(sched.K):
        t = k * dt
        dW = sqdt * rng.standard_normal((n, d))
        if bad.any():
            x[bad] = 0.0
        x = x + annealed_drift(tr, sched, t, x) * dt + sched.sigma(t) * dW
        bad |= ~np.isfinite(x).all(1)
    if bad.sum() > MAX_DROP_FRACTION * n:
        raise RuntimeError(f"{int(bad.sum())} of {n} annealed trajectories became non-finite")
    return x[~bad]
