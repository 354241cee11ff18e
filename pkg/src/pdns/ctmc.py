"""Masked discrete diffusion: mask -> data simulation and CTMC Girsanov weights.

The unmasking clock is the linear survival schedule: each coordinate is still
masked at time ``t`` with probability ``1 - t/T``. Sequences use the integer
``N`` (the alphabet size) as the mask symbol.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import ScoreNetSpec, forward_score

SCORE_FLOOR = 1e-12


@dataclass
class DiscreteTrajectoryRecord:
    x_T: np.ndarray
    log_rn_ref_over_model: float


@dataclass
class DiscreteRollout:
    x_T: np.ndarray
    log_rn: np.ndarray
    n_jumps: np.ndarray
    n_floored: int = 0
    order: np.ndarray | None = None

    @property
    def n_dropped(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.log_rn)

    def __getitem__(self, i) -> DiscreteTrajectoryRecord:
        return DiscreteTrajectoryRecord(self.x_T[i], float(self.log_rn[i]))


def unmask_prob(t: float, dt: float, T: float = 1.0) -> float:
    """Conditional probability that a masked coordinate unmasks during ``[t, t + dt]``."""
    if not 0 <= t < t + dt <= T + 1e-12:
        raise ValueError("need 0 <= t < t + dt <= T")
    remaining = T - t
    return 1.0 if dt >= remaining - 1e-12 else dt / remaining


def rollout_discrete(
    params,
    spec: ScoreNetSpec,
    K: int,
    n: int,
    rng: np.random.Generator,
    T: float = 1.0,
    record_order: bool = False,
) -> DiscreteRollout:
    """Simulate ``n`` unmasking paths; ``params=None`` means the uniform reference.

    ``params`` may also be a callable mapping a batch of masked sequences to
    ``(n, d, N)`` score rows, which lets tabular oracles drive the sampler.

    All coordinates that unmask within a step draw their values independently
    from the score evaluated at the pre-step state. Only rows with at least one
    unmasking event call the network.
    """
    d, N = spec.seq_len, spec.alphabet
    mask = spec.mask
    x = np.full((n, d), mask, dtype=np.int64)
    log_rn = np.zeros(n)
    jumps = np.zeros(n, dtype=np.int64)
    order = np.full((n, d), -1, dtype=np.int64) if record_order else None
    n_floored = 0
    dt = T / K
    log_unif = -np.log(N)
    for k in range(K):
        p = 1.0 if k == K - 1 else unmask_prob(k * dt, dt, T)
        coins = rng.random((n, d))
        unmask = (x == mask) & (coins < p)
        rows = np.flatnonzero(unmask.any(1))
        if rows.size == 0:
            continue
        sub = unmask[rows]
        if params is None:
            vals = rng.integers(0, N, size=(rows.size, d))
            chosen_logp = np.full(sub.shape, log_unif)
        else:
            s = params(x[rows]) if callable(params) else forward_score(params, spec, x[rows])
            s = np.array(s, dtype=np.float64)
            low = s < SCORE_FLOOR
            if low.any():
                n_floored += int((low & sub[:, :, None]).sum())
                s = np.maximum(s, SCORE_FLOOR)
                s /= s.sum(-1, keepdims=True)
            u = rng.random((rows.size, d, 1))
            vals = (u > np.cumsum(s, axis=-1)).sum(-1)
            vals = np.minimum(vals, N - 1)
            chosen_logp = np.log(np.take_along_axis(s, vals[:, :, None], axis=-1)[:, :, 0])
        log_rn[rows] += np.where(sub, log_unif - chosen_logp, 0.0).sum(1)
        jumps[rows] += sub.sum(1)
        xr = x[rows]
        xr[sub] = vals[sub]
        x[rows] = xr
        if order is not None:
            orr = order[rows]
            orr[sub] = k
            order[rows] = orr
    return DiscreteRollout(x, log_rn, jumps, n_floored, order)


def mask_corrupt(x, lam, rng: np.random.Generator, mask: int) -> np.ndarray:
    """Replace each entry by ``mask`` independently with probability ``lam`` (scalar or per row)."""
    x = np.asarray(x)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0) or np.any(lam > 1):
        raise ValueError("masking probability must lie in (0, 1]")
    if lam.ndim == 1:
        lam = lam[:, None]
    hit = rng.random(x.shape) < lam
    return np.where(hit, mask, x)
