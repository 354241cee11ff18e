"""Sample-quality metrics and lattice observables."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from .ou import terminal_reward


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def mmd(X, Y, scales=(0.5, 1.0, 2.0)) -> float:
    """Unbiased MMD with an RBF mixture; bandwidths are the pooled median distance times ``scales``."""
    X, Y = _as_points(X), _as_points(Y)
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("MMD needs at least two points per set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sample sets have different dimensions")
    med = float(np.median(pdist(np.concatenate([X, Y]))))
    if med <= 0:
        med = 1.0
    dxx, dyy, dxy = cdist(X, X, "sqeuclidean"), cdist(Y, Y, "sqeuclidean"), cdist(X, Y, "sqeuclidean")
    n, m = len(X), len(Y)
    total = 0.0
    for s in scales:
        h2 = 2.0 * (s * med) ** 2
        kxx = np.exp(-dxx / h2)
        kyy = np.exp(-dyy / h2)
        kxy = np.exp(-dxy / h2)
        total += (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        total += (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        total -= 2.0 * kxy.mean()
    return float(np.sqrt(max(total, 0.0)))


@dataclass
class SinkhornResult:
    cost: float
    violation: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.cost


def _lse_rows(A: np.ndarray) -> np.ndarray:
    m = A.max(axis=1)
    return m + np.log(np.exp(A - m[:, None]).sum(axis=1))


def _lse_segments(v: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Log-sum-exp over contiguous segments of ``v`` beginning at ``starts``."""
    mx = np.maximum.reduceat(v, starts)
    counts = np.diff(np.append(starts, v.size))
    return mx + np.log(np.add.reduceat(np.exp(v - np.repeat(mx, counts)), starts))


class _Support:
    """Entries of the plan within ``exp(-margin)`` of their row or column maximum.

    Everything outside contributes less than ``n * exp(-margin)`` relative mass to
    any marginal, far below the convergence tolerance.
    """

    def __init__(self, A: np.ndarray, C: np.ndarray, margin: float):
        keep = (A >= A.max(1, keepdims=True) - margin) | (A >= A.max(0, keepdims=True) - margin)
        self.rows, self.cols = np.nonzero(keep)
        self.c_row = C[self.rows, self.cols]
        self.row_starts = np.flatnonzero(np.r_[True, self.rows[1:] != self.rows[:-1]])
        order = np.lexsort((self.rows, self.cols))
        self.rows_c, self.cols_c, self.c_col = self.rows[order], self.cols[order], self.c_row[order]
        self.col_starts = np.flatnonzero(np.r_[True, self.cols_c[1:] != self.cols_c[:-1]])
        self.size = self.rows.size


def sinkhorn(
    X, Y, eps: float = 1e-3, tol: float = 1e-6, max_iter: int = 10_000, omega: float = 1.8, margin: float = 60.0
) -> SinkhornResult:
    """Entropic OT cost ``<P, C>`` for uniform clouds under squared Euclidean cost.

    Log-domain updates with epsilon scaling: the regularization starts at the
    largest cost and is halved until ``eps``; the final level iterates until the
    L1 marginal violation is below ``tol`` or ``max_iter`` total iterations.

    Two accelerations keep small ``eps`` affordable. Once the plan is sparse the
    updates run on a truncated kernel (entries more than ``margin`` nats below
    their row and column maxima are dropped), re-selected from the dense plan
    every few iterations. Updates are over-relaxed with factor ``omega`` after a
    short warm-up; a tenfold rise in violation drops that level back to plain updates.
    The reported cost and violation always come from the dense plan.
    """
    X, Y = _as_points(X), _as_points(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("point clouds have different dimensions")
    if not 1.0 <= omega < 2.0:
        raise ValueError("omega must lie in [1, 2)")
    C = cdist(X, Y, "sqeuclidean")
    n, m = C.shape
    loga, logb = -np.log(n), -np.log(m)
    f, g = np.zeros(n), np.zeros(m)
    levels = []
    e = max(float(C.max()), eps)
    while e > eps:
        levels.append(e)
        e *= 0.5
    levels.append(eps)
    it = 0
    block = 20
    for li, e in enumerate(levels):
        final = li == len(levels) - 1
        level_tol = tol if final else 1e-3
        cap = max_iter if final else 200
        done, w, best = 0, omega, np.inf
        while it < max_iter and done < cap:
            A = (f[:, None] + g[None, :] - C) / e
            P = np.exp(A + loga + logb)
            violation = float(np.abs(P.sum(1) - 1.0 / n).sum())
            if violation < level_tol:
                break
            if violation > 10.0 * best:
                w = 1.0
            best = min(best, violation)
            sup = _Support(A, C, margin)
            dense = sup.size > 0.25 * n * m
            for _ in range(min(block, cap - done, max_iter - it)):
                relax = w if done >= 10 else 1.0
                if dense:
                    fs = -e * _lse_rows((g[None, :] - C) / e + logb)
                else:
                    fs = -e * _lse_segments((g[sup.cols] - sup.c_row) / e + logb, sup.row_starts)
                f = fs if relax == 1.0 else (1.0 - relax) * f + relax * fs
                if dense:
                    gs = -e * _lse_rows((f[None, :] - C.T) / e + loga)
                else:
                    gs = -e * _lse_segments((f[sup.rows_c] - sup.c_col) / e + loga, sup.col_starts)
                g = gs if relax == 1.0 else (1.0 - relax) * g + relax * gs
                it += 1
                done += 1
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise FloatingPointError("Sinkhorn potentials became non-finite")
    logP = (f[:, None] + g[None, :] - C) / eps + loga + logb
    P = np.exp(logP)
    violation = float(np.abs(P.sum(1) - 1.0 / n).sum())
    return SinkhornResult(float((P * C).sum()), violation, violation < tol, it)


def w2_1d(a, b) -> float:
    """Exact 2-Wasserstein distance between two 1-D empirical distributions."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    cuts = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate([[0.0], cuts]))
    mid = cuts - 0.5 * widths
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sqrt(np.sum(widths * (qa - qb) ** 2)))


def _weights(n, weights):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    return w / w.sum()


def magnetization(samples, weights=None, variant: str = "Ising", q: int = 2, absolute: bool = False) -> float:
    """Average spin (Ising) or majority-state fraction minus ``1/q`` (Potts)."""
    x = np.atleast_2d(np.asarray(samples))
    w = _weights(len(x), weights)
    if variant == "Potts":
        counts = np.stack([(x == k).sum(1) for k in range(q)], axis=1)
        per = counts.max(1) / x.shape[1] - 1.0 / q
    else:
        per = (2.0 * x - 1.0).mean(1)
    if absolute:
        per = np.abs(per)
    return float(np.dot(w, per))


def per_sample_magnetization(samples) -> np.ndarray:
    return (2.0 * np.atleast_2d(samples) - 1.0).mean(1)


def two_point_corr(samples, L: int, r: int, weights=None, variant: str = "Ising", q: int = 2) -> float:
    """Mean correlation between sites ``r`` apart, averaged over rows and columns (periodic)."""
    if not 0 <= r < L:
        raise ValueError(f"offset r must lie in [0, {L})")
    x = np.atleast_2d(np.asarray(samples)).reshape(-1, L, L)
    w = _weights(len(x), weights)
    if variant == "Potts":
        def corr(a, b):
            return (q * (a == b) - 1.0) / (q - 1.0)
    else:
        s = 2.0 * x - 1.0
        x = s

        def corr(a, b):
            return a * b
    h = corr(x, np.roll(x, -r, axis=2)).mean((1, 2))
    v = corr(x, np.roll(x, -r, axis=1)).mean((1, 2))
    return float(np.dot(w, 0.5 * (h + v)))


def logz_estimate(records, tr, min_records: int = 100) -> tuple[float, float]:
    """Importance estimate of ``log Z`` and its delta-method standard error.

    Discrete rewards omit the constant ``-log nu = n log N``; it is added back
    here so the estimate is comparable with enumeration.
    """
    base = terminal_reward(tr, records.x_T) + records.log_rn
    est, se = logz_from_log_weights(base, min_records)
    tgt = tr.target
    if tgt.is_discrete:
        est += tgt.n_sites * np.log(tgt.alphabet)
    return est, se


def logz_from_log_weights(base, min_records: int = 100) -> tuple[float, float]:
    base = np.asarray(base, dtype=float)
    if base.size < min_records:
        raise ValueError(f"need at least {min_records} records, got {base.size}")
    est = float(logsumexp(base) - np.log(base.size))
    w = np.exp(base - base.max())
    se = float(w.std(ddof=1) / (np.sqrt(base.size) * w.mean()))
    return est, se


def global_ess(log_w) -> float:
    lw = np.asarray(log_w, dtype=float)
    lw = lw[np.isfinite(lw)]
    w = np.exp(lw - logsumexp(lw))
    return float(1.0 / (lw.size * np.sum(w**2)))


def mode_histogram(samples, centers, radius: float):
    """Fraction of samples within ``radius`` of each center, plus the unassigned fraction."""
    x = _as_points(samples)
    if len(x) == 0:
        raise ValueError("empty sample set")
    c = _as_points(centers)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(c) > 1 and pdist(c).min() < 2 * radius:
        warnings.warn("mode balls overlap; assigning to the nearest center", RuntimeWarning, stacklevel=2)
    d = cdist(x, c)
    nearest = d.argmin(1)
    inside = d[np.arange(len(x)), nearest] <= radius
    freqs = np.bincount(nearest[inside], minlength=len(c)) / len(x)
    return freqs, float(1.0 - inside.mean())


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def empirical_distribution(samples, target, weights=None) -> np.ndarray:
    """Histogram over the enumerated state space of a discrete target."""
    from .targets import state_index, state_space_size

    idx = state_index(target, samples)
    w = _weights(len(idx), weights)
    return np.bincount(idx, weights=w, minlength=state_space_size(target))
