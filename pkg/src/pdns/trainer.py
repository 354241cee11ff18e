"""Proximal WDCE training: losses, the inner loop, and the staged outer loop."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .approximator import (
    ControlNetSpec,
    ParamStore,
    ScoreNetSpec,
    adam_step,
    backward,
    ema_update,
    forward_control,
    forward_score,
    save_checkpoint,
)
from .ctmc import DiscreteRollout, mask_corrupt, rollout_discrete
from .metrics import logz_from_log_weights
from .ou import OUSchedule, TerminalReward, bridge_sample, cond_score, terminal_reward
from .proximal import (
    ReplayBuffer,
    SchedulerState,
    adaptive_eta,
    kl_estimate,
    normalize_and_ess,
    predefined_eta,
    proximal_log_weight,
    resample,
    stage_log_line,
)
from .sde import Rollout, annealed_rollout, rollout

ALGORITHMS = ("weight", "resample")


class StageAbort(RuntimeError):
    """Raised when the local ESS of a stage collapses below ``10 / N``."""

    def __init__(self, message: str, line: dict):
        super().__init__(message)
        self.line = line


@dataclass
class TrainConfig:
    stages: int = 5
    inner_steps: int = 200
    batch_size: int = 256
    buffer_size: int = 1024
    buffer_refresh_every: int = 0
    algorithm: str = "weight"
    prox_target: str = "lambda"
    scheduler: str = "predefined"
    lambdas: list | None = None
    n_refine: int = 0
    eps: float = 0.1
    lr: float = 1e-3
    refine_lr: float | None = None  # learning rate once lambda has reached 0
    beta1: float = 0.0
    beta2: float = 0.9
    ema_decay: float = 0.99
    lambda_min: float = 0.01
    replicates: int = 1
    warm_start_steps: int = 0
    eval_samples: int = 2000
    seed: int = 0
    resample_method: str = "multinomial"
    param_dtype: str = "float64"

    def __post_init__(self):
        if min(self.batch_size, self.buffer_size, self.replicates) < 1:
            raise ValueError("batch_size, buffer_size and replicates must be positive")
        if min(self.stages, self.inner_steps, self.buffer_refresh_every, self.n_refine, self.warm_start_steps) < 0:
            raise ValueError("stage and step counts must be nonnegative")
        if self.batch_size > self.buffer_size:
            raise ValueError("batch_size must not exceed buffer_size")
        if not 0.0 < self.lambda_min <= 0.5:
            raise ValueError("lambda_min must lie in (0, 0.5]")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.prox_target not in ("eta", "lambda"):
            raise ValueError("prox_target must be 'eta' or 'lambda'")
        if self.scheduler not in ("predefined", "adaptive"):
            raise ValueError("scheduler must be 'predefined' or 'adaptive'")
        if self.scheduler == "adaptive" and self.eps <= 0:
            raise ValueError("adaptive scheduler needs eps > 0")
        if self.refine_lr is not None and self.refine_lr <= 0:
            raise ValueError("refine_lr must be positive")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("invalid optimizer settings")
        if self.param_dtype not in ("float32", "float64"):
            raise ValueError("param_dtype must be 'float32' or 'float64'")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.scheduler == "predefined" and self.lambdas is not None:
            lam = [1.0, *map(float, self.lambdas)]
            if any(b > a for a, b in zip(lam, lam[1:])):
                raise ValueError("lambda schedule must be nonincreasing")
            if len(self.lambdas) != self.stages:
                raise ValueError(f"{len(self.lambdas)} lambdas given for {self.stages} stages")

    def lambda_schedule(self) -> list[float]:
        if self.lambdas is not None:
            return [float(v) for v in self.lambdas]
        n_lin = self.stages - self.n_refine
        if n_lin < 1:
            return [0.0] * self.stages
        return [1.0 - k / n_lin for k in range(1, n_lin + 1)] + [0.0] * self.n_refine


@dataclass
class World:
    """Everything a run needs besides the training hyperparameters."""

    target: object
    spec: ControlNetSpec | ScoreNetSpec
    sched: OUSchedule | None = None
    ctmc_steps: int = 64
    T: float = 1.0
    workers: int = 1
    tr: TerminalReward = field(init=False)

    def __post_init__(self):
        discrete = self.target.is_discrete
        if discrete and not isinstance(self.spec, ScoreNetSpec):
            raise ValueError("discrete targets need a score network")
        if not discrete:
            if not isinstance(self.spec, ControlNetSpec) or self.sched is None:
                raise ValueError("continuous targets need a control network and an OU schedule")
            if self.spec.input_dim != self.target.dim:
                raise ValueError("control network dimension differs from the target dimension")
        elif self.spec.seq_len != self.target.n_sites or self.spec.alphabet != self.target.alphabet:
            raise ValueError("score network shape differs from the target")
        sigma = self.sched.sigma_bar if self.sched is not None else 1.0
        self.tr = TerminalReward(self.target, sigma)

    @property
    def discrete(self) -> bool:
        return self.target.is_discrete

    def _one(self, params, n, rng):
        if self.discrete:
            return rollout_discrete(params, self.spec, self.ctmc_steps, n, rng, self.T)
        return rollout(params, self.spec, self.sched, n, rng)

    def rollout(self, params, n: int, rng: np.random.Generator):
        """Rollouts of the model with ``params``; ``workers > 1`` splits into independent streams."""
        if self.workers <= 1 or n < 2 * self.workers:
            return self._one(params, n, rng)
        sizes = [n // self.workers + (i < n % self.workers) for i in range(self.workers)]
        kids = rng.spawn(self.workers)
        with ThreadPoolExecutor(self.workers) as pool:
            parts = list(pool.map(lambda a: self._one(params, *a), zip(sizes, kids)))
        if self.discrete:
            return DiscreteRollout(
                np.concatenate([p.x_T for p in parts]),
                np.concatenate([p.log_rn for p in parts]),
                np.concatenate([p.n_jumps for p in parts]),
                sum(p.n_floored for p in parts),
            )
        return Rollout(
            np.concatenate([p.x_T for p in parts]),
            np.concatenate([p.log_rn for p in parts]),
            np.concatenate([p.control_energy for p in parts]),
            sum(p.n_dropped for p in parts),
        )


# ---------------------------------------------------------------------------
# losses


def wdce_loss_continuous(params, spec: ControlNetSpec, x_T, weights, sched: OUSchedule, rng):
    """Weighted bridge-matching loss and its parameter gradient.

    Each entry gets one ``(X_0, t, X_t)`` draw; the regression target is
    ``sigma_t * cond_score(X_t, x_T, t)``. The loss is the batch mean of
    ``w * |u - target|^2 / 2``.
    """
    x_T = np.atleast_2d(np.asarray(x_T, dtype=float))
    w = np.asarray(weights, dtype=float)
    B, d = x_T.shape
    x0 = sched.sigma_bar * rng.standard_normal((B, d))
    t = rng.random(B) * sched.T
    while np.any(t >= sched.T):
        hit = t >= sched.T
        t[hit] = rng.random(int(hit.sum())) * sched.T
    xt = bridge_sample(sched, x0, x_T, t, rng)
    target = sched.sigma(t)[:, None] * cond_score(sched, xt, x_T, t)
    u, cache = forward_control(params, spec, t, xt, return_cache=True)
    loss, adj = regression_terms(u, target, w)
    grads = backward(params, spec, (t, xt), adj, cache=cache)
    return loss, grads


def regression_terms(u, target, weights):
    """Batch-mean weighted squared residual and its adjoint with respect to ``u``."""
    res = u - target
    w = np.asarray(weights, dtype=float)
    loss = float(np.mean(w * 0.5 * (res * res).sum(1)))
    return loss, w[:, None] * res / len(w)


def discrete_wdce_from_logits(logits, x_T, x_tilde, lam, weights, mask):
    """Loss ``mean_j w_j / lam_j * sum_masked -log softmax(logits)`` and its logits adjoint."""
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    masked = x_tilde == mask
    rows = np.arange(x_T.shape[0])[:, None]
    cols = np.arange(x_T.shape[1])[None, :]
    nll = -logp[rows, cols, x_T]
    scale = np.asarray(weights, dtype=float) / np.asarray(lam, dtype=float)
    n = x_T.shape[0]
    loss = float(np.sum(scale * np.where(masked, nll, 0.0).sum(1)) / n)
    g = np.exp(logp)
    g[rows, cols, x_T] -= 1.0
    g *= (masked * (scale / n)[:, None])[:, :, None]
    return loss, g


def wdce_loss_discrete(params, spec: ScoreNetSpec, x_T, weights, rng, lambda_min: float = 0.01, replicates: int = 1):
    """Masked cross-entropy loss; returns ``(loss, grads, n_skipped)``.

    Every entry is replicated ``replicates`` times with independent
    ``lambda ~ U[lambda_min, 1]`` and masks. A draw that masks nothing is
    redrawn once and then dropped.
    """
    x_T = np.atleast_2d(np.asarray(x_T, dtype=np.int64))
    w = np.repeat(np.asarray(weights, dtype=float), replicates)
    x_T = np.repeat(x_T, replicates, axis=0)
    n = len(x_T)
    lam = rng.uniform(lambda_min, 1.0, size=n)
    xt = mask_corrupt(x_T, lam, rng, spec.mask)
    empty = ~(xt == spec.mask).any(1)
    if empty.any():
        xt[empty] = mask_corrupt(x_T[empty], lam[empty], rng, spec.mask)
        empty = ~(xt == spec.mask).any(1)
    n_skipped = int(empty.sum())
    w = np.where(empty, 0.0, w)
    probs, cache = forward_score(params, spec, xt, return_cache=True)
    mlp_cache, _ = cache
    logits = np.log(np.maximum(probs, 1e-300))
    loss, g = discrete_wdce_from_logits(logits, x_T, xt, lam, w, spec.mask)
    grads = backward(params, spec, xt, g, cache=cache, wrt="logits")
    return loss, grads, n_skipped


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageContext:
    """Mutable per-run state shared across stages."""

    cfg: TrainConfig
    world: World
    store: ParamStore
    state: SchedulerState
    rng: np.random.Generator
    log: Callable[[dict], None] | None = None
    lines: list = field(default_factory=list)
    checkpoint_dir: Path | None = None


def _fill_buffer(ctx: StageContext, records=None):
    """Roll out the EMA model, weight the records for the current stage, and build the buffer."""
    cfg, world, state = ctx.cfg, ctx.world, ctx.state
    if records is None:
        records = world.rollout([e.copy() for e in ctx.store.ema], cfg.buffer_size, ctx.rng)
    r = terminal_reward(world.tr, records.x_T)
    base = r + records.log_rn
    log_w = proximal_log_weight(records.log_rn, r, state)
    buf = ReplayBuffer.from_log_weights(records.x_T, log_w, stage=state.k)
    buf.n_dropped += records.n_dropped
    _, ess_global = normalize_and_ess(base[np.isfinite(base)])
    return buf, float(ess_global), records


def _loss_and_grads(ctx: StageContext, states, weights):
    cfg, world = ctx.cfg, ctx.world
    if world.discrete:
        loss, grads, _ = wdce_loss_discrete(
            ctx.store.params, world.spec, states, weights, ctx.rng, cfg.lambda_min, cfg.replicates
        )
        return loss, grads
    return wdce_loss_continuous(ctx.store.params, world.spec, states, weights, world.sched, ctx.rng)


def _train_steps(ctx: StageContext, buf: ReplayBuffer, n_steps: int, refill=None):
    """Adam + EMA on minibatches of ``buf``; ``refill()`` returns a fresh buffer when due."""
    cfg = ctx.cfg
    losses = []
    refreshes = 0
    for s in range(1, n_steps + 1):
        states, weights = buf.sample_batch(cfg.batch_size, ctx.rng)
        loss, grads = _loss_and_grads(ctx, states, weights)
        lr = cfg.refine_lr if cfg.refine_lr is not None and ctx.state.lam == 0.0 else cfg.lr
        adam_step(ctx.store, grads, lr, cfg.beta1, cfg.beta2)
        ema_update(ctx.store, cfg.ema_decay)
        losses.append(loss)
        if refill is not None and cfg.buffer_refresh_every and s % cfg.buffer_refresh_every == 0:
            buf = refill()
            refreshes += 1
    return buf, losses, refreshes


def _choose_eta(ctx: StageContext, k: int):
    cfg = ctx.cfg
    if cfg.scheduler == "predefined":
        predefined_eta(ctx.state, cfg.lambda_schedule(), k)
        return None
    records = ctx.world.rollout([e.copy() for e in ctx.store.ema], cfg.buffer_size, ctx.rng)
    base = terminal_reward(ctx.world.tr, records.x_T) + records.log_rn
    eta, _ = adaptive_eta(base, cfg.eps)
    ctx.state.push(eta)
    return records


def run_stage(ctx: StageContext, k: int) -> dict:
    """Run proximal stage ``k``: pick the step size, fill the buffer, train, log."""
    cfg, state = ctx.cfg, ctx.state
    records = _choose_eta(ctx, k)

    def refill():
        b, _, _ = _fill_buffer(ctx)
        _check_ess(b)
        return b if cfg.algorithm == "weight" else resample(b, ctx.rng, cfg.resample_method)

    def _check_ess(b):
        if b.ess < 10.0 / cfg.buffer_size:
            line = stage_log_line(k, state.lam, state.eta, b.ess, math.nan, kl_estimate(b.weights), b.n_dropped, aborted=True)
            raise StageAbort(f"stage {k}: local ESS {b.ess:.3g} below 10/N (weight collapse)", line)

    buf, ess_global, _ = _fill_buffer(ctx, records)
    _check_ess(buf)
    ess_local, kl, dropped = buf.ess, kl_estimate(buf.weights), buf.n_dropped
    if cfg.algorithm == "resample":
        buf = resample(buf, ctx.rng, cfg.resample_method)
    _, losses, refreshes = _train_steps(ctx, buf, cfg.inner_steps, refill)
    line = stage_log_line(
        k,
        state.lam,
        state.eta,
        ess_local,
        ess_global,
        kl,
        dropped,
        loss=float(np.mean(losses)) if losses else None,
        refreshes=refreshes,
    )
    ctx.lines.append(line)
    if ctx.log is not None:
        ctx.log(line)
    if ctx.checkpoint_dir is not None:
        save_checkpoint(ctx.checkpoint_dir / f"stage_{k:03d}.pdns1", ctx.store)
    return line


def warm_start(ctx: StageContext) -> dict | None:
    """Annealed warm start for continuous targets (uniform weights); no-op for discrete ones."""
    cfg, world = ctx.cfg, ctx.world
    if world.discrete or cfg.warm_start_steps == 0:
        return None
    xs = annealed_rollout(world.tr, world.sched, cfg.buffer_size, ctx.rng)
    buf = ReplayBuffer(xs, np.zeros(len(xs)), np.full(len(xs), 1.0 / len(xs)))

    def refill():
        x = annealed_rollout(world.tr, world.sched, cfg.buffer_size, ctx.rng)
        return ReplayBuffer(x, np.zeros(len(x)), np.full(len(x), 1.0 / len(x)))

    _, losses, refreshes = _train_steps(ctx, buf, cfg.warm_start_steps, refill)
    # the warm-started network becomes the rollout policy of stage 1
    ctx.store.ema = [p.copy() for p in ctx.store.params]
    return {"steps": cfg.warm_start_steps, "loss": float(np.mean(losses)), "refreshes": refreshes}


@dataclass
class RunResult:
    store: ParamStore
    report: dict
    samples: np.ndarray
    log_weights: np.ndarray
    status: str = "ok"


def evaluate_model(world: World, params, n: int, rng: np.random.Generator):
    records = world.rollout(params, n, rng)
    base = terminal_reward(world.tr, records.x_T) + records.log_rn
    return records, base


def run_pdns(
    cfg: TrainConfig,
    world: World,
    store: ParamStore | None = None,
    log: Callable[[dict], None] | None = None,
    checkpoint_dir=None,
) -> RunResult:
    """Warm start, then ``cfg.stages`` proximal stages, then a final evaluation rollout."""
    from .approximator import init_params

    rng = np.random.default_rng(cfg.seed)
    if store is None:
        store = init_params(world.spec, rng, dtype=np.dtype(cfg.param_dtype))
    state = SchedulerState(cfg.scheduler, cfg.prox_target)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    ctx = StageContext(cfg, world, store, state, rng, log, checkpoint_dir=ckpt)
    report = {"config": asdict(cfg), "status": "ok"}
    report["warm_start"] = warm_start(ctx)
    try:
        for k in range(1, cfg.stages + 1):
            run_stage(ctx, k)
    except StageAbort as exc:
        report["status"] = "aborted"
        report["error"] = str(exc)
        ctx.lines.append(exc.line)
        if log is not None:
            log(exc.line)
    report["stages"] = ctx.lines
    report["lambda_trace"] = list(state.lambda_history)
    report["eta_trace"] = ["inf" if math.isinf(e) else e for e in state.eta_history]
    records, base = evaluate_model(world, store.ema, cfg.eval_samples, rng)
    finite = base[np.isfinite(base)]
    _, ess = normalize_and_ess(finite)
    report["global_ess"] = float(ess)
    if finite.size >= 100:
        est, se = logz_from_log_weights(finite)
        if world.discrete:
            est += world.target.n_sites * np.log(world.target.alphabet)
        report["logz"] = {"estimate": est, "se": se}
    return RunResult(store, report, records.x_T, base, report["status"])
