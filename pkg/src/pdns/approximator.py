"""Small differentiable approximators with hand-written reverse mode.

Two fixed architectures are supported:

* a time-conditioned MLP ``u(t, x)`` used as the control of the SDE sampler;
* a per-position categorical score MLP ``s(x)`` over masked sequences whose
  output rows are probability vectors.

Parameters live in a :class:`ParamStore` together with Adam moments and an
EMA shadow copy.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"PDNS1"
_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


@dataclass(frozen=True)
class ControlNetSpec:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    time_features: int = 8
    T: float = 1.0

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim + 2 * self.time_features, *self.hidden, self.input_dim]


@dataclass(frozen=True)
class ScoreNetSpec:
    seq_len: int
    alphabet: int
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "gelu"
    skip: bool = False  # extra linear map from the one-hot input straight to the logits

    @property
    def mask(self) -> int:
        return self.alphabet

    @property
    def layer_sizes(self) -> list[int]:
        return [self.seq_len * (self.alphabet + 1), *self.hidden, self.seq_len * self.alphabet]


@dataclass
class ParamStore:
    params: list[np.ndarray]
    adam_m: list[np.ndarray] = field(default_factory=list)
    adam_v: list[np.ndarray] = field(default_factory=list)
    ema: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if not self.adam_m:
            self.adam_m = [np.zeros_like(p) for p in self.params]
        if not self.adam_v:
            self.adam_v = [np.zeros_like(p) for p in self.params]
        if not self.ema:
            self.ema = [p.copy() for p in self.params]

    def copy(self) -> "ParamStore":
        return ParamStore(
            [p.copy() for p in self.params],
            [m.copy() for m in self.adam_m],
            [v.copy() for v in self.adam_v],
            [e.copy() for e in self.ema],
            self.step_count,
        )

    def astype(self, dtype) -> "ParamStore":
        cast = lambda arrs: [np.asarray(a, dtype=dtype).copy() for a in arrs]  # noqa: E731
        return ParamStore(cast(self.params), cast(self.adam_m), cast(self.adam_v), cast(self.ema), self.step_count)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))


def init_params(spec, rng: np.random.Generator, dtype=np.float64, zero_last: bool = True) -> ParamStore:
    """Fan-in scaled Gaussian init; the final layer is zeroed by default.

    A zero final layer gives ``u == 0`` for the control net and uniform rows
    for the score net, i.e. the initial model equals the reference process.
    """
    sizes = spec.layer_sizes
    params = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            W = np.zeros((n_in, n_out))
        else:
            W = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
        params += [W.astype(dtype), np.zeros(n_out, dtype=dtype)]
    if getattr(spec, "skip", False):
        params.append(np.zeros((sizes[0], sizes[-1]), dtype=dtype))
    return ParamStore(params)


def param_shapes(spec) -> list[tuple[int, ...]]:
    sizes = spec.layer_sizes
    shapes = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(n_in, n_out), (n_out,)]
    if getattr(spec, "skip", False):
        shapes.append((sizes[0], sizes[-1]))
    return shapes


# ---------------------------------------------------------------------------
# activations and the generic MLP pass


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        z2 = z * z
        return 0.5 * z * (1.0 + np.tanh(_GELU_K * z * (1.0 + _GELU_C * z2)))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "silu":
        return z / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        z2 = z * z
        th = np.tanh(_GELU_K * z * (1.0 + _GELU_C * z2))
        return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * _GELU_K * (1.0 + 3 * _GELU_C * z2)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    raise ValueError(f"unknown activation {kind!r}")


def _mlp_forward(params: Sequence[np.ndarray], h: np.ndarray, act: str):
    n_layers = len(params) // 2
    cache = []
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        z = h @ W + b
        cache.append((h, z))
        h = _act(z, act) if i < n_layers - 1 else z
    return h, cache


def _mlp_backward(params: Sequence[np.ndarray], cache, g: np.ndarray, act: str) -> list[np.ndarray]:
    n_layers = len(params) // 2
    grads: list[np.ndarray] = [None] * len(params)  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        h, z = cache[i]
        if i < n_layers - 1:
            g = g * _act_grad(z, act)
        W = params[2 * i]
        grads[2 * i] = h.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ W.T
    return grads


# ---------------------------------------------------------------------------
# control network


def time_features(t, F: int, T: float = 1.0) -> np.ndarray:
    """Sinusoidal embedding ``[sin(w_j t)]_j ++ [cos(w_j t)]_j``.

    Frequencies are geometric between ``pi/T`` and ``64 pi/T``. ``t`` may be a
    scalar (returns shape ``(2F,)``) or an array of times (returns ``(n, 2F)``).
    """
    if F < 1:
        raise ValueError("time_features needs F >= 1")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > T) or np.any(~np.isfinite(t_arr)):
        raise ValueError(f"time outside [0, {T}]")
    omegas = np.pi / T * (np.geomspace(1.0, 64.0, F) if F > 1 else np.ones(1))
    arg = np.multiply.outer(t_arr, omegas)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _control_inputs(spec: ControlNetSpec, t, x: np.ndarray) -> np.ndarray:
    x2 = np.atleast_2d(x)
    if x2.shape[1] != spec.input_dim:
        raise ValueError(f"expected x with {spec.input_dim} columns, got shape {x.shape}")
    if not np.all(np.isfinite(x2)):
        raise ValueError("non-finite value in control-net input")
    tf = time_features(t, spec.time_features, spec.T)
    if tf.ndim == 1:
        tf = np.broadcast_to(tf, (x2.shape[0], tf.shape[0]))
    return np.concatenate([x2, tf.astype(x2.dtype, copy=False)], axis=1)


def forward_control(params, spec: ControlNetSpec, t, x, return_cache: bool = False):
    """Evaluate ``u(t, x)``; ``x`` is ``(d,)`` or ``(n, d)``, ``t`` scalar or ``(n,)``."""
    params = _param_list(params)
    inp = _control_inputs(spec, t, np.asarray(x, dtype=params[0].dtype))
    out, cache = _mlp_forward(params, inp, spec.activation)
    if np.ndim(x) == 1:
        out = out[0]
    return (out, cache) if return_cache else out


# ---------------------------------------------------------------------------
# score network


def one_hot(x: np.ndarray, spec: ScoreNetSpec, dtype=np.float64) -> np.ndarray:
    x2 = np.atleast_2d(np.asarray(x))
    if x2.shape[1] != spec.seq_len:
        raise ValueError(f"expected sequences of length {spec.seq_len}, got {x2.shape[1]}")
    if x2.min(initial=0) < 0 or x2.max(initial=0) > spec.mask:
        raise ValueError(f"entries must lie in 0..{spec.alphabet} (mask={spec.mask})")
    n, d = x2.shape
    k = spec.alphabet + 1
    out = np.zeros((n, d * k), dtype=dtype)
    out[np.arange(n)[:, None], np.arange(d)[None, :] * k + x2] = 1.0
    return out


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_score(params, spec: ScoreNetSpec, x, return_cache: bool = False):
    """Row-stochastic ``(d, N)`` score for one sequence or ``(n, d, N)`` for a batch."""
    params = _param_list(params)
    logits, cache = _score_logits(params, spec, x)
    probs = _softmax_rows(logits.reshape(-1, spec.seq_len, spec.alphabet))
    if np.ndim(x) == 1:
        probs = probs[0]
    return (probs, (cache, probs)) if return_cache else probs


def score_logits(params, spec: ScoreNetSpec, x) -> np.ndarray:
    logits, _ = _score_logits(_param_list(params), spec, x)
    return logits.reshape(-1, spec.seq_len, spec.alphabet)


def _score_logits(params, spec: ScoreNetSpec, x):
    inp = one_hot(x, spec, dtype=params[0].dtype)
    if spec.skip:
        logits, cache = _mlp_forward(params[:-1], inp, spec.activation)
        return logits + inp @ params[-1], cache
    return _mlp_forward(params, inp, spec.activation)


# ---------------------------------------------------------------------------
# reverse mode


def backward(params, spec, batch, loss_adjoint, cache=None, wrt: str = "output") -> list[np.ndarray]:
    """Gradient of ``sum(loss_adjoint * net(batch))`` with respect to the parameters.

    ``batch`` is ``(t, x)`` for the control net and ``x`` for the score net.
    For the score net ``wrt="logits"`` accepts the adjoint of the pre-softmax
    logits directly, which is the numerically preferable route for
    log-likelihood losses.
    """
    params = _param_list(params)
    g = np.asarray(loss_adjoint)
    if isinstance(spec, ControlNetSpec):
        t, x = batch
        if cache is None:
            _, cache = forward_control(params, spec, t, x, return_cache=True)
        g2 = np.atleast_2d(g)
        n = cache[0][0].shape[0]
        if g2.shape != (n, spec.input_dim):
            raise ValueError(f"adjoint shape {g.shape} does not match output ({n}, {spec.input_dim})")
        return _mlp_backward(params, cache, g2.astype(params[0].dtype, copy=False), spec.activation)
    if isinstance(spec, ScoreNetSpec):
        if cache is None:
            _, cache = forward_score(params, spec, batch, return_cache=True)
        mlp_cache, probs = cache
        g3 = g.reshape((-1, spec.seq_len, spec.alphabet)) if g.size == probs.size else None
        if g3 is None:
            raise ValueError(f"adjoint shape {g.shape} does not match output {probs.shape}")
        if wrt == "output":
            g3 = probs * (g3 - (g3 * probs).sum(axis=-1, keepdims=True))
        elif wrt != "logits":
            raise ValueError("wrt must be 'output' or 'logits'")
        g2 = g3.reshape(g3.shape[0], -1).astype(params[0].dtype, copy=False)
        if spec.skip:
            grads = _mlp_backward(params[:-1], mlp_cache, g2, spec.activation)
            return grads + [mlp_cache[0][0].T @ g2]
        return _mlp_backward(params, mlp_cache, g2, spec.activation)
    raise TypeError(f"unsupported spec {type(spec).__name__}")


def _param_list(params) -> list[np.ndarray]:
    return params.params if isinstance(params, ParamStore) else list(params)


# ---------------------------------------------------------------------------
# optimisation


def adam_step(store: ParamStore, grads, lr: float, beta1: float = 0.0, beta2: float = 0.9, eps: float = 1e-8) -> ParamStore:
    """In-place Adam update with bias correction; non-finite gradients skip the step."""
    if not all(np.all(np.isfinite(g)) for g in grads):
        warnings.warn("non-finite gradient; Adam step skipped", RuntimeWarning, stacklevel=2)
        return store
    store.step_count += 1
    k = store.step_count
    c1 = 1.0 - beta1**k
    c2 = 1.0 - beta2**k
    for p, m, v, g in zip(store.params, store.adam_m, store.adam_v, grads):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def ema_update(store: ParamStore, decay: float) -> ParamStore:
    if not 0.0 <= decay < 1.0:
        raise ValueError("EMA decay must lie in [0, 1)")
    for e, p in zip(store.ema, store.params):
        e *= decay
        e += (1.0 - decay) * p
    return store


# ---------------------------------------------------------------------------
# checkpoint format: magic, step count, array count, then arrays as
# (rank, dims..., raw float32), all little-endian


def save_checkpoint(path, store: ParamStore) -> None:
    arrays = [*store.params, *store.adam_m, *store.adam_v, *store.ema]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", store.step_count, len(store.params)))
        for a in arrays:
            a = np.asarray(a)
            fh.write(struct.pack("<Q", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> ParamStore:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a PDNS1 checkpoint")
    pos = len(MAGIC)
    step_count, n = struct.unpack_from("<QQ", data, pos)
    pos += 16
    arrays = []
    for _ in range(4 * n):
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        arrays.append(arr.astype(dtype))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ParamStore(arrays[:n], arrays[n : 2 * n], arrays[2 * n : 3 * n], arrays[3 * n :], int(step_count))


def check_store_matches(store: ParamStore, spec) -> None:
    expected = param_shapes(spec)
    got = [p.shape for p in store.params]
    if got != expected:
        raise ValueError(f"checkpoint shapes {got} do not match network spec {expected}")
