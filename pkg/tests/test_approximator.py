import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdns.approximator import (
    ControlNetSpec,
    ParamStore,
    ScoreNetSpec,
    _mlp_backward,
    _mlp_forward,
    adam_step,
    backward,
    check_store_matches,
    ema_update,
    forward_control,
    forward_score,
    init_params,
    load_checkpoint,
    save_checkpoint,
    time_features,
)


def test_time_features_examples():
    np.testing.assert_array_equal(time_features(0.0, 2), [0.0, 0.0, 1.0, 1.0])
    tf = time_features(1.0, 3, T=1.0)
    assert abs(tf[0]) < 1e-12 and tf[3] == pytest.approx(-1.0)
    tf = time_features(0.3, 4)
    assert tf.shape == (8,) and np.all(np.abs(tf) <= 1)
    with pytest.raises(ValueError):
        time_features(1.5, 4)
    with pytest.raises(ValueError):
        time_features(-0.1, 4)


def test_control_zero_init_and_determinism():
    spec = ControlNetSpec(3, hidden=(8, 8), time_features=2)
    store = init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((5, 3))
    np.testing.assert_array_equal(forward_control(store, spec, 0.4, x), 0.0)
    rnd = init_params(spec, np.random.default_rng(2), zero_last=False)
    a = forward_control(rnd, spec, 0.4, x[0])
    b = forward_control(rnd, spec, 0.4, x[0])
    assert a.shape == (3,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_control_rejects_nan():
    spec = ControlNetSpec(2, hidden=(4,), time_features=1)
    store = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError, match="non-finite"):
        forward_control(store, spec, 0.1, np.array([np.nan, 0.0]))


def test_score_uniform_init_and_shapes():
    spec = ScoreNetSpec(2, 2, hidden=(6,))
    store = init_params(spec, np.random.default_rng(0))
    s = forward_score(store, spec, np.array([2, 1]))
    assert s.shape == (2, 2)
    np.testing.assert_allclose(s, 0.5)
    s = forward_score(store, spec, np.array([0, 1]))  # fully unmasked input is still valid
    np.testing.assert_allclose(s.sum(-1), 1.0)
    with pytest.raises(ValueError):
        forward_score(store, spec, np.array([3, 0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.integers(0, 10_000))
def test_score_rows_are_probability_vectors(d, N, seed):
    rng = np.random.default_rng(seed)
    spec = ScoreNetSpec(d, N, hidden=(7,))
    store = init_params(spec, rng, zero_last=False)
    for p in store.params:
        p *= 5.0
    x = rng.integers(0, N + 1, size=(6, d))
    s = forward_score(store, spec, x)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)
    assert np.all(s >= 0) and np.all(s <= 1)


def test_backward_zero_adjoint_and_square():
    spec = ControlNetSpec(2, hidden=(4,), time_features=1)
    store = init_params(spec, np.random.default_rng(0), zero_last=False)
    x = np.ones((3, 2))
    grads = backward(store, spec, (0.2, x), np.zeros((3, 2)))
    assert all(np.all(g == 0) for g in grads)
    # single linear weight: z = 1 * w with w = 3, loss z^2 -> dloss/dw = 6
    params = [np.array([[3.0]]), np.array([0.0])]
    z, cache = _mlp_forward(params, np.array([[1.0]]), "gelu")
    g = _mlp_backward(params, cache, 2 * z, "gelu")
    assert g[0][0, 0] == pytest.approx(6.0)


def test_backward_shape_mismatch():
    spec = ControlNetSpec(2, hidden=(4,), time_features=1)
    store = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        backward(store, spec, (0.2, np.ones((3, 2))), np.zeros((2, 2)))


def _fd_check(loss_fn, params, grads, rng, n_probe=25, h=1e-5):
    worst = 0.0
    for _ in range(n_probe):
        i = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[i].shape)
        old = params[i][idx]
        params[i][idx] = old + h
        up = loss_fn()
        params[i][idx] = old - h
        dn = loss_fn()
        params[i][idx] = old
        fd = (up - dn) / (2 * h)
        an = grads[i][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


@pytest.mark.parametrize("act", ["gelu", "tanh", "silu"])
@pytest.mark.parametrize("seed", range(10))
def test_control_gradient_matches_finite_differences(act, seed):
    rng = np.random.default_rng(seed)
    spec = ControlNetSpec(3, hidden=(6, 5), activation=act, time_features=2)
    store = init_params(spec, rng, zero_last=False)
    t = rng.random(4)
    x = rng.standard_normal((4, 3))
    adj = rng.standard_normal((4, 3))
    grads = backward(store, spec, (t, x), adj)

    def loss():
        return float((forward_control(store, spec, t, x) * adj).sum())

    assert _fd_check(loss, store.params, grads, rng) < 1e-4


@pytest.mark.parametrize("skip", [False, True])
@pytest.mark.parametrize("seed", range(10))
def test_score_gradient_matches_finite_differences(skip, seed):
    rng = np.random.default_rng(seed)
    spec = ScoreNetSpec(3, 3, hidden=(5,), skip=skip)
    store = init_params(spec, rng, zero_last=False)
    if skip:
        store.params[-1][:] = rng.standard_normal(store.params[-1].shape)
    x = rng.integers(0, 4, size=(5, 3))
    adj = rng.standard_normal((5, 3, 3))
    grads = backward(store, spec, x, adj)

    def loss():
        return float((forward_score(store, spec, x) * adj).sum())

    assert _fd_check(loss, store.params, grads, rng) < 1e-4


def test_adam_examples():
    store = ParamStore([np.array([0.0])])
    adam_step(store, [np.array([1.0])], lr=0.1, beta1=0.0, beta2=0.9)
    assert store.params[0][0] == pytest.approx(-0.1, rel=1e-6)
    assert store.step_count == 1
    before = store.params[0].copy()
    v_before = store.adam_v[0].copy()
    adam_step(store, [np.array([0.0])], lr=0.1)
    np.testing.assert_array_equal(store.params[0], before)
    assert store.adam_v[0][0] == pytest.approx(0.9 * v_before[0])
    adam_step(store, [np.array([5.0])], lr=0.0)
    np.testing.assert_array_equal(store.params[0], before)


def test_adam_skips_non_finite():
    store = ParamStore([np.array([1.0])])
    with pytest.warns(RuntimeWarning):
        adam_step(store, [np.array([np.nan])], lr=0.1)
    assert store.step_count == 0 and store.params[0][0] == 1.0


def test_ema_examples():
    store = ParamStore([np.array([0.0])], ema=[np.array([1.0])])
    ema_update(store, 0.999)
    assert store.ema[0][0] == pytest.approx(0.999)
    ema_update(store, 0.0)
    assert store.ema[0][0] == 0.0
    store = ParamStore([np.array([2.0])], ema=[np.array([0.0])])
    for _ in range(200):
        ema_update(store, 0.9)
    assert store.ema[0][0] == pytest.approx(2.0, abs=1e-8)
    with pytest.raises(ValueError):
        ema_update(store, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 0.9999))
def test_ema_is_convex_combination(old, p, decay):
    store = ParamStore([np.array([p])], ema=[np.array([old])])
    ema_update(store, decay)
    assert min(old, p) - 1e-12 <= store.ema[0][0] <= max(old, p) + 1e-12


def test_store_invariants_after_init():
    spec = ControlNetSpec(2, hidden=(3,), time_features=1)
    store = init_params(spec, np.random.default_rng(0), zero_last=False)
    assert store.step_count == 0
    for p, m, v, e in zip(store.params, store.adam_m, store.adam_v, store.ema):
        assert p.shape == m.shape == v.shape == e.shape
        np.testing.assert_array_equal(p, e)
        assert np.all(v >= 0)


def test_checkpoint_round_trip(tmp_path):
    spec = ScoreNetSpec(3, 2, hidden=(4,), skip=True)
    store = init_params(spec, np.random.default_rng(0), zero_last=False)
    adam_step(store, [np.ones_like(p) for p in store.params], lr=0.01)
    path = tmp_path / "a.pdns1"
    save_checkpoint(path, store)
    assert path.read_bytes()[:5] == b"PDNS1"
    back = load_checkpoint(path)
    assert back.step_count == 1
    for a, b in zip(store.params + store.adam_v, back.params + back.adam_v):
        np.testing.assert_array_equal(a.astype(np.float32), b)
    check_store_matches(back, spec)
    with pytest.raises(ValueError):
        check_store_matches(back, ScoreNetSpec(3, 2, hidden=(5,)))
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
