"""Tape/op contracts: FD gradients over 20 seeds, fused-kernel oracles, errors."""

import numpy as np
import pytest

from dtalker import autodiff as ad
from dtalker import backend, kernels

N_SEEDS = 20
GRAD_TOL = 1e-3


def _arr(rng, *shape, lo=None, hi=None, margin=0.0):
    x = rng.normal(size=shape)
    if lo is not None:
        x = rng.uniform(lo, hi, size=shape)
    if margin:
        x = x + margin * np.sign(x)
    return x


def _weighted(op, rng):
    """Random-weighted scalarization so symmetric gradient bugs cannot cancel.

    The weights are drawn once here; the returned closure must evaluate to the
    same value on every call or grad_check rejects it.
    """
    w = ad.Array(rng.normal(size=op().shape))
    return lambda: ad.reduce_sum(ad.mul(op(), w))


# Each case registers trainable float64 inputs and returns a scalar-loss
# closure; grad_check compares the tape gradient against central differences
# coordinate by coordinate.

def _case_add_broadcast(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    b = store.add("b", _arr(rng, 4))
    return _weighted(lambda: ad.add(a, b), rng)


def _case_add_keepdim_broadcast(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    b = store.add("b", _arr(rng, 3, 1))
    return _weighted(lambda: ad.add(a, b), rng)


def _case_sub(store, rng):
    a = store.add("a", _arr(rng, 2, 5))
    b = store.add("b", _arr(rng, 2, 5))
    return _weighted(lambda: ad.sub(a, b), rng)


def _case_mul_broadcast(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    b = store.add("b", _arr(rng, 4))
    return _weighted(lambda: ad.mul(a, b), rng)


def _case_scale(store, rng):
    a = store.add("a", _arr(rng, 2, 3))
    return _weighted(lambda: ad.scale(a, -1.7), rng)


def _case_add_scalar(store, rng):
    a = store.add("a", _arr(rng, 2, 3))
    return _weighted(lambda: ad.add_scalar(a, 0.31), rng)


def _case_square(store, rng):
    a = store.add("a", _arr(rng, 3, 3))
    return _weighted(lambda: ad.square(a), rng)


def _case_sqrt(store, rng):
    a = store.add("a", _arr(rng, 2, 4, lo=0.5, hi=2.0))
    return _weighted(lambda: ad.sqrt(a), rng)


def _case_log(store, rng):
    a = store.add("a", _arr(rng, 2, 4, lo=0.5, hi=3.0))
    return _weighted(lambda: ad.log(a), rng)


def _case_matmul(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    b = store.add("b", _arr(rng, 4, 2))
    return _weighted(lambda: ad.matmul(a, b), rng)


def _case_transpose(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    return _weighted(lambda: ad.transpose(a), rng)


def _case_reshape(store, rng):
    a = store.add("a", _arr(rng, 2, 6))
    return _weighted(lambda: ad.reshape(a, (3, 4)), rng)


def _case_concat_rows(store, rng):
    a = store.add("a", _arr(rng, 2, 3))
    b = store.add("b", _arr(rng, 1, 3))
    return _weighted(lambda: ad.concat([a, b], axis=0), rng)


def _case_concat_cols(store, rng):
    a = store.add("a", _arr(rng, 3, 2))
    b = store.add("b", _arr(rng, 3, 1))
    return _weighted(lambda: ad.concat([a, b], axis=1), rng)


def _case_repeat_row(store, rng):
    v = store.add("v", _arr(rng, 4))
    return _weighted(lambda: ad.repeat_row(v, 3), rng)


def _case_embed_row(store, rng):
    t = store.add("t", _arr(rng, 5, 3))
    return _weighted(lambda: ad.embed_row(t, 2), rng)


def _case_take_cols(store, rng):
    a = store.add("a", _arr(rng, 3, 5))
    return _weighted(lambda: ad.take_cols(a, [0, 2, 4]), rng)


def _case_tanh(store, rng):
    a = store.add("a", _arr(rng, 3, 3))
    return _weighted(lambda: ad.tanh(a), rng)


def _case_sigmoid(store, rng):
    a = store.add("a", _arr(rng, 3, 3))
    return _weighted(lambda: ad.sigmoid(a), rng)


def _case_relu(store, rng):
    # keep inputs away from the kink so central differences stay valid
    a = store.add("a", _arr(rng, 3, 4, margin=0.2))
    return _weighted(lambda: ad.relu(a), rng)


def _case_softmax_rows(store, rng):
    a = store.add("a", _arr(rng, 3, 5))
    return _weighted(lambda: ad.softmax(a, axis=-1), rng)


def _case_softmax_cols(store, rng):
    a = store.add("a", _arr(rng, 4, 3))
    return _weighted(lambda: ad.softmax(a, axis=0), rng)


def _case_layer_norm(store, rng):
    x = store.add("x", _arr(rng, 3, 6))
    g = store.add("g", _arr(rng, 6, lo=0.5, hi=1.5))
    b = store.add("b", _arr(rng, 6))
    return _weighted(lambda: ad.layer_norm(x, g, b), rng)


def _case_l2_normalize(store, rng):
    a = store.add("a", _arr(rng, 3, 4, margin=0.3))
    return _weighted(lambda: ad.l2_normalize(a, axis=-1), rng)


def _case_reduce_sum_all(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    return lambda: ad.reduce_sum(ad.square(a))


def _case_reduce_sum_axis(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    return _weighted(lambda: ad.reduce_sum(a, axis=0, keepdims=True), rng)


def _case_reduce_mean_all(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    return lambda: ad.reduce_mean(ad.square(a))


def _case_reduce_mean_axis(store, rng):
    a = store.add("a", _arr(rng, 3, 4))
    return _weighted(lambda: ad.reduce_mean(a, axis=1), rng)


def _case_cross_entropy_logits(store, rng):
    z = store.add("z", _arr(rng, 5))
    return lambda: ad.cross_entropy_logits(z, 1)


def _case_softmax_ce_rows(store, rng):
    z = store.add("z", _arr(rng, 4, 5))
    return lambda: ad.softmax_cross_entropy_rows(z, [0, 2, 4, 1])


def _case_conv1d(store, rng):
    x = store.add("x", _arr(rng, 3, 11))
    w = store.add("w", 0.5 * _arr(rng, 2, 3, 4))
    b = store.add("b", _arr(rng, 2))
    return _weighted(lambda: ad.conv1d(x, w, b, stride=2), rng)


def _case_conv1d_nobias(store, rng):
    x = store.add("x", _arr(rng, 2, 9))
    w = store.add("w", 0.5 * _arr(rng, 3, 2, 3))
    return _weighted(lambda: ad.conv1d(x, w, None, stride=1), rng)


def _case_gru(store, rng):
    H = 4
    x = store.add("x", _arr(rng, 5, 3))
    w_ih = store.add("w_ih", 0.4 * _arr(rng, 3, 3 * H))
    w_hh = store.add("w_hh", 0.4 * _arr(rng, 3 * H, H))
    b_ih = store.add("b_ih", 0.2 * _arr(rng, 3 * H))
    b_hh = store.add("b_hh", 0.2 * _arr(rng, 3 * H))
    return _weighted(lambda: ad.gru_layer(x, w_ih, w_hh, b_ih, b_hh), rng)


def _case_lstm(store, rng):
    H = 3
    x = store.add("x", _arr(rng, 5, 3))
    w_ih = store.add("w_ih", 0.4 * _arr(rng, 3, 4 * H))
    w_hh = store.add("w_hh", 0.4 * _arr(rng, 4 * H, H))
    b_ih = store.add("b_ih", 0.2 * _arr(rng, 4 * H))
    b_hh = store.add("b_hh", 0.2 * _arr(rng, 4 * H))
    return _weighted(lambda: ad.lstm_layer(x, w_ih, w_hh, b_ih, b_hh), rng)


def _case_lstm_reverse(store, rng):
    H = 3
    x = store.add("x", _arr(rng, 5, 3))
    w_ih = store.add("w_ih", 0.4 * _arr(rng, 3, 4 * H))
    w_hh = store.add("w_hh", 0.4 * _arr(rng, 4 * H, H))
    b_ih = store.add("b_ih", 0.2 * _arr(rng, 4 * H))
    b_hh = store.add("b_hh", 0.2 * _arr(rng, 4 * H))
    return _weighted(lambda: ad.lstm_layer(x, w_ih, w_hh, b_ih, b_hh, reverse=True), rng)


GRAD_CASES = {
    name[6:]: fn for name, fn in list(globals().items()) if name.startswith("_case_")
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    for seed in range(N_SEEDS):
        rng = np.random.default_rng(seed)
        store = ad.ParamStore()
        f = GRAD_CASES[name](store, rng)
        err = ad.grad_check(f, store)
        assert err < GRAD_TOL, f"{name}, seed {seed}: rel err {err:.3e}"


# ---------------------------------------------------------------------------
# forward oracles


def test_conv1d_forward_matches_naive_loops():
    rng = np.random.default_rng(0)
    for stride, use_bias in [(1, True), (2, False), (3, True)]:
        x = rng.normal(size=(3, 17))
        w = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=4) if use_bias else None
        out = ad.conv1d(ad.Array(x), ad.Array(w),
                        ad.Array(b) if use_bias else None, stride=stride)
        lout = (17 - 5) // stride + 1
        ref = np.zeros((4, lout))
        for co in range(4):
            for j in range(lout):
                ref[co, j] = np.sum(w[co] * x[:, j * stride:j * stride + 5])
                if use_bias:
                    ref[co, j] += b[co]
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


def _naive_gru(x, w_ih, w_hh, b_ih, b_hh):
    H = w_hh.shape[1]
    h = np.zeros(H)
    out = []
    for t in range(x.shape[0]):
        xp = x[t] @ w_ih + b_ih
        hh = w_hh @ h + b_hh
        r = 1.0 / (1.0 + np.exp(-(xp[:H] + hh[:H])))
        z = 1.0 / (1.0 + np.exp(-(xp[H:2 * H] + hh[H:2 * H])))
        n = np.tanh(xp[2 * H:] + r * hh[2 * H:])
        h = (1.0 - z) * n + z * h
        out.append(h)
    return np.stack(out)


def _naive_lstm(x, w_ih, w_hh, b_ih, b_hh):
    H = w_hh.shape[1]
    h = np.zeros(H)
    c = np.zeros(H)
    out = []
    for t in range(x.shape[0]):
        p = x[t] @ w_ih + b_ih + w_hh @ h + b_hh
        i = 1.0 / (1.0 + np.exp(-p[:H]))
        f = 1.0 / (1.0 + np.exp(-p[H:2 * H]))
        g = np.tanh(p[2 * H:3 * H])
        o = 1.0 / (1.0 + np.exp(-p[3 * H:]))
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.stack(out)


def test_gru_forward_matches_naive_recurrence():
    rng = np.random.default_rng(3)
    H = 4
    x = rng.normal(size=(7, 3))
    w_ih = 0.4 * rng.normal(size=(3, 3 * H))
    w_hh = 0.4 * rng.normal(size=(3 * H, H))
    b_ih = 0.2 * rng.normal(size=3 * H)
    b_hh = 0.2 * rng.normal(size=3 * H)
    out = ad.gru_layer(ad.Array(x), ad.Array(w_ih), ad.Array(w_hh),
                       ad.Array(b_ih), ad.Array(b_hh))
    np.testing.assert_allclose(out.data, _naive_gru(x, w_ih, w_hh, b_ih, b_hh), atol=1e-12)


def test_lstm_forward_matches_naive_recurrence():
    rng = np.random.default_rng(4)
    H = 3
    x = rng.normal(size=(7, 2))
    w_ih = 0.4 * rng.normal(size=(2, 4 * H))
    w_hh = 0.4 * rng.normal(size=(4 * H, H))
    b_ih = 0.2 * rng.normal(size=4 * H)
    b_hh = 0.2 * rng.normal(size=4 * H)
    args = (ad.Array(x), ad.Array(w_ih), ad.Array(w_hh), ad.Array(b_ih), ad.Array(b_hh))
    out = ad.lstm_layer(*args)
    np.testing.assert_allclose(out.data, _naive_lstm(x, w_ih, w_hh, b_ih, b_hh), atol=1e-12)
    # reverse mode is flip -> run -> flip
    rev = ad.lstm_layer(*args, reverse=True)
    ref = _naive_lstm(x[::-1], w_ih, w_hh, b_ih, b_hh)[::-1]
    np.testing.assert_allclose(rev.data, ref, atol=1e-12)


def test_softmax_layer_norm_l2_normalize_forward():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 6))
    sm = ad.softmax(ad.Array(x), axis=-1).data
    np.testing.assert_allclose(sm.sum(axis=1), 1.0, atol=1e-12)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    np.testing.assert_allclose(sm, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    g = rng.normal(size=6)
    b = rng.normal(size=6)
    ln = ad.layer_norm(ad.Array(x), ad.Array(g), ad.Array(b)).data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    np.testing.assert_allclose(ln, (x - mu) / np.sqrt(var + 1e-5) * g + b, atol=1e-12)

    nrm = ad.l2_normalize(ad.Array(x), axis=-1).data
    np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-10)


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(6)
    z = rng.normal(size=5)
    loss = ad.cross_entropy_logits(ad.Array(z), 3).item()
    ref = -np.log(np.exp(z)[3] / np.exp(z).sum())
    assert abs(loss - ref) < 1e-12

    logits = rng.normal(size=(3, 4))
    tgt = [1, 0, 3]
    loss = ad.softmax_cross_entropy_rows(ad.Array(logits), tgt).item()
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    ref = np.mean([-np.log(p[r, t]) for r, t in enumerate(tgt)])
    assert abs(loss - ref) < 1e-12


# ---------------------------------------------------------------------------
# tape semantics


def test_tape_nesting_rejected():
    with ad.Tape():
        with pytest.raises(RuntimeError, match="nesting"):
            with ad.Tape():
                pass


def test_backward_twice_rejected():
    a = ad.Array(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.square(a))
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="already called"):
        tape.backward(loss)


def test_backward_requires_scalar_and_connection():
    a = ad.Array(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.square(a)
    with pytest.raises(ad.ShapeError):
        tape.backward(out)
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.square(a.detach()))
    with pytest.raises(RuntimeError, match="not connected"):
        tape.backward(loss)


def test_no_recording_outside_tape():
    a = ad.Array(np.ones(3), requires_grad=True)
    out = ad.reduce_sum(ad.square(a))
    assert not out.requires_grad
    assert a.grad is None


def test_no_grad_suppresses_recording():
    a = ad.Array(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            frozen = ad.square(a)
        assert not frozen.requires_grad
        loss = ad.reduce_sum(ad.mul(ad.square(a), frozen))
    tape.backward(loss)
    # only the recorded path contributes: d/da sum(a^2 * const) = 2a * const
    np.testing.assert_allclose(a.grad, 2.0 * np.ones(3), atol=1e-12)


def test_grads_accumulate_until_zeroed():
    store = ad.ParamStore()
    a = store.add("a", np.arange(3.0))
    for _ in range(2):
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.square(a))
        tape.backward(loss)
    np.testing.assert_allclose(a.grad, 4.0 * np.arange(3.0), atol=1e-12)
    store.zero_grads()
    assert a.grad is None


def test_broadcast_gradient_shapes():
    a = ad.Array(np.ones((2, 3)), requires_grad=True)
    b = ad.Array(np.ones((1, 3)), requires_grad=True)
    c = ad.Array(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.add(ad.add(a, b), c))
    tape.backward(loss)
    assert a.grad.shape == (2, 3) and np.all(a.grad == 1.0)
    assert b.grad.shape == (1, 3) and np.all(b.grad == 2.0)
    assert c.grad.shape == (3,) and np.all(c.grad == 2.0)


# ---------------------------------------------------------------------------
# error taxonomy


def test_shape_errors_name_the_op():
    a = ad.Array(np.ones((2, 3)))
    b = ad.Array(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(a, b)
    with pytest.raises(ad.ShapeError, match="transpose"):
        ad.transpose(ad.Array(np.ones(3)))
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([])
    with pytest.raises(ad.ShapeError, match="mixed dtypes"):
        ad.add(ad.Array(np.ones(3, dtype=np.float32)), ad.Array(np.ones(3)))


def test_conv_and_recurrent_shape_errors():
    x = ad.Array(np.ones((3, 10)))
    with pytest.raises(ad.ShapeError, match="channel mismatch"):
        ad.conv1d(x, ad.Array(np.ones((2, 4, 3))), None, stride=1)
    with pytest.raises(ad.ShapeError):
        ad.conv1d(x, ad.Array(np.ones((2, 3, 11))), None, stride=1)
    with pytest.raises(ad.ShapeError, match="bias"):
        ad.conv1d(x, ad.Array(np.ones((2, 3, 3))), ad.Array(np.ones(5)), stride=1)
    args = [ad.Array(np.ones((4, 3))), ad.Array(np.ones((3, 12))),
            ad.Array(np.ones((12, 5))), ad.Array(np.ones(12)), ad.Array(np.ones(12))]
    with pytest.raises(ad.ShapeError, match="gru_layer"):
        ad.gru_layer(*args)
    with pytest.raises(ad.ShapeError, match="lstm_layer"):
        ad.lstm_layer(*args)


def test_index_errors():
    t = ad.Array(np.ones((4, 3)))
    with pytest.raises(IndexError):
        ad.embed_row(t, 4)
    with pytest.raises(IndexError):
        ad.cross_entropy_logits(ad.Array(np.ones(3)), -1)


def test_numeric_fault_on_nonfinite_output():
    with np.errstate(all="ignore"):
        with pytest.raises(ad.NumericFault, match="log"):
            ad.log(ad.Array(np.zeros(3)))
        with pytest.raises(ad.NumericFault, match="scale"):
            ad.scale(ad.Array(np.full(2, 1e308)), 1e10)


# ---------------------------------------------------------------------------
# parameter store and grad_check plumbing


def test_param_store_bookkeeping():
    store = ad.ParamStore()
    store.add("enc.w", np.ones((2, 3)))
    store.add("dec.w", np.ones(4), requires_grad=False)
    store.add("enc.b", np.ones(2))
    assert store.names() == ["dec.w", "enc.b", "enc.w"]
    assert store.param_count() == 12
    assert store.param_count("enc.") == 8
    assert [n for n, _ in store.trainable()] == ["enc.b", "enc.w"]
    assert "enc.w" in store and len(store) == 3
    with pytest.raises(ValueError, match="already registered"):
        store.add("enc.w", np.zeros(1))
    grads = store.grads()
    assert set(grads) == {"dec.w", "enc.b", "enc.w"}
    assert np.all(grads["enc.w"] == 0.0)


def test_grad_check_guards():
    store = ad.ParamStore()
    a = store.add("a", np.ones(3, dtype=np.float32))
    with pytest.raises(ValueError, match="float64"):
        ad.grad_check(lambda: ad.reduce_sum(a), store)

    store = ad.ParamStore()
    a = store.add("a", np.ones(3))
    with pytest.raises(ValueError, match="eps"):
        ad.grad_check(lambda: ad.reduce_sum(a), store, eps=1e-2)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.grad_check(lambda: ad.square(a), store)

    state = {"n": 0}

    def flaky():
        state["n"] += 1
        return ad.reduce_sum(ad.scale(a, float(state["n"])))

    with pytest.raises(RuntimeError, match="deterministic"):
        ad.grad_check(flaky, store)


# ---------------------------------------------------------------------------
# kernel backends


def test_backend_flag_parsing(monkeypatch):
    monkeypatch.setenv("DTALKER_NUMBA", "0")
    assert not backend.numba_requested()
    monkeypatch.setenv("DTALKER_NUMBA", "1")
    assert backend.numba_requested()
    monkeypatch.delenv("DTALKER_NUMBA")
    assert backend.numba_requested()


@pytest.mark.skipif(not backend.numba_available(), reason="numba not installed")
def test_compiled_and_numpy_kernels_agree():
    kc = kernels.build_kernels(True)
    kp = kernels.build_kernels(False)
    rng = np.random.default_rng(12)
    H, F = 3, 6

    xp = rng.normal(size=(F, 3 * H))
    w_hh = 0.4 * rng.normal(size=(3 * H, H))
    b_hh = 0.2 * rng.normal(size=3 * H)
    h0 = np.zeros(H)
    out_c = kc.gru_fwd(xp, h0, w_hh, b_hh)
    out_p = kp.gru_fwd(xp, h0, w_hh, b_hh)
    for a, b in zip(out_c, out_p):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    dh = rng.normal(size=(F, H))
    bwd_c = kc.gru_bwd(dh, out_c[0], h0, *out_c[1:], w_hh)
    bwd_p = kp.gru_bwd(dh, out_p[0], h0, *out_p[1:], w_hh)
    for a, b in zip(bwd_c, bwd_p):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    xp = rng.normal(size=(F, 4 * H))
    w_hh = 0.4 * rng.normal(size=(4 * H, H))
    b_hh = 0.2 * rng.normal(size=4 * H)
    c0 = np.zeros(H)
    out_c = kc.lstm_fwd(xp, h0, c0, w_hh, b_hh)
    out_p = kp.lstm_fwd(xp, h0, c0, w_hh, b_hh)
    for a, b in zip(out_c, out_p):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    bwd_c = kc.lstm_bwd(dh, *out_c, h0, c0, w_hh)
    bwd_p = kp.lstm_bwd(dh, *out_p, h0, c0, w_hh)
    for a, b in zip(bwd_c, bwd_p):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
