"""Reverse-mode autodiff over dense numpy arrays.

A thin tape: every differentiable op computes its result eagerly with numpy
(or a compiled kernel from :mod:`dtalker.kernels` for the recurrences) and,
when a tape is active and an input requires gradients, records one node with
the vector-Jacobian closures needed to pull gradients back.  There is no
graph retention beyond the node list, no broadcasting DSL, no lazy anything;
the model code below calls these functions like a small functional library.

Conventions
-----------
* ``Array`` wraps exactly one ``np.ndarray`` (float32 or float64) plus a
  ``requires_grad`` flag and an accumulated ``grad``.
* Ops validate shapes/dtypes up front and raise :class:`ShapeError` naming
  the op; every op output is checked for NaN/Inf and raises
  :class:`NumericFault` at the first op that produced one.
* Gradients accumulate across uses of the same input within one backward
  pass, and across backward passes until ``ParamStore.zero_grads``.
* The recurrent layers (GRU, LSTM) are fused tape nodes: one forward kernel
  call, one hand-derived backward kernel call, instead of per-timestep graph
  nodes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .backend import USE_NUMBA
from .kernels import build_kernels

_K = build_kernels(USE_NUMBA)

_FLOATS = (np.float32, np.float64)


class ShapeError(ValueError):
    """Shape or dtype mismatch, tagged with the op that rejected it."""


class NumericFault(FloatingPointError):
    """NaN/Inf appeared in an op output."""


class Array:
    """A dense tensor with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Array":
        return Array(self.data, requires_grad=False)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Array(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_TAPE = None


class Tape:
    """Records op nodes while active; ``backward`` replays them in reverse."""

    def __init__(self):
        self._nodes = []
        self._used = False

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE
        _TAPE = None
        return False

    def backward(self, loss: Array):
        if self._used:
            raise RuntimeError("backward() already called on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise RuntimeError("backward: loss is not connected to this tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for out, pulls in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for inp, vjp in pulls:
                if inp.requires_grad:
                    inp.accumulate(vjp(g))
        self._nodes = []


@contextmanager
def no_grad():
    """Suspend recording; ops run as plain numpy inside."""
    global _TAPE
    saved, _TAPE = _TAPE, None
    try:
        yield
    finally:
        _TAPE = saved


def _check_finite(op: str, data: np.ndarray):
    if not np.isfinite(np.sum(data)):
        raise NumericFault(f"{op}: non-finite values in output")


def _same_dtype(op: str, *xs: Array):
    dt = xs[0].data.dtype
    for x in xs[1:]:
        if x.data.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {[str(x.data.dtype) for x in xs]}")
    return dt


def _make(op: str, data: np.ndarray, pulls):
    """Wrap an op result; record it when a tape is live and a parent needs grads."""
    _check_finite(op, data)
    rg = _TAPE is not None and any(inp.requires_grad for inp, _ in pulls)
    out = Array(data, requires_grad=rg)
    if rg:
        _TAPE._nodes.append((out, pulls))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Array, b: Array) -> Array:
    _same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e
    return _make("add", data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: Array, b: Array) -> Array:
    _same_dtype("sub", a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from e
    return _make("sub", data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: Array, b: Array) -> Array:
    _same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e
    return _make("mul", data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def scale(a: Array, c: float) -> Array:
    c = float(c)
    return _make("scale", a.data * c, [(a, lambda g: g * c)])


def add_scalar(a: Array, c: float) -> Array:
    c = float(c)
    return _make("add_scalar", a.data + c, [(a, lambda g: g)])


def square(a: Array) -> Array:
    return _make("square", a.data * a.data, [(a, lambda g: g * (2.0 * a.data))])


def sqrt(a: Array) -> Array:
    """Elementwise square root; inputs must be strictly positive for a finite vjp."""
    out = np.sqrt(a.data)
    return _make("sqrt", out, [(a, lambda g: g / (2.0 * out))])


def log(a: Array) -> Array:
    """Elementwise natural log; inputs must be strictly positive."""
    return _make("log", np.log(a.data), [(a, lambda g: g / a.data)])


def matmul(a: Array, b: Array) -> Array:
    _same_dtype("matmul", a, b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks {a.ndim} @ {b.ndim} unsupported")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data
    if a.ndim == 2 and b.ndim == 2:
        pulls = [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)]
    elif a.ndim == 1 and b.ndim == 2:
        pulls = [(a, lambda g: b.data @ g), (b, lambda g: np.outer(a.data, g))]
    elif a.ndim == 2 and b.ndim == 1:
        pulls = [(a, lambda g: np.outer(g, b.data)), (b, lambda g: a.data.T @ g)]
    else:
        pulls = [(a, lambda g: g * b.data), (b, lambda g: g * a.data)]
    return _make("matmul", data, pulls)


def transpose(a: Array) -> Array:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), [(a, lambda g: g.T.copy())])


def reshape(a: Array, shape) -> Array:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def concat(arrays, axis: int = 0) -> Array:
    if not arrays:
        raise ShapeError("concat: empty input list")
    _same_dtype("concat", *arrays)
    try:
        data = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: shapes {[x.shape for x in arrays]} on axis {axis}") from e
    pulls = []
    off = 0
    for x in arrays:
        w = x.shape[axis]
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(off, off + w)
        pulls.append((x, (lambda s: lambda g: g[tuple(s)])(tuple(sl))))
        off += w
    return _make("concat", data, pulls)


def repeat_row(v: Array, n: int) -> Array:
    if v.ndim != 1:
        raise ShapeError(f"repeat_row: expected rank 1, got shape {v.shape}")
    data = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return _make("repeat_row", data, [(v, lambda g: g.sum(axis=0))])


def embed_row(table: Array, idx: int) -> Array:
    if table.ndim != 2:
        raise ShapeError(f"embed_row: expected rank 2 table, got shape {table.shape}")
    if not 0 <= idx < table.shape[0]:
        raise IndexError(f"embed_row: row {idx} out of range for table {table.shape}")

    def pull(g):
        z = np.zeros_like(table.data)
        z[idx] = g
        return z

    return _make("embed_row", table.data[idx].copy(), [(table, pull)])


def take_cols(a: Array, cols) -> Array:
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError(f"take_cols: expected rank 2, got shape {a.shape}")

    def pull(g):
        z = np.zeros_like(a.data)
        z[:, cols] = g
        return z

    return _make("take_cols", a.data[:, cols].copy(), [(a, pull)])


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def tanh(a: Array) -> Array:
    out = np.tanh(a.data)
    return _make("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a: Array) -> Array:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, [(a, lambda g: g * out * (1.0 - out))])


def relu(a: Array) -> Array:
    out = np.maximum(a.data, 0.0)
    return _make("relu", out, [(a, lambda g: g * (a.data > 0.0))])


def softmax(a: Array, axis: int = -1) -> Array:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (g - dot) * out

    return _make("softmax", out, [(a, pull)])


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Normalise over the last axis: ``gamma * (x - mu) / sqrt(var + eps) + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    data = xhat * gamma.data + beta.data

    def pull_x(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return istd * (dxhat - m1 - xhat * m2)

    red = tuple(range(x.ndim - 1))
    return _make("layer_norm", data, [
        (x, pull_x),
        (gamma, lambda g: (g * xhat).sum(axis=red)),
        (beta, lambda g: g.sum(axis=red)),
    ])


def l2_normalize(a: Array, axis: int = -1, eps: float = 1e-8) -> Array:
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nc = np.maximum(n, eps)
    out = a.data / nc
    live = (n > eps).astype(a.data.dtype)

    def pull(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (g - live * out * dot) / nc

    return _make("l2_normalize", out, [(a, pull)])


# ---------------------------------------------------------------------------
# reductions and losses


def reduce_sum(a: Array, axis=None, keepdims: bool = False) -> Array:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make("reduce_sum", data, [(a, pull)])


def reduce_mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    if axis is None:
        cnt = a.size
    else:
        cnt = a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return np.broadcast_to(g / cnt, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / cnt, a.shape).copy()

    return _make("reduce_mean", data, [(a, pull)])


def cross_entropy_logits(z: Array, pos: int) -> Array:
    """``-log softmax(z)[pos]`` for a 1-D logit vector, numerically stable."""
    if z.ndim != 1:
        raise ShapeError(f"cross_entropy_logits: expected rank 1, got shape {z.shape}")
    if not 0 <= pos < z.shape[0]:
        raise IndexError(f"cross_entropy_logits: pos {pos} out of range {z.shape}")
    m = z.data.max()
    e = np.exp(z.data - m)
    se = e.sum()
    loss = np.asarray(math.log(se) + m - z.data[pos], dtype=z.dtype)
    p = e / se

    def pull(g):
        d = p.copy()
        d[pos] -= 1.0
        return g * d

    return _make("cross_entropy_logits", loss, [(z, pull)])


def softmax_cross_entropy_rows(logits: Array, targets) -> Array:
    """Mean over rows of ``-log softmax(row)[target]``; targets is a row-aligned index list."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy_rows: expected rank 2, got shape {logits.shape}")
    idx = np.asarray(targets, dtype=np.intp)
    R = logits.shape[0]
    if idx.shape != (R,):
        raise ShapeError(f"softmax_cross_entropy_rows: {idx.shape[0]} targets for {R} rows")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    se = e.sum(axis=1, keepdims=True)
    lse = np.log(se)[:, 0] + m[:, 0]
    loss = np.asarray((lse - logits.data[np.arange(R), idx]).mean(), dtype=logits.dtype)
    p = e / se

    def pull(g):
        d = p.copy()
        d[np.arange(R), idx] -= 1.0
        return (g / R) * d

    return _make("softmax_cross_entropy_rows", loss, [(logits, pull)])


# ---------------------------------------------------------------------------
# structured layers


def conv1d(x: Array, w: Array, b, stride: int) -> Array:
    """Valid-mode strided 1-D convolution. x [Cin, L], w [Cout, Cin, K] -> [Cout, Lout].

    Runs as im2col + BLAS; the windowed view costs nothing and the contraction
    is a single matmul, which beats an explicit compiled loop here.
    """
    _same_dtype("conv1d", x, w)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d: x {x.shape}, w {w.shape}")
    cin, L = x.shape
    cout, cin_w, K = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: channel mismatch x {x.shape} vs w {w.shape}")
    if stride < 1 or L < K:
        raise ShapeError(f"conv1d: length {L} < kernel {K} (stride {stride})")
    lout = (L - K) // stride + 1
    xd = np.ascontiguousarray(x.data)
    s0, s1 = xd.strides
    cols = as_strided(xd, shape=(cin, lout, K), strides=(s0, stride * s1, s1))
    data = np.tensordot(w.data, cols, axes=([1, 2], [0, 2]))
    if b is not None:
        _same_dtype("conv1d", x, b)
        if b.shape != (cout,):
            raise ShapeError(f"conv1d: bias {b.shape} vs {cout} channels")
        data = data + b.data[:, None]

    def pull_x(g):
        dx = np.zeros_like(xd)
        for k in range(K):
            dx[:, k:k + stride * lout:stride] += np.tensordot(w.data[:, :, k], g, axes=([0], [0]))
        return dx

    def pull_w(g):
        return np.tensordot(g, cols, axes=([1], [1]))

    pulls = [(x, pull_x), (w, pull_w)]
    if b is not None:
        pulls.append((b, lambda g: g.sum(axis=1)))
    return _make("conv1d", data, pulls)


def gru_layer(x: Array, w_ih: Array, w_hh: Array, b_ih: Array, b_hh: Array) -> Array:
    """Unidirectional GRU, zero initial state. x [F, In] -> [F, H].

    w_ih [In, 3H], w_hh [3H, H], biases [3H]; one fused tape node.
    """
    _same_dtype("gru_layer", x, w_ih, w_hh, b_ih, b_hh)
    H = w_hh.shape[1]
    if w_hh.shape != (3 * H, H) or w_ih.shape[1] != 3 * H or x.shape[1] != w_ih.shape[0]:
        raise ShapeError(f"gru_layer: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    if b_ih.shape != (3 * H,) or b_hh.shape != (3 * H,):
        raise ShapeError(f"gru_layer: biases {b_ih.shape}/{b_hh.shape} vs 3H={3 * H}")
    xp = np.ascontiguousarray(x.data @ w_ih.data + b_ih.data)
    h0 = np.zeros(H, dtype=x.dtype)
    h_all, r_all, z_all, n_all, hn_all = _K.gru_fwd(xp, h0, w_hh.data, b_hh.data)

    memo = {}

    def _bwd(g):
        if "dxp" not in memo:
            gc = np.ascontiguousarray(g)
            memo["dxp"], memo["dwhh"], memo["dbhh"] = _K.gru_bwd(
                gc, h_all, h0, r_all, z_all, n_all, hn_all, w_hh.data)
        return memo

    return _make("gru_layer", h_all, [
        (x, lambda g: _bwd(g)["dxp"] @ w_ih.data.T),
        (w_ih, lambda g: x.data.T @ _bwd(g)["dxp"]),
        (w_hh, lambda g: _bwd(g)["dwhh"]),
        (b_ih, lambda g: _bwd(g)["dxp"].sum(axis=0)),
        (b_hh, lambda g: _bwd(g)["dbhh"]),
    ])


def lstm_layer(x: Array, w_ih: Array, w_hh: Array, b_ih: Array, b_hh: Array,
               reverse: bool = False) -> Array:
    """Unidirectional LSTM, zero initial state. x [F, In] -> [F, H].

    ``reverse=True`` runs the recurrence on the time-flipped sequence and
    flips the output back, which is the building block for the biLSTM.
    """
    _same_dtype("lstm_layer", x, w_ih, w_hh, b_ih, b_hh)
    H = w_hh.shape[1]
    if w_hh.shape != (4 * H, H) or w_ih.shape[1] != 4 * H or x.shape[1] != w_ih.shape[0]:
        raise ShapeError(f"lstm_layer: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    if b_ih.shape != (4 * H,) or b_hh.shape != (4 * H,):
        raise ShapeError(f"lstm_layer: biases {b_ih.shape}/{b_hh.shape} vs 4H={4 * H}")
    xp = x.data @ w_ih.data + b_ih.data
    if reverse:
        xp = xp[::-1]
    xp = np.ascontiguousarray(xp)
    h0 = np.zeros(H, dtype=x.dtype)
    c0 = np.zeros(H, dtype=x.dtype)
    h_all, c_all, i_all, f_all, g_all, o_all = _K.lstm_fwd(xp, h0, c0, w_hh.data, b_hh.data)
    out = h_all[::-1].copy() if reverse else h_all

    memo = {}

    def _bwd(g):
        if "dxp" not in memo:
            gc = np.ascontiguousarray(g[::-1] if reverse else g)
            dxp, dwhh, dbhh = _K.lstm_bwd(
                gc, h_all, c_all, i_all, f_all, g_all, o_all, h0, c0, w_hh.data)
            memo["dxp"] = dxp[::-1].copy() if reverse else dxp
            memo["dwhh"] = dwhh
            memo["dbhh"] = dbhh
        return memo

    return _make("lstm_layer", out, [
        (x, lambda g: _bwd(g)["dxp"] @ w_ih.data.T),
        (w_ih, lambda g: x.data.T @ _bwd(g)["dxp"]),
        (w_hh, lambda g: _bwd(g)["dwhh"]),
        (b_ih, lambda g: _bwd(g)["dxp"].sum(axis=0)),
        (b_hh, lambda g: _bwd(g)["dbhh"]),
    ])


# ---------------------------------------------------------------------------
# parameter registry and finite-difference checking


class ParamStore:
    """Named parameter registry; names are unique, iteration is name-sorted."""

    def __init__(self):
        self._params: dict[str, Array] = {}

    def add(self, name: str, data, requires_grad: bool = True, dtype=None) -> Array:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = Array(np.array(data, dtype=dtype), requires_grad=requires_grad)
        self._params[name] = arr
        return arr

    def __getitem__(self, name: str) -> Array:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def trainable(self):
        for name, arr in self.items():
            if arr.requires_grad:
                yield name, arr

    def zero_grads(self):
        for arr in self._params.values():
            arr.grad = None

    def grads(self):
        """name -> gradient array (zeros where no gradient has accumulated)."""
        out = {}
        for name, arr in self.items():
            out[name] = arr.grad if arr.grad is not None else np.zeros_like(arr.data)
        return out

    def param_count(self, prefix: str = "") -> int:
        return sum(a.size for n, a in self.items() if n.startswith(prefix))


def grad_check(f, store: ParamStore, eps: float = 1e-5) -> float:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure returning a scalar loss built from
    the trainable entries of ``store``; all of those must be float64.  The
    reported figure is ``max |analytic - fd| / max(1e-8, |fd|)`` over every
    trainable coordinate.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-4]")
    trainables = [(n, a) for n, a in store.trainable()]
    for name, arr in trainables:
        if arr.data.dtype != np.float64:
            raise ValueError(f"grad_check: parameter {name!r} is {arr.data.dtype}, need float64")

    store.zero_grads()
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ShapeError(f"grad_check: f returned shape {loss.shape}, expected scalar")
    base = float(loss.data)
    if float(f().data) != base:
        raise RuntimeError("grad_check: f is not deterministic between calls")
    tape.backward(loss)
    analytic = {n: (a.grad.copy() if a.grad is not None else np.zeros_like(a.data))
                for n, a in trainables}

    max_rel = 0.0
    for name, arr in trainables:
        flat = arr.data.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(f().data)
            flat[i] = orig - eps
            lm = float(f().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            rel = abs(an[i] - fd) / max(1e-8, abs(fd))
            if rel > max_rel:
                max_rel = rel
    store.zero_grads()
    return max_rel
