"""Diffusion motion decoder: x0-parameterised denoiser over blendshape frames.

Per frame the decoder sees [x_t, F_a, p, s_t]: the noisy coefficients, the
aligned audio feature, the personalized prior (tiled over frames) and a
learned step embedding.  The stack is layer norm -> 3 GRU layers -> linear
head, predicting the clean coefficients directly.  Sampling walks the
schedule with either deterministic jumps (ddim) or the stochastic ancestral
chain; the predictor is injected as a callable so oracle predictors can
drive the loop in tests.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import schedule as sch
from .autodiff import Array

HIDDEN = 128
LAYERS = 3
D_STEP = 16


def _uni(rng, h: int, shape, dtype):
    k = 1.0 / np.sqrt(h)
    return rng.uniform(-k, k, shape).astype(dtype)


def build_decoder(store: ad.ParamStore, rng, T: int, dtype=np.float32, dim: int = 52,
                  d_a: int = 64, d_e: int = 64, d_s: int = D_STEP, hidden: int = HIDDEN,
                  layers: int = LAYERS, prefix: str = "decoder.") -> None:
    d_in = dim + d_a + d_e + d_s
    store.add(f"{prefix}step_emb", (rng.standard_normal((T + 1, d_s)) * 0.5).astype(dtype))
    store.add(f"{prefix}ln.g", np.ones(d_in, dtype))
    store.add(f"{prefix}ln.b", np.zeros(d_in, dtype))
    cin = d_in
    for i in range(layers):
        store.add(f"{prefix}gru{i}.w_ih", _uni(rng, hidden, (cin, 3 * hidden), dtype))
        store.add(f"{prefix}gru{i}.w_hh", _uni(rng, hidden, (3 * hidden, hidden), dtype))
        store.add(f"{prefix}gru{i}.b_ih", _uni(rng, hidden, 3 * hidden, dtype))
        store.add(f"{prefix}gru{i}.b_hh", _uni(rng, hidden, 3 * hidden, dtype))
        cin = hidden
    store.add(f"{prefix}head.w", _uni(rng, hidden, (hidden, dim), dtype))
    store.add(f"{prefix}head.b", np.zeros(dim, dtype))


def decoder_layers(store: ad.ParamStore, prefix: str = "decoder.") -> int:
    i = 0
    while f"{prefix}gru{i}.w_ih" in store:
        i += 1
    return i


def predict_x0(x_t: Array, f_a: Array, p: Array, t: int, store: ad.ParamStore,
               prefix: str = "decoder.") -> Array:
    """Denoise a noisy motion block x_t [F, D] at step t; returns x0_hat [F, D]."""
    emb = store[f"{prefix}step_emb"]
    if not 0 <= t <= emb.shape[0] - 1:
        raise ValueError(f"predict_x0: step {t} out of range [0, {emb.shape[0] - 1}]")
    F = x_t.shape[0]
    if f_a.shape[0] != F:
        raise ad.ShapeError(f"predict_x0: x_t has {F} frames, F_a has {f_a.shape[0]}")
    s_t = ad.embed_row(emb, t)
    h = ad.concat([x_t, f_a, ad.repeat_row(p, F), ad.repeat_row(s_t, F)], axis=1)
    h = ad.layer_norm(h, store[f"{prefix}ln.g"], store[f"{prefix}ln.b"])
    for i in range(decoder_layers(store, prefix)):
        h = ad.gru_layer(h, store[f"{prefix}gru{i}.w_ih"], store[f"{prefix}gru{i}.w_hh"],
                         store[f"{prefix}gru{i}.b_ih"], store[f"{prefix}gru{i}.b_hh"])
    return ad.add(ad.matmul(h, store[f"{prefix}head.w"]), store[f"{prefix}head.b"])


def rec_loss(x0_hat: Array, x0: Array) -> Array:
    """Mean squared error over all frames and channels."""
    if x0_hat.shape != x0.shape:
        raise ad.ShapeError(f"rec_loss: {x0_hat.shape} vs {x0.shape}")
    return ad.reduce_mean(ad.square(ad.sub(x0_hat, x0)))


def _check_steps(steps, T: int):
    if not steps:
        raise ValueError("sample: empty step list")
    if any(not 1 <= s <= T for s in steps):
        raise ValueError(f"sample: steps {steps} outside [1, {T}]")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"sample: steps {steps} must be strictly decreasing")


def sample(predict_fn, shape, sched: sch.NoiseSchedule, rng, mode: str = "ddim",
           steps=None, dtype=np.float32) -> np.ndarray:
    """Draw x_T ~ N(0, I) and denoise to x_0.

    predict_fn(x, t) -> x0_hat operates on plain arrays.  ``steps`` is the
    descending list of steps at which the predictor is evaluated; the default
    is the full chain T..1.  ddim jumps between consecutive entries (then to
    0); ancestral requires the contiguous chain down to 1.
    """
    T = sched.T
    steps = list(range(T, 0, -1)) if steps is None else [int(s) for s in steps]
    _check_steps(steps, T)
    x = rng.standard_normal(shape).astype(dtype)
    if mode == "ddim":
        for i, s in enumerate(steps):
            u = steps[i + 1] if i + 1 < len(steps) else 0
            x = sch.ddim_step(x, predict_fn(x, s), s, u, sched)
    elif mode == "ancestral":
        if steps[0] - steps[-1] != len(steps) - 1 or steps[-1] != 1:
            raise ValueError(f"sample: ancestral mode needs a contiguous chain t..1, got {steps}")
        for s in steps:
            z = rng.standard_normal(shape).astype(dtype)
            x = sch.ancestral_step(x, predict_fn(x, s), s, z, sched)
    else:
        raise ValueError(f"sample: unknown mode {mode!r}")
    return x


def model_predict_fn(store: ad.ParamStore, f_a: Array, p: Array, prefix: str = "decoder."):
    """Bind a trained decoder and its conditioning into a sample() predictor."""

    def predict(x: np.ndarray, t: int) -> np.ndarray:
        with ad.no_grad():
            return predict_x0(Array(x), f_a, p, t, store, prefix).data

    return predict
