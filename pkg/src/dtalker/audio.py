"""Audio feature encoders: the frozen large backbone and its small student.

Both map a mono waveform to per-frame features F_a [F, d_a] aligned with the
motion frame rate.  The conv stacks run at a fixed total stride (512 for the
large encoder, 256 for the small one) and the resulting feature sequence is
linearly resampled onto the F frame centres with a cached interpolation
matrix, so non-integer samples-per-frame ratios cost one extra matmul.

Large: a fixed quadrature log-filterbank front end (Gabor cosine / sine
pairs, 60 Hz .. 6 kHz) whose pairwise energies give alias-free band
envelopes, followed by 3 strided conv+relu blocks (32->192->384->512), two
residual FF blocks 512->2048->512 and a linear projection to d_a.  It is
built frozen and never trained, standing in for a pretrained speech
backbone; stages that distil away from it keep using it as the feature
target of the alignment loss.  Sampling the raw filter outputs without the
quadrature pooling would alias the carrier oscillation into the stride grid
and destroy the envelope information, which is why the front end squares and
pair-sums before the random projections.

Small: the same quadrature front end with half-length kernels (so the
lowest bands trade some frequency resolution for compute), one conv+relu
block on the log envelopes, a biLSTM with 32 units per direction and a
linear head 64->d_a.  Unlike the large bank the small filters are trainable;
the Gabor shapes are only their initialisation.  About 1.5% of the large
encoder's parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Array

D_AUDIO = 64

LARGE_CHANNELS = (64, 192, 384, 512)
LARGE_KERNELS = (512, 8, 4, 4)
LARGE_STRIDES = (8, 8, 4, 2)
LARGE_FF_HIDDEN = 2048

SMALL_CHANNELS = (64, 64)
SMALL_KERNELS = (256, 16)
SMALL_STRIDES = (16, 8)
SMALL_LSTM_HIDDEN = 32

_RESAMPLE_CACHE: dict = {}


def resample_matrix(n_frames: int, length: int, dtype=np.float32) -> np.ndarray:
    """Linear-interpolation matrix R [n_frames, length]; cached per signature."""
    key = (n_frames, length, np.dtype(dtype).str)
    if key not in _RESAMPLE_CACHE:
        R = np.zeros((n_frames, length), dtype=dtype)
        if length == 1:
            R[:, 0] = 1.0
        else:
            p = (np.arange(n_frames) + 0.5) * (length / n_frames) - 0.5
            p = np.clip(p, 0.0, length - 1.0)
            i0 = np.minimum(p.astype(int), length - 2)
            w = (p - i0).astype(dtype)
            rows = np.arange(n_frames)
            R[rows, i0] = 1.0 - w
            R[rows, i0 + 1] = w
        _RESAMPLE_CACHE[key] = R
    return _RESAMPLE_CACHE[key]


def _he(rng, fan_in: int, shape, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _he_smooth(rng, fan_in: int, shape, dtype, taps: int = 7):
    """He-scaled kernels low-passed along time with a normalized Hann window.

    A raw random kernel under-samples the envelope stream it strides over and
    folds the residue into the features as wideband noise; no downstream
    network (in particular no distilled student with its own filterbank) can
    reproduce that fold, so the frozen stand-in anti-aliases here the way a
    trained encoder would have learned to.
    """
    w = rng.standard_normal(shape)
    taps = min(taps, shape[-1])
    win = np.hanning(taps + 2)[1:-1]
    win /= win.sum()
    w = np.apply_along_axis(lambda v: np.convolve(v, win, mode="same"), -1, w)
    w *= np.sqrt(2.0 / fan_in) / (w.std() + 1e-12)
    return w.astype(dtype)


def _lin(rng, fan_in: int, shape, dtype):
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)


def _uni(rng, h: int, shape, dtype):
    k = 1.0 / np.sqrt(h)
    return rng.uniform(-k, k, shape).astype(dtype)


def _filterbank(n_filters: int, kernel: int, sample_rate: int, dtype) -> np.ndarray:
    """Quadrature Gabor pairs, log-spaced 60 Hz .. 6 kHz, near constant-Q.

    Per-band Gaussian bandwidths (>= 40 Hz, ~0.18 f) tile the log axis with
    uniform overlap, so narrow low tones and wide high bands both resolve.
    """
    freqs = np.geomspace(60.0, 6000.0, n_filters // 2)
    n = np.arange(kernel) - (kernel - 1) / 2.0
    bank = np.zeros((n_filters, 1, kernel))
    for i, f in enumerate(freqs):
        sigma_f = max(40.0, 0.18 * f) / 2.0
        sigma_t = sample_rate / (2.0 * np.pi * sigma_f)
        win = np.exp(-0.5 * (n / sigma_t) ** 2)
        ph = 2.0 * np.pi * f * n / sample_rate
        bank[2 * i, 0] = win * np.cos(ph)
        bank[2 * i + 1, 0] = win * np.sin(ph)
    bank /= np.sqrt((bank ** 2).sum(axis=2, keepdims=True))
    return bank.astype(dtype)


def build_large_encoder(store: ad.ParamStore, rng, dtype=np.float32,
                        d_a: int = D_AUDIO, prefix: str = "audio.",
                        sample_rate: int = 16000) -> None:
    """Register the frozen backbone's parameters (requires_grad=False)."""
    cin = 1
    for i, (c, k) in enumerate(zip(LARGE_CHANNELS, LARGE_KERNELS)):
        if i == 0:
            w = _filterbank(c, k, sample_rate, dtype)
            b = np.zeros(c, dtype)
        else:
            # positive biases keep most relus in their linear zone: a trained
            # backbone's features vary smoothly with its inputs, and a zero
            # bias frozen relu net would instead behave like a random hash
            w = _he_smooth(rng, cin * k, (c, cin, k), dtype)
            b = np.full(c, 0.5, dtype)
        store.add(f"{prefix}conv{i}.w", w, requires_grad=False)
        store.add(f"{prefix}conv{i}.b", b, requires_grad=False)
        # quadrature pair pooling halves the channel count after the filterbank
        cin = c // 2 if i == 0 else c
    w = LARGE_CHANNELS[-1]
    # residual FF branches attenuated for the same reason as the biases above
    for i in range(2):
        store.add(f"{prefix}ff{i}.w1", _he(rng, w, (w, LARGE_FF_HIDDEN), dtype), requires_grad=False)
        store.add(f"{prefix}ff{i}.b1", np.zeros(LARGE_FF_HIDDEN, dtype), requires_grad=False)
        store.add(f"{prefix}ff{i}.w2",
                  0.25 * _lin(rng, LARGE_FF_HIDDEN, (LARGE_FF_HIDDEN, w), dtype),
                  requires_grad=False)
        store.add(f"{prefix}ff{i}.b2", np.zeros(w, dtype), requires_grad=False)
    store.add(f"{prefix}proj.w", _lin(rng, w, (w, d_a), dtype), requires_grad=False)
    store.add(f"{prefix}proj.b", np.zeros(d_a, dtype), requires_grad=False)


def build_small_encoder(store: ad.ParamStore, rng, dtype=np.float32,
                        d_a: int = D_AUDIO, prefix: str = "audio.",
                        sample_rate: int = 16000) -> None:
    """Register the trainable student encoder; conv0 starts as a Gabor bank."""
    cin = 1
    for i, (c, k) in enumerate(zip(SMALL_CHANNELS, SMALL_KERNELS)):
        if i == 0:
            w = _filterbank(c, k, sample_rate, dtype)
        else:
            w = _he(rng, cin * k, (c, cin, k), dtype)
        store.add(f"{prefix}conv{i}.w", w)
        store.add(f"{prefix}conv{i}.b", np.zeros(c, dtype))
        cin = c // 2 if i == 0 else c
    h = SMALL_LSTM_HIDDEN
    for d in ("f", "b"):
        store.add(f"{prefix}lstm_{d}.w_ih", _uni(rng, h, (cin, 4 * h), dtype))
        store.add(f"{prefix}lstm_{d}.w_hh", _uni(rng, h, (4 * h, h), dtype))
        store.add(f"{prefix}lstm_{d}.b_ih", _uni(rng, h, 4 * h, dtype))
        store.add(f"{prefix}lstm_{d}.b_hh", _uni(rng, h, 4 * h, dtype))
    store.add(f"{prefix}fc.w", _lin(rng, 2 * h, (2 * h, d_a), dtype))
    store.add(f"{prefix}fc.b", np.zeros(d_a, dtype))


def _resampled(feats: Array, n_frames: int) -> Array:
    R = Array(resample_matrix(n_frames, feats.shape[0], feats.dtype))
    return ad.matmul(R, feats)


def _log_energy(x: Array) -> Array:
    """Quadrature pairs [C, L] -> compressed log band energies [C/2, L].

    Alias-free (cos^2+sin^2 kills the carrier phase), and multiplicative gain
    or slow amplitude modulation becomes an additive offset shared across
    bands.
    """
    e = ad.reduce_sum(ad.reshape(ad.square(x), (x.shape[0] // 2, 2, x.shape[1])), axis=1)
    return ad.scale(ad.add_scalar(ad.log(ad.add_scalar(e, 1e-5)), 4.0), 0.25)


def encode_large(waveform: np.ndarray, store: ad.ParamStore, n_frames: int,
                 prefix: str = "audio.") -> Array:
    """Waveform [S] -> F_a [n_frames, d_a].  Frozen weights; never on tape."""
    dt = store[f"{prefix}conv0.w"].dtype
    x = Array(np.asarray(waveform, dtype=dt)[None, :])
    x = ad.conv1d(x, store[f"{prefix}conv0.w"], store[f"{prefix}conv0.b"], LARGE_STRIDES[0])
    x = _log_energy(x)
    for i, s in enumerate(LARGE_STRIDES[1:], start=1):
        x = ad.relu(ad.conv1d(x, store[f"{prefix}conv{i}.w"], store[f"{prefix}conv{i}.b"], s))
    h = ad.transpose(x)  # [L, C]
    for i in range(2):
        inner = ad.relu(ad.add(ad.matmul(h, store[f"{prefix}ff{i}.w1"]), store[f"{prefix}ff{i}.b1"]))
        h = ad.add(h, ad.add(ad.matmul(inner, store[f"{prefix}ff{i}.w2"]), store[f"{prefix}ff{i}.b2"]))
    h = ad.add(ad.matmul(h, store[f"{prefix}proj.w"]), store[f"{prefix}proj.b"])
    return _resampled(h, n_frames)


def encode_small(waveform: np.ndarray, store: ad.ParamStore, n_frames: int,
                 prefix: str = "audio.") -> Array:
    """Waveform [S] -> F_a [n_frames, d_a], differentiable wrt the small encoder."""
    dt = store[f"{prefix}conv0.w"].dtype
    x = Array(np.asarray(waveform, dtype=dt)[None, :])
    x = ad.conv1d(x, store[f"{prefix}conv0.w"], store[f"{prefix}conv0.b"], SMALL_STRIDES[0])
    x = _log_energy(x)
    x = ad.relu(ad.conv1d(x, store[f"{prefix}conv1.w"], store[f"{prefix}conv1.b"], SMALL_STRIDES[1]))
    h = ad.transpose(x)  # [L, C]
    fwd = ad.lstm_layer(h, store[f"{prefix}lstm_f.w_ih"], store[f"{prefix}lstm_f.w_hh"],
                        store[f"{prefix}lstm_f.b_ih"], store[f"{prefix}lstm_f.b_hh"])
    bwd = ad.lstm_layer(h, store[f"{prefix}lstm_b.w_ih"], store[f"{prefix}lstm_b.w_hh"],
                        store[f"{prefix}lstm_b.b_ih"], store[f"{prefix}lstm_b.b_hh"], reverse=True)
    h = ad.concat([fwd, bwd], axis=1)
    h = ad.add(ad.matmul(h, store[f"{prefix}fc.w"]), store[f"{prefix}fc.b"])
    return _resampled(h, n_frames)


def encode(kind: str, waveform: np.ndarray, store: ad.ParamStore, n_frames: int,
           prefix: str = "audio.") -> Array:
    if kind == "large":
        return encode_large(waveform, store, n_frames, prefix)
    if kind == "small":
        return encode_small(waveform, store, n_frames, prefix)
    raise ValueError(f"unknown audio encoder kind {kind!r}")


def ae_loss(f_large: Array, f_small: Array) -> Array:
    """Feature alignment: 1 - mean over frames of per-frame cosine similarity."""
    if f_large.shape != f_small.shape:
        raise ad.ShapeError(f"ae_loss: {f_large.shape} vs {f_small.shape}")
    a = ad.l2_normalize(f_large, axis=1)
    b = ad.l2_normalize(f_small, axis=1)
    cos = ad.reduce_sum(ad.mul(a, b), axis=1)
    return ad.add_scalar(ad.scale(ad.reduce_mean(cos), -1.0), 1.0)
