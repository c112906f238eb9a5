"""Contrastive personalizer: embedding libraries, audio pooling, integrator.

The identity and emotion libraries are learned tables of d_e-dimensional
vectors.  A pooled, L2-normalised audio feature is pulled toward the encoded
table row of the clip's true identity (and emotion) by an InfoNCE loss over
the whole table; retrieval at inference is the argmax of the same scores.

The personalized integrator fuses the two embeddings (ground-truth rows in
training, retrieved rows at inference) with cross attention: the identity
embedding queries h learned key/value tokens
derived from the emotion embedding, giving one personalized prior p [d_e]
that conditions the motion decoder.  h > 1 keeps the attention weights a
genuine function of the query (a single token would make softmax constant
and kill the gradient into the query).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Array

D_EMBED = 64
ATTN_TOKENS = 4
TAU_CONTRAST = 0.07


def _lin(rng, fan_in: int, shape, dtype):
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)


def build_personalizer(store: ad.ParamStore, rng, n_identities: int, n_emotions: int,
                       dtype=np.float32, d_a: int = 64, d_e: int = D_EMBED,
                       h_tokens: int = ATTN_TOKENS, prefix: str = "personalizer.") -> None:
    if n_identities < 2 or n_emotions < 2:
        # a single-row library makes the InfoNCE losses identically zero
        raise ValueError(f"build_personalizer: need >= 2 identities and emotions, "
                         f"got {n_identities}/{n_emotions}")
    store.add(f"{prefix}id_table", (rng.standard_normal((n_identities, d_e)) * 0.5).astype(dtype))
    store.add(f"{prefix}emo_table", (rng.standard_normal((n_emotions, d_e)) * 0.5).astype(dtype))
    for name in ("id_enc", "emo_enc"):
        store.add(f"{prefix}{name}.w1", _lin(rng, d_e, (d_e, d_e), dtype))
        store.add(f"{prefix}{name}.b1", np.zeros(d_e, dtype))
        store.add(f"{prefix}{name}.w2", _lin(rng, d_e, (d_e, d_e), dtype))
        store.add(f"{prefix}{name}.b2", np.zeros(d_e, dtype))
    # audio head sees mean+std statistics pooling, hence the 2*d_a fan-in
    store.add(f"{prefix}audio_proj.w1", _lin(rng, 2 * d_a, (2 * d_a, d_e), dtype))
    store.add(f"{prefix}audio_proj.b1", np.zeros(d_e, dtype))
    store.add(f"{prefix}audio_proj.w2", _lin(rng, d_e, (d_e, d_e), dtype))
    store.add(f"{prefix}audio_proj.b2", np.zeros(d_e, dtype))
    # integrator: emotion embedding -> h key tokens [h, d_e] and h value tokens
    store.add(f"{prefix}integ.fk.w1", _lin(rng, d_e, (d_e, d_e), dtype))
    store.add(f"{prefix}integ.fk.b1", np.zeros(d_e, dtype))
    store.add(f"{prefix}integ.fk.w2", _lin(rng, d_e, (d_e, h_tokens * d_e), dtype))
    store.add(f"{prefix}integ.fk.b2", np.zeros(h_tokens * d_e, dtype))
    store.add(f"{prefix}integ.fv.w1", _lin(rng, d_e, (d_e, d_e), dtype))
    store.add(f"{prefix}integ.fv.b1", np.zeros(d_e, dtype))
    store.add(f"{prefix}integ.fv.w2", _lin(rng, d_e, (d_e, h_tokens * d_e), dtype))
    store.add(f"{prefix}integ.fv.b2", np.zeros(h_tokens * d_e, dtype))


def _ff2(x: Array, store: ad.ParamStore, name: str, prefix: str) -> Array:
    h = ad.tanh(ad.add(ad.matmul(x, store[f"{prefix}{name}.w1"]), store[f"{prefix}{name}.b1"]))
    return ad.add(ad.matmul(h, store[f"{prefix}{name}.w2"]), store[f"{prefix}{name}.b2"])


def encode_table(store: ad.ParamStore, which: str, prefix: str = "personalizer.") -> Array:
    """Encode every row of a library; which is 'id' or 'emo'.  Returns [M, d_e]."""
    table = store[f"{prefix}{which}_table"]
    return _ff2(table, store, f"{which}_enc", prefix)


def pooled_audio(f_a: Array, store: ad.ParamStore, prefix: str = "personalizer.") -> Array:
    """Statistics-pool F_a over frames (mean + std), project to d_e, L2-normalise.

    The std half is what carries amplitude-modulation cues; mean alone washes
    them out.
    """
    m = ad.reduce_mean(f_a, axis=0)
    centred = ad.sub(f_a, m)
    var = ad.reduce_mean(ad.square(centred), axis=0)
    s = ad.sqrt(ad.add_scalar(var, 1e-8))
    v = ad.concat([m, s], axis=0)
    v = ad.tanh(ad.add(ad.matmul(v, store[f"{prefix}audio_proj.w1"]),
                       store[f"{prefix}audio_proj.b1"]))
    v = ad.add(ad.matmul(v, store[f"{prefix}audio_proj.w2"]), store[f"{prefix}audio_proj.b2"])
    return ad.l2_normalize(v, axis=0)


def contrastive_loss(pooled: Array, store: ad.ParamStore, which: str, pos: int,
                     tau: float = TAU_CONTRAST, prefix: str = "personalizer.") -> Array:
    """InfoNCE against the full encoded library, positive row ``pos``."""
    rows = ad.l2_normalize(encode_table(store, which, prefix), axis=1)
    logits = ad.scale(ad.matmul(rows, pooled), 1.0 / tau)
    return ad.cross_entropy_logits(logits, pos)


def retrieve(pooled_np: np.ndarray, store: ad.ParamStore,
             prefix: str = "personalizer.") -> tuple:
    """(identity_idx, emotion_idx) with the highest library scores; ties -> lowest index."""
    out = []
    for which in ("id", "emo"):
        rows = ad.l2_normalize(encode_table(store, which, prefix), axis=1).data
        out.append(int(np.argmax(rows @ pooled_np)))
    return tuple(out)


def embedding(store: ad.ParamStore, which: str, idx: int,
              prefix: str = "personalizer.") -> Array:
    return ad.embed_row(store[f"{prefix}{which}_table"], idx)


def integrate(i_vec: Array, e_vec: Array, store: ad.ParamStore,
              prefix: str = "personalizer.") -> Array:
    """Cross-attention fusion of identity (query) and emotion (keys/values) -> p [d_e]."""
    d_e = i_vec.shape[0]
    # the registered token-map width is the single source of truth for h
    h_tokens = store[f"{prefix}integ.fk.w2"].shape[1] // d_e
    keys = ad.reshape(_ff2(e_vec, store, "integ.fk", prefix), (h_tokens, d_e))
    values = ad.reshape(_ff2(e_vec, store, "integ.fv", prefix), (h_tokens, d_e))
    logits = ad.scale(ad.matmul(keys, i_vec), 1.0 / np.sqrt(d_e))
    attn = ad.softmax(logits, axis=0)
    return ad.matmul(attn, values)


def personalized_prior(store: ad.ParamStore, identity_id: int, emotion_id: int,
                       prefix: str = "personalizer.") -> Array:
    """Prior from explicit library indices (ground truth in training)."""
    i_vec = embedding(store, "id", identity_id, prefix)
    e_vec = embedding(store, "emo", emotion_id, prefix)
    return integrate(i_vec, e_vec, store, prefix=prefix)


def build_enhancer(store: ad.ParamStore, rng, n_upper: int, dtype=np.float32,
                   d_e: int = D_EMBED, prefix: str = "enhancer.") -> None:
    """Personalizer enhancer: trainable during distillation, dropped at inference."""
    for name in ("fk", "fv"):
        store.add(f"{prefix}{name}.w1", _lin(rng, n_upper, (n_upper, d_e), dtype))
        store.add(f"{prefix}{name}.b1", np.zeros(d_e, dtype))
        store.add(f"{prefix}{name}.w2", _lin(rng, d_e, (d_e, d_e), dtype))
        store.add(f"{prefix}{name}.b2", np.zeros(d_e, dtype))


def enhancer_features(p: Array, x_upper: Array, store: ad.ParamStore,
                      prefix: str = "enhancer.") -> Array:
    """Attend the prior p over per-frame upper-face tokens of a denoised clip.

    x_upper [F, n_upper] -> keys/values [F, d_e]; p is the single query.
    Returns one d_e feature summarising how the motion expresses the prior.
    Both branches of the preservation loss call this with shared weights.
    """
    d_e = p.shape[0]
    keys = _ff2(x_upper, store, "fk", prefix)
    values = _ff2(x_upper, store, "fv", prefix)
    logits = ad.scale(ad.matmul(keys, p), 1.0 / np.sqrt(d_e))
    attn = ad.softmax(logits, axis=0)
    return ad.matmul(attn, values)
