"""Model bundles: construction, checkpoint persistence, end-to-end inference.

A bundle is a ParamStore plus its noise schedule and a self-describing config
dict; everything needed to rebuild the bundle lives in the checkpoint.

Checkpoint layout (``NAME.ckpt`` directory)::

    manifest.json   {"version": 1, "schedule_T": T,
                     "params": [{"name", "shape", "offset", "len"}, ...],
                     "corpus_meta_sha256": hex, "config": {...}}
    params.bin      all parameters as little-endian float32, concatenated in
                    manifest order (name-sorted); offset/len count elements

Trainability is reconstructed from names: ``audio.*`` entries are frozen
when the config says the encoder is the large one, everything else trains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio, decoder, personalizer
from . import autodiff as ad
from . import schedule as sch
from .autodiff import Array
from .corpus import CorpusMeta, frame_count

CKPT_VERSION = 1


@dataclass
class ModelBundle:
    store: ad.ParamStore
    sched: sch.NoiseSchedule
    config: dict

    @property
    def T(self) -> int:
        return self.sched.T

    @property
    def audio_kind(self) -> str:
        return self.config["audio_kind"]

    def encode_audio(self, waveform: np.ndarray, n_frames: int) -> Array:
        return audio.encode(self.audio_kind, waveform, self.store, n_frames)


def default_config(meta: CorpusMeta, T: int) -> dict:
    return {
        "T": int(T),
        "dim": meta.dim,
        "d_a": audio.D_AUDIO,
        "d_e": personalizer.D_EMBED,
        "d_s": decoder.D_STEP,
        "h_tokens": personalizer.ATTN_TOKENS,
        "hidden": decoder.HIDDEN,
        "layers": decoder.LAYERS,
        "n_identities": meta.n_identities,
        "n_emotions": meta.n_emotions,
        "tau_contrast": personalizer.TAU_CONTRAST,
        "audio_kind": "large",
        "has_enhancer": False,
        "fps": meta.fps,
        "sample_rate": meta.sample_rate,
        "lip_indices": list(meta.lip_indices),
        "upper_indices": list(meta.upper_indices),
        "corpus_meta_sha256": "",
        "train": {},
    }


def build_bundle(config: dict, seed: int = 0, dtype=np.float32) -> ModelBundle:
    """Fresh bundle with randomly initialised parameters matching ``config``."""
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    decoder.build_decoder(store, rng, config["T"], dtype, dim=config["dim"],
                          d_a=config["d_a"], d_e=config["d_e"], d_s=config["d_s"],
                          hidden=config["hidden"], layers=config["layers"])
    personalizer.build_personalizer(store, rng, config["n_identities"], config["n_emotions"],
                                    dtype, d_a=config["d_a"], d_e=config["d_e"],
                                    h_tokens=config["h_tokens"])
    if config["audio_kind"] == "large":
        audio.build_large_encoder(store, rng, dtype, d_a=config["d_a"],
                                  sample_rate=config["sample_rate"])
    else:
        audio.build_small_encoder(store, rng, dtype, d_a=config["d_a"],
                                  sample_rate=config["sample_rate"])
    if config["has_enhancer"]:
        personalizer.build_enhancer(store, rng, len(config["upper_indices"]), dtype,
                                    d_e=config["d_e"])
    return ModelBundle(store=store, sched=sch.make_schedule(config["T"]), config=dict(config))


def new_teacher(meta: CorpusMeta, T: int = 16, seed: int = 0, dtype=np.float32) -> ModelBundle:
    return build_bundle(default_config(meta, T), seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(bundle: ModelBundle, path) -> None:
    path = Path(path)
    if path.suffix != ".ckpt":
        raise ValueError(f"checkpoint path must end in .ckpt, got {path}")
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in bundle.store.items():
        flat = np.ascontiguousarray(arr.data, dtype="<f4").reshape(-1)
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "len": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += int(flat.size)
    manifest = {
        "version": CKPT_VERSION,
        "schedule_T": bundle.T,
        "params": entries,
        "corpus_meta_sha256": bundle.config.get("corpus_meta_sha256", ""),
        "config": bundle.config,
    }
    (path / "params.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, dtype=np.float32) -> ModelBundle:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest["version"] != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest['version']}")
    config = manifest["config"]
    config["corpus_meta_sha256"] = manifest["corpus_meta_sha256"]
    blob = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f4")
    total = sum(e["len"] for e in manifest["params"])
    if blob.size != total:
        raise ValueError(f"{path}: params.bin holds {blob.size} values, manifest says {total}")
    frozen_audio = config["audio_kind"] == "large"
    store = ad.ParamStore()
    for e in manifest["params"]:
        data = blob[e["offset"]:e["offset"] + e["len"]].reshape(e["shape"]).astype(dtype)
        trainable = not (frozen_audio and e["name"].startswith("audio."))
        store.add(e["name"], data, requires_grad=trainable)
    return ModelBundle(store=store, sched=sch.make_schedule(manifest["schedule_T"]),
                       config=config)


# ---------------------------------------------------------------------------
# inference


def infer_motion(bundle: ModelBundle, waveform: np.ndarray, identity_id=None,
                 emotion_id=None, mode: str = "ddim", steps=None, seed: int = 0,
                 clamp: bool = True) -> np.ndarray:
    """Waveform -> blendshape coefficients [F, D], clipped to [0, 1].

    Identity/emotion default to library retrieval from the pooled audio
    feature; pass explicit ids to override.  ``clamp=False`` returns the raw
    sampler output, which is what the metrics consume.
    """
    cfg = bundle.config
    F = frame_count(len(waveform), cfg["sample_rate"], cfg["fps"])
    if F < 1:
        raise ValueError(f"infer_motion: waveform too short ({len(waveform)} samples)")
    with ad.no_grad():
        f_a = bundle.encode_audio(waveform, F)
        pooled = personalizer.pooled_audio(f_a, bundle.store)
        rid, remo = personalizer.retrieve(pooled.data, bundle.store)
        if identity_id is None:
            identity_id = rid
        if emotion_id is None:
            emotion_id = remo
        p = personalizer.personalized_prior(bundle.store, int(identity_id), int(emotion_id))
    predict = decoder.model_predict_fn(bundle.store, f_a, p)
    rng = np.random.default_rng(seed)
    x = decoder.sample(predict, (F, cfg["dim"]), bundle.sched, rng, mode=mode, steps=steps,
                       dtype=f_a.dtype)
    return np.clip(x, 0.0, 1.0) if clamp else x
