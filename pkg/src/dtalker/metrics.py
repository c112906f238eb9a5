"""Evaluation metrics and the end-to-end eval/bench entry points.

lve / eve: per frame, the maximum squared error over the region's channels;
averaged over frames, then over clips.  fdd: per upper-face channel, the
absolute difference between predicted and ground-truth temporal standard
deviations, averaged over channels and clips.  fps: frames emitted per
wall-clock second of full inference (audio encoding, retrieval and every
denoising step included), median over repetitions.  Model size counts the
inference-path parameters only, so the enhancer is excluded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import personalizer
from .models import ModelBundle, infer_motion


def _region_err(pred: np.ndarray, gt: np.ndarray, indices) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"metric: pred {pred.shape} vs gt {gt.shape}")
    idx = list(indices)
    err = (pred[:, idx].astype(np.float64) - gt[:, idx].astype(np.float64)) ** 2
    return float(err.max(axis=1).mean())


def lve(pred: np.ndarray, gt: np.ndarray, lip_indices) -> float:
    """Lip vertex error on coefficients: mean over frames of max squared lip error."""
    return _region_err(pred, gt, lip_indices)


def eve(pred: np.ndarray, gt: np.ndarray, upper_indices) -> float:
    """Emotional vertex error: same reduction over the upper-face channels."""
    return _region_err(pred, gt, upper_indices)


def fdd(pred: np.ndarray, gt: np.ndarray, upper_indices) -> float:
    """Dynamics deviation: mean |std_t(pred) - std_t(gt)| over upper channels."""
    idx = list(upper_indices)
    sp = pred[:, idx].astype(np.float64).std(axis=0)
    sg = gt[:, idx].astype(np.float64).std(axis=0)
    return float(np.abs(sp - sg).mean())


def model_size_mb(bundle: ModelBundle) -> float:
    """float32 megabytes of the inference parameters (enhancer excluded)."""
    n = sum(a.size for name, a in bundle.store.items() if not name.startswith("enhancer."))
    return 4.0 * n / (1 << 20)


def inference_params(bundle: ModelBundle) -> int:
    return sum(a.size for name, a in bundle.store.items() if not name.startswith("enhancer."))


def bench_fps(bundle: ModelBundle, waveform: np.ndarray, mode: str = "ddim", steps=None,
              reps: int = 5, seed: int = 0, warmup: int = 1) -> float:
    """Median frames-per-second over ``reps`` full inference passes."""
    times = []
    for r in range(warmup + reps):
        t0 = time.perf_counter()
        out = infer_motion(bundle, waveform, mode=mode, steps=steps, seed=seed)
        dt = time.perf_counter() - t0
        if r >= warmup:
            times.append(dt)
    return out.shape[0] / float(np.median(times))


@dataclass
class EvalReport:
    split: str
    n_clips: int
    lve: float
    eve: float
    fdd: float
    retrieval_id: float
    retrieval_emo: float
    model_size_mb: float
    per_clip: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "split": self.split, "n_clips": self.n_clips, "lve": self.lve,
            "eve": self.eve, "fdd": self.fdd, "retrieval_id": self.retrieval_id,
            "retrieval_emo": self.retrieval_emo, "model_size_mb": self.model_size_mb,
            "per_clip": self.per_clip, "config": self.config,
        }


def evaluate(bundle: ModelBundle, corpus_dir, split: str = "test", mode: str = "ddim",
             steps=None, seed: int = 0) -> EvalReport:
    """Full-pipeline metrics on one split: retrieval-conditioned inference."""
    meta = corpus_mod.load_meta(corpus_dir)
    splits = corpus_mod.load_splits(corpus_dir)
    if split not in splits:
        raise ValueError(f"evaluate: unknown split {split!r}")
    ids = splits[split]
    per_clip: dict = {}
    vals = {"lve": [], "eve": [], "fdd": []}
    hit_id = hit_emo = 0
    for cid in ids:
        clip = corpus_mod.load_clip(corpus_dir, cid)
        pred = infer_motion(bundle, clip.waveform, mode=mode, steps=steps,
                            seed=seed + cid, clamp=False)
        gt = clip.motion.coeffs
        row = {"lve": lve(pred, gt, meta.lip_indices),
               "eve": eve(pred, gt, meta.upper_indices),
               "fdd": fdd(pred, gt, meta.upper_indices)}
        with ad.no_grad():
            f_a = bundle.encode_audio(clip.waveform, clip.motion.frames)
            pooled = personalizer.pooled_audio(f_a, bundle.store)
            rid, remo = personalizer.retrieve(pooled.data, bundle.store)
        hit_id += int(rid == clip.identity_id)
        hit_emo += int(remo == clip.emotion_id)
        per_clip[str(cid)] = row
        for k in vals:
            vals[k].append(row[k])
    n = len(ids)
    return EvalReport(
        split=split, n_clips=n,
        lve=float(np.mean(vals["lve"])), eve=float(np.mean(vals["eve"])),
        fdd=float(np.mean(vals["fdd"])),
        retrieval_id=hit_id / n if n else 0.0,
        retrieval_emo=hit_emo / n if n else 0.0,
        model_size_mb=model_size_mb(bundle),
        per_clip=per_clip, config=dict(bundle.config))


def retrieval_accuracy(bundle: ModelBundle, corpus_dir, clip_ids) -> tuple:
    """(identity, emotion) retrieval accuracy over the given clips."""
    hit_id = hit_emo = 0
    for cid in clip_ids:
        clip = corpus_mod.load_clip(corpus_dir, cid)
        with ad.no_grad():
            f_a = bundle.encode_audio(clip.waveform, clip.motion.frames)
            pooled = personalizer.pooled_audio(f_a, bundle.store)
            rid, remo = personalizer.retrieve(pooled.data, bundle.store)
        hit_id += int(rid == clip.identity_id)
        hit_emo += int(remo == clip.emotion_id)
    n = len(clip_ids)
    return (hit_id / n, hit_emo / n) if n else (0.0, 0.0)
