"""Training loops: teacher diffusion training and the distillation chain.

Teacher loss per clip: reconstruction of x0 from one noised draw, plus the
two InfoNCE terms tying the pooled audio feature to the identity and emotion
libraries.  Student stages add the truncated-SNR distillation term against
the inverted two-step teacher target, the feature-alignment loss against the
original large encoder, and the personalization-preservation loss over the
shared enhancer.  Weighting: rec 1.0, contrastive 0.007 each, distill 0.1,
alignment 1.0, preservation 0.05.

Student batches hold M=3 clips with pairwise-distinct identities *and*
emotions (drawn per epoch from the (identity, emotion) grid, then a random
training clip for each chosen pair), which the preservation loss requires.

All loops are bit-deterministic for a given seed: one PCG64 stream drives
shuffling and noise draws in a fixed order, validation noise is keyed by
clip id, and the optimizer state is plain float arrays.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import audio, corpus, decoder, distill, metrics, personalizer
from . import autodiff as ad
from . import schedule as sch
from .autodiff import Array
from .models import ModelBundle, new_teacher, save_checkpoint

LOG_HEADER = "epoch,step,loss,rec,con_id,con_emo,dis,ae,pc,val_lve"
VAL_NOISE_KEY = 9  # spawn key branch for validation sampling noise


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    con: float = 0.007
    dis: float = 0.1
    ae: float = 1.0
    pc: float = 0.05


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 8
    eval_interval: int = 5
    patience: int = 5
    clip_norm: float = 1.0
    ae_warmup: int = 1200  # alignment-only iterations for a fresh small encoder
    seed: int = 0


def teacher_config(**kw) -> TrainConfig:
    return replace(TrainConfig(), **kw)


def student_config(**kw) -> TrainConfig:
    base = TrainConfig(epochs=96, lr=3e-4, batch_size=3)
    return replace(base, **kw)


class Adam:
    """Adam with global gradient-norm clipping over the trainable set."""

    def __init__(self, store: ad.ParamStore, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float = 1.0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {n: np.zeros_like(a.data) for n, a in store.trainable()}
        self._v = {n: np.zeros_like(a.data) for n, a in store.trainable()}

    def step(self):
        grads = {}
        total = 0.0
        for name, arr in self.store.trainable():
            g = arr.grad if arr.grad is not None else np.zeros_like(arr.data)
            grads[name] = g
            total += float(np.sum(g.astype(np.float64) ** 2))
        norm = np.sqrt(total)
        scale = 1.0 if norm <= self.clip_norm else self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, arr in self.store.trainable():
            g = grads[name] * scale
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            arr.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# losses over batches


def _acc(a, b):
    return b if a is None else ad.add(a, b)


@contextmanager
def _term(name: str):
    """Tag numeric faults with the loss term whose forward pass produced them."""
    try:
        yield
    except ad.NumericFault as e:
        raise ad.NumericFault(f"loss term {name!r}: {e}") from None


def loss_teacher(items, bundle: ModelBundle, feats: dict, weights: LossWeights):
    """items: list of (clip, t, eps).  Returns (total loss Array, parts dict)."""
    B = len(items)
    rec_s = con_i_s = con_e_s = None
    for clip, t, eps in items:
        x0 = clip.motion.coeffs
        f_a = Array(feats[clip.clip_id])
        with _term("rec"):
            p = personalizer.personalized_prior(bundle.store, clip.identity_id, clip.emotion_id)
            noisy = sch.add_noise(x0, t, eps, bundle.sched)
            x0_hat = decoder.predict_x0(Array(noisy.x_t), f_a, p, t, bundle.store)
            rec_s = _acc(rec_s, decoder.rec_loss(x0_hat, Array(x0)))
        with _term("con"):
            pooled = personalizer.pooled_audio(f_a, bundle.store)
            con_i_s = _acc(con_i_s, personalizer.contrastive_loss(
                pooled, bundle.store, "id", clip.identity_id, bundle.config["tau_contrast"]))
            con_e_s = _acc(con_e_s, personalizer.contrastive_loss(
                pooled, bundle.store, "emo", clip.emotion_id, bundle.config["tau_contrast"]))
    total = ad.add(ad.scale(rec_s, weights.rec / B),
                   ad.scale(ad.add(con_i_s, con_e_s), weights.con / B))
    parts = {"rec": rec_s.item() / B, "con_id": con_i_s.item() / B,
             "con_emo": con_e_s.item() / B, "dis": 0.0, "ae": 0.0, "pc": 0.0}
    return total, parts


def loss_student(items, student: ModelBundle, teacher: ModelBundle, large_feats: dict,
                 teacher_feats: dict, weights: LossWeights):
    """Distillation batch loss; items as in loss_teacher with student-level t.

    Raises ValueError when the batch repeats an identity or an emotion, since
    the preservation InfoNCE needs separable rows.
    """
    M = len(items)
    ids = [c.identity_id for c, _, _ in items]
    emos = [c.emotion_id for c, _, _ in items]
    if len(set(ids)) != M or len(set(emos)) != M:
        raise ValueError(f"loss_student: batch labels not pairwise distinct: {ids}, {emos}")
    upper = list(student.config["upper_indices"])
    use_enh = student.config["has_enhancer"]
    rec_s = con_i_s = con_e_s = dis_s = ae_s = None
    te_feats_pc, st_feats_pc = [], []
    for clip, tau, eps in items:
        x0 = clip.motion.coeffs
        F = x0.shape[0]
        with _term("rec"):
            f_small = audio.encode_small(clip.waveform, student.store, F)
            p_st = personalizer.personalized_prior(student.store, clip.identity_id, clip.emotion_id)
            noisy = sch.add_noise(x0, tau, eps, student.sched)
            x0_hat = decoder.predict_x0(Array(noisy.x_t), f_small, p_st, tau, student.store)
            rec_s = _acc(rec_s, decoder.rec_loss(x0_hat, Array(x0)))
        with _term("con"):
            pooled = personalizer.pooled_audio(f_small, student.store)
            con_i_s = _acc(con_i_s, personalizer.contrastive_loss(
                pooled, student.store, "id", clip.identity_id, student.config["tau_contrast"]))
            con_e_s = _acc(con_e_s, personalizer.contrastive_loss(
                pooled, student.store, "emo", clip.emotion_id, student.config["tau_contrast"]))
        with _term("dis"):
            with ad.no_grad():
                f_te = Array(teacher_feats[clip.clip_id])
                p_te = personalizer.personalized_prior(teacher.store, clip.identity_id, clip.emotion_id)
            target = distill.teacher_target(noisy.x_t, tau, teacher, f_te, p_te)
            dis_s = _acc(dis_s, distill.distill_loss(x0_hat, target, tau, student.sched))
        with _term("ae"):
            ae_s = _acc(ae_s, audio.ae_loss(Array(large_feats[clip.clip_id]), f_small))
        if use_enh:
            with _term("pc"):
                te_f, st_f = distill.enhancer_pair(
                    p_te, target[:, upper], p_st, ad.take_cols(x0_hat, upper), student.store)
                te_feats_pc.append(te_f)
                st_feats_pc.append(st_f)
    total = ad.add(ad.scale(rec_s, weights.rec / M),
                   ad.scale(ad.add(con_i_s, con_e_s), weights.con / M))
    total = ad.add(total, ad.scale(dis_s, weights.dis / M))
    total = ad.add(total, ad.scale(ae_s, weights.ae / M))
    parts = {"rec": rec_s.item() / M, "con_id": con_i_s.item() / M,
             "con_emo": con_e_s.item() / M, "dis": dis_s.item() / M,
             "ae": ae_s.item() / M, "pc": 0.0}
    if use_enh and M >= 2:
        with _term("pc"):
            pc = distill.pc_loss(te_feats_pc, st_feats_pc)
        total = ad.add(total, ad.scale(pc, weights.pc))
        parts["pc"] = pc.item()
    return total, parts


# ---------------------------------------------------------------------------
# validation and logging


def val_steps(T: int) -> list:
    return [T, T // 2] if T >= 2 else [1]


def validate_lve(bundle: ModelBundle, clips: dict, val_ids, feats: dict | None,
                 seed: int) -> float:
    """Mean lip error over validation clips with a fixed 2-step ddim sample.

    Noise is keyed per clip id so successive evaluations are comparable.
    Uses ground-truth identity/emotion: this isolates decoding quality from
    retrieval, which is scored separately.
    """
    lip = list(bundle.config["lip_indices"])
    vals = []
    with ad.no_grad():
        for cid in val_ids:
            clip = clips[cid]
            F = clip.motion.frames
            if feats is not None and cid in feats:
                f_a = Array(feats[cid])
            else:
                f_a = bundle.encode_audio(clip.waveform, F)
            p = personalizer.personalized_prior(bundle.store, clip.identity_id, clip.emotion_id)
            predict = decoder.model_predict_fn(bundle.store, f_a, p)
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(VAL_NOISE_KEY, cid)))
            x = decoder.sample(predict, clip.motion.coeffs.shape, bundle.sched, rng,
                               mode="ddim", steps=val_steps(bundle.T))
            vals.append(metrics.lve(x, clip.motion.coeffs, lip))
    return float(np.mean(vals))


def write_log(path, rows) -> None:
    lines = [LOG_HEADER]
    for r in rows:
        v = "" if r["val_lve"] is None else f"{r['val_lve']:.8f}"
        lines.append(f"{r['epoch']},{r['step']},{r['loss']:.8f},{r['rec']:.8f},"
                     f"{r['con_id']:.8f},{r['con_emo']:.8f},{r['dis']:.8f},"
                     f"{r['ae']:.8f},{r['pc']:.8f},{v}")
    Path(path).write_text("\n".join(lines) + "\n")


class _EpochLoop:
    """Shared plateau/snapshot bookkeeping for both training loops."""

    def __init__(self, bundle: ModelBundle, cfg: TrainConfig):
        self.bundle = bundle
        self.cfg = cfg
        self.rows = []
        self.step = 0
        self.best = np.inf
        self.best_snap = None
        self.bad_evals = 0

    def note_epoch(self, epoch: int, sums: dict, n_batches: int, val: float | None):
        mean = {k: v / n_batches for k, v in sums.items()}
        self.rows.append({"epoch": epoch, "step": self.step, **mean, "val_lve": val})

    def check_val(self, val: float) -> bool:
        """Track best weights; returns True when patience is exhausted."""
        if val < self.best - 1e-9:
            self.best = val
            self.best_snap = {n: a.data.copy() for n, a in self.bundle.store.items()}
            self.bad_evals = 0
            return False
        self.bad_evals += 1
        return self.bad_evals >= self.cfg.patience

    def finish(self, stage: str, epoch: int):
        if self.best_snap is not None:
            for n, a in self.bundle.store.items():
                a.data[...] = self.best_snap[n]
        self.bundle.config["train"] = {**asdict(self.cfg), "stage": stage,
                                       "stopped_epoch": epoch,
                                       "best_val_lve": None if np.isinf(self.best) else self.best}


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


def _load_split_clips(corpus_dir):
    splits = corpus.load_splits(corpus_dir)
    ids = sorted(set(splits["train"]) | set(splits["val"]))
    clips = {cid: corpus.load_clip(corpus_dir, cid) for cid in ids}
    return splits, clips


def large_feature_cache(bundle: ModelBundle, clips: dict) -> dict:
    """Frozen-encoder features per clip; the big once-per-run cost."""
    if bundle.audio_kind != "large":
        raise ValueError("large_feature_cache: bundle does not carry the large encoder")
    out = {}
    with ad.no_grad():
        for cid in sorted(clips):
            clip = clips[cid]
            out[cid] = bundle.encode_audio(clip.waveform, clip.motion.frames).data
    return out


# ---------------------------------------------------------------------------
# main loops


def train_teacher(corpus_dir, out_dir=None, T: int = 16,
                  cfg: TrainConfig | None = None, weights: LossWeights = LossWeights()):
    """Train the 2^k-step teacher on a corpus; returns (bundle, log rows)."""
    cfg = cfg or teacher_config()
    meta = corpus.load_meta(corpus_dir)
    splits, clips = _load_split_clips(corpus_dir)
    bundle = new_teacher(meta, T, seed=cfg.seed)
    bundle.config["corpus_meta_sha256"] = corpus.meta_sha256(corpus_dir)
    feats = large_feature_cache(bundle, clips)
    opt = Adam(bundle.store, cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    loop = _EpochLoop(bundle, cfg)
    train_ids = splits["train"]
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        sums = {k: 0.0 for k in ("loss", "rec", "con_id", "con_emo", "dis", "ae", "pc")}
        n_batches = 0
        for batch_ids in _chunks(order, cfg.batch_size):
            items = []
            for cid in batch_ids:
                clip = clips[cid]
                t = int(rng.integers(1, T + 1))
                eps = rng.standard_normal(clip.motion.coeffs.shape).astype(np.float32)
                items.append((clip, t, eps))
            bundle.store.zero_grads()
            with ad.Tape() as tape:
                total, parts = loss_teacher(items, bundle, feats, weights)
            tape.backward(total)
            opt.step()
            loop.step += 1
            n_batches += 1
            sums["loss"] += total.item()
            for k, v in parts.items():
                sums[k] += v
        val = None
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            val = validate_lve(bundle, clips, splits["val"], feats, cfg.seed)
            stop = loop.check_val(val)
            loop.note_epoch(epoch, sums, n_batches, val)
            if stop:
                break
        else:
            loop.note_epoch(epoch, sums, n_batches, val)
    loop.finish(f"teacher_T{T}", epoch)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(bundle, out_dir / f"model_T{T}.ckpt")
        write_log(out_dir / "train_log.csv", loop.rows)
    return bundle, loop.rows


def _freeze(bundle: ModelBundle) -> None:
    for _, arr in bundle.store.items():
        arr.requires_grad = False


def _pair_pools(clips: dict, train_ids) -> dict:
    pools: dict = {}
    for cid in train_ids:
        c = clips[cid]
        pools.setdefault((c.identity_id, c.emotion_id), []).append(cid)
    return {k: sorted(v) for k, v in pools.items()}


def _draw_student_batch(rng, pools: dict, n_id: int, n_emo: int, m: int = 3) -> list:
    """m clips with pairwise-distinct identities and emotions."""
    for _ in range(200):
        ids = list(rng.permutation(n_id)[:m])
        emos = list(rng.permutation(n_emo)[:m])
        if all((i, e) in pools for i, e in zip(ids, emos)):
            return [int(rng.choice(pools[(i, e)])) for i, e in zip(ids, emos)]
    raise ValueError("could not draw a label-distinct batch; train split too sparse")


def _ae_warmup(student: ModelBundle, clips: dict, train_ids, large_feats: dict,
               cfg: TrainConfig) -> None:
    """Alignment-only burn-in for a freshly initialised small encoder.

    The joint stage loss routes most of its gradient through the decoder, so
    a cold encoder drags every other term down for the first epochs; a few
    hundred ae-only steps are much cheaper than the epochs they replace.
    Only audio.* receives gradients here, so the rest of the bundle is
    bit-untouched (Adam leaves zero-gradient parameters alone).
    """
    opt = Adam(student.store, 1e-3, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(4, student.T)))
    for it in range(cfg.ae_warmup):
        # two-step lr decay; the alignment loss is noisy near its floor
        opt.lr = 1e-3 if it < cfg.ae_warmup // 2 else (3e-4 if it < (5 * cfg.ae_warmup) // 6 else 1e-4)
        batch = [train_ids[i] for i in rng.permutation(len(train_ids))[:8]]
        student.store.zero_grads()
        with ad.Tape() as tape:
            s = None
            for cid in batch:
                clip = clips[cid]
                f_small = audio.encode_small(clip.waveform, student.store, clip.motion.frames)
                s = _acc(s, audio.ae_loss(Array(large_feats[cid]), f_small))
            total = ad.scale(s, 1.0 / len(batch))
        tape.backward(total)
        opt.step()


def train_student_stage(student: ModelBundle, teacher: ModelBundle, corpus_dir,
                        large_feats: dict, cfg: TrainConfig | None = None,
                        weights: LossWeights = LossWeights(), out_dir=None):
    """One halving stage: optimise the student against its frozen teacher."""
    cfg = cfg or student_config()
    meta = corpus.load_meta(corpus_dir)
    splits, clips = _load_split_clips(corpus_dir)
    train_ids = splits["train"]
    if teacher.audio_kind == "large" and cfg.ae_warmup > 0:
        _ae_warmup(student, clips, train_ids, large_feats, cfg)
    if teacher.audio_kind == "large":
        teacher_feats = large_feats
    else:
        with ad.no_grad():
            teacher_feats = {cid: teacher.encode_audio(
                clips[cid].waveform, clips[cid].motion.frames).data for cid in sorted(clips)}
    pools = _pair_pools(clips, train_ids)
    opt = Adam(student.store, cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3, student.T)))
    loop = _EpochLoop(student, cfg)
    m = cfg.batch_size
    n_batches_per_epoch = max(1, len(train_ids) // m)
    Ts = student.T
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {k: 0.0 for k in ("loss", "rec", "con_id", "con_emo", "dis", "ae", "pc")}
        for _ in range(n_batches_per_epoch):
            batch_ids = _draw_student_batch(rng, pools, meta.n_identities, meta.n_emotions, m)
            items = []
            for cid in batch_ids:
                clip = clips[cid]
                tau = int(rng.integers(1, Ts + 1))
                eps = rng.standard_normal(clip.motion.coeffs.shape).astype(np.float32)
                items.append((clip, tau, eps))
            student.store.zero_grads()
            with ad.Tape() as tape:
                total, parts = loss_student(items, student, teacher, large_feats,
                                            teacher_feats, weights)
            tape.backward(total)
            opt.step()
            loop.step += 1
            sums["loss"] += total.item()
            for k, v in parts.items():
                sums[k] += v
        val = None
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            val = validate_lve(student, clips, splits["val"], None, cfg.seed)
            stop = loop.check_val(val)
            loop.note_epoch(epoch, sums, n_batches_per_epoch, val)
            if stop:
                break
        else:
            loop.note_epoch(epoch, sums, n_batches_per_epoch, val)
    loop.finish(f"distill_T{student.T}", epoch)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(student, out_dir / f"model_T{student.T}.ckpt")
        write_log(out_dir / f"train_log_T{student.T}.csv", loop.rows)
    return loop.rows


def distill_chain(teacher: ModelBundle, corpus_dir, out_dir=None, target_steps: int = 2,
                  enhancer: bool = True, cfg: TrainConfig | None = None,
                  weights: LossWeights = LossWeights()) -> list:
    """Halve step count until target_steps, returning the student bundles in order."""
    cfg = cfg or student_config()
    if teacher.audio_kind != "large":
        raise ValueError("distill_chain: the chain starts from the large-encoder teacher")
    T = teacher.T
    if target_steps < 1 or T % target_steps != 0 or (T // target_steps) & (T // target_steps - 1):
        raise ValueError(f"distill_chain: cannot halve {T} down to {target_steps}")
    _, clips = _load_split_clips(corpus_dir)
    large_feats = large_feature_cache(teacher, clips)
    students = []
    current = teacher
    while current.T > target_steps:
        _freeze(current)
        student = distill.init_student(current, enhancer=enhancer, seed=cfg.seed + current.T)
        student.config["corpus_meta_sha256"] = teacher.config.get("corpus_meta_sha256", "")
        train_student_stage(student, current, corpus_dir, large_feats, cfg, weights, out_dir)
        students.append(student)
        current = student
    return students
