"""Progressive step-halving distillation.

A student with T steps learns to match, in one step tau, what its frozen
teacher (2T steps) achieves in the two steps 2*tau -> 2*tau-1 -> 2*tau-2.
Because the cosine grid is shared at even indices, the student step tau sits
exactly on teacher step 2*tau, so the teacher's two-step result x_end can be
re-expressed as the single x0 estimate the student should output: solving
the deterministic update between levels 2*tau and 2*tau-2 for x0 gives

    x0_target = (x_end - (sigma_end/sigma_start) * x) / (alpha_end - (sigma_end/sigma_start) * alpha_start)

The squared error against this target is weighted by the truncated SNR
max(alpha^2/sigma^2, 1) so near-clean steps are not drowned out.

The personalization-preservation loss compares enhancer features of teacher
and student denoised motion across a batch whose (identity, emotion) labels
are pairwise distinct, as an InfoNCE over the M x M similarity matrix.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import decoder
from . import personalizer
from . import schedule as sch
from .autodiff import Array
from .models import ModelBundle, build_bundle

TAU_PC = 0.07
DENOM_FLOOR = 1e-8


def teacher_target(x_tau: np.ndarray, tau: int, teacher: ModelBundle,
                   f_a_te: Array, p_te: Array) -> np.ndarray:
    """Two teacher steps from 2*tau, inverted to a one-step x0 target. Plain numpy out."""
    ts = teacher.sched
    s = 2 * tau
    if not (2 <= s <= ts.T):
        raise ValueError(f"teacher_target: student step {tau} maps to {s}, outside [2, {ts.T}]")
    x = np.asarray(x_tau)
    with ad.no_grad():
        x0a = decoder.predict_x0(Array(x), f_a_te, p_te, s, teacher.store).data
        x_mid = sch.ddim_step(x, x0a, s, s - 1, ts)
        x0b = decoder.predict_x0(Array(x_mid), f_a_te, p_te, s - 1, teacher.store).data
        x_end = sch.ddim_step(x_mid, x0b, s - 1, s - 2, ts)
    ratio = float(ts.sigma[s - 2]) / float(ts.sigma[s])
    denom = float(ts.alpha[s - 2]) - ratio * float(ts.alpha[s])
    if abs(denom) < DENOM_FLOOR:
        raise ad.NumericFault(f"teacher_target: degenerate level pair at tau={tau}, denom={denom}")
    return ((x_end - ratio * x) / denom).astype(x.dtype)


def distill_loss(x0_student: Array, target: np.ndarray, tau: int,
                 sched_st: sch.NoiseSchedule) -> Array:
    """Truncated-SNR weighted MSE against the inverted teacher target."""
    if tau < 1:
        raise ValueError(f"distill_loss: tau {tau} < 1 (sigma_0 = 0 makes the weight infinite)")
    w = max(sch.snr(tau, sched_st), 1.0)
    diff = ad.sub(x0_student, Array(np.asarray(target, dtype=x0_student.dtype)))
    return ad.scale(ad.reduce_mean(ad.square(diff)), w)


def pc_loss(te_feats, st_feats, tau: float = TAU_PC) -> Array:
    """InfoNCE over the M x M teacher/student enhancer-feature similarities.

    Row i should prefer its own column i; both feature lists must come from
    the same batch order.  The caller guarantees the batch has pairwise
    distinct identities and emotions, otherwise rows are not separable.
    """
    M = len(te_feats)
    if M != len(st_feats) or M < 2:
        raise ValueError(f"pc_loss: need matching lists of >= 2 features, got {M}/{len(st_feats)}")
    d = te_feats[0].shape[0]
    te = ad.concat([ad.reshape(ad.l2_normalize(f, axis=0), (1, d)) for f in te_feats], axis=0)
    st = ad.concat([ad.reshape(ad.l2_normalize(f, axis=0), (1, d)) for f in st_feats], axis=0)
    logits = ad.scale(ad.matmul(te, ad.transpose(st)), 1.0 / tau)
    return ad.softmax_cross_entropy_rows(logits, np.arange(M))


def enhancer_pair(p_te: Array, x_te_upper: np.ndarray, p_st: Array, x_st_upper: Array,
                  store: ad.ParamStore) -> tuple:
    """Shared-weight enhancer features for the teacher (constant motion) and
    student (differentiable motion) branches of one clip."""
    te = personalizer.enhancer_features(
        p_te, Array(np.asarray(x_te_upper, dtype=x_st_upper.dtype)), store)
    st = personalizer.enhancer_features(p_st, x_st_upper, store)
    return te, st


def init_student(teacher: ModelBundle, enhancer: bool = True, seed: int = 0,
                 dtype=np.float32) -> ModelBundle:
    """Half-step student inheriting the teacher's weights.

    The decoder, personalizer and (when the teacher is already small) audio
    encoder are copied verbatim; the step table keeps the even rows so the
    student's step tau starts with the embedding the teacher used at 2*tau.
    The first stage swaps the large encoder for a freshly initialised small
    one; the enhancer is always freshly initialised per stage.
    """
    if teacher.T % 2 != 0 or teacher.T < 2:
        raise ValueError(f"init_student: teacher steps {teacher.T} cannot be halved")
    config = dict(teacher.config)
    config["T"] = teacher.T // 2
    config["audio_kind"] = "small"
    config["has_enhancer"] = bool(enhancer)
    config["train"] = {}
    student = build_bundle(config, seed=seed, dtype=dtype)
    for name, arr in teacher.store.items():
        if name.startswith("enhancer."):
            continue
        if name.startswith("audio."):
            if teacher.audio_kind != "small":
                continue
            dst = student.store[name]
        elif name == "decoder.step_emb":
            dst = student.store[name]
            dst.data[...] = arr.data[::2].astype(dtype)
            continue
        else:
            dst = student.store[name]
        if dst.shape != arr.shape:
            raise ad.ShapeError(f"init_student: {name} teacher {arr.shape} vs student {dst.shape}")
        dst.data[...] = arr.data.astype(dtype)
    return student
