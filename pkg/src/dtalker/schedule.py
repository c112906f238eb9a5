"""Variance-preserving noise schedule on a discrete cosine grid.

``alpha[t] = cos(pi * t / (2T))`` for t = 0..T, clipped into [1e-4, 1], with
``sigma[t] = sqrt(1 - alpha[t]^2)``.  Because the grid is a pure function of
t/T, halving the step count keeps shared grid points identical:
``make_schedule(2n).alpha[2k] == make_schedule(n).alpha[k]`` bit for bit,
which is what lets a distilled student inherit its teacher's endpoints.

Everything here is plain numpy (float64); callers wrap results for the
differentiable parts of the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ALPHA_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray      # [T+1]
    sigma: np.ndarray      # [T+1]
    alpha_bar: np.ndarray  # [T+1], alpha**2


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    t: int
    eps: np.ndarray


def make_schedule(T: int) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"make_schedule: T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    # divide before multiplying by pi so shared grid points of T and 2T agree exactly
    alpha = np.cos(np.pi * (t / (2.0 * T)))
    alpha = np.clip(alpha, ALPHA_FLOOR, 1.0)
    sigma = np.sqrt(1.0 - alpha * alpha)
    return NoiseSchedule(T=int(T), alpha=alpha, sigma=sigma, alpha_bar=alpha * alpha)


def _check_t(sched: NoiseSchedule, t: int, lo: int = 0):
    if not lo <= t <= sched.T:
        raise ValueError(f"step {t} out of range [{lo}, {sched.T}]")


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> NoisySample:
    """Forward-process sample ``x_t = alpha_t x0 + sigma_t eps``; t=0 is the identity."""
    _check_t(sched, t)
    if x0.shape != eps.shape:
        raise ValueError(f"add_noise: x0 {x0.shape} vs eps {eps.shape}")
    a = float(sched.alpha[t])
    s = float(sched.sigma[t])
    return NoisySample(x_t=a * x0 + s * eps, t=int(t), eps=eps)


def ddim_step(x_s: np.ndarray, x0_hat: np.ndarray, s: int, u: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic jump s -> u (u < s) keeping the noise direction implied by x0_hat."""
    _check_t(sched, s, lo=1)
    _check_t(sched, u)
    if u >= s:
        raise ValueError(f"ddim_step: require u < s, got s={s}, u={u}")
    a_s = float(sched.alpha[s])
    a_u = float(sched.alpha[u])
    ratio = float(sched.sigma[u]) / float(sched.sigma[s])
    return a_u * x0_hat + ratio * (x_s - a_s * x0_hat)


def ancestral_step(x_t: np.ndarray, x0_hat: np.ndarray, t: int, z: np.ndarray,
                   sched: NoiseSchedule) -> np.ndarray:
    """One stochastic reverse step t -> t-1; the t=1 step is deterministic."""
    _check_t(sched, t, lo=1)
    mean = ddim_step(x_t, x0_hat, t, t - 1, sched)
    if t == 1:
        return mean
    if z.shape != x_t.shape:
        raise ValueError(f"ancestral_step: z {z.shape} vs x_t {x_t.shape}")
    return mean + float(sched.sigma[t - 1]) * z


def snr(t: int, sched: NoiseSchedule) -> float:
    """alpha_t^2 / sigma_t^2; infinite at t=0 where the process is noiseless."""
    _check_t(sched, t)
    s2 = float(sched.sigma[t]) ** 2
    if s2 == 0.0:
        return math.inf
    return float(sched.alpha[t]) ** 2 / s2
