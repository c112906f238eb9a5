"""Synthetic audio/blendshape corpus: generation, binary clip IO, splits.

Clip container (little-endian throughout)::

    magic  4s   b"DTKC"
    u32    version (currently 1)
    u32    clip_id
    u16    identity_id
    u16    emotion_id
    u32    S   waveform samples
    u32    F   motion frames
    u32    D   blendshape channels
    f32[S]   waveform
    f32[F*D] coeffs, frame-major
    u32    CRC32 over every byte after the magic and before this field

Corpus directory layout: ``meta.json``, ``clips/clip_{id:06d}.dtkc``, and
``splits.json`` once a split has been made.

The synthesis is built so the conditioning signals are actually recoverable
from audio: each identity has a fixed hum tone and a spectral tilt applied to
the phoneme harmonics, each emotion a distinct amplitude-modulation rate,
depth and overall gain.  Lip channels follow the per-identity phoneme mixing
matrix; upper-face channels follow the emotion envelope.  No per-clip
loudness normalisation is applied, since the gain itself carries emotion.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"DTKC"
VERSION = 1
N_SYMBOLS = 12
SEG_SECONDS = 0.2  # phoneme segment length; 6 motion frames at 30 fps

_HEAD = struct.Struct("<4sIIHHIII")


class ClipFormatError(Exception):
    """Base class for clip container violations."""


class BadMagicError(ClipFormatError):
    pass


class TruncatedClipError(ClipFormatError):
    pass


class ChecksumError(ClipFormatError):
    pass


@dataclass(frozen=True)
class CorpusMeta:
    n_identities: int = 4
    n_emotions: int = 4
    seed: int = 0
    dim: int = 52
    fps: int = 30
    sample_rate: int = 16000
    lip_indices: tuple = tuple(range(32, 52))
    upper_indices: tuple = tuple(range(0, 20))


@dataclass
class MotionSequence:
    coeffs: np.ndarray  # [F, D] float32

    @property
    def frames(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]


@dataclass
class CorpusClip:
    clip_id: int
    identity_id: int
    emotion_id: int
    waveform: np.ndarray  # [S] float32; empty for inferred motion
    motion: MotionSequence


def frame_count(n_samples: int, sample_rate: int, fps: int) -> int:
    return n_samples * fps // sample_rate


# ---------------------------------------------------------------------------
# binary clip IO


def write_clip(clip: CorpusClip, path) -> None:
    wave = np.ascontiguousarray(clip.waveform, dtype=np.float32)
    coeffs = np.ascontiguousarray(clip.motion.coeffs, dtype=np.float32)
    if wave.ndim != 1 or coeffs.ndim != 2:
        raise ValueError(f"write_clip: waveform {wave.shape}, coeffs {coeffs.shape}")
    F, D = coeffs.shape
    head = _HEAD.pack(MAGIC, VERSION, clip.clip_id, clip.identity_id,
                      clip.emotion_id, wave.size, F, D)
    body = head[4:] + wave.tobytes() + coeffs.tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC + body + struct.pack("<I", crc))


def read_clip(path) -> CorpusClip:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEAD.size + 4:
        raise TruncatedClipError(f"{path}: {len(raw)} bytes is too short for a header")
    _, version, clip_id, ident, emo, S, F, D = _HEAD.unpack_from(raw, 0)
    if version != VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version}")
    expect = _HEAD.size + 4 * S + 4 * F * D + 4
    if len(raw) < expect:
        raise TruncatedClipError(f"{path}: {len(raw)} bytes, expected {expect}")
    if len(raw) > expect:
        raise ClipFormatError(f"{path}: {len(raw) - expect} trailing bytes")
    (crc_stored,) = struct.unpack_from("<I", raw, expect - 4)
    crc = zlib.crc32(raw[4:expect - 4]) & 0xFFFFFFFF
    if crc != crc_stored:
        raise ChecksumError(f"{path}: crc {crc:#010x} != stored {crc_stored:#010x}")
    off = _HEAD.size
    wave = np.frombuffer(raw, dtype="<f4", count=S, offset=off).copy()
    off += 4 * S
    coeffs = np.frombuffer(raw, dtype="<f4", count=F * D, offset=off).reshape(F, D).copy()
    return CorpusClip(clip_id=clip_id, identity_id=ident, emotion_id=emo,
                      waveform=wave, motion=MotionSequence(coeffs=coeffs))


def clip_path(corpus_dir, clip_id: int) -> Path:
    return Path(corpus_dir) / "clips" / f"clip_{clip_id:06d}.dtkc"


def load_clip(corpus_dir, clip_id: int) -> CorpusClip:
    return read_clip(clip_path(corpus_dir, clip_id))


def list_clip_ids(corpus_dir) -> list:
    clips = sorted((Path(corpus_dir) / "clips").glob("clip_*.dtkc"))
    return [int(p.stem.split("_")[1]) for p in clips]


# ---------------------------------------------------------------------------
# meta / splits


def save_meta(corpus_dir, meta: CorpusMeta, extra: dict | None = None) -> None:
    doc = {
        "dim": meta.dim,
        "fps": meta.fps,
        "sample_rate": meta.sample_rate,
        "lip_indices": list(meta.lip_indices),
        "upper_indices": list(meta.upper_indices),
        "n_identities": meta.n_identities,
        "n_emotions": meta.n_emotions,
        "seed": meta.seed,
    }
    if extra:
        doc.update(extra)
    path = Path(corpus_dir) / "meta.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_meta(corpus_dir) -> CorpusMeta:
    doc = json.loads((Path(corpus_dir) / "meta.json").read_text())
    return CorpusMeta(
        n_identities=doc["n_identities"], n_emotions=doc["n_emotions"],
        seed=doc["seed"], dim=doc["dim"], fps=doc["fps"],
        sample_rate=doc["sample_rate"], lip_indices=tuple(doc["lip_indices"]),
        upper_indices=tuple(doc["upper_indices"]))


def meta_sha256(corpus_dir) -> str:
    return sha256((Path(corpus_dir) / "meta.json").read_bytes()).hexdigest()


def split_corpus(entries, ratios=(0.75, 0.125, 0.125), seed: int = 0) -> dict:
    """Stratified split over (identity, emotion) pairs.

    ``entries`` is a sequence of (clip_id, identity_id, emotion_id).  Within
    each stratum the members are shuffled and allotted by largest remainder;
    remainder ties go to the split currently furthest below its global
    target, so small strata alternate instead of starving one split.
    """
    names = ("train", "val", "test")
    ratios = [float(r) for r in ratios]
    if len(ratios) != len(names):
        raise ValueError(f"split_corpus: need {len(names)} ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split_corpus: ratios {ratios} must be >= 0 and sum to 1")
    n_pos = sum(1 for r in ratios if r > 0)
    strata: dict = {}
    for cid, ident, emo in entries:
        strata.setdefault((int(ident), int(emo)), []).append(int(cid))
    for key in sorted(strata):
        if len(strata[key]) < n_pos:
            raise ValueError(
                f"split_corpus: stratum {key} has {len(strata[key])} clips, "
                f"fewer than {n_pos} nonzero-ratio splits")
    rng = np.random.default_rng(seed)
    total = sum(len(v) for v in strata.values())
    targets = [total * r for r in ratios]
    assigned = [0] * len(ratios)
    out: dict = {name: [] for name in names}
    for key in sorted(strata):
        members = sorted(strata[key])
        members = [members[i] for i in rng.permutation(len(members))]
        size = len(members)
        base = [math.floor(size * r) if r > 0 else 0 for r in ratios]
        fracs = [size * r - b for r, b in zip(ratios, base)]
        rem = size - sum(base)
        order = sorted(range(len(ratios)),
                       key=lambda j: (-fracs[j], -(targets[j] - assigned[j] - base[j]), j))
        for j in order[:rem]:
            base[j] += 1
        pos = 0
        for j, name in enumerate(names):
            out[name].extend(members[pos:pos + base[j]])
            assigned[j] += base[j]
            pos += base[j]
    return {name: sorted(v) for name, v in out.items()}


def save_splits(corpus_dir, splits: dict) -> None:
    path = Path(corpus_dir) / "splits.json"
    path.write_text(json.dumps(splits, indent=2, sort_keys=True) + "\n")


def load_splits(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / "splits.json").read_text())


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class _World:
    """Corpus-level draw of symbol, identity and emotion acoustics."""
    sym_freqs: np.ndarray   # [P, 3] harmonic frequencies per phoneme symbol
    sym_amps: np.ndarray    # [3]
    id_f0: np.ndarray       # [n_id] hum tone
    id_tilt_w: np.ndarray   # [n_id] spectral tilt period
    id_tilt_p: np.ndarray   # [n_id] spectral tilt phase
    id_mix: np.ndarray      # [n_id, P, n_lip] phoneme -> lip coefficients
    emo_rate: np.ndarray    # [n_emo] AM rate, Hz
    emo_depth: np.ndarray   # [n_emo] AM depth
    emo_gain: np.ndarray    # [n_emo] overall loudness
    emo_base: np.ndarray    # [n_emo, n_upper]
    emo_amp: np.ndarray     # [n_emo, n_upper]


def _build_world(meta: CorpusMeta) -> _World:
    rng = np.random.default_rng(np.random.SeedSequence(meta.seed, spawn_key=(0,)))
    n_lip = len(meta.lip_indices)
    n_upper = len(meta.upper_indices)
    # log-spaced bases keep every symbol at least one filter band from its
    # neighbours; a uniform draw can collide two symbols inside one band
    base = np.geomspace(160.0, 1100.0, N_SYMBOLS) * (1.0 + rng.uniform(-0.02, 0.02, N_SYMBOLS))
    sym_freqs = base[:, None] * np.array([1.0, 2.1, 3.3])
    id_f0 = 90.0 + 55.0 * np.arange(meta.n_identities) + rng.uniform(-4.0, 4.0, meta.n_identities)
    id_tilt_w = rng.uniform(700.0, 2600.0, meta.n_identities)
    id_tilt_p = rng.uniform(0.0, 2.0 * np.pi, meta.n_identities)
    id_mix = rng.uniform(0.08, 0.92, (meta.n_identities, N_SYMBOLS, n_lip))
    ne = meta.n_emotions
    # (depth, gain) pairs tile the corners of their ranges rather than a single
    # diagonal ramp, so neighbouring emotions never sit close in both cues.
    # Rate runs opposite to depth: fast tremor smears inside an encoder's
    # analysis window, so deep-and-fast would masquerade as shallow-and-slow.
    emo_rate = np.linspace(7.5, 1.2, ne) + rng.uniform(-0.1, 0.1, ne)
    dlev = np.linspace(0.15, 0.95, max((ne + 1) // 2, 2))
    emo_depth = dlev[np.arange(ne) // 2] + rng.uniform(-0.02, 0.02, ne)
    emo_gain = np.where(np.arange(ne) % 2 == 0, 0.55, 1.25) + rng.uniform(-0.03, 0.03, ne)
    emo_base = rng.uniform(0.25, 0.55, (ne, n_upper))
    emo_amp = rng.choice([-1.0, 1.0], (ne, n_upper)) * rng.uniform(0.12, 0.30, (ne, n_upper))
    # lip mixing must separate identities for retrieval-style evaluation to mean anything
    for a in range(meta.n_identities):
        for b in range(a + 1, meta.n_identities):
            assert np.abs(id_mix[a] - id_mix[b]).max() > 0.05
    return _World(sym_freqs=sym_freqs, sym_amps=np.array([1.0, 0.55, 0.30]),
                  id_f0=id_f0, id_tilt_w=id_tilt_w, id_tilt_p=id_tilt_p, id_mix=id_mix,
                  emo_rate=emo_rate, emo_depth=emo_depth, emo_gain=emo_gain,
                  emo_base=emo_base, emo_amp=emo_amp)


def _smooth_columns(x: np.ndarray, window: int = 3) -> np.ndarray:
    pad = window // 2
    padded = np.pad(x, ((pad, pad), (0, 0)), mode="edge")
    return sliding_window_view(padded, window, axis=0).mean(axis=-1)


def synthesize_clip(meta: CorpusMeta, world: _World, clip_id: int,
                    identity_id: int, emotion_id: int, clip_seconds: float) -> CorpusClip:
    rng = np.random.default_rng(np.random.SeedSequence(meta.seed, spawn_key=(1, clip_id)))
    sr = meta.sample_rate
    S = int(round(clip_seconds * sr))
    F = frame_count(S, sr, meta.fps)
    seg_len = int(SEG_SECONDS * sr)
    n_seg = math.ceil(S / seg_len)
    symbols = rng.integers(0, N_SYMBOLS, n_seg)
    phases = rng.uniform(0.0, 2.0 * np.pi, (n_seg, 3))
    phi_env = rng.uniform(0.0, 2.0 * np.pi)
    phi_hum = rng.uniform(0.0, 2.0 * np.pi)
    phi_mid = rng.uniform(0.0, 2.0 * np.pi)

    t = np.arange(S) / sr
    tilt_w = world.id_tilt_w[identity_id]
    tilt_p = world.id_tilt_p[identity_id]
    wave = np.zeros(S)
    for seg in range(n_seg):
        sl = slice(seg * seg_len, min((seg + 1) * seg_len, S))
        ts = t[sl]
        freqs = world.sym_freqs[symbols[seg]]
        # identity shapes the harmonic weights; the vector is renormalised so
        # per-segment energy is constant and loudness stays an emotion-only cue
        amps = world.sym_amps * (1.0 + 0.85 * np.sin(2.0 * np.pi * freqs / tilt_w + tilt_p))
        amps *= 1.4 / np.sqrt((amps ** 2).sum())
        for h in range(3):
            wave[sl] += amps[h] * np.sin(2.0 * np.pi * freqs[h] * ts + phases[seg, h])
    wave += 0.8 * np.sin(2.0 * np.pi * world.id_f0[identity_id] * t + phi_hum)
    rate = world.emo_rate[emotion_id]
    depth = world.emo_depth[emotion_id]
    env = 1.0 + depth * np.sin(2.0 * np.pi * rate * t + phi_env)
    wave = 0.12 * world.emo_gain[emotion_id] * env * wave
    wave += 0.01 * rng.standard_normal(S)

    tf = (np.arange(F) + 0.5) / meta.fps
    seg_f = np.minimum((tf / SEG_SECONDS).astype(int), n_seg - 1)
    sym_f = symbols[seg_f]
    lip = world.id_mix[identity_id][sym_f]                       # [F, n_lip]
    env_f = np.sin(2.0 * np.pi * rate * tf + phi_env)            # normalised AM phase
    upper = world.emo_base[emotion_id] + world.emo_amp[emotion_id] * env_f[:, None]

    coeffs = np.zeros((F, meta.dim))
    coeffs[:, list(meta.upper_indices)] = upper
    coeffs[:, list(meta.lip_indices)] = lip
    others = sorted(set(range(meta.dim)) - set(meta.upper_indices) - set(meta.lip_indices))
    if others:
        k = np.arange(len(others))
        coeffs[:, others] = 0.32 + 0.12 * np.sin(
            2.0 * np.pi * 0.8 * tf[:, None] + phi_mid + 0.7 * k[None, :])
    coeffs = np.clip(_smooth_columns(coeffs), 0.0, 1.0)

    return CorpusClip(clip_id=clip_id, identity_id=identity_id, emotion_id=emotion_id,
                      waveform=wave.astype(np.float32),
                      motion=MotionSequence(coeffs=coeffs.astype(np.float32)))


def generate_corpus(corpus_dir, meta: CorpusMeta, n_clips: int,
                    clip_seconds: float = 3.0, n_workers: int = 1) -> list:
    """Write a full corpus; returns the clip id list.

    Clip (identity, emotion) pairs cycle through the full grid so every pair
    is represented evenly whenever n_clips is a multiple of the grid size.
    Generation is embarrassingly parallel and bit-reproducible regardless of
    worker count: every clip derives its RNG from (seed, clip_id) alone.
    """
    grid = meta.n_identities * meta.n_emotions
    if n_clips < grid:
        raise ValueError(f"generate_corpus: n_clips {n_clips} < identity*emotion grid {grid}")
    if clip_seconds < 1.0:
        raise ValueError(f"generate_corpus: clip_seconds {clip_seconds} < 1")
    corpus_dir = Path(corpus_dir)
    (corpus_dir / "clips").mkdir(parents=True, exist_ok=True)
    world = _build_world(meta)
    pairs = [(i, e) for i in range(meta.n_identities) for e in range(meta.n_emotions)]

    def job(cid: int):
        ident, emo = pairs[cid % len(pairs)]
        clip = synthesize_clip(meta, world, cid, ident, emo, clip_seconds)
        write_clip(clip, clip_path(corpus_dir, cid))

    ids = list(range(n_clips))
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(job, ids))
    else:
        for cid in ids:
            job(cid)
    save_meta(corpus_dir, meta, extra={"n_clips": n_clips, "clip_seconds": clip_seconds})
    return ids


def corpus_entries(corpus_dir) -> list:
    """(clip_id, identity_id, emotion_id) triples straight from the clip headers."""
    out = []
    for cid in list_clip_ids(corpus_dir):
        clip = load_clip(corpus_dir, cid)
        out.append((cid, clip.identity_id, clip.emotion_id))
    return out
