"""Shared fixtures: toy-sized model bundles and a tiny on-disk corpus.

The toy shapes follow the grad-check convention used throughout: F=4 frames,
D=6 coefficients (3 lip + 3 upper), d_e=8 embeddings, batch M=3, everything
float64 so finite differences are trustworthy.  The audio encoders are
shrunk by monkeypatching the module-level shape constants, which keeps the
production code paths identical.
"""

import numpy as np
import pytest

from dtalker import audio, corpus, personalizer
from dtalker.models import ModelBundle, build_bundle

TOY_F = 4
TOY_DIM = 6
TOY_LIP = (0, 1, 2)
TOY_UPPER = (3, 4, 5)
TOY_WAVE = 256  # samples per toy clip


def toy_config(T: int = 4, audio_kind: str = "large", enhancer: bool = False) -> dict:
    return {
        "T": T, "dim": TOY_DIM, "d_a": 8, "d_e": 8, "d_s": 4,
        "h_tokens": 2, "hidden": 8, "layers": 2,
        "n_identities": 3, "n_emotions": 3,
        "tau_contrast": personalizer.TAU_CONTRAST,
        "audio_kind": audio_kind, "has_enhancer": enhancer,
        "fps": 30, "sample_rate": 256,
        "lip_indices": list(TOY_LIP), "upper_indices": list(TOY_UPPER),
        "corpus_meta_sha256": "", "train": {},
    }


@pytest.fixture
def tiny_audio(monkeypatch):
    """Shrink both encoder stacks so full-store grad checks stay cheap."""
    monkeypatch.setattr(audio, "LARGE_CHANNELS", (8, 6, 6, 6))
    monkeypatch.setattr(audio, "LARGE_KERNELS", (16, 4, 3, 2))
    monkeypatch.setattr(audio, "LARGE_STRIDES", (4, 2, 2, 2))
    monkeypatch.setattr(audio, "LARGE_FF_HIDDEN", 10)
    monkeypatch.setattr(audio, "SMALL_CHANNELS", (4, 6))
    monkeypatch.setattr(audio, "SMALL_KERNELS", (8, 4))
    monkeypatch.setattr(audio, "SMALL_STRIDES", (4, 2))
    monkeypatch.setattr(audio, "SMALL_LSTM_HIDDEN", 4)
    yield


def toy_bundle(T: int = 4, audio_kind: str = "large", enhancer: bool = False,
               seed: int = 0, dtype=np.float64) -> ModelBundle:
    return build_bundle(toy_config(T, audio_kind, enhancer), seed=seed, dtype=dtype)


def toy_clip(cid: int, identity_id: int, emotion_id: int, seed: int,
             frames: int = TOY_F, dtype=np.float64) -> corpus.CorpusClip:
    rng = np.random.default_rng(seed)
    coeffs = rng.uniform(0.0, 1.0, (frames, TOY_DIM)).astype(dtype)
    wave = (0.1 * rng.standard_normal(TOY_WAVE)).astype(dtype)
    return corpus.CorpusClip(clip_id=cid, identity_id=identity_id, emotion_id=emotion_id,
                             waveform=wave, motion=corpus.MotionSequence(coeffs=coeffs))


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """2 identities x 2 emotions, 12 one-second clips; shared across tests."""
    root = tmp_path_factory.mktemp("mini_corpus")
    meta = corpus.CorpusMeta(n_identities=2, n_emotions=2, seed=11)
    corpus.generate_corpus(root, meta, n_clips=12, clip_seconds=1.0)
    splits = corpus.split_corpus(corpus.corpus_entries(root), seed=11)
    corpus.save_splits(root, splits)
    return root, corpus.load_meta(root), splits
