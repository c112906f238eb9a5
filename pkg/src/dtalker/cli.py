"""Command-line interface.

Subcommands: gen-data, train-teacher, distill, infer, eval, bench.

Exit codes: 0 success, 2 usage error (bad flags or values), 3 IO error or
corrupt data, 4 numeric fault during computation.  ``DTALKER_THREADS``
controls worker count for corpus generation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, metrics, training
from .autodiff import NumericFault
from .corpus import ClipFormatError, CorpusMeta
from .models import infer_motion, load_checkpoint


class UsageError(ValueError):
    pass


def _parse_steps(text):
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s]
    except ValueError as e:
        raise UsageError(f"--steps must be a comma-separated int list, got {text!r}") from e


def _n_workers() -> int:
    raw = os.environ.get("DTALKER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise UsageError(f"DTALKER_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise UsageError(f"DTALKER_THREADS must be >= 1, got {n}")
    return n


def cmd_gen_data(args) -> int:
    if args.n_clips < 1 or args.identities < 1 or args.emotions < 1 or args.clip_seconds <= 0:
        raise UsageError("gen-data: counts must be positive")
    meta = CorpusMeta(n_identities=args.identities, n_emotions=args.emotions, seed=args.seed)
    corpus.generate_corpus(args.out, meta, args.n_clips, clip_seconds=args.clip_seconds,
                           n_workers=_n_workers())
    entries = corpus.corpus_entries(args.out)
    splits = corpus.split_corpus(entries, tuple(args.ratios), seed=args.seed)
    corpus.save_splits(args.out, splits)
    print(f"wrote {args.n_clips} clips to {args.out} "
          f"(train/val/test = {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])})")
    return 0


def cmd_train_teacher(args) -> int:
    if args.steps < 1:
        raise UsageError("train-teacher: --steps must be >= 1")
    cfg = training.teacher_config(epochs=args.epochs, lr=args.lr, seed=args.seed)
    bundle, _ = training.train_teacher(args.corpus, out_dir=args.out, T=args.steps, cfg=cfg)
    best = bundle.config["train"].get("best_val_lve")
    print(f"teacher T={args.steps} trained; best val LVE = {best}")
    return 0


def cmd_distill(args) -> int:
    teacher = load_checkpoint(args.teacher)
    cfg = training.student_config(epochs=args.epochs, lr=args.lr, seed=args.seed)
    students = training.distill_chain(teacher, args.corpus, out_dir=args.out,
                                      target_steps=args.target_steps,
                                      enhancer=not args.no_enhancer, cfg=cfg)
    chain = " -> ".join(f"T{b.T}" for b in [teacher] + students)
    print(f"distilled {chain}; checkpoints in {args.out}")
    return 0


def cmd_infer(args) -> int:
    bundle = load_checkpoint(args.model)
    src = corpus.read_clip(args.audio)
    if src.waveform.size == 0:
        raise UsageError(f"infer: {args.audio} carries no audio samples")
    steps = _parse_steps(args.steps)
    coeffs = infer_motion(bundle, src.waveform, identity_id=args.identity,
                          emotion_id=args.emotion, mode=args.mode, steps=steps,
                          seed=args.seed)
    out_clip = corpus.CorpusClip(
        clip_id=src.clip_id, identity_id=src.identity_id if args.identity is None else args.identity,
        emotion_id=src.emotion_id if args.emotion is None else args.emotion,
        waveform=np.empty(0, np.float32),
        motion=corpus.MotionSequence(coeffs=coeffs.astype(np.float32)))
    corpus.write_clip(out_clip, args.out)
    print(f"wrote {coeffs.shape[0]} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.model)
    steps = _parse_steps(args.steps)
    report = metrics.evaluate(bundle, args.corpus, split=args.split, mode=args.mode,
                              steps=steps, seed=args.seed)
    doc = report.as_dict()
    if args.baseline is not None:
        base = load_checkpoint(args.baseline)
        base_rep = metrics.evaluate(base, args.corpus, split=args.split, mode=args.mode,
                                    steps=steps, seed=args.seed)
        doc["baseline"] = {"lve": base_rep.lve, "eve": base_rep.eve, "fdd": base_rep.fdd,
                           "model_size_mb": base_rep.model_size_mb}
        doc["lve_ratio_vs_baseline"] = report.lve / base_rep.lve if base_rep.lve else None
    if args.out is not None:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{args.split}: lve={report.lve:.6f} eve={report.eve:.6f} fdd={report.fdd:.6f} "
          f"retrieval id/emo = {report.retrieval_id:.2f}/{report.retrieval_emo:.2f} "
          f"size={report.model_size_mb:.2f}MB")
    return 0


def cmd_bench(args) -> int:
    bundle = load_checkpoint(args.model)
    clip = corpus.load_clip(args.corpus, args.clip)
    steps = _parse_steps(args.steps)
    fps = metrics.bench_fps(bundle, clip.waveform, mode=args.mode, steps=steps, reps=args.reps)
    line = f"model T={bundle.T}: {fps:.1f} fps, {metrics.model_size_mb(bundle):.2f} MB"
    if args.baseline is not None:
        base = load_checkpoint(args.baseline)
        base_fps = metrics.bench_fps(base, clip.waveform, mode=args.mode, steps=steps,
                                     reps=args.reps)
        line += f"; baseline T={base.T}: {base_fps:.1f} fps; speedup x{fps / base_fps:.2f}"
    print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dtalker", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="synthesise a corpus and split it")
    g.add_argument("--out", required=True)
    g.add_argument("--n-clips", type=int, default=64)
    g.add_argument("--identities", type=int, default=4)
    g.add_argument("--emotions", type=int, default=4)
    g.add_argument("--clip-seconds", type=float, default=3.0)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--ratios", type=float, nargs=3, default=[0.75, 0.125, 0.125],
                   metavar=("TRAIN", "VAL", "TEST"))
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train the diffusion teacher")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=16)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train_teacher)

    d = sub.add_parser("distill", help="progressively halve the step count")
    d.add_argument("--corpus", required=True)
    d.add_argument("--teacher", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--target-steps", type=int, default=2)
    d.add_argument("--epochs", type=int, default=48)
    d.add_argument("--lr", type=float, default=3e-4)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--no-enhancer", action="store_true")
    d.set_defaults(fn=cmd_distill)

    i = sub.add_parser("infer", help="animate a waveform from a clip file")
    i.add_argument("--model", required=True)
    i.add_argument("--audio", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--identity", type=int, default=None)
    i.add_argument("--emotion", type=int, default=None)
    i.add_argument("--mode", choices=("ddim", "ancestral"), default="ddim")
    i.add_argument("--steps", default=None)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="metrics over a corpus split")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=("ddim", "ancestral"), default="ddim")
    e.add_argument("--steps", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.add_argument("--baseline", default=None)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="inference throughput")
    b.add_argument("--model", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--clip", type=int, default=0)
    b.add_argument("--mode", choices=("ddim", "ancestral"), default="ddim")
    b.add_argument("--steps", default=None)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--baseline", default=None)
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.fn(args)
    except NumericFault as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return 4
    except (ClipFormatError, OSError, json.JSONDecodeError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except KeyError as e:
        print(f"io error: missing field {e}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
