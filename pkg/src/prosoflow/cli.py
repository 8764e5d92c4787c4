"""Command-line entry point.

Subcommands: generate-corpus, train, synth, control, eval, selftest.
Every subcommand is deterministic given its flags and seed.  Exit codes:
0 success, 1 runtime error, 2 usage error.  Setting PFM_DETERMINISTIC=1
forces single-threaded numerics for the whole process.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from . import metrics, phrasing
from .control import BreakEdit, SlopeEdit, synthesize_with_control
from .corpus import generate_toy_corpus, load_corpus, load_lexicon, read_manifest, write_tensor
from .metrics import UndefinedMetricError
from .model import ProsodyModel, synthesize
from .selftest import run_selftest
from .training import TrainConfig, fit, load_checkpoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prosoflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-corpus", help="write a deterministic toy corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-utts", type=int, default=8)
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("train", help="train the model on a corpus")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--corpus", help="manifest path (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--steps", type=int, help="train at least this many steps (rounds up to epochs)")
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--show-config", action="store_true", help="print effective config and exit")

    p = sub.add_parser("synth", help="synthesize a mel for target text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="manifest path (for reference + lexicon)")
    p.add_argument("--text", required=True, help="space-separated target words")
    p.add_argument("--ref", required=True, help="reference utterance id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-ode-steps", type=int, default=10)
    p.add_argument("--out", required=True, help="output mel tensor file")

    p = sub.add_parser("control", help="synthesize with prosody edits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--text", help="target words; defaults to the reference transcript")
    p.add_argument("--slope", action="append", default=[], metavar="WORD=K",
                   help="replace word WORD's pitch segment with a slope-K line")
    p.add_argument("--add-break", action="append", default=[], type=int, metavar="IDX")
    p.add_argument("--remove-break", action="append", default=[], type=int, metavar="IDX")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-ode-steps", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="objective metrics over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-ode-steps", type=int, default=10)

    sub.add_parser("selftest", help="run the oracle self-checks")
    return parser


def _load_model_and_corpus(checkpoint: str, manifest: str):
    model, header = load_checkpoint(checkpoint)
    model.eval()
    utts = load_corpus(manifest)
    lexicon = load_lexicon(read_manifest(manifest))
    return model, header, utts, lexicon


def _find_reference(utts, ref_id: str):
    for utt in utts:
        if utt.id == ref_id:
            return utt
    raise KeyError(f"reference utterance {ref_id!r} not found in corpus")


def evaluate_corpus(model: ProsodyModel, utts, lexicon, n_steps: int = 10, seed: int = 0) -> dict:
    """Parallel evaluation: reference-derived breaks, synthesized mel,
    then the three objective metrics per utterance plus aggregates."""
    per_utt = []
    tp = n_pred = n_gt = 0
    rmse_values = []
    wer_values = []
    for utt in utts:
        breaks = phrasing.detect_breaks_silence(utt)
        result = synthesize(
            model, utt.text, lexicon, utt, target_breaks=breaks, seed=seed, n_steps=n_steps
        )
        detected = phrasing.detect_breaks_silence(result)
        gt_set = set(breaks.last_word_indices)
        det_set = set(detected.last_word_indices)
        tp += len(gt_set & det_set)
        n_pred += len(det_set)
        n_gt += len(gt_set)
        p, r, f1 = metrics.break_f1(breaks, detected)
        try:
            rmse = metrics.rmse_f0(utt.pitch, result.pitch)
            rmse_values.append(rmse)
        except UndefinedMetricError:
            rmse = None
        hyp = corpus_mod.transcribe_mel(result.mel, lexicon)
        utt_wer = metrics.wer(utt.text, hyp)
        wer_values.append(utt_wer)
        per_utt.append(
            {
                "id": utt.id,
                "rmse_f0": rmse,
                "precision": p,
                "recall": r,
                "f1": f1,
                "wer": utt_wer,
                "n_frames_gt": utt.mel.n_frames,
                "n_frames_syn": result.n_frames,
            }
        )
    precision = tp / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else (1.0 if n_pred == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {
        "rmse_f0": float(np.mean(rmse_values)) if rmse_values else None,
        "break_f1": {"precision": precision, "recall": recall, "f1": f1},
        "wer": float(np.mean(wer_values)),
        "per_utterance": per_utt,
    }


def _cmd_generate_corpus(args) -> int:
    manifest = generate_toy_corpus(args.out, args.n_utts, args.vocab_size, args.seed)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.corpus:
        config.corpus_manifest = args.corpus
    if args.out:
        config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.steps is not None:
        n = len(read_manifest(config.corpus_manifest).entries) if config.corpus_manifest else 0
        if n == 0:
            raise ValueError("--steps needs a corpus manifest to size epochs")
        per_epoch = -(-n // config.batch_size)
        config.epochs = -(-args.steps // per_epoch)
    if args.show_config:
        for f in dataclasses.fields(config):
            print(f"{f.name}={getattr(config, f.name)}")
        return 0
    if not config.corpus_manifest:
        raise ValueError("no corpus manifest given (flag --corpus or config key corpus_manifest)")
    state = fit(config)
    last = state.loss_history[-1]
    print(f"trained {state.step} steps; final total loss {last['total']:.4f}")
    print(f"checkpoints and loss_log.csv in {config.out_dir}")
    return 0


def _cmd_synth(args) -> int:
    model, _, utts, lexicon = _load_model_and_corpus(args.checkpoint, args.corpus)
    reference = _find_reference(utts, args.ref)
    words = args.text.split()
    result = synthesize(model, words, lexicon, reference, seed=args.seed, n_steps=args.n_ode_steps)
    write_tensor(args.out, result.mel.data)
    print(f"wrote {result.n_frames}x{result.mel.n_mels} mel to {args.out}")
    return 0


def _parse_slope(spec: str) -> SlopeEdit:
    word, _, k = spec.partition("=")
    if not _ or not word:
        raise ValueError(f"--slope expects WORD=K, got {spec!r}")
    return SlopeEdit(word_idx=int(word), k=float(k))


def _cmd_control(args) -> int:
    model, _, utts, lexicon = _load_model_and_corpus(args.checkpoint, args.corpus)
    reference = _find_reference(utts, args.ref)
    words = args.text.split() if args.text else list(reference.text)
    edits: list[SlopeEdit | BreakEdit] = []
    edits.extend(BreakEdit(word_idx=i, action="add") for i in args.add_break)
    edits.extend(BreakEdit(word_idx=i, action="remove") for i in args.remove_break)
    edits.extend(_parse_slope(s) for s in args.slope)
    result = synthesize_with_control(
        model, words, reference, edits, lexicon, seed=args.seed, n_steps=args.n_ode_steps
    )
    write_tensor(args.out, result.mel.data)
    print(f"wrote {result.n_frames}x{result.mel.n_mels} mel to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, _, utts, lexicon = _load_model_and_corpus(args.checkpoint, args.corpus)
    report = evaluate_corpus(model, utts, lexicon, n_steps=args.n_ode_steps, seed=args.seed)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    rmse = "n/a" if report["rmse_f0"] is None else f"{report['rmse_f0']:.4f}"
    print(
        f"rmse_f0={rmse} break_f1={report['break_f1']['f1']:.4f} wer={report['wer']:.4f} "
        f"({len(report['per_utterance'])} utterances) -> {args.report}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    if os.environ.get("PFM_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "generate-corpus": _cmd_generate_corpus,
        "train": _cmd_train,
        "synth": _cmd_synth,
        "control": _cmd_control,
        "eval": _cmd_eval,
        "selftest": lambda a: 0 if run_selftest() else 1,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:  # runtime errors exit 1, with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
