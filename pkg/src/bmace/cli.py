"""Command-line surface for the chord estimation pipeline.

Subcommands: features, train, evaluate, params, flops, gradcheck, bench.
Exit codes are uniform: 0 success, 1 a verification check failed, 2 usage
or input error. Commands that write files also write a JSON run manifest
next to their outputs with every default materialized, so a run is fully
described by its manifest. Outputs carry no timestamps; identical flags,
seeds, and inputs reproduce identical bytes.
"""

from __future__ import annotations

import os

# BLAS thread pinning only works before numpy first loads, so this runs
# ahead of every other import. Explicit user settings win over the pin.
_threads = os.environ.get("BMACE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import chords
from . import features as ft
from . import gradcheck as gc
from . import metrics as mt
from . import model as md
from . import tensorio
from . import training as tr
from .numerics import STANDARD, Tensor

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Usage or input problem; maps to exit code 2."""


@dataclass(frozen=True)
class RunManifest:
    """Self-describing record of one file-producing run."""

    command: str
    config: dict
    seeds: dict
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__

    def to_dict(self):
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
        }

    def write(self, base):
        path = _run_base(base).with_suffix(".manifest.json")
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n",
                        encoding="utf-8")
        return path


def _run_base(path):
    """Output path without the container suffix; manifests sit beside it."""
    return tensorio.manifest_path(path).with_suffix("")


def _ensure_parent(path):
    parent = Path(path).resolve().parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {parent}: {exc}") from exc
    return path


def _read_clip(path):
    try:
        return ft.read_wav(path)
    except (ft.WavFormatError, ft.UnsupportedRateError, OSError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _load_lab(path):
    try:
        return chords.parse_lab(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except (chords.ParseError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# features

def cmd_features(args):
    in_dir = Path(args.audio_dir)
    if not in_dir.is_dir():
        raise CliError(f"not a directory: {in_dir}")
    wavs = sorted(in_dir.glob("*.wav"))
    if not wavs:
        raise CliError(f"no input WAV files in {in_dir}")
    names = [w.stem for w in wavs]
    feats = [ft.log_amplitude(ft.cqt(_read_clip(w)), eps=args.eps) for w in wavs]
    if args.stats_from:
        meta, _ = ft.load_features(args.stats_from)
        if "stats" not in meta:
            raise CliError(f"{args.stats_from} carries no normalization stats")
        stats = ft.NormStats.from_dict(meta["stats"])
    else:
        stats = ft.compute_norm_stats(feats)
    mpath, bpath = ft.save_features(_ensure_parent(args.out), feats, meta={
        "names": names,
        "eps": args.eps,
        "stats": stats.to_dict(),
    })
    manifest = RunManifest(
        command="features",
        config={"eps": args.eps, "stats_from": args.stats_from,
                "sample_rate": ft.SAMPLE_RATE, "hop": ft.HOP,
                "n_bins": ft.N_BINS},
        seeds={},
        inputs=[str(w) for w in wavs],
        outputs=[str(mpath), str(bpath)],
    )
    manifest.write(args.out)
    print(f"wrote {len(feats)} feature matrices to {mpath}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train

def _corpus_from_audio(audio_dir, vocab):
    audio_dir = Path(audio_dir)
    wavs = sorted(audio_dir.glob("*.wav"))
    if not wavs:
        raise CliError(f"no input WAV files in {audio_dir}")
    corpus = []
    for wav in wavs:
        lab = wav.with_suffix(".lab")
        if not lab.is_file():
            raise CliError(f"missing annotation for {wav.stem}: {lab}")
        feats = ft.log_amplitude(ft.cqt(_read_clip(wav)))
        corpus.append(tr.ClipExample(wav.stem, feats, _load_lab(lab)))
    return corpus


def cmd_train(args):
    _ensure_parent(args.out)  # fail before the expensive work, not after
    vocab = chords.VOCABS[args.vocab]
    if args.audio:
        corpus = _corpus_from_audio(args.audio, vocab)
    else:
        corpus = tr.make_synthetic_corpus(args.synthetic, vocab, args.seed,
                                          duration_s=args.duration)
    try:
        train_clips, val_clips, _ = tr.split_dataset(corpus, args.seed)
        model_cfg = md.ModelConfig(variant=args.variant,
                                   n_classes=vocab.n_classes, seed=args.seed)
        train_cfg = tr.TrainConfig(learning_rate=args.learning_rate,
                                   batch_size=args.batch_size,
                                   max_epochs=args.epochs,
                                   patience=args.patience, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    try:
        result = tr.train(model_cfg, train_cfg, train_clips, val_clips, vocab)
    except tr.TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    mpath, bpath = md.save_checkpoint(_ensure_parent(args.out), model_cfg, result.params, extra_meta={
        "stats": result.stats.to_dict(),
        "vocab": vocab.name,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    })
    history_path = _run_base(args.out).with_suffix(".history.json")
    history_path.write_text(json.dumps({
        "history": list(result.history),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    }, indent=1) + "\n", encoding="utf-8")
    manifest = RunManifest(
        command="train",
        config={
            "model": model_cfg.to_dict(),
            "train": {
                "learning_rate": train_cfg.learning_rate,
                "beta1": train_cfg.beta1,
                "beta2": train_cfg.beta2,
                "adam_eps": train_cfg.adam_eps,
                "batch_size": train_cfg.batch_size,
                "max_epochs": train_cfg.max_epochs,
                "patience": train_cfg.patience,
                "clip_norm": train_cfg.clip_norm,
            },
            "vocab": vocab.name,
            "synthetic": None if args.audio else args.synthetic,
            "duration_s": args.duration,
            "audio": args.audio,
        },
        seeds={"seed": args.seed},
        inputs=[args.audio] if args.audio else [],
        outputs=[str(mpath), str(bpath), str(history_path)],
    )
    manifest.write(args.out)
    print(f"trained {args.variant} for {len(result.history)} epochs, "
          f"best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {mpath}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate

def _annotations_from_dir(lab_dir):
    lab_dir = Path(lab_dir)
    labs = sorted(lab_dir.glob("*.lab"))
    if not labs:
        raise CliError(f"no .lab files in {lab_dir}")
    return {p.stem: _load_lab(p) for p in labs}


def _estimate_pairs_from_labs(ref_dir, est_dir):
    refs = _annotations_from_dir(ref_dir)
    est_dir = Path(est_dir)
    pairs = {}
    for stem, ref in refs.items():
        est_path = est_dir / f"{stem}.lab"
        if not est_path.is_file():
            raise CliError(f"missing estimate for song id {stem!r}: {est_path}")
        pairs[stem] = (ref, _load_lab(est_path))
    return pairs


def _estimate_pairs_from_model(ckpt_path, audio_dir):
    try:
        cfg, params, meta = md.load_checkpoint(ckpt_path)
    except (OSError, tensorio.BlobFormatError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {ckpt_path}: {exc}") from exc
    if "stats" not in meta or "vocab" not in meta:
        raise CliError(f"checkpoint {ckpt_path} lacks normalization stats or vocabulary")
    stats = ft.NormStats.from_dict(meta["stats"])
    vocab = chords.VOCABS[meta["vocab"]]
    audio_dir = Path(audio_dir)
    wavs = sorted(audio_dir.glob("*.wav"))
    if not wavs:
        raise CliError(f"no input WAV files in {audio_dir}")
    pairs = {}
    for wav in wavs:
        lab = wav.with_suffix(".lab")
        if not lab.is_file():
            raise CliError(f"missing reference for song id {wav.stem!r}: {lab}")
        feats = ft.log_amplitude(ft.cqt(_read_clip(wav)))
        est = tr.predict_annotation(params, cfg, stats, feats, vocab)
        pairs[wav.stem] = (_load_lab(lab), est)
    return pairs


def cmd_evaluate(args):
    if args.model:
        pairs = _estimate_pairs_from_model(args.model, args.audio)
    else:
        pairs = _estimate_pairs_from_labs(args.ref, args.est)
    results = {stem: mt.evaluate_all(ref, est) for stem, (ref, est) in pairs.items()}
    report = {
        "songs": {stem: result.to_dict() for stem, result in results.items()},
        "aggregate": mt.aggregate(list(results.values())),
    }
    text = json.dumps(report, indent=1) + "\n"
    print(text, end="")
    if args.out:
        out = Path(_ensure_parent(args.out))
        out.write_text(text, encoding="utf-8")
        manifest = RunManifest(
            command="evaluate",
            config={"ref": args.ref, "est": args.est, "model": args.model,
                    "audio": args.audio},
            seeds={},
            inputs=[p for p in (args.ref, args.est, args.model, args.audio) if p],
            outputs=[str(out)],
        )
        manifest.write(out)
    return EXIT_OK


# --------------------------------------------------------------------------
# accounting, checks, bench

def _config_for(variant, vocab_name):
    vocab = chords.VOCABS[vocab_name]
    return md.ModelConfig(variant=variant, n_classes=vocab.n_classes)


def cmd_params(args):
    print(md.count_params(_config_for(args.variant, args.vocab)))
    return EXIT_OK


def cmd_flops(args):
    flops = md.count_flops(_config_for(args.variant, args.vocab), args.frames)
    print(flops)
    print(f"gflops {flops / 1e9:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    variants = md.VARIANTS if args.variant == "all" else (args.variant,)
    worst = 0.0
    for variant in variants:
        err = gc.model_gradcheck(variant, seed=args.seed)
        worst = max(worst, err)
        print(f"{variant}: max relative gradient error {err:.3e} "
              f"(threshold {gc.REL_TOLERANCE:.0e})")
    if worst > gc.REL_TOLERANCE:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_bench(args):
    try:
        lengths = [int(part) for part in args.lengths.split(",") if part]
    except ValueError as exc:
        raise CliError(f"bad --lengths value: {args.lengths}") from exc
    if not lengths or min(lengths) < 1:
        raise CliError(f"bad --lengths value: {args.lengths}")
    cfg = _config_for(args.variant, args.vocab)
    params = md.init_model(cfg, dtype=STANDARD)
    rng = np.random.default_rng(args.seed)
    # One untimed run absorbs allocator and cache warm-up.
    warm = Tensor(rng.standard_normal((min(lengths), cfg.n_bins)), dtype=STANDARD)
    md.forward(params, cfg, warm, scan_impl="assoc")
    for length in lengths:
        x = Tensor(rng.standard_normal((length, cfg.n_bins)), dtype=STANDARD)
        t0 = time.perf_counter()
        md.forward(params, cfg, x, scan_impl="assoc")
        seconds = time.perf_counter() - t0
        print(f"L={length} flops={md.count_flops(cfg, length)} seconds={seconds:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bmace",
        description="Chord estimation toolkit: features, training, evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="compute a CQT feature cache from WAV files")
    p.add_argument("audio_dir", help="directory of 22,050 Hz WAV files")
    p.add_argument("out", help="output cache path (.json/.bin pair)")
    p.add_argument("--eps", type=float, default=ft.LOG_EPS,
                   help="log-amplitude floor (default %(default)s)")
    p.add_argument("--stats-from", default=None,
                   help="reuse normalization stats from an existing cache")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model on synthetic or supplied audio")
    p.add_argument("--variant", required=True, choices=md.VARIANTS)
    p.add_argument("--vocab", default="majmin", choices=sorted(chords.VOCABS))
    p.add_argument("--synthetic", type=int, default=20,
                   help="number of synthetic clips (default %(default)s)")
    p.add_argument("--audio", default=None,
                   help="directory of WAV + .lab pairs to train on instead")
    p.add_argument("--duration", type=float, default=10.0,
                   help="synthetic clip length in seconds (default %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=tr.TrainConfig.max_epochs)
    p.add_argument("--batch-size", type=int, default=tr.TrainConfig.batch_size)
    p.add_argument("--learning-rate", type=float, default=tr.TrainConfig.learning_rate)
    p.add_argument("--patience", type=int, default=tr.TrainConfig.patience)
    p.add_argument("--out", required=True, help="checkpoint path (.json/.bin pair)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score estimates against references")
    p.add_argument("--ref", help="directory of reference .lab files")
    p.add_argument("--est", help="directory of estimated .lab files")
    p.add_argument("--model", help="checkpoint to run instead of --est")
    p.add_argument("--audio", help="directory of WAV + .lab pairs for --model")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", help="print the exact parameter count")
    p.add_argument("--variant", required=True, choices=md.VARIANTS)
    p.add_argument("--vocab", default="majmin", choices=sorted(chords.VOCABS))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", help="print exact forward FLOPs for a length")
    p.add_argument("--variant", required=True, choices=md.VARIANTS)
    p.add_argument("--vocab", default="majmin", choices=sorted(chords.VOCABS))
    p.add_argument("--frames", type=int, default=108)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--variant", default="all", choices=("all",) + md.VARIANTS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="wall time and FLOPs across lengths")
    p.add_argument("--variant", default="bmace", choices=md.VARIANTS)
    p.add_argument("--vocab", default="majmin", choices=sorted(chords.VOCABS))
    p.add_argument("--lengths", default="256,512,1024",
                   help="comma-separated frame counts (default %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate":
        have_labs = args.ref and args.est
        have_model = args.model and args.audio
        if not have_labs and not have_model:
            parser.error("evaluate needs --ref/--est or --model/--audio")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
