"""Command-line entry point for the full workflow.

Subcommands cover corpus synthesis, pipeline-based corpus construction,
both training stages, generation, evaluation, and corpus statistics. Every
run records its exact options and tool version next to its artifacts so any
result can be replayed; reports come out as JSON plus CSV with rendered
figures beside them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .corpus import (
    corpus_stats,
    load_manifest,
    read_audio,
    write_motion,
)
from .errors import LipsynthError, ValidationError
from .metrics import ExternalRecognizer, evaluate_predictions
from .pipeline import (
    PipelineConfig,
    make_planted_fixture,
    run_pipeline,
)
from .plots import loss_curve, report_figures
from .speech import (
    LogMelAdapter,
    MelConfig,
    adapter_from_spec,
    adapter_spec,
    compute_norm_profile,
)
from .synthesizer import (
    Stage2TrainConfig,
    SynthesizerConfig,
    load_stage2,
    save_stage2,
    synthesize_clip,
    train_stage2,
)
from .synthkit import (
    LANGUAGES_FILE,
    RIG_FILE,
    SynthCorpusConfig,
    build_synthetic_corpus,
    load_languages,
    load_rig,
    oracle_bank,
)
from .vqvae import (
    Stage1TrainConfig,
    VQVAEConfig,
    load_stage1,
    save_stage1,
    train_stage1,
)

log = logging.getLogger("lipsynth")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, command: str, args: argparse.Namespace) -> None:
    options = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "command") and not k.startswith("_")
    }
    doc = {"tool": "lipsynth", "version": __version__, "command": command, "options": options}
    with open(out / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _history_json(history: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    if args.clips % args.languages != 0:
        raise ValidationError(
            f"--clips {args.clips} must divide evenly over --languages {args.languages}"
        )
    out = _out_dir(args)
    cfg = SynthCorpusConfig(
        out_dir=out,
        n_languages=args.languages,
        clips_per_language=args.clips // args.languages,
        min_symbols=args.min_symbols,
        max_symbols=args.max_symbols,
        seed=args.seed,
        fps=args.fps,
        sample_rate=args.sample_rate,
        conflicting=not args.distinct_visemes,
    )
    manifest = build_synthetic_corpus(cfg)
    _write_run_config(out, "synth-data", args)
    log.info(
        "wrote %d clips (%d languages) to %s", len(manifest.clips), args.languages, out
    )
    return 0


def cmd_build_corpus(args) -> int:
    out = _out_dir(args)
    items, adapters, expected = make_planted_fixture(
        n_items=args.items, n_violations=args.violations, seed=args.seed, fps=args.fps
    )
    config = PipelineConfig(
        out_dir=out,
        score_threshold=args.score_threshold,
        min_gap_s=args.min_gap_s,
        min_len_s=args.min_len_s,
        min_fraction=args.min_fraction,
        yaw_limit_deg=args.yaw_limit,
        pitch_limit_deg=args.pitch_limit,
        max_delta_deg_per_frame=args.max_delta,
    )
    manifest, reports = run_pipeline(items, adapters, config, log=log.info)
    _write_run_config(out, "build-corpus", args)
    rejected = sum(len(r.rejected) for r in reports)
    log.info(
        "pipeline: %d items in, %d clips out, %d rejected (planted %d)",
        len(items),
        len(manifest.clips),
        rejected,
        len(expected),
    )
    return 0


def cmd_train_vqvae(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.corpus)
    model_config = VQVAEConfig(
        n_vertices=manifest.vertex_count,
        codebook_size=args.codebook_size,
        latent_dim=args.latent_dim,
        stride=args.stride,
        width=args.width,
        layers=args.layers,
        heads=args.heads,
        ff_width=args.ff_width,
        commitment_weight=args.commitment_weight,
    )
    train_config = Stage1TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    model, history = train_stage1(manifest, model_config, train_config, log=log.info)
    save_stage1(model, out / "vqvae.pt", args.seed, history)
    _history_json(history, out / "history.json")
    loss_curve(history, out / "loss_curve.png", title="codebook training")
    _write_run_config(out, "train-vqvae", args)
    log.info("saved codebook model to %s (final loss %.5f)", out / "vqvae.pt", history[-1]["total"])
    return 0


def cmd_train_synth(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.corpus)
    codebook_model, _ = load_stage1(args.vqvae)
    if codebook_model.config.n_vertices != manifest.vertex_count:
        raise ValidationError(
            f"codebook model built for N={codebook_model.config.n_vertices}, "
            f"corpus has N={manifest.vertex_count}"
        )
    mel = MelConfig(n_mels=args.n_mels)
    norm = None
    if not args.no_feature_norm:
        train_clips = manifest.split_clips("train")
        norm = compute_norm_profile(
            [manifest.load_audio(c) for c in train_clips], mel
        )
        norm.save(out / "norm_profile.json")
    adapter = LogMelAdapter(config=mel, norm=norm)
    model_config = SynthesizerConfig(
        speech_dim=adapter.feature_dim,
        languages=list(manifest.languages),
        latent_dim=codebook_model.config.latent_dim,
        width=args.width,
        layers=args.layers,
        heads=args.heads,
        ff_width=args.ff_width,
        style_dim=args.style_dim,
        use_style=not args.no_style,
    )
    train_config = Stage2TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    model, history = train_stage2(
        manifest, codebook_model, adapter, model_config, train_config, log=log.info
    )
    save_stage2(
        model,
        out / "synth.pt",
        args.seed,
        history,
        stage1_path=args.vqvae,
        adapter_spec=adapter_spec(adapter),
    )
    _history_json(history, out / "history.json")
    loss_curve(history, out / "loss_curve.png", title="synthesizer training")
    _write_run_config(out, "train-synth", args)
    log.info("saved synthesizer to %s (final loss %.5f)", out / "synth.pt", history[-1]["total"])
    return 0


def _load_models(args):
    synth, blob = load_stage2(args.synth, stage1_path=args.vqvae)
    codebook_model, _ = load_stage1(args.vqvae)
    if blob.get("adapter_spec") is None:
        raise ValidationError("synthesizer checkpoint carries no adapter spec")
    adapter = adapter_from_spec(blob["adapter_spec"])
    return synth, codebook_model, adapter


def cmd_generate(args) -> int:
    out = _out_dir(args)
    synth, codebook_model, adapter = _load_models(args)
    if args.corpus:
        manifest = load_manifest(args.corpus)
        if manifest.vertex_count != codebook_model.config.n_vertices:
            raise ValidationError(
                f"corpus N={manifest.vertex_count} does not match codebook model "
                f"N={codebook_model.config.n_vertices}"
            )
        clips = manifest.split_clips(args.split) if args.split else list(manifest.clips)
        if not clips:
            raise ValidationError(f"no clips in split {args.split!r}")
        for i, clip in enumerate(clips):
            track = manifest.load_audio(clip)
            motion = synthesize_clip(
                synth, codebook_model, adapter, track, clip.language, clip.fps
            )
            write_motion(motion, out / f"{clip.clip_id}.mtlk")
            if (i + 1) % 20 == 0:
                log.info("generated %d/%d clips", i + 1, len(clips))
        log.info("generated %d clips into %s", len(clips), out)
    else:
        if not args.audio or not args.language:
            raise ValidationError("single-clip mode needs --audio and --language")
        track = read_audio(args.audio)
        motion = synthesize_clip(
            synth, codebook_model, adapter, track, args.language, args.fps,
            allow_unseen=args.mean_style_fallback,
        )
        name = args.name or Path(args.audio).stem
        write_motion(motion, out / f"{name}.mtlk")
        log.info("generated %s.mtlk (%d frames)", name, motion.frames)
    _write_run_config(out, "generate", args)
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.corpus)
    recognizers = None
    if args.metric in ("avlr", "all"):
        if args.recognizer_cmd:
            recognizers = ExternalRecognizer(args.recognizer_cmd.split())
        elif args.recognizer == "oracle":
            corpus_dir = Path(args.corpus).parent
            rig_path = corpus_dir / RIG_FILE
            lang_path = corpus_dir / LANGUAGES_FILE
            if not rig_path.exists() or not lang_path.exists():
                raise ValidationError(
                    f"oracle recognizer needs {RIG_FILE} and {LANGUAGES_FILE} beside the "
                    "manifest; use --metric lve for corpora without them"
                )
            recognizers = oracle_bank(load_rig(rig_path), load_languages(lang_path))
        elif args.recognizer == "none":
            recognizers = None
    report = evaluate_predictions(
        manifest,
        args.pred,
        recognizers=recognizers,
        split=args.split,
        snr_db=args.snr_db,
        seed=args.seed,
        compute_lve=args.metric in ("lve", "all"),
    )
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    figures = report_figures(report, out)
    _write_run_config(out, "eval", args)
    agg = report.aggregates()["overall"]
    log.info(
        "evaluated %d clips: lve %s, avlr_wer %s, figures: %s",
        len(report.rows),
        f"{agg['lve_mean']:.5f}" if agg["lve_mean"] is not None else "n/a",
        f"{agg['avlr_wer_mean']:.4f}" if agg["avlr_wer_mean"] is not None else "n/a",
        ", ".join(f.name for f in figures) or "none",
    )
    if isinstance(recognizers, ExternalRecognizer):
        recognizers.close()
    return 0


def cmd_stats(args) -> int:
    manifest = load_manifest(args.corpus)
    stats = corpus_stats(manifest)
    doc = stats.as_dict()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        out = _out_dir(args)
        with open(out / "stats.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_run_config(out, "stats", args)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_out(parser, required=True, help_text="output directory"):
    env_default = os.environ.get("LIPSYNTH_OUT_DIR")
    parser.add_argument(
        "--out",
        type=Path,
        default=env_default,
        required=required and env_default is None,
        help=help_text + " (env LIPSYNTH_OUT_DIR)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipsynth",
        description="Discrete-codebook speech-to-3D-facial-motion toolkit",
    )
    parser.add_argument("--version", action="version", version=f"lipsynth {__version__}")
    parser.add_argument(
        "--log-level",
        default="info",
        choices=["debug", "info", "warning", "error"],
        help="stderr logging verbosity",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="build a synthetic viseme corpus")
    _add_out(p)
    p.add_argument("--languages", type=int, default=2)
    p.add_argument("--clips", type=int, default=300, help="total clips across all languages")
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--min-symbols", type=int, default=3)
    p.add_argument("--max-symbols", type=int, default=6)
    p.add_argument(
        "--distinct-visemes",
        action="store_true",
        help="give languages disjoint symbol sets instead of conflicting viseme maps",
    )
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("build-corpus", help="run the filter pipeline over the planted fixture")
    _add_out(p)
    p.add_argument("--items", type=int, default=20)
    p.add_argument("--violations", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--score-threshold", type=float, default=0.5)
    p.add_argument("--min-gap-s", type=float, default=0.5)
    p.add_argument("--min-len-s", type=float, default=0.5)
    p.add_argument("--min-fraction", type=float, default=0.95)
    p.add_argument("--yaw-limit", type=float, default=30.0)
    p.add_argument("--pitch-limit", type=float, default=20.0)
    p.add_argument("--max-delta", type=float, default=15.0)
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("train-vqvae", help="fit the motion codebook (stage 1)")
    _add_out(p)
    p.add_argument("--corpus", type=Path, required=True, help="corpus manifest JSON")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--codebook-size", type=int, default=256)
    p.add_argument("--latent-dim", type=int, default=64)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ff-width", type=int, default=512)
    p.add_argument("--commitment-weight", type=float, default=0.25)
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train-synth", help="fit the speech-to-motion synthesizer (stage 2)")
    _add_out(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vqvae", type=Path, required=True, help="stage-1 checkpoint")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ff-width", type=int, default=512)
    p.add_argument("--style-dim", type=int, default=16)
    p.add_argument("--no-style", action="store_true", help="ablate the language style table")
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--no-feature-norm", action="store_true")
    p.set_defaults(func=cmd_train_synth)

    p = sub.add_parser("generate", help="synthesize motion from audio")
    _add_out(p)
    p.add_argument("--synth", type=Path, required=True, help="stage-2 checkpoint")
    p.add_argument("--vqvae", type=Path, required=True, help="stage-1 checkpoint")
    p.add_argument("--corpus", type=Path, help="batch mode: manifest whose clips to generate")
    p.add_argument("--split", default="test", help="corpus split in batch mode")
    p.add_argument("--audio", type=Path, help="single mode: WAV file")
    p.add_argument("--language", help="single mode: language tag")
    p.add_argument("--name", help="single mode: output clip name")
    p.add_argument("--fps", type=float, default=25.0, help="single mode: output frame rate")
    p.add_argument(
        "--mean-style-fallback",
        action="store_true",
        help="render unknown language tags with the mean of the trained styles",
    )
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predicted motion against a corpus")
    _add_out(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True, help="directory of <clip_id>.mtlk files")
    p.add_argument("--split", default="test")
    p.add_argument("--metric", choices=["lve", "avlr", "all"], default="all")
    p.add_argument(
        "--recognizer",
        choices=["oracle", "none"],
        default="oracle",
        help="recognizer for AVLR (oracle reads synthetic rig sidecars)",
    )
    p.add_argument("--recognizer-cmd", help="external recognizer command line")
    p.add_argument("--snr-db", type=float, default=-7.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="corpus statistics as JSON")
    p.add_argument("--corpus", type=Path, required=True)
    _add_out(p, required=False, help_text="optional directory for stats.json")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    # single-threaded math keeps runs bit-reproducible on one machine
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except LipsynthError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True),
            file=sys.stderr,
        )
        return 1
    except Exception as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
