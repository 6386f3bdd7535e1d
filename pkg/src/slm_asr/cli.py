"""Command-line entry point: synth-data, augment, train, decode, score, report.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus
from .checkpoint import read_container
from .config import SEED_ENV, load_run_config
from .corpus import SyntheticCorpusSpec, UtteranceRecord
from .errors import CheckpointError, ConfigError, ManifestError
from .evaluator import RunRow, emit_report, read_hypotheses, score, write_hypotheses, write_wer_report
from .frontend import AugmentSpec, MelProfile, augment, derive_seed
from .model import Example, decode_examples, make_examples
from .tokenizer import CharTokenizer
from .trainer import (
    Trainer,
    load_checkpoint,
    model_from_checkpoint,
    prepare_model,
    resume,
    validate_train_config,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.jsonl"
RUN_SUMMARY = "wer.json"


class UsageError(Exception):
    """Bad flags or inputs detected after argument parsing."""


def _seed(flag: int | None, default: int = 0) -> int:
    if flag is not None:
        return flag
    raw = os.environ.get(SEED_ENV)
    if raw:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    return default


def _audio_root(manifest: str, root: str | None) -> Path:
    return Path(root) if root else Path(manifest).resolve().parent


def _load_manifest(path: str) -> list[UtteranceRecord]:
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    return corpus.load_manifest(path)


def _read_audio(rec: UtteranceRecord, root: Path) -> tuple[np.ndarray, int]:
    path = root / rec.audio_ref
    if not path.is_file():
        raise FileNotFoundError(f"{rec.utt_id}: audio file missing: {path}")
    samples, sr = corpus.read_wav(path)
    declared = corpus.read_store_sample_rate(root)
    if declared is not None and declared != sr:
        raise ManifestError(f"{path}: sample rate {sr} disagrees with store metadata {declared}")
    return samples, sr


def build_examples(
    records: list[UtteranceRecord],
    root: Path,
    profile: MelProfile,
    keep_waveform: bool = False,
    errors: dict[str, str] | None = None,
) -> list[Example]:
    return make_examples(records, lambda rec: _read_audio(rec, root), profile, keep_waveform, errors)


# --- synth-data --------------------------------------------------------------


def cmd_synth_data(args) -> int:
    spec = SyntheticCorpusSpec(
        n_dialogues=args.dialogues,
        turns_per_dialogue=args.turns,
        vocabulary=tuple(args.vocab.split(",")) if "," in args.vocab else tuple(args.vocab),
        sample_rate=args.sample_rate,
        seed=_seed(args.seed),
        min_symbols=args.min_symbols,
        max_symbols=args.max_symbols,
        languages=tuple(args.languages.split(",")),
        noise_std=args.noise_std,
        context_carryover=args.context_carryover,
    )
    records, store = corpus.generate_synthetic_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_waveform_store(store, records, out, spec.sample_rate)
    corpus.write_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(records)} utterances to {out / 'manifest.jsonl'}")
    return EXIT_OK


# --- augment -----------------------------------------------------------------


def _parse_ops(items: list[str]) -> list[tuple[str, float]]:
    ops = []
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--op expects name=value, got {item!r}")
        try:
            ops.append((name.strip(), float(value)))
        except ValueError as exc:
            raise ConfigError(f"--op {item!r}: value must be a number") from exc
    return ops


def cmd_augment(args) -> int:
    seed = _seed(args.seed)
    if args.op:
        spec = AugmentSpec.from_config(_parse_ops(args.op), seed)
    else:
        spec = load_run_config(args.config, args.set, seed=seed).augment_spec()
        if spec is None:
            raise ConfigError("no augmentation ops given (use --op name=value or an augment section)")
    records = _load_manifest(args.manifest)
    root = _audio_root(args.manifest, args.audio_root)
    out = Path(args.out)
    derived = []
    store = {}
    sample_rate = None
    for rec in records:
        samples, sr = _read_audio(rec, root)
        if sample_rate is None:
            sample_rate = sr
        elif sr != sample_rate:
            raise ManifestError(f"{rec.utt_id}: mixed sample rates {sr} and {sample_rate}")
        per_utt = replace(spec, seed=derive_seed(spec.seed, rec.utt_id, "augment"))
        wav = augment(samples, sr, per_utt).astype(np.float32)
        utt_id = rec.utt_id + args.suffix
        derived.append(
            replace(
                rec,
                utt_id=utt_id,
                audio_ref=f"audio/{utt_id}.wav",
                end_time=round(rec.start_time + max(len(wav), 1) / sr, 6),
            )
        )
        store[utt_id] = wav
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_waveform_store(store, derived, out, sample_rate or 16000)
    corpus.write_manifest(derived, out / "manifest.jsonl")
    print(f"wrote {len(derived)} augmented utterances to {out / 'manifest.jsonl'}")
    return EXIT_OK


# --- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    run = load_run_config(args.config, overrides, seed=args.seed)
    run = run.with_regime(args.regime or run.tree["train"]["regime"])
    tree = run.tree
    if args.manifest:
        tree["data"]["manifest"] = args.manifest
    if args.audio_root:
        tree["data"]["audio_root"] = args.audio_root
    if args.val_manifest:
        tree["data"]["val_manifest"] = args.val_manifest
    if args.init_projector:
        tree["train"]["init_projector"] = args.init_projector
    if args.fresh_projector:
        tree["train"]["fresh_projector"] = True
    model_cfg = run.model_config()
    train_cfg = run.train_config()
    validate_train_config(train_cfg, model_cfg)
    if not tree["data"]["manifest"]:
        raise UsageError("no training manifest (use --manifest or data.manifest)")
    if train_cfg.init_projector and not Path(train_cfg.init_projector).is_file():
        raise UsageError(f"stage-1 checkpoint not found: {train_cfg.init_projector}")
    pipeline = run.pipeline()
    profile = pipeline.profile

    records = _load_manifest(tree["data"]["manifest"])
    train = build_examples(records, _audio_root(tree["data"]["manifest"], tree["data"]["audio_root"]), profile, keep_waveform=pipeline.active)
    val = []
    if tree["data"]["val_manifest"]:
        val_records = _load_manifest(tree["data"]["val_manifest"])
        val = build_examples(val_records, _audio_root(tree["data"]["val_manifest"], tree["data"]["val_audio_root"]), profile)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out)
    metrics = out / METRICS_NAME
    if args.resume:
        trainer = resume(args.resume, train, val, metrics, pipeline)
    else:
        metrics.unlink(missing_ok=True)
        tokenizer = CharTokenizer.from_texts(r.text for r in records)
        model = prepare_model(model_cfg, train_cfg, tokenizer)
        trainer = Trainer(model, train_cfg, train, val, metrics, pipeline)
    trainer.run()
    trainer.save(out / CHECKPOINT_NAME)
    last = next((r for r in reversed(trainer.history) if "loss" in r), None)
    loss = f"{last['loss']:.4f}" if last else "n/a"
    print(f"trained {trainer.step} steps (final loss {loss}); checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


# --- decode ------------------------------------------------------------------


def cmd_decode(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    if args.context is not None:
        model.cfg.prompt.use_context = args.context
    if args.max_len:
        model.cfg.prompt.max_decode_len = args.max_len
    if "frontend" in ckpt.config:
        profile = MelProfile(**ckpt.config["frontend"])
    else:
        profile = MelProfile(n_mels=model.cfg.encoder.n_mels)
    records = _load_manifest(args.manifest)
    errors: dict[str, str] = {}
    examples = build_examples(records, _audio_root(args.manifest, args.audio_root), profile, errors=errors)
    prompts: dict[str, str] = {}
    hyps = decode_examples(model, examples, context_from_hyps=args.context_from_hyps, prompts=prompts)
    if args.dump_prompts:
        write_hypotheses(prompts, args.dump_prompts)
    write_hypotheses(hyps, args.out)
    for utt, msg in sorted(errors.items()):
        print(f"error: {msg}", file=sys.stderr)
    print(f"decoded {len(hyps)} of {len(records)} utterances to {args.out}")
    if errors:
        print(f"{len(errors)} utterance(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# --- score / report ------------------------------------------------------------


def _run_metadata(args) -> dict:
    meta = {"audio_encoder": "", "llm": "", "lora": False, "projector": "", "train_data": ""}
    if args.checkpoint:
        cfg = read_container(args.checkpoint).header["config"]["model"]
        lm = cfg["lm"]
        meta.update(
            audio_encoder=cfg["encoder"]["external_name"] or cfg["encoder"]["kind"],
            llm=f"toy-lm d{lm['d_llm']} L{lm['n_layers']}",
            lora=cfg.get("lora") is not None,
            projector=cfg["projector"]["variant"],
        )
    for key in ("audio_encoder", "llm", "projector", "train_data"):
        value = getattr(args, key, None)
        if value is not None:
            meta[key] = value
    if args.lora is not None:
        meta["lora"] = args.lora
    return meta


def cmd_score(args) -> int:
    records = _load_manifest(args.manifest)
    try:
        hyps = read_hypotheses(args.hyps)
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise UsageError(f"cannot read hypothesis file: {exc}") from exc
    run = load_run_config(args.config, args.set) if args.config or args.set else None
    tokenization = args.tokenization or (run.get("eval.tokenization") if run else "whitespace")
    normalize = (run.get("eval.normalize") if run else True) if args.normalize is None else args.normalize
    report = score([(r.utt_id, r.language, r.text) for r in records], hyps, tokenization, normalize)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_wer_report(report, out / "wer.csv", out / "wer.txt")
    summary = {"run": _run_metadata(args), "report": report.to_dict(), "tokenization": tokenization, "normalize": normalize}
    (out / RUN_SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print((out / "wer.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir)
        path = path / RUN_SUMMARY if path.is_dir() else path
        if not path.is_file():
            raise UsageError(f"no score summary at {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        meta = doc["run"]
        rows.append(
            RunRow(meta["audio_encoder"], meta["llm"], bool(meta["lora"]), meta["projector"], meta["train_data"], doc["report"]["macro_wer"])
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(rows, out, out.with_suffix(".txt"))
    print(out.with_suffix(".txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file or preset name (e.g. presets/slam_toy)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slm-asr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic tone-dialogue corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--dialogues", type=int, default=8)
    p.add_argument("--turns", type=int, default=4)
    p.add_argument("--vocab", default="abcdefgh", help="symbols, as a string of characters or comma-separated")
    p.add_argument("--min-symbols", type=int, default=1)
    p.add_argument("--max-symbols", type=int, default=3)
    p.add_argument("--languages", default="en,fr")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--context-carryover", type=float, default=0.0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("augment", help="write augmented audio and a derived manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root")
    p.add_argument("--out", required=True)
    p.add_argument("--op", action="append", default=[], metavar="NAME=VALUE", help="augmentation, applied in order")
    p.add_argument("--suffix", default="_aug")
    p.add_argument("--seed", type=int)
    _config_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a projector (and adapters)")
    _config_flags(p)
    p.add_argument("--regime", choices=["stage1_projector_only", "stage2_projector_plus_lora", "joint"])
    p.add_argument("--manifest")
    p.add_argument("--audio-root")
    p.add_argument("--val-manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--init-projector", help="stage-1 checkpoint to start stage 2 from")
    p.add_argument("--fresh-projector", action="store_true", help="stage 2 from a seeded projector")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy-decode a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root")
    p.add_argument("--out", required=True, help="hypothesis file (utt_id<TAB>text)")
    ctx = p.add_mutually_exclusive_group()
    ctx.add_argument("--context", dest="context", action="store_true", default=None, help="prompt with the previous turn")
    ctx.add_argument("--no-context", dest="context", action="store_false")
    p.add_argument("--context-from-hyps", action="store_true", help="previous turn from hypotheses, not references")
    p.add_argument("--max-len", type=int)
    p.add_argument("--dump-prompts", help="write each rendered prompt to this file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="WER per language and macro average")
    p.add_argument("--manifest", required=True, help="reference manifest")
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tokenization", choices=["whitespace", "character"])
    norm = p.add_mutually_exclusive_group()
    norm.add_argument("--normalize", dest="normalize", action="store_true", default=None)
    norm.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.add_argument("--checkpoint", help="fill run metadata from this checkpoint")
    p.add_argument("--audio-encoder", dest="audio_encoder")
    p.add_argument("--llm")
    p.add_argument("--projector")
    p.add_argument("--train-data", dest="train_data")
    lora = p.add_mutually_exclusive_group()
    lora.add_argument("--lora", dest="lora", action="store_true", default=None)
    lora.add_argument("--no-lora", dest="lora", action="store_false")
    _config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="one table row per scored run")
    p.add_argument("runs", nargs="*", help="score output directories or their wer.json files")
    p.add_argument("--out", required=True, help="CSV path; an aligned .txt is written alongside")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
