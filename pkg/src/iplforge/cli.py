"""Command-line entry point: ``iplforge <subcommand> ...``.

Machine-readable results go to stdout as TSV, progress to stderr. Exit
codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .decoder import batch_decode
from .errors import ConfigError, IplforgeError, MetricError
from .manifest import Manifest
from .synthcorpus import apply_reference, build_family, generate_dataset
from .tokenizer import Vocab, pool_transcripts, train_bpe
from .trainer import TrainConfig, evaluate, train
from .transducer import ArchConfig, init_model, load_checkpoint, save_checkpoint, warm_start

SEED_ENV = "IPLFORGE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def resolve_seed(flag: Optional[int], default: Optional[int] = None) -> Optional[int]:
    """``--seed`` wins; otherwise ``IPLFORGE_SEED``; otherwise ``default``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return default


def _announce_seed(seed: Optional[int]) -> None:
    print(f"seed {seed if seed is not None else 'none'}", file=sys.stderr)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    seed = resolve_seed(args.seed, 0)
    _announce_seed(seed)
    cfg_path = Path(args.config)
    cfg = pipeline.load_json(cfg_path)
    family = cfg.get("family", "builtin:toy")
    if isinstance(family, str):
        family = pipeline.resolve_family(family, cfg_path.parent.resolve())
    splits = cfg.get("splits")
    if not isinstance(splits, dict) or not splits:
        raise ConfigError("gen-data config needs a non-empty 'splits' object")
    spec = build_family(family, int(cfg.get("family_seed", 7)))
    rates = cfg.get("reference_rates")
    out = Path(args.out)
    for split in sorted(splits):
        manifest = generate_dataset(spec, splits[split], seed, out / split, split)
        manifest.save(out / f"{split}.tsv")
        print(f"{split}\t{out / f'{split}.tsv'}\t{len(manifest)}")
        if rates is not None:
            if len(rates) != 3:
                raise ConfigError("reference_rates needs three values: sub del ins")
            ref = apply_reference(manifest, spec, tuple(float(r) for r in rates), seed + 1)
            ref.save(out / f"{split}.reference.tsv")
            print(f"{split}.reference\t{out / f'{split}.reference.tsv'}\t{len(ref)}")


def cmd_train_tokenizer(args) -> None:
    _announce_seed(resolve_seed(args.seed))
    manifests = [Manifest.load(m) for m in args.manifests]
    vocab = train_bpe(pool_transcripts(manifests), args.size)
    vocab.save(args.out)
    print(f"vocab\t{args.out}\t{vocab.size}")


def cmd_train(args) -> None:
    cfg = TrainConfig.from_dict(pipeline.load_json(args.cfg)) if args.cfg else TrainConfig()
    seed = resolve_seed(args.seed, cfg.seed)
    _announce_seed(seed)
    cfg = replace(cfg, seed=seed)
    vocab = Vocab.load(args.vocab)
    if args.warm_start:
        prior = load_checkpoint(args.warm_start)
        model = warm_start(prior, vocab.size - 1, args.mode, seed=seed)
    else:
        arch = pipeline.load_json(args.arch) if args.arch else {}
        model = init_model(ArchConfig.from_dict({**arch, "vocab_size": vocab.size - 1}), seed)
    train_m = Manifest.load(args.train)
    dev_m = Manifest.load(args.dev)
    out = Path(args.out)
    best, report = train(model, train_m, dev_m, vocab, cfg, out, args.threads)
    save_checkpoint(best, out / "best.ckpt")
    sys.stdout.write(report.dumps())


def cmd_decode(args) -> None:
    _announce_seed(resolve_seed(args.seed))
    model = load_checkpoint(args.ckpt)
    manifest = Manifest.load(args.manifest)
    decoded = batch_decode(model, manifest, Vocab.load(args.vocab), args.stage_ref, args.max_symbols, args.threads)
    decoded.save(args.out)
    print(f"decoded\t{args.out}\t{len(decoded)}")


def cmd_select(args) -> None:
    _announce_seed(resolve_seed(args.seed))
    manifest = Manifest.load(args.manifest)
    chosen = pipeline.select_by_certainty(manifest, args.fraction)
    chosen.save(args.out)
    print(f"selected\t{args.out}\t{len(chosen)}\t{len(manifest)}")


def cmd_evaluate(args) -> None:
    _announce_seed(resolve_seed(args.seed))
    model = load_checkpoint(args.ckpt)
    wer = evaluate(model, Manifest.load(args.manifest), Vocab.load(args.vocab), args.max_symbols, args.threads)
    print(f"wer {wer:.6f}")


def _curriculum_path(ref: str) -> Path:
    if ref.startswith("builtin:"):
        return pipeline.builtin_path(f"{ref.split(':', 1)[1]}.curriculum")
    return Path(ref)


def cmd_run_curriculum(args) -> None:
    cur = pipeline.load_curriculum(_curriculum_path(args.file))
    seed = resolve_seed(args.seed)
    _announce_seed(seed if seed is not None else cur.data.seed)
    report = pipeline.run_curriculum(cur, args.out, args.threads, seed=seed)
    sys.stdout.write(report.dumps())


def cmd_report(args) -> None:
    _announce_seed(resolve_seed(args.seed))
    registry, vocabs = pipeline.load_registry(args.registry)
    test = Manifest.load(args.test)
    if not args.reference_wer > 0:
        raise MetricError("--reference-wer must be positive")
    report = pipeline.build_report(registry, vocabs, test, args.reference_wer, args.threads)
    sys.stdout.write(report.dumps())


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iplforge", description="Transducer pseudo-labeling curriculum toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, func, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV})")
        p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
        return p

    p = command("gen-data", cmd_gen_data, "render a synthetic dataset")
    p.add_argument("--config", required=True, help="JSON with family, family_seed, splits, reference_rates")
    p.add_argument("--out", required=True)

    p = command("train-tokenizer", cmd_train_tokenizer, "train a BPE vocabulary")
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--size", type=_positive_int, required=True)
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train a Transducer")
    p.add_argument("--arch", help="JSON architecture settings")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--cfg", help="JSON training settings")
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start", dest="warm_start")
    p.add_argument("--mode", choices=("full", "encoder_only"), default="full")

    for name, func, help_ in (
        ("decode", cmd_decode, "pseudo-label a manifest"),
        ("evaluate", cmd_evaluate, "corpus WER of a checkpoint"),
    ):
        p = command(name, func, help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--max-symbols", dest="max_symbols", type=_positive_int, default=4)
        if name == "decode":
            p.add_argument("--stage-ref", dest="stage_ref", required=True)
            p.add_argument("--out", required=True)

    p = command("select", cmd_select, "keep the most certain pseudo-labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True)

    p = command("run-curriculum", cmd_run_curriculum, "run every stage of a curriculum file")
    p.add_argument("--file", required=True, help="curriculum path or builtin:toy")
    p.add_argument("--out", required=True)

    p = command("report", cmd_report, "WERR table for a finished curriculum")
    p.add_argument("--registry", required=True, help="curriculum output directory")
    p.add_argument("--test", required=True)
    p.add_argument("--reference-wer", dest="reference_wer", type=float, required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train" and args.warm_start is None and "--mode" in (argv or sys.argv[1:]):
            parser.error("--mode requires --warm-start")
    except UsageError as exc:
        print(str(exc).splitlines()[0], file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except IplforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
