"""Multi-stage training recipe: data preparation, stages, IPL, WERR report.

A curriculum file is line oriented. A bare word (``data``, ``arch``,
``tokenizer``, ``stage``) opens a block; ``key = value`` lines fill it and
``#`` starts a comment::

    data
      family = builtin:toy
      scale = 4
    tokenizer
      ref = UKR
      languages = UKR
      size = 64
    stage
      stage_ref = U-BL
      languages = UKR
      weighting = BL
      source = reference
      tokenizer = UKR
      warm_start = none
      select = none
      steps = 1500
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import decoder
from .errors import ConfigError, CurriculumError, SelectionError
from .manifest import Manifest
from .metrics import corpus_wer, werr
from .synthcorpus import (
    BL_RATIOS,
    NW_RATIOS,
    FamilySpec,
    apply_reference,
    build_family,
    generate_dataset,
    load_family_config,
    scaled_counts,
    subsample,
)
from .tokenizer import Vocab, pool_transcripts, train_bpe
from .trainer import TrainConfig, TrainReport, evaluate, train
from .transducer import ArchConfig, Model, init_model, load_checkpoint, save_checkpoint, warm_start

log = logging.getLogger(__name__)

WEIGHTINGS = {"NW": NW_RATIOS, "BL": BL_RATIOS}


# ------------------------------------------------------------- selection


def select_by_certainty(manifest: Manifest, fraction: float) -> Manifest:
    """Keep the ``ceil(fraction * N)`` most certain records (ties: utt_id ascending)."""
    if not 0.0 < fraction <= 1.0:
        raise SelectionError(f"fraction must lie in (0, 1], got {fraction}")
    for rec in manifest.records:
        if rec.certainty is None:
            raise SelectionError(f"record {rec.utt_id} has no certainty")
    ranked = sorted(manifest.records, key=lambda r: (-r.certainty, r.utt_id))
    keep = math.ceil(fraction * len(ranked) - 1e-9)
    return manifest.derive(ranked[:keep])


# ----------------------------------------------------------------- config


def parse_blocks(text: str, source: str = "<string>") -> list[tuple[str, dict[str, str]]]:
    blocks: list[tuple[str, dict[str, str]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            if not blocks:
                raise ConfigError(f"{source}:{lineno}: key outside of a block")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in blocks[-1][1]:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            blocks[-1][1][key] = value
        elif line.isidentifier():
            blocks.append((line, {}))
        else:
            raise ConfigError(f"{source}:{lineno}: cannot parse {raw!r}")
    return blocks


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    """Flat ``key = value`` file (arch and train-config files for the CLI)."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _none(value: Optional[str]) -> Optional[str]:
    return None if value is None or value.lower() in ("", "none", "-") else value


def _langs(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.replace(",", " ").split() if v.strip())


_TRAIN_KEYS = {
    "steps": "steps",
    "batch": "batch_size",
    "lr": "learning_rate",
    "eval_every": "eval_every",
    "seed": "seed",
    "clip": "grad_clip_norm",
    "beta1": "beta1",
    "beta2": "beta2",
    "epsilon": "epsilon",
    "max_symbols": "max_symbols_per_frame",
}


def train_config_from(kv: Mapping[str, str]) -> TrainConfig:
    mapped = {}
    for key, value in kv.items():
        name = _TRAIN_KEYS.get(key, key)
        mapped[name] = value
    return TrainConfig.from_dict(mapped)


@dataclass(frozen=True)
class DataConfig:
    family: str = "builtin:toy"
    family_seed: int = 7
    scale: float = 4.0
    dev: int = 60
    test: int = 150
    target: str = "UKR"
    reference_rates: tuple[float, float, float] = (0.10, 0.05, 0.05)
    seed: int = 1

    @classmethod
    def from_dict(cls, kv: Mapping[str, str]) -> "DataConfig":
        out: dict = {}
        for key, value in kv.items():
            if key in ("family", "target"):
                out[key] = str(value)
            elif key in ("family_seed", "dev", "test", "seed"):
                out[key] = int(value)
            elif key == "scale":
                out[key] = float(value)
            elif key == "reference_rates":
                rates = tuple(float(x) for x in str(value).replace(",", " ").split())
                if len(rates) != 3:
                    raise ConfigError("reference_rates needs three values: sub del ins")
                out[key] = rates
            else:
                raise ConfigError(f"unknown data setting {key!r}")
        return cls(**out)


@dataclass(frozen=True)
class TokenizerSpec:
    ref: str
    languages: tuple[str, ...]
    size: int


@dataclass(frozen=True)
class StageSpec:
    stage_ref: str
    languages: tuple[str, ...]
    weighting: str = "BL"
    source: str = "reference"
    tokenizer_ref: str = ""
    warm_start_from: Optional[str] = None
    selection: Optional[float] = None
    train_cfg: TrainConfig = field(default_factory=TrainConfig)

    @property
    def pseudo_from(self) -> Optional[str]:
        return self.source.split(":", 1)[1] if self.source.startswith("pseudo:") else None


@dataclass
class Curriculum:
    stages: list[StageSpec]
    tokenizers: dict[str, TokenizerSpec] = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    arch: dict = field(default_factory=dict)
    base_dir: Optional[Path] = None
    reference_wer: Optional[float] = None

    def validate(self) -> None:
        """Reject duplicate refs, dangling references and forward/cyclic lineage."""
        seen: set[str] = set()
        for st in self.stages:
            if st.stage_ref in seen:
                raise CurriculumError(f"duplicate stage_ref {st.stage_ref}")
            if st.tokenizer_ref not in self.tokenizers:
                raise CurriculumError(f"{st.stage_ref}: unknown tokenizer {st.tokenizer_ref!r}")
            if st.weighting not in WEIGHTINGS:
                raise CurriculumError(f"{st.stage_ref}: weighting must be NW or BL")
            if not st.languages:
                raise CurriculumError(f"{st.stage_ref}: no languages")
            if st.warm_start_from is not None and st.warm_start_from not in seen:
                raise CurriculumError(
                    f"{st.stage_ref}: warm_start {st.warm_start_from!r} is not an earlier stage"
                )
            src = st.pseudo_from
            if st.source not in ("reference",) and src is None:
                raise CurriculumError(f"{st.stage_ref}: source must be reference or pseudo:<ref>")
            if src is not None and src not in seen:
                raise CurriculumError(f"{st.stage_ref}: pseudo source {src!r} is not an earlier stage")
            if st.selection is not None:
                if src is None:
                    raise CurriculumError(f"{st.stage_ref}: select requires a pseudo source")
                if not 0.0 < st.selection <= 1.0:
                    raise CurriculumError(f"{st.stage_ref}: select must lie in (0, 1]")
            seen.add(st.stage_ref)
        for tok in self.tokenizers.values():
            if tok.size < 2:
                raise CurriculumError(f"tokenizer {tok.ref}: size too small")

    def arch_config(self, vocab_size: int) -> ArchConfig:
        return ArchConfig.from_dict({**self.arch, "vocab_size": vocab_size})

    def reseeded(self, seed: int) -> "Curriculum":
        """Copy whose data seed is ``seed`` and whose stage seeds are offset by it."""
        stages = [replace(st, train_cfg=replace(st.train_cfg, seed=st.train_cfg.seed + seed)) for st in self.stages]
        return replace(self, stages=stages, data=replace(self.data, seed=seed))


def parse_curriculum(text: str, base_dir: Optional[Path] = None, source: str = "<string>") -> Curriculum:
    stages: list[StageSpec] = []
    tokenizers: dict[str, TokenizerSpec] = {}
    data = DataConfig()
    arch: dict = {}
    for kind, kv in parse_blocks(text, source):
        kv = dict(kv)
        if kind == "data":
            data = DataConfig.from_dict(kv)
        elif kind == "arch":
            arch = dict(kv)
        elif kind == "tokenizer":
            try:
                tok = TokenizerSpec(kv.pop("ref"), _langs(kv.pop("languages")), int(kv.pop("size")))
            except KeyError as exc:
                raise CurriculumError(f"tokenizer block is missing {exc}") from exc
            if kv:
                raise CurriculumError(f"tokenizer {tok.ref}: unknown keys {sorted(kv)}")
            if tok.ref in tokenizers:
                raise CurriculumError(f"duplicate tokenizer {tok.ref}")
            tokenizers[tok.ref] = tok
        elif kind == "stage":
            try:
                ref = kv.pop("stage_ref")
                langs = _langs(kv.pop("languages"))
                tok_ref = kv.pop("tokenizer")
            except KeyError as exc:
                raise CurriculumError(f"stage block is missing {exc}") from exc
            weighting = kv.pop("weighting", "BL").upper()
            source_ = kv.pop("source", "reference")
            warm = _none(kv.pop("warm_start", None))
            sel = _none(kv.pop("select", None))
            try:
                cfg = train_config_from(kv)
                selection = float(sel) if sel is not None else None
            except (ConfigError, ValueError) as exc:
                raise CurriculumError(f"stage {ref}: {exc}") from exc
            stages.append(StageSpec(ref, langs, weighting, source_, tok_ref, warm, selection, cfg))
        else:
            raise CurriculumError(f"{source}: unknown block {kind!r}")
    cur = Curriculum(stages, tokenizers, data, arch, base_dir)
    cur.validate()
    return cur


def load_curriculum(path: str | Path) -> Curriculum:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CurriculumError(f"cannot read curriculum {path}: {exc}") from exc
    return parse_curriculum(text, path.parent.resolve(), str(path))


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("iplforge") / "data" / name))


def resolve_family(ref: str, base_dir: Optional[Path] = None) -> dict:
    if ref.startswith("builtin:"):
        return load_family_config(builtin_path(f"{ref.split(':', 1)[1]}_family.json"))
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return load_family_config(path)


# ------------------------------------------------------------------- data


@dataclass
class Datasets:
    spec: FamilySpec
    config: DataConfig
    pool: Manifest  # training audio with reference-transcriber transcripts
    dev: Manifest
    test: Manifest
    reference_wer: float

    def select(self, languages: Iterable[str], weighting: str) -> Manifest:
        """NW/BL training subset of the reference-labelled pool."""
        langs = list(languages)
        ratios = WEIGHTINGS[weighting]
        unknown = [l for l in langs if l not in ratios]
        if unknown:
            raise CurriculumError(f"no {weighting} ratio for {unknown}")
        counts = scaled_counts({l: ratios[l] for l in langs}, self.config.scale)
        return subsample(self.pool, counts, self.config.seed)


def pool_counts(scale: float, languages: Sequence[str]) -> dict[str, int]:
    nw = scaled_counts(NW_RATIOS, scale)
    bl = scaled_counts(BL_RATIOS, scale)
    return {l: max(nw.get(l, 0), bl.get(l, 0)) for l in languages}


def prepare_data(family_cfg: Mapping, cfg: DataConfig, out_dir: str | Path) -> Datasets:
    """Render the training pool, dev and test sets and simulate the reference labels.

    Writes ``pool_truth.tsv``, ``pool_reference.tsv``, ``dev.tsv``, ``test.tsv``
    and ``reference_wer.txt`` under ``out_dir``.
    """
    out = Path(out_dir)
    spec = build_family(family_cfg, cfg.family_seed)
    if cfg.target not in spec.lang_ids:
        raise ConfigError(f"target {cfg.target} is not a family language")
    truth = generate_dataset(spec, pool_counts(cfg.scale, spec.lang_ids), cfg.seed, out / "train", "train")
    pool = apply_reference(truth, spec, cfg.reference_rates, cfg.seed + 1)
    dev = generate_dataset(spec, {cfg.target: cfg.dev}, cfg.seed, out / "dev", "dev")
    test = generate_dataset(spec, {cfg.target: cfg.test}, cfg.seed, out / "test", "test")
    hybrid = apply_reference(test, spec, cfg.reference_rates, cfg.seed + 2)
    ref_wer = corpus_wer(zip((r.transcript for r in test), (r.transcript for r in hybrid)))
    truth.save(out / "pool_truth.tsv")
    pool.save(out / "pool_reference.tsv")
    dev.save(out / "dev.tsv")
    test.save(out / "test.tsv")
    (out / "reference_wer.txt").write_text(f"{ref_wer:.6f}\n", encoding="utf-8")
    return Datasets(spec, cfg, pool, dev, test, ref_wer)


# ----------------------------------------------------------------- stages


@dataclass
class StageResult:
    stage_ref: str
    model: Model
    tokenizer_ref: str
    report: TrainReport
    train_size: int
    checkpoint: Optional[Path] = None
    certainties: Optional[np.ndarray] = None


class Registry:
    """Append-only map of trained stages, mirrored to ``registry.tsv``."""

    def __init__(self, out_dir: Optional[Path] = None):
        self.stages: dict[str, StageResult] = {}
        self.out_dir = out_dir

    def __contains__(self, ref: str) -> bool:
        return ref in self.stages

    def __getitem__(self, ref: str) -> StageResult:
        try:
            return self.stages[ref]
        except KeyError:
            raise CurriculumError(f"stage {ref!r} is not registered") from None

    def __iter__(self):
        return iter(self.stages.values())

    def __len__(self) -> int:
        return len(self.stages)

    def add(self, result: StageResult) -> None:
        if result.stage_ref in self.stages:
            raise CurriculumError(f"stage {result.stage_ref} is already registered")
        self.stages[result.stage_ref] = result
        if self.out_dir is not None and result.checkpoint is not None:
            ckpt = result.checkpoint.relative_to(self.out_dir).as_posix()
            line = (
                f"{result.stage_ref}\t{ckpt}\ttokenizers/{result.tokenizer_ref}.vocab"
                f"\t{result.report.best_dev_wer:.6f}\n"
            )
            with open(self.out_dir / "registry.tsv", "a", encoding="utf-8") as fh:
                fh.write(line)


@dataclass
class Context:
    data: Datasets
    tokenizers: dict[str, Vocab]
    arch: dict = field(default_factory=dict)
    out_dir: Optional[Path] = None
    workers: int = 1
    registry: Registry = field(default_factory=Registry)

    def arch_config(self, vocab_size: int) -> ArchConfig:
        return ArchConfig.from_dict({**self.arch, "vocab_size": vocab_size})


def train_tokenizers(specs: Mapping[str, TokenizerSpec], data: Datasets, out_dir: Optional[Path] = None) -> dict[str, Vocab]:
    """BPE vocabularies from pooled balanced-dataset transcripts."""
    vocabs = {}
    for ref, tok in specs.items():
        corpus = pool_transcripts([data.select(tok.languages, "BL")])
        vocabs[ref] = train_bpe(corpus, tok.size)
        if out_dir is not None:
            (out_dir / "tokenizers").mkdir(parents=True, exist_ok=True)
            vocabs[ref].save(out_dir / "tokenizers" / f"{ref}.vocab")
    return vocabs


def _stage_data(stage: StageSpec, ctx: Context, stage_dir: Optional[Path]) -> tuple[Manifest, Optional[np.ndarray]]:
    audio = ctx.data.select(stage.languages, stage.weighting)
    src = stage.pseudo_from
    if src is None:
        return audio, None
    prior = ctx.registry[src]
    if prior.tokenizer_ref not in ctx.tokenizers:
        raise CurriculumError(f"{stage.stage_ref}: tokenizer {prior.tokenizer_ref!r} of {src} is unknown")
    pseudo = decoder.batch_decode(
        prior.model, audio, ctx.tokenizers[prior.tokenizer_ref], src,
        stage.train_cfg.max_symbols_per_frame, ctx.workers,
    )
    certs = np.array([r.certainty for r in pseudo.records])
    if stage_dir is not None:
        pseudo.save(stage_dir / "pseudo_labels.tsv")
    chosen = select_by_certainty(pseudo, stage.selection) if stage.selection is not None else pseudo
    return chosen, certs


def initial_model(stage: StageSpec, ctx: Context, vocab: Vocab) -> Model:
    """Fresh model, or a warm start whose mode follows from the tokenizer lineage."""
    n_labels = vocab.size - 1
    if stage.warm_start_from is None:
        return init_model(ctx.arch_config(n_labels), stage.train_cfg.seed)
    prior = ctx.registry[stage.warm_start_from]
    mode = "full" if prior.tokenizer_ref == stage.tokenizer_ref else "encoder_only"
    return warm_start(prior.model, n_labels, mode, seed=stage.train_cfg.seed)


def run_stage(stage: StageSpec, ctx: Context) -> tuple[Model, TrainReport]:
    if stage.tokenizer_ref not in ctx.tokenizers:
        raise CurriculumError(f"{stage.stage_ref}: unknown tokenizer {stage.tokenizer_ref!r}")
    if stage.warm_start_from is not None and stage.warm_start_from not in ctx.registry:
        raise CurriculumError(f"{stage.stage_ref}: warm start {stage.warm_start_from!r} is not registered")
    vocab = ctx.tokenizers[stage.tokenizer_ref]
    stage_dir = ctx.out_dir / "stages" / stage.stage_ref if ctx.out_dir is not None else None
    if stage_dir is not None:
        stage_dir.mkdir(parents=True, exist_ok=True)
    train_m, certs = _stage_data(stage, ctx, stage_dir)
    if stage_dir is not None:
        train_m.save(stage_dir / "train.tsv")
    model = initial_model(stage, ctx, vocab)
    log.info("stage %s: %d training utterances", stage.stage_ref, len(train_m))
    best, report = train(model, train_m, ctx.data.dev, vocab, stage.train_cfg, stage_dir, ctx.workers)
    ckpt = None
    if stage_dir is not None:
        ckpt = stage_dir / "best.ckpt"
        save_checkpoint(best, ckpt)
        if certs is not None:
            (stage_dir / "certainty_summary.tsv").write_text(certainty_summary(certs), encoding="utf-8")
    ctx.registry.add(StageResult(stage.stage_ref, best, stage.tokenizer_ref, report, len(train_m), ckpt, certs))
    return best, report


def certainty_summary(certs: np.ndarray) -> str:
    """Spread of per-utterance certainties for one decoding pass."""
    if certs.size == 0:
        return "count\t0\n"
    q = np.quantile(certs, [0.0, 0.25, 0.5, 0.75, 1.0])
    rows = [
        ("count", str(certs.size)),
        ("mean", f"{certs.mean():.6f}"),
        ("std", f"{certs.std():.6f}"),
        ("min", f"{q[0]:.6f}"),
        ("q25", f"{q[1]:.6f}"),
        ("median", f"{q[2]:.6f}"),
        ("q75", f"{q[3]:.6f}"),
        ("max", f"{q[4]:.6f}"),
    ]
    return "".join(f"{k}\t{v}\n" for k, v in rows)


# -------------------------------------------------------------------- IPL


@dataclass(frozen=True)
class WerrRow:
    stage_ref: str
    dev_wer: float
    test_wer: float
    werr: float


@dataclass
class WerrReport:
    rows: list[WerrRow] = field(default_factory=list)

    def dumps(self) -> str:
        return "".join(
            f"{r.stage_ref}\t{r.dev_wer:.6f}\t{r.test_wer:.6f}\t{r.werr:.3f}\n" for r in self.rows
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def row(self, stage_ref: str) -> WerrRow:
        for r in self.rows:
            if r.stage_ref == stage_ref:
                return r
        raise KeyError(stage_ref)


def report_row(result: StageResult, vocab: Vocab, test: Manifest, reference_wer: float, workers: int = 1) -> WerrRow:
    test_wer = evaluate(result.model, test, vocab, workers=workers)
    return WerrRow(result.stage_ref, result.report.best_dev_wer, test_wer, werr(reference_wer, test_wer))


def run_ipl(
    base_stage: str,
    passes: int,
    fraction: float,
    ctx: Context,
    languages: Sequence[str] = ("UKR",),
    weighting: str = "BL",
    train_cfg: Optional[TrainConfig] = None,
) -> list[tuple[int, Model, WerrRow]]:
    """Re-decode, select by certainty, warm-start in full and retrain, ``passes`` times."""
    if passes < 1:
        raise CurriculumError("passes must be >= 1")
    base = ctx.registry[base_stage]
    cfg = train_cfg or TrainConfig()
    tag = "C" if fraction < 1.0 else "A"
    current = base_stage
    out = []
    for i in range(1, passes + 1):
        stage = StageSpec(
            stage_ref=f"{base_stage}-P{i}{tag}",
            languages=tuple(languages),
            weighting=weighting,
            source=f"pseudo:{current}",
            tokenizer_ref=base.tokenizer_ref,
            warm_start_from=current,
            selection=fraction if fraction < 1.0 else None,
            train_cfg=replace(cfg, seed=cfg.seed + i),
        )
        model, _ = run_stage(stage, ctx)
        row = report_row(
            ctx.registry[stage.stage_ref], ctx.tokenizers[base.tokenizer_ref],
            ctx.data.test, ctx.data.reference_wer, ctx.workers,
        )
        out.append((i, model, row))
        current = stage.stage_ref
    return out


def build_report(registry: Registry, tokenizers: Mapping[str, Vocab], test: Manifest, reference_wer: float, workers: int = 1) -> WerrReport:
    rows = [report_row(res, tokenizers[res.tokenizer_ref], test, reference_wer, workers) for res in registry]
    return WerrReport(rows)


def run_curriculum(cur: Curriculum, out_dir: str | Path, workers: int = 1, seed: Optional[int] = None) -> WerrReport:
    """Execute every stage in order and write ``werr_report.tsv`` under ``out_dir``.

    A ``seed`` replaces the data seed and offsets every stage seed.
    """
    if seed is not None:
        cur = cur.reseeded(seed)
    cur.validate()
    out = Path(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    if (out / "registry.tsv").exists():
        raise CurriculumError(f"{out} already holds a registry; use a fresh directory")
    family = resolve_family(cur.data.family, cur.base_dir)
    data = prepare_data(family, cur.data, out / "data")
    cur.reference_wer = data.reference_wer
    log.info("reference transcriber test WER %.4f", data.reference_wer)
    tokenizers = train_tokenizers(cur.tokenizers, data, out)
    ctx = Context(data, tokenizers, cur.arch, out, workers, Registry(out))
    for stage in cur.stages:
        run_stage(stage, ctx)
    report = build_report(ctx.registry, tokenizers, data.test, data.reference_wer, workers)
    report.save(out / "werr_report.tsv")
    return report


def load_registry(path: str | Path) -> tuple[Registry, dict[str, Vocab]]:
    """Read ``registry.tsv`` from a curriculum output directory."""
    root = Path(path)
    index = root / "registry.tsv"
    try:
        lines = index.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CurriculumError(f"cannot read registry {index}: {exc}") from exc
    reg = Registry()
    vocabs: dict[str, Vocab] = {}
    for line in lines:
        if not line:
            continue
        ref, ckpt, vocab_path, dev_wer = line.split("\t")
        tok_ref = Path(vocab_path).stem
        if tok_ref not in vocabs:
            vocabs[tok_ref] = Vocab.load(root / vocab_path)
        report = TrainReport(best_dev_wer=float(dev_wer))
        reg.add(StageResult(ref, load_checkpoint(root / ckpt), tok_ref, report, 0, root / ckpt))
    return reg, vocabs


def load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
