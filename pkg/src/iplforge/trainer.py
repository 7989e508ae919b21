"""Minibatch training with periodic checkpoints and dev-WER model selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .decoder import DEFAULT_MAX_SYMBOLS, _check_vocab, decode_manifest
from .errors import ConfigError, MetricError, TrainingError
from .manifest import Manifest
from .metrics import corpus_wer
from .tokenizer import Vocab
from .transducer import Model, loss_and_grad, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float = 5.0
    eval_every: int = 100
    seed: int = 0
    max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError(f"invalid step/batch/eval settings in {self}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate < 0 or self.epsilon <= 0 or self.grad_clip_norm <= 0:
            raise ConfigError("learning_rate, epsilon and grad_clip_norm must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        out = {}
        for f in fields(cls):
            if f.name in d:
                out[f.name] = int(d[f.name]) if f.type in ("int", int) else float(d[f.name])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training settings {sorted(unknown)}")
        return cls(**out)


@dataclass
class TrainReport:
    checkpoints: list[tuple[int, str, float]] = field(default_factory=list)
    best_step: int = 0
    best_dev_wer: float = math.inf

    def add(self, step: int, path: str, dev_wer: float) -> bool:
        self.checkpoints.append((step, path, dev_wer))
        if dev_wer < self.best_dev_wer:
            self.best_step, self.best_dev_wer = step, dev_wer
            return True
        return False

    def dumps(self) -> str:
        lines = [f"{s}\t{p}\t{w:.6f}" for s, p, w in self.checkpoints]
        lines.append(f"best\t{self.best_step}\t{self.best_dev_wer:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "TrainReport":
        rep = cls()
        for line in text.splitlines():
            cols = line.split("\t")
            if cols[0] == "best":
                rep.best_step, rep.best_dev_wer = int(cols[1]), float(cols[2])
            elif line:
                rep.checkpoints.append((int(cols[0]), cols[1], float(cols[2])))
        return rep

    @property
    def best_path(self) -> str:
        for s, p, _ in self.checkpoints:
            if s == self.best_step:
                return p
        raise KeyError(self.best_step)


def evaluate(
    model: Model,
    manifest: Manifest,
    vocab: Vocab,
    max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS,
    workers: int = 1,
) -> float:
    """Corpus WER of greedy hypotheses against the manifest transcripts."""
    if len(manifest) == 0:
        raise MetricError("cannot evaluate on an empty manifest")
    _check_vocab(model, vocab)
    results = decode_manifest(model, manifest, max_symbols_per_frame, workers)
    pairs = [(rec.transcript, vocab.decode(res.token_ids)) for rec, res in zip(manifest.records, results)]
    return corpus_wer(pairs)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)


def _load_examples(manifest: Manifest, vocab: Vocab) -> list[tuple[str, np.ndarray, list[int]]]:
    return [(r.utt_id, manifest.load_features(r), vocab.encode(r.transcript)) for r in manifest.records]


def train(
    model: Model,
    train_manifest: Manifest,
    dev_manifest: Manifest,
    vocab: Vocab,
    cfg: TrainConfig,
    out_dir: Optional[str | Path] = None,
    workers: int = 1,
) -> tuple[Model, TrainReport]:
    """Train a copy of ``model``; return the checkpoint with the lowest dev WER.

    Checkpoints are taken at step 0, every ``eval_every`` steps and at the
    final step. Report paths are relative to ``out_dir`` so reports are
    reproducible byte-for-byte across output locations.
    """
    if len(train_manifest) == 0:
        raise TrainingError("training manifest is empty")
    _check_vocab(model, vocab)
    model = model.copy()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    examples = _load_examples(train_manifest, vocab)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    report = TrainReport()
    best = model.copy()

    def checkpoint(step: int) -> None:
        nonlocal best
        wer = evaluate(model, dev_manifest, vocab, cfg.max_symbols_per_frame, workers)
        path = ""
        if out is not None:
            path = f"ckpt-{step:06d}.ckpt"
            save_checkpoint(model, out / path)
        if report.add(step, path, wer):
            best = model.copy()
        log.info("step %d dev_wer %.4f", step, wer)

    checkpoint(0)
    order = np.array([], dtype=np.int64)
    pos = 0
    for step in range(1, cfg.steps + 1):
        if pos >= len(order):
            order = rng.permutation(len(examples))
            pos = 0
        batch = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        total = 0.0
        grads = None
        for i in batch:
            _, feats, labels = examples[i]
            nll, g = loss_and_grad(model, feats, labels)
            if not math.isfinite(nll):
                ids = [examples[j][0] for j in batch]
                raise TrainingError(f"non-finite loss at step {step}; batch {ids}")
            total += nll
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
        clip_by_global_norm(grads, cfg.grad_clip_norm)
        opt.step(model.params, grads)
        if step % 50 == 0:
            log.debug("step %d loss %.3f", step, total / len(batch))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            checkpoint(step)
    if out is not None:
        report.save(out / "report.tsv")
    return best, report
