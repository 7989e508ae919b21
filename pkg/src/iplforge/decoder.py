"""Greedy Transducer decoding with per-token log-probabilities."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, DecodeError, ModelError
from .manifest import Manifest
from .tokenizer import Vocab
from .transducer import BLANK_ID, Model, encode_acoustics, label_start, label_step

DEFAULT_MAX_SYMBOLS = 4


@dataclass
class DecodeResult:
    token_ids: list[int] = field(default_factory=list)
    token_logprobs: list[float] = field(default_factory=list)
    frames_consumed: int = 0


def greedy_decode(model: Model, features: np.ndarray, max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS) -> DecodeResult:
    """Frame-synchronous greedy search; argmax ties go to the lowest id, so blank wins."""
    if max_symbols_per_frame < 1:
        raise DecodeError("max_symbols_per_frame must be >= 1")
    p = model.params
    wo, bo, wl, jb = p["join.wo"], p["join.bo"], p["join.wl"], p["join.b"]
    acoustic = encode_acoustics(model, features) @ p["join.we"]
    state = label_start(model)
    label_proj = state @ wl + jb
    result = DecodeResult(frames_consumed=acoustic.shape[0])
    for t in range(acoustic.shape[0]):
        for _ in range(max_symbols_per_frame):
            z = np.tanh(acoustic[t] + label_proj) @ wo + bo
            m = z.max()
            logp = z - m - np.log(np.exp(z - m).sum())
            k = int(np.argmax(logp))
            if k == BLANK_ID:
                break
            result.token_ids.append(k)
            result.token_logprobs.append(float(logp[k]))
            state = label_step(model, state, k)
            label_proj = state @ wl + jb
    return result


def certainty(result: DecodeResult) -> float:
    """Utterance-level certainty: sum of emitted-token log-probabilities."""
    return float(sum(result.token_logprobs))


def _check_vocab(model: Model, vocab: Vocab) -> None:
    if model.arch.vocab_size != vocab.size - 1:
        raise ModelError(
            f"model predicts {model.arch.vocab_size} labels but the vocabulary has {vocab.size - 1}"
        )


def decode_manifest(
    model: Model,
    manifest: Manifest,
    max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS,
    workers: int = 1,
) -> list[DecodeResult]:
    """Decode every record in order; ``workers`` > 1 decodes concurrently."""

    def one(rec):
        try:
            feats = manifest.load_features(rec)
        except DatasetError as exc:
            raise DecodeError(f"{rec.utt_id}: {exc}") from exc
        try:
            return greedy_decode(model, feats, max_symbols_per_frame)
        except ModelError as exc:
            raise DecodeError(f"{rec.utt_id}: {exc}") from exc

    if workers > 1 and len(manifest) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, manifest.records))
    return [one(rec) for rec in manifest.records]


def batch_decode(
    model: Model,
    manifest: Manifest,
    vocab: Vocab,
    stage_ref: str,
    max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS,
    workers: int = 1,
) -> Manifest:
    """Pseudo-label ``manifest``: decoded text, source ``pseudo:<stage_ref>``, certainty."""
    _check_vocab(model, vocab)
    results = decode_manifest(model, manifest, max_symbols_per_frame, workers)
    out = []
    for rec, res in zip(manifest.records, results):
        # rounded to the TSV precision so in-memory and reloaded manifests agree
        score = round(certainty(res), 6) + 0.0
        out.append(rec.with_transcript(vocab.decode(res.token_ids), f"pseudo:{stage_ref}", score))
    return manifest.derive(out)
