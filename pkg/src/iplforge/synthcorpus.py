"""Synthetic family of related languages with renderable pseudo-acoustics.

Every phone of the family has one character per script; a character's
acoustic prototype is the phone vector plus a small per-script offset, so
related languages written in different scripts still share acoustics.
Transition matrices live in phone space (last index = word boundary) and are
restricted to each language's alphabet after mixing with the parent matrix.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DatasetError, SelectionError
from .manifest import Manifest, UttRecord, write_features

LANGS = ("UKR", "RUS", "POL", "CZE", "SVK")

# naturally weighted and balanced mixes (thousands of hours), used as utterance-count ratios
NW_RATIOS = {"UKR": 12, "RUS": 501, "POL": 92, "CZE": 35, "SVK": 8}
BL_RATIOS = {"UKR": 25, "RUS": 16, "POL": 27, "CZE": 23, "SVK": 18}


@dataclass
class LanguageSpec:
    lang_id: str
    script: str
    alphabet: str
    transition_matrix: np.ndarray
    word_len_range: tuple[int, int]
    words_per_utt_range: tuple[int, int]
    relatedness_seed: int
    parent: Optional[str] = None
    proximity: float = 0.0
    _char_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._char_index = {c: i for i, c in enumerate(self.alphabet)}

    @property
    def boundary(self) -> int:
        return len(self.alphabet)


@dataclass
class FamilySpec:
    languages: list[LanguageSpec]
    prototype_table: dict[str, np.ndarray]
    feature_dim: int
    noise_sigma: float
    frames_per_char_range: tuple[int, int]

    def language(self, lang_id: str) -> LanguageSpec:
        for lang in self.languages:
            if lang.lang_id == lang_id:
                return lang
        raise ConfigError(f"unknown language {lang_id!r}")

    def lang_index(self, lang_id: str) -> int:
        return [lang.lang_id for lang in self.languages].index(self.language(lang_id).lang_id)

    @property
    def lang_ids(self) -> list[str]:
        return [lang.lang_id for lang in self.languages]


def _interval(value: Sequence[int], name: str, lo: int = 1) -> tuple[int, int]:
    try:
        a, b = int(value[0]), int(value[1])
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"{name}: expected an integer interval, got {value!r}") from exc
    if a < lo or a > b:
        raise ConfigError(f"{name}: invalid interval [{a}, {b}]")
    return a, b


def draw_finals(rng: np.random.Generator, n_phones: int, params: Mapping) -> np.ndarray:
    """Boolean mask of word-final-prone phones, shared by the whole family."""
    return rng.random(n_phones) < float(params.get("final_fraction", 0.35))


def random_transition(
    rng: np.random.Generator, n_phones: int, params: Mapping, finals: np.ndarray
) -> np.ndarray:
    """Row-stochastic (P+1)x(P+1) matrix in phone space; index P is the boundary.

    Row P is the word-start distribution (never ends a word). Word-final-prone
    phones end a word with high probability, so boundaries are mostly
    predictable from the preceding character. No phone follows itself, which
    keeps repeated characters from being acoustically ambiguous.
    """
    conc = float(params.get("concentration", 0.3))
    end_final = float(params.get("end_prob_final", 0.7))
    end_other = float(params.get("end_prob_other", 0.05))
    n = n_phones
    m = np.zeros((n + 1, n + 1))
    for r in range(n + 1):
        row = rng.dirichlet(np.full(n, conc))
        if r == n:
            m[r, :n] = row
        else:
            if n > 1:
                row[r] = 0.0
                row /= row.sum()
            end = end_final if finals[r] else end_other
            m[r, :n] = row * (1.0 - end)
            m[r, n] = end
    return m


def restrict(matrix: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Keep rows/columns ``keep`` plus the boundary, renormalising rows."""
    idx = list(keep) + [matrix.shape[0] - 1]
    sub = matrix[np.ix_(idx, idx)]
    sums = sub.sum(axis=1, keepdims=True)
    out = np.where(sums > 0, sub / np.where(sums > 0, sums, 1.0), 1.0 / len(idx))
    return out


def _topo_order(langs: list[dict]) -> list[dict]:
    by_id = {lc["lang_id"]: lc for lc in langs}
    order: list[dict] = []
    state: dict[str, int] = {}

    def visit(lid: str) -> None:
        if state.get(lid) == 2:
            return
        if state.get(lid) == 1:
            raise ConfigError(f"parent cycle through {lid}")
        state[lid] = 1
        parent = by_id[lid].get("parent")
        if parent is not None:
            if parent not in by_id:
                raise ConfigError(f"{lid}: unknown parent {parent}")
            visit(parent)
        state[lid] = 2
        order.append(by_id[lid])

    for lc in langs:
        visit(lc["lang_id"])
    return order


def build_family(config: Mapping, seed: int) -> FamilySpec:
    """Draw prototypes and per-language transition matrices from ``config``."""
    feature_dim = int(config.get("feature_dim", 16))
    if feature_dim < 2:
        raise ConfigError("feature_dim must be >= 2")
    noise_sigma = float(config.get("noise_sigma", 0.5))
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    frames = _interval(config.get("frames_per_char", (2, 4)), "frames_per_char")
    scripts: dict[str, str] = dict(config["scripts"])
    n_phones = None
    for name, chars in scripts.items():
        if not chars:
            raise ConfigError(f"script {name} has an empty alphabet")
        if len(set(chars)) != len(chars):
            raise ConfigError(f"script {name} repeats characters")
        if n_phones is None:
            n_phones = len(chars)
        elif len(chars) != n_phones:
            raise ConfigError("all scripts must list one character per phone")
    all_chars = [c for chars in scripts.values() for c in chars]
    if len(set(all_chars)) != len(all_chars) or " " in all_chars:
        raise ConfigError("characters must be unique across scripts and not spaces")
    lang_cfgs = list(config["languages"])
    if not lang_cfgs:
        raise ConfigError("config names no languages")
    matrix_params = dict(config.get("transitions", {}))

    rng = np.random.default_rng(seed)
    proto_scale = float(config.get("prototype_scale", 1.0))
    script_offset = float(config.get("script_offset", 0.3))
    phones = rng.normal(0.0, proto_scale, size=(n_phones, feature_dim))
    table: dict[str, np.ndarray] = {}
    for name in sorted(scripts):
        offset = rng.normal(0.0, script_offset, size=(n_phones, feature_dim))
        for p, ch in enumerate(scripts[name]):
            table[ch] = phones[p] + offset[p]
    finals = draw_finals(rng, n_phones, matrix_params)
    base = random_transition(rng, n_phones, matrix_params, finals)

    full: dict[str, np.ndarray] = {}
    built: dict[str, LanguageSpec] = {}
    for lc in _topo_order(lang_cfgs):
        lid = lc["lang_id"]
        script = lc["script"]
        if script not in scripts:
            raise ConfigError(f"{lid}: unknown script {script!r}")
        exclude = set(lc.get("exclude", ""))
        keep = [p for p, ch in enumerate(scripts[script]) if ch not in exclude]
        if not keep:
            raise ConfigError(f"{lid}: empty alphabet")
        w = float(lc.get("proximity", 0.0))
        if not 0.0 <= w <= 1.0:
            raise ConfigError(f"{lid}: proximity must lie in [0, 1]")
        rseed = int(lc.get("relatedness_seed", 0))
        pert = random_transition(np.random.default_rng([seed, rseed]), n_phones, matrix_params, finals)
        parent = lc.get("parent")
        anchor = base if parent is None else full[parent]
        full[lid] = w * anchor + (1.0 - w) * pert
        built[lid] = LanguageSpec(
            lang_id=lid,
            script=script,
            alphabet="".join(scripts[script][p] for p in keep),
            transition_matrix=restrict(full[lid], keep),
            word_len_range=_interval(lc.get("word_len", (2, 5)), f"{lid}.word_len"),
            words_per_utt_range=_interval(lc.get("words_per_utt", (2, 4)), f"{lid}.words_per_utt"),
            relatedness_seed=rseed,
            parent=parent,
            proximity=w,
        )
    languages = [built[lc["lang_id"]] for lc in lang_cfgs]
    return FamilySpec(languages, table, feature_dim, noise_sigma, frames)


def load_family_config(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read family config {path}: {exc}") from exc


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    i = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    return min(i, len(p) - 1)


def sample_word(lang: LanguageSpec, rng: np.random.Generator) -> str:
    lo, hi = lang.word_len_range
    m = lang.transition_matrix
    end = lang.boundary
    state = end
    chars: list[str] = []
    while len(chars) < hi:
        row = m[state]
        if len(chars) < lo:
            nxt = _draw(rng, row[:end])
        else:
            nxt = _draw(rng, row)
            if nxt == end:
                break
        chars.append(lang.alphabet[nxt])
        state = nxt
    return "".join(chars)


def sample_transcript(lang: LanguageSpec, rng: np.random.Generator) -> str:
    lo, hi = lang.words_per_utt_range
    n = int(rng.integers(lo, hi + 1))
    return " ".join(sample_word(lang, rng) for _ in range(n))


def render(spec: FamilySpec, transcript: str, rng: np.random.Generator) -> np.ndarray:
    """Pseudo-acoustic frames for ``transcript``; spaces render nothing."""
    dmin, dmax = spec.frames_per_char_range
    rows = []
    for ch in transcript:
        if ch == " ":
            continue
        d = int(rng.integers(dmin, dmax + 1))
        rows.extend([spec.prototype_table[ch]] * d)
    if not rows:
        return np.zeros((0, spec.feature_dim))
    feats = np.array(rows, dtype=np.float64)
    if spec.noise_sigma > 0:
        feats = feats + rng.normal(0.0, spec.noise_sigma, size=feats.shape)
    return feats


def sample_utterance(spec: FamilySpec, lang: str, rng: np.random.Generator) -> tuple[str, np.ndarray]:
    transcript = sample_transcript(spec.language(lang), rng)
    return transcript, render(spec, transcript, rng)


def reference_transcribe(
    transcript: str,
    error_rates: tuple[float, float, float],
    rng: np.random.Generator,
    lang: LanguageSpec,
) -> str:
    """Simulated reference transcriber: independent per-word sub/del/ins.

    Substitutes are redrawn until they differ from the original word so the
    expected corpus WER stays close to ``sub + del + ins``.
    """
    sub, dele, ins = (float(x) for x in error_rates)
    if min(sub, dele, ins) < 0 or max(sub, dele, ins) > 1 or sub + dele > 1:
        raise ConfigError(f"invalid error rates {error_rates}")
    out: list[str] = []
    for word in transcript.split():
        r = rng.random()
        if r < sub:
            new = word
            for _ in range(50):
                new = sample_word(lang, rng)
                if new != word:
                    break
            out.append(new)
        elif r < sub + dele:
            continue
        else:
            out.append(word)
        if ins > 0 and rng.random() < ins:
            out.append(sample_word(lang, rng))
    return " ".join(out)


def _key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def utterance_rng(seed: int, split: str, lang_index: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _key(split), lang_index, index])


def generate_dataset(
    spec: FamilySpec,
    counts: Mapping[str, int],
    seed: int,
    out_dir: str | Path,
    split: str = "train",
) -> Manifest:
    """Render ``counts[lang]`` utterances per language under ``out_dir``.

    Utterance ``i`` of a language always comes from the same RNG stream, so
    a smaller count yields a prefix of a larger one.
    """
    out_dir = Path(out_dir)
    unknown = set(counts) - set(spec.lang_ids)
    if unknown:
        raise ConfigError(f"counts name unknown languages {sorted(unknown)}")
    records = []
    for lang_id in spec.lang_ids:
        n = int(counts.get(lang_id, 0))
        if n < 0:
            raise ConfigError(f"negative count for {lang_id}")
        if n == 0:
            continue
        li = spec.lang_index(lang_id)
        feat_dir = out_dir / "feats"
        try:
            feat_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetError(f"cannot create {feat_dir}: {exc}") from exc
        for i in range(n):
            rng = utterance_rng(seed, split, li, i)
            transcript, feats = sample_utterance(spec, lang_id, rng)
            utt_id = f"{split}-{lang_id}-{i:06d}"
            rel = f"feats/{utt_id}.feat"
            write_features(out_dir / rel, feats)
            records.append(UttRecord(utt_id, lang_id, rel, transcript, "truth"))
    return Manifest(records, root=out_dir.resolve())


def apply_reference(
    manifest: Manifest,
    spec: FamilySpec,
    error_rates: tuple[float, float, float],
    seed: int,
) -> Manifest:
    """Replace transcripts with simulated reference-transcriber output."""
    out = []
    for rec in manifest.records:
        rng = np.random.default_rng([seed, _key(rec.utt_id)])
        hyp = reference_transcribe(rec.transcript, error_rates, rng, spec.language(rec.lang_id))
        out.append(rec.with_transcript(hyp, "reference"))
    return manifest.derive(out)


def subsample(manifest: Manifest, targets: Mapping[str, int], seed: int) -> Manifest:
    """Uniform per-language subset of exactly ``targets[lang]`` records."""
    chosen: set[str] = set()
    for lang in sorted(targets):
        k = int(targets[lang])
        pool = [r.utt_id for r in manifest.records if r.lang_id == lang]
        if k < 0 or k > len(pool):
            raise SelectionError(f"{lang}: target {k} exceeds the {len(pool)} available records")
        rng = np.random.default_rng([seed, _key(lang)])
        picks = rng.choice(len(pool), size=k, replace=False) if k else []
        chosen.update(pool[i] for i in picks)
    return manifest.derive(r for r in manifest.records if r.utt_id in chosen)


def scaled_counts(ratios: Mapping[str, int], scale: float) -> dict[str, int]:
    return {lang: int(math.ceil(r * scale)) for lang, r in ratios.items()}
