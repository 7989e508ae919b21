"""Byte-pair-encoding sub-word vocabularies trained on pooled transcripts."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import TokenizerError

BLANK = "<blank>"
UNK = "<unk>"
BOUNDARY = "▁"
MIN_PAIR_FREQ = 2
_HEADER = "bpe-vocab v1"

Pair = tuple[str, str]


@dataclass
class Vocab:
    base_symbols: list[str]
    merges: list[Pair]
    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _word_cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.tokens or self.tokens[0] != BLANK:
            raise TokenizerError("token 0 must be the blank symbol")
        if len(set(self.tokens)) != len(self.tokens):
            raise TokenizerError("token strings must be unique")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        for left, right in self.merges:
            if left not in self._index or right not in self._index or left + right not in self._index:
                raise TokenizerError(f"merge {left!r} {right!r} references unknown tokens")
        self._word_cache = {}

    blank_id = 0

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    def token_id(self, token: str) -> int:
        return self._index[token]

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        symbols = [BOUNDARY] + [c if c in self._index else UNK for c in word]
        symbols = apply_merges(symbols, self.merges)
        ids = tuple(self._index[s] for s in symbols)
        self._word_cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for word in text.split():
            out.extend(self._encode_word(word))
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return decode_tokens(self, ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_vocab(self), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise TokenizerError(f"cannot read vocab {path}: {exc}") from exc
        return loads_vocab(text)


def apply_merges(symbols: list[str], merges: Sequence[Pair]) -> list[str]:
    """Replay ``merges`` in order, each one leftmost-first without overlaps."""
    for left, right in merges:
        if len(symbols) < 2:
            break
        i = 0
        out: list[str] = []
        changed = False
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                out.append(left + right)
                i += 2
                changed = True
            else:
                out.append(symbols[i])
                i += 1
        if changed:
            symbols = out
    return symbols


def pool_transcripts(manifests: Mapping[str, object] | Iterable[object]) -> str:
    """One transcript per line over every record of every manifest."""
    if isinstance(manifests, Mapping):
        manifests = [manifests[k] for k in sorted(manifests)]
    lines = [rec.transcript for m in manifests for rec in m.records]
    return "\n".join(lines)


def _word_counts(corpus: str) -> Counter[str]:
    return Counter(corpus.split())


def base_inventory(corpus: str) -> list[str]:
    chars = sorted({c for w in corpus.split() for c in w})
    return [UNK, BOUNDARY] + chars


def _pairs(symbols: Sequence[str]) -> Counter[Pair]:
    return Counter(zip(symbols, symbols[1:]))


def train_bpe(corpus: str, vocab_size: int) -> Vocab:
    """Train a BPE vocabulary of at most ``vocab_size`` tokens (blank included).

    Pair counts are maintained incrementally: after each merge only the
    words containing the merged pair are recounted.
    """
    counts = _word_counts(corpus)
    if not counts:
        raise TokenizerError("cannot train a tokenizer on an empty corpus")
    base = base_inventory(corpus)
    if vocab_size < len(base) + 1:
        raise TokenizerError(
            f"vocab_size {vocab_size} below base inventory {len(base)} + blank"
        )
    tokens = [BLANK] + base
    known = set(tokens)
    merges: list[Pair] = []

    words = sorted(counts)
    freqs = [counts[w] for w in words]
    segs = [[BOUNDARY] + list(w) for w in words]
    pair_counts: Counter[Pair] = Counter()
    where: dict[Pair, set[int]] = defaultdict(set)
    for wi, seg in enumerate(segs):
        for pair, n in _pairs(seg).items():
            pair_counts[pair] += n * freqs[wi]
            where[pair].add(wi)

    while len(tokens) < vocab_size:
        best = None
        for pair, n in pair_counts.items():
            if n < MIN_PAIR_FREQ:
                continue
            if best is None or n > best[0] or (n == best[0] and pair < best[1]):
                best = (n, pair)
        if best is None:
            break
        pair = best[1]
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        for wi in sorted(where.pop(pair, ())):
            old = segs[wi]
            for p, n in _pairs(old).items():
                pair_counts[p] -= n * freqs[wi]
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                if p != pair:
                    where[p].discard(wi)
            new = apply_merges(old, [pair])
            segs[wi] = new
            for p, n in _pairs(new).items():
                pair_counts[p] += n * freqs[wi]
                where[p].add(wi)
        pair_counts.pop(pair, None)
    return Vocab(base_symbols=base, merges=merges, tokens=tokens)


def decode_tokens(vocab: Vocab, ids: Sequence[int]) -> str:
    parts = []
    for i in ids:
        i = int(i)
        if i <= 0 or i >= len(vocab.tokens):
            raise TokenizerError(f"token id {i} is blank or out of range")
        parts.append(vocab.tokens[i])
    text = "".join(parts).replace(BOUNDARY, " ")
    return " ".join(text.split())


def dumps_vocab(vocab: Vocab) -> str:
    lines = [f"{_HEADER} {len(vocab.tokens)}", "[tokens]"]
    lines.extend(vocab.tokens)
    lines.append("[merges]")
    lines.extend(f"{a} {b}" for a, b in vocab.merges)
    return "\n".join(lines) + "\n"


def loads_vocab(text: str) -> Vocab:
    lines = text.split("\n")
    if not lines or not lines[0].startswith(_HEADER):
        raise TokenizerError("missing bpe-vocab header")
    try:
        size = int(lines[0].split()[2])
        t0 = lines.index("[tokens]")
        m0 = lines.index("[merges]")
    except (IndexError, ValueError) as exc:
        raise TokenizerError("malformed vocab file") from exc
    tokens = lines[t0 + 1 : m0]
    if len(tokens) != size:
        raise TokenizerError(f"header says {size} tokens, found {len(tokens)}")
    merges = []
    for line in lines[m0 + 1 :]:
        if not line:
            continue
        left, sep, right = line.partition(" ")
        if not sep:
            raise TokenizerError(f"malformed merge line {line!r}")
        merges.append((left, right))
    base = [t for t in tokens[1:] if t == UNK or len(t) == 1]
    return Vocab(base_symbols=base, merges=merges, tokens=tokens)
