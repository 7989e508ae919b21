"""Word-level edit distance, corpus WER and relative WER reduction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import MetricError


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            raise MetricError("WER undefined for an empty reference")
        return self.errors / self.ref_words

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )


def split_words(text: str | Sequence[str]) -> list[str]:
    if isinstance(text, str):
        return text.split()
    return list(text)


def edit_distance(ref: str | Sequence[str], hyp: str | Sequence[str]) -> WerBreakdown:
    """Minimal (S, D, I) word alignment of ``hyp`` against ``ref``.

    Cells hold lexicographic (total, insertions, deletions) costs, so among
    cost-minimal alignments the one with fewest insertions, then fewest
    deletions, is returned.
    """
    r = split_words(ref)
    h = split_words(hyp)
    n, m = len(r), len(h)
    # each cell: (total, ins, dels, subs)
    prev = [(j, j, 0, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        ri = r[i - 1]
        for j in range(1, m + 1):
            d = prev[j - 1]
            if ri == h[j - 1]:
                diag = d
            else:
                diag = (d[0] + 1, d[1], d[2], d[3] + 1)
            up = prev[j]
            dele = (up[0] + 1, up[1], up[2] + 1, up[3])
            left = cur[j - 1]
            ins = (left[0] + 1, left[1] + 1, left[2], left[3])
            cur.append(min(diag, dele, ins))
        prev = cur
    total, ins, dels, subs = prev[m]
    return WerBreakdown(subs, dels, ins, n)


def corpus_breakdown(pairs: Iterable[tuple[str, str]]) -> WerBreakdown:
    acc = WerBreakdown()
    for ref, hyp in pairs:
        acc = acc + edit_distance(ref, hyp)
    return acc


def corpus_wer(pairs: Iterable[tuple[str, str]]) -> float:
    acc = corpus_breakdown(pairs)
    if acc.ref_words == 0:
        raise MetricError("corpus has zero reference words")
    return acc.wer


def werr(wer_reference: float, wer_model: float) -> float:
    """Relative WER reduction in percent; negative when the model is worse."""
    if not wer_reference > 0:
        raise MetricError(f"reference WER must be positive, got {wer_reference}")
    return 100.0 * (wer_reference - wer_model) / wer_reference
