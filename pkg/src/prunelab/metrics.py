"""Edit distance and word error rate."""

from dataclasses import dataclass
from typing import Hashable, Sequence


@dataclass(frozen=True)
class WerScore:
    substitutions: int
    insertions: int
    deletions: int
    reference_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.reference_words

    def __add__(self, other: "WerScore") -> "WerScore":
        return WerScore(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.reference_words + other.reference_words,
        )


def _dp_table(ref: Sequence, hyp: Sequence) -> list[list[int]]:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(sub, d[i][j - 1] + 1, d[i - 1][j] + 1)
    return d


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Levenshtein distance with unit costs."""
    return _dp_table(a, b)[len(a)][len(b)]


def wer(reference: Sequence[Hashable], hypothesis: Sequence[Hashable]) -> WerScore:
    """Align ``hypothesis`` to ``reference`` and count S/I/D.

    Counts come from one optimal alignment; on ties the backtrace prefers a
    substitution/match, then an insertion, then a deletion.
    """
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        raise ValueError("reference must be non-empty")
    d = _dp_table(ref, hyp)
    i, j = len(ref), len(hyp)
    s = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerScore(int(s), ins, dels, len(ref))


def split_words(tokens: Sequence[int], separator: int) -> list[tuple[int, ...]]:
    """Group grapheme tokens into words at ``separator``; empty words vanish."""
    words, cur = [], []
    for tok in tokens:
        if tok == separator:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(tok)
    if cur:
        words.append(tuple(cur))
    return words


def corpus_wer(references, hypotheses, separator: int) -> WerScore:
    """Pooled word-level score over token sequences (errors / total reference words)."""
    total = WerScore(0, 0, 0, 0)
    for ref, hyp in zip(references, hypotheses, strict=True):
        total = total + wer(split_words(ref, separator), split_words(hyp, separator))
    return total
