"""Corpus evaluation: BLEU, terminology success rate, edit rate, accuracy.

All metrics are pure functions over token-id (or symbol) sequences.

- `bleu` is corpus-level: modified n-gram precisions for n = 1..max_n are
  pooled over the whole corpus, combined by geometric mean, and scaled by
  the brevity penalty exp(1 - r/c) when the hypothesis side is shorter.
  Unsmoothed by default, so any zero n-gram precision zeroes the score;
  `smooth=True` switches to add-one smoothing on the n>1 counts.
- `tsr` counts term pairs whose target term occurs as a contiguous token
  run in the hypothesis (exact match).
- `hter` is a shift-free edit rate: unit-cost Levenshtein distance divided
  by the reference length (true edit rates also model block shifts; this
  deliberately does not).
- `seq_accuracy` is the fraction of exact sequence matches.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from math import exp, log

from .errors import ArgumentError, DegenerateInputError

__all__ = ["TermPair", "bleu", "tsr", "hter", "seq_accuracy", "levenshtein", "ngram_counts"]


@dataclass(frozen=True)
class TermPair:
    source_term: tuple
    target_term: tuple

    def __post_init__(self):
        if not self.source_term or not self.target_term:
            raise DegenerateInputError("term pairs need non-empty source and target terms")
        object.__setattr__(self, "source_term", tuple(self.source_term))
        object.__setattr__(self, "target_term", tuple(self.target_term))


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100] against one reference per hypothesis."""
    if max_n < 1:
        raise ArgumentError("max_n must be >= 1")
    hyps = [list(h) for h in hypotheses]
    refs = [list(r) for r in references]
    if not hyps:
        raise ArgumentError("bleu needs at least one hypothesis")
    if len(hyps) != len(refs):
        raise ArgumentError(f"hypothesis/reference count mismatch: {len(hyps)} vs {len(refs)}")
    if any(not r for r in refs):
        raise ArgumentError("bleu references must be non-empty")

    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            h_counts = ngram_counts(h, n)
            r_counts = ngram_counts(r, n)
            total[n - 1] += max(0, len(h) - n + 1)
            matched[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())

    log_precisions = []
    for n in range(max_n):
        m, t = matched[n], total[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_precisions.append(log(m / t))
    geo = exp(sum(log_precisions) / max_n)
    bp = 1.0 if hyp_len >= ref_len else exp(1.0 - ref_len / max(1, hyp_len))
    return 100.0 * geo * bp


def _contains_run(haystack: list, needle: tuple) -> bool:
    n = len(needle)
    return any(tuple(haystack[i : i + n]) == needle for i in range(len(haystack) - n + 1))


def tsr(hypothesis, terms: list[TermPair]) -> float:
    """Fraction of term pairs whose target term appears contiguously."""
    if not terms:
        raise ArgumentError("tsr needs at least one term pair")
    hyp = list(hypothesis)
    hits = sum(1 for pair in terms if _contains_run(hyp, tuple(pair.target_term)))
    return hits / len(terms)


def levenshtein(a, b) -> int:
    """Unit-cost insert/delete/substitute edit distance."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a  # keep the DP row short
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def hter(hypothesis, post_edited) -> float:
    """Shift-free edit rate: levenshtein(hyp, ref) / len(ref)."""
    ref = list(post_edited)
    if not ref:
        raise ArgumentError("hter reference must be non-empty")
    return levenshtein(list(hypothesis), ref) / len(ref)


def seq_accuracy(hypotheses, references) -> float:
    """Fraction of exact sequence matches."""
    hyps = [list(h) for h in hypotheses]
    refs = [list(r) for r in references]
    if len(hyps) != len(refs):
        raise ArgumentError(f"hypothesis/reference count mismatch: {len(hyps)} vs {len(refs)}")
    if not hyps:
        raise ArgumentError("seq_accuracy needs at least one pair")
    return sum(1 for h, r in zip(hyps, refs) if h == r) / len(hyps)
