"""Corpus BLEU (tokenized, case-sensitive, no smoothing) and token accuracy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

MAX_ORDER = 4


@dataclass
class BleuStats:
    matches: List[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: List[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            [a + b for a, b in zip(self.matches, other.matches)],
            [a + b for a, b in zip(self.totals, other.totals)],
            self.hyp_len + other.hyp_len,
            self.ref_len + other.ref_len,
        )

    @property
    def precisions(self) -> List[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    @property
    def brevity_penalty(self) -> float:
        if self.hyp_len == 0:
            return 0.0
        if self.hyp_len >= self.ref_len:
            return 1.0
        return math.exp(1.0 - self.ref_len / self.hyp_len)

    @property
    def score(self) -> float:
        # An order with no hypothesis n-grams at all (corpus shorter than n
        # tokens) carries no evidence and is left out of the geometric mean;
        # an order with n-grams but no matches still zeroes the score.
        orders = [(m, t) for m, t in zip(self.matches, self.totals) if t > 0]
        if not orders or any(m == 0 for m, _ in orders):
            return 0.0
        log_p = sum(math.log(m / t) for m, t in orders) / len(orders)
        return 100.0 * self.brevity_penalty * math.exp(log_p)

    def format(self) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        ratio = self.hyp_len / self.ref_len if self.ref_len else 0.0
        return (
            f"BLEU = {self.score:.2f} ({p}, BP={self.brevity_penalty:.3f}, "
            f"ratio={ratio:.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence[str], ref: Sequence[str]) -> BleuStats:
    stats = BleuStats(hyp_len=len(hyp), ref_len=len(ref))
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats.matches[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        stats.totals[n - 1] = max(len(hyp) - n + 1, 0)
    return stats


def corpus_stats(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> BleuStats:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("BLEU of an empty corpus is undefined")
    total = BleuStats()
    for h, r in zip(hyps, refs):
        total = total + sentence_stats(h, r)
    return total


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """BLEU in [0, 100] over pre-tokenized hypotheses with one reference each."""
    return corpus_stats(hyps, refs).score


def token_accuracy(predictions, targets, pad_id: int = 0) -> float:
    """Fraction of non-pad target positions predicted exactly.

    ``predictions`` may be ids shaped like ``targets`` or logits with a trailing
    vocabulary axis.
    """
    pred = np.asarray(predictions)
    tgt = np.asarray(targets)
    if pred.ndim == tgt.ndim + 1:
        pred = pred.argmax(axis=-1)
    keep = tgt != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no non-pad targets")
    return float((pred[keep] == tgt[keep]).sum()) / n
