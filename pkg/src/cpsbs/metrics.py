"""Estimands and set-quality metrics on token-id sequences."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .seq_model import BOS, EOS, Hypothesis, ToyModel, sequence_logprob

MAX_ORDER = 4


def _body(seq) -> tuple[int, ...]:
    tokens = seq.tokens if isinstance(seq, Hypothesis) else tuple(seq)
    return tuple(t for t in tokens if t != BOS and t != EOS)


def ngrams(body: Sequence[int], n: int) -> Counter:
    return Counter(tuple(body[i : i + n]) for i in range(len(body) - n + 1))


def ngram_profile(seq, max_order: int = MAX_ORDER) -> dict[int, Counter]:
    body = _body(seq)
    return {n: ngrams(body, n) for n in range(1, max_order + 1)}


def sentence_bleu(hyp, ref) -> float:
    """Smoothed sentence-level BLEU on token ids.

    Unigram precision is unsmoothed, so no unigram overlap gives 0.  Orders
    2-4 use add-one smoothing, and only orders the hypothesis is long enough
    to contain enter the geometric mean.  Brevity penalty is
    ``min(1, exp(1 - |ref| / |hyp|))``.
    """
    h = _body(hyp)
    r = _body(ref)
    if not h:
        return 0.0
    log_sum = 0.0
    orders = min(MAX_ORDER, len(h))
    for n in range(1, orders + 1):
        hc = ngrams(h, n)
        rc = ngrams(r, n)
        matches = sum(min(c, rc[g]) for g, c in hc.items())
        total = len(h) - n + 1
        if n == 1:
            if matches == 0:
                return 0.0
            log_sum += math.log(matches / total)
        else:
            log_sum += math.log((matches + 1) / (total + 1))
    bp = min(1.0, math.exp(1.0 - len(r) / len(h)))
    return bp * math.exp(log_sum / orders)


def bleu_estimand(ref):
    """``y -> BLEU(y, ref)``."""
    ref_body = _body(ref)
    return lambda y: sentence_bleu(y, ref_body)


def neg_logprob(model: ToyModel, tau: float = 1.0):
    """``y -> -log p_tau(y)``; its expectation is the annealed model's entropy."""
    return lambda y: -sequence_logprob(model, y, tau)


def sequence_length(y) -> float:
    """Number of body tokens (BOS and EOS excluded)."""
    return float(len(_body(y)))


def constant(c: float = 1.0):
    return lambda y: c


def ngram_diversity(sequences) -> float:
    """Sum over n = 1..4 of unique / total n-grams pooled across the set.

    Orders with no n-grams at all contribute 0.
    """
    if not sequences:
        raise ValueError("diversity of an empty set is undefined")
    bodies = [_body(s) for s in sequences]
    score = 0.0
    for n in range(1, MAX_ORDER + 1):
        pooled: Counter = Counter()
        for b in bodies:
            pooled.update(ngrams(b, n))
        total = sum(pooled.values())
        if total:
            score += len(pooled) / total
    return score
