"""Expectation estimators for sequence models.

All probabilities are under the annealed model ``p_tau``; core truncation
only changes which beams CPSBS can draw, never the ``p(y)`` in an estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decoders import beam_search, cpsbs_tokens, hindsight_log_inclusion, sbs
from .errors import DesignError, ZeroInclusionError
from .seq_model import Hypothesis, ToyModel, ancestral_sample, sample_excluding, sequence_logprob

Estimand = Callable[[Hypothesis], "float | Sequence[float]"]

ZERO_POLICIES = ("fail", "drop")
SAS_RESIDUAL_FLOOR = 1e-12


@dataclass(frozen=True)
class EstimateReport:
    """An estimate together with everything needed to recompute it.

    ``value = sum(weights * fvals)``, divided by ``sum(weights)`` when
    ``normalized``.  ``pihat`` is NaN for estimators that do not use
    inclusion probabilities.
    """

    estimator: str
    value: np.ndarray
    items: tuple[Hypothesis, ...]
    p: np.ndarray
    pihat: np.ndarray
    weights: np.ndarray
    fvals: np.ndarray
    sample_size: int
    normalized: bool = False
    seed: int | None = None
    zero_policy: str = "fail"
    dropped: tuple[Hypothesis, ...] = field(default=())

    def recompute(self) -> np.ndarray:
        total = self.weights @ self.fvals
        if self.normalized:
            total = total / self.weights.sum()
        return total

    @property
    def scalar(self) -> float:
        return float(self.value[0])


def _evaluate(f: Estimand, items: Sequence[Hypothesis]) -> np.ndarray:
    rows = [np.atleast_1d(np.asarray(f(y), dtype=float)) for y in items]
    return np.vstack(rows)


def _nan(n: int) -> np.ndarray:
    return np.full(n, np.nan)


def mc_estimate(samples: Sequence[Hypothesis], f: Estimand, seed: int | None = None) -> EstimateReport:
    """Plain Monte Carlo average of ``f`` over i.i.d. samples."""
    if not samples:
        raise DesignError("Monte Carlo estimate needs at least one sample")
    items = tuple(samples)
    fvals = _evaluate(f, items)
    M = len(items)
    weights = np.full(M, 1.0 / M)
    return EstimateReport(
        estimator="mc",
        value=fvals.mean(axis=0),
        items=items,
        p=np.exp([y.logp for y in items]),
        pihat=_nan(M),
        weights=weights,
        fvals=fvals,
        sample_size=M,
        seed=seed,
    )


def mc_sample_estimate(
    model: ToyModel, K: int, tau: float, f: Estimand, rng: np.random.Generator, seed: int | None = None
) -> EstimateReport:
    """Draw ``K`` ancestral samples and average ``f`` over them."""
    return mc_estimate([ancestral_sample(model, tau, rng) for _ in range(K)], f, seed)


def sas_estimate(
    model: ToyModel, K: int, tau: float, f: Estimand, rng: np.random.Generator, seed: int | None = None
) -> EstimateReport:
    """Sum-and-sample: exact sum over a beam-search set of size K-1 plus one residual draw.

    The residual sequence is drawn exactly from the model restricted to the
    complement of the beam.  When the beam holds all but ``1e-12`` of the mass
    the sample term is dropped.
    """
    if K < 2:
        raise DesignError(f"sum-and-sample needs K >= 2, got {K}")
    fixed = list(beam_search(model, K - 1, tau).items)
    p_fixed = np.exp([y.logp for y in fixed])
    residual = 1.0 - math.fsum(p_fixed)
    items = list(fixed)
    weights = list(p_fixed)
    if residual > SAS_RESIDUAL_FLOOR:
        items.append(sample_excluding(model, tau, fixed, rng))
        weights.append(residual)
    fvals = _evaluate(f, items)
    weights = np.asarray(weights)
    return EstimateReport(
        estimator="sas",
        value=weights @ fvals,
        items=tuple(items),
        p=np.exp([y.logp for y in items]),
        pihat=_nan(len(items)),
        weights=weights,
        fvals=fvals,
        sample_size=len(items),
        seed=seed,
    )


def ht_estimate(
    items: Sequence[Hypothesis],
    pvals,
    pihat,
    f: Estimand,
    normalized: bool = False,
    *,
    zero_policy: str = "fail",
    estimator: str = "ht",
    seed: int | None = None,
) -> EstimateReport:
    """Horvitz-Thompson estimate ``sum p(y) / pihat(y) f(y)`` over a sampled set.

    With ``normalized`` the sum is divided by ``sum p(y) / pihat(y)``.  A zero
    ``pihat`` raises :class:`ZeroInclusionError` under ``zero_policy="fail"``
    and is dropped (and recorded in the report) under ``"drop"``.
    """
    if zero_policy not in ZERO_POLICIES:
        raise DesignError(f"zero-inclusion policy must be one of {ZERO_POLICIES}")
    items = tuple(items)
    p = np.asarray(pvals, dtype=float)
    pihat = np.asarray(pihat, dtype=float)
    if len(items) != len(p) or len(p) != len(pihat):
        raise DesignError("items, pvals and pihat must align")
    zero = pihat <= 0
    dropped: tuple = ()
    if zero.any():
        if zero_policy == "fail":
            bad = [items[i].tokens for i in np.flatnonzero(zero)]
            raise ZeroInclusionError(f"zero estimated inclusion probability for {bad}")
        dropped = tuple(items[i] for i in np.flatnonzero(zero))
        keep = ~zero
        items = tuple(y for y, k in zip(items, keep) if k)
        p, pihat = p[keep], pihat[keep]
        if not items:
            raise ZeroInclusionError("every item had zero estimated inclusion probability")
    fvals = _evaluate(f, items)
    weights = p / pihat
    value = weights @ fvals
    if normalized:
        value = value / weights.sum()
    return EstimateReport(
        estimator=estimator,
        value=value,
        items=items,
        p=p,
        pihat=pihat,
        weights=weights,
        fvals=fvals,
        sample_size=len(items) + len(dropped),
        normalized=normalized,
        seed=seed,
        zero_policy=zero_policy,
        dropped=dropped,
    )


def _target(y) -> tuple[int, ...]:
    return y.tokens if isinstance(y, Hypothesis) else tuple(y)


def incl_mc(
    y,
    model: ToyModel,
    K: int,
    tau: float,
    truncation: float,
    M: int,
    rng: np.random.Generator,
    *,
    weight_tau: float = 1.0,
) -> float:
    """Fraction of ``M`` independent CPSBS runs whose final beam contains ``y``."""
    if M < 1:
        raise DesignError("M must be >= 1")
    target = _target(y)
    hits = 0
    for _ in range(M):
        if any(node[0] == target for node in cpsbs_tokens(model, K, tau, truncation, rng, weight_tau)):
            hits += 1
    return hits / M


def incl_is(
    y,
    model: ToyModel,
    K: int,
    tau: float,
    truncation: float,
    M: int,
    rng: np.random.Generator,
    *,
    weight_tau: float = 1.0,
) -> float:
    """Importance-sampled inclusion probability: mean of ``M`` hindsight products.

    Unbiased for the CPSBS inclusion probability and strictly positive
    whenever every prefix of ``y`` can be drawn.
    """
    if M < 1:
        raise DesignError("M must be >= 1")
    target = _target(y)
    return math.fsum(
        math.exp(hindsight_log_inclusion(model, K, tau, truncation, target, rng, weight_tau=weight_tau))
        for _ in range(M)
    ) / M


def sbs_importance_weight(logp: float, kappa: float) -> float:
    """``P(G_y > kappa) = 1 - exp(-exp(logp - kappa))`` for a Gumbel ``G_y`` at ``logp``."""
    if kappa == -math.inf:
        return 1.0
    return -math.expm1(-math.exp(logp - kappa))


def sbs_estimate(
    model: ToyModel,
    K: int,
    tau: float,
    f: Estimand,
    rng: np.random.Generator,
    normalized: bool = True,
    *,
    zero_policy: str = "fail",
    seed: int | None = None,
) -> EstimateReport:
    """Horvitz-Thompson over one stochastic-beam-search sample with threshold weights."""
    beam, stats = sbs(model, K, tau, rng)
    items = beam.items
    p = np.exp([y.logp for y in items])
    pihat = [sbs_importance_weight(y.logp, stats.kappa) for y in items]
    return ht_estimate(
        items, p, pihat, f, normalized, zero_policy=zero_policy, estimator="sbs", seed=seed
    )


def cpsbs_ht_pipeline(
    model: ToyModel,
    K: int,
    tau: float,
    truncation: float,
    f: Estimand,
    M_incl: int = 1,
    normalized: bool = True,
    rng: np.random.Generator | None = None,
    *,
    zero_policy: str = "fail",
    seed: int | None = None,
    weight_tau: float = 1.0,
) -> EstimateReport:
    """One CPSBS run, importance-sampled inclusion probabilities, then HT.

    ``p(y)`` in the estimate is the untruncated annealed probability.
    ``weight_tau`` anneals the odds weights of the design only.
    """
    rng = np.random.default_rng() if rng is None else rng
    nodes = cpsbs_tokens(model, K, tau, truncation, rng, weight_tau)
    items = tuple(Hypothesis(n[0], n[1]) for n in nodes)
    pihat = []
    for y in items:
        try:
            pihat.append(incl_is(y, model, K, tau, truncation, M_incl, rng, weight_tau=weight_tau))
        except ZeroInclusionError:
            if zero_policy == "fail":
                raise
            pihat.append(0.0)
    p = np.exp([y.logp for y in items])
    return ht_estimate(
        items, p, pihat, f, normalized, zero_policy=zero_policy, estimator="cpsbs", seed=seed
    )


def model_probability(model: ToyModel, y, tau: float = 1.0) -> float:
    return math.exp(sequence_logprob(model, y, tau))
