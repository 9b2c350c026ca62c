"""Exhaustive ground truth on tiny instances.

Nothing here uses the dynamic programs of :mod:`cpsbs.cp_design`; subset
masses are brute-force products over ``itertools.combinations`` and beam
trajectories are expanded directly from the model table.  Every entry point
enforces a hard size budget and refuses rather than truncating.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BudgetExceededError, ZeroInclusionError
from .seq_model import BOS, EOS, Hypothesis, ToyModel

DEFAULT_SEQUENCE_BUDGET = 10**5
DEFAULT_SUBSET_BUDGET = 10**6
DEFAULT_TRAJECTORY_BUDGET = 10**6

_ODDS_EPS = 1e-9


@dataclass(frozen=True)
class SupportTable:
    """Every complete sequence of a model with its exact probability."""

    sequences: tuple[tuple[int, ...], ...]
    probs: np.ndarray

    def __len__(self) -> int:
        return len(self.sequences)

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return dict(zip(self.sequences, self.probs.tolist()))

    def hypotheses(self) -> list[Hypothesis]:
        return [Hypothesis(s, math.log(p)) for s, p in zip(self.sequences, self.probs) if p > 0]

    def mode(self, nonempty: bool = False) -> tuple[int, ...]:
        """Most probable sequence, optionally among those with at least one body token."""
        probs = self.probs
        if nonempty:
            probs = np.where([len(s) > 2 for s in self.sequences], probs, -1.0)
        return self.sequences[int(np.argmax(probs))]


@dataclass(frozen=True)
class BeamDistribution:
    """Exact distribution over final CPSBS beams (canonicalized as sorted tuples)."""

    probs: dict

    def inclusion(self, sequence) -> float:
        seq = sequence.tokens if isinstance(sequence, Hypothesis) else tuple(sequence)
        return sum(p for beam, p in self.probs.items() if seq in beam)

    def inclusion_probabilities(self) -> dict[tuple[int, ...], float]:
        out: dict = {}
        for beam, p in self.probs.items():
            for seq in beam:
                out[seq] = out.get(seq, 0.0) + p
        return out

    def expected_size(self) -> float:
        return sum(len(beam) * p for beam, p in self.probs.items())

    def total(self) -> float:
        return sum(self.probs.values())


def _annealed_row(model: ToyModel, state_prefix: tuple[int, ...], tau: float) -> list[float]:
    """Annealed next-symbol log-probabilities, computed straight from the table."""
    if len(state_prefix) - 1 >= model.t_max:
        return [-math.inf] * model.vocab_size + [0.0]
    last = state_prefix[-1]
    row = model.probs[model.vocab_size if last == BOS else last]
    with np.errstate(divide="ignore"):
        logs = np.log(row) / tau
    logs = logs - logs.max()
    return (logs - math.log(np.exp(logs).sum())).tolist()


def _core(logp: list[float], mass: float) -> list[float]:
    if mass >= 1.0:
        return logp
    order = sorted(range(len(logp)), key=lambda i: (-logp[i], i))
    out = [-math.inf] * len(logp)
    acc = 0.0
    for i in order:
        out[i] = logp[i]
        acc += math.exp(logp[i])
        if acc >= mass - 1e-12:
            break
    return out


def _log_odds(lp: float) -> float:
    q = min(lp, math.log1p(-_ODDS_EPS))
    return q - math.log(-math.expm1(q)) if q > -1 else q - math.log1p(-math.exp(q))


def _symbol(model: ToyModel, col: int) -> int:
    return EOS if col == model.vocab_size else col


def _support_size(model: ToyModel) -> int:
    V = model.vocab_size
    return sum(V**n for n in range(model.t_max + 1))


def enumerate_support(model: ToyModel, tau: float = 1.0, budget: int = DEFAULT_SEQUENCE_BUDGET) -> SupportTable:
    """Depth-first enumeration of all complete sequences (forced EOS at ``t_max``)."""
    size = _support_size(model)
    if size > budget:
        raise BudgetExceededError(
            f"model has {size} candidate sequences, above the oracle budget of {budget}"
        )
    seqs: list[tuple[int, ...]] = []
    probs: list[float] = []

    def visit(prefix: tuple[int, ...], lp: float) -> None:
        row = _annealed_row(model, prefix, tau)
        for col, q in enumerate(row):
            child = prefix + (_symbol(model, col),)
            if col == model.vocab_size:
                seqs.append(child)
                probs.append(math.exp(lp + q))
            elif len(prefix) - 1 < model.t_max:
                visit(child, lp + q)

    visit((BOS,), 0.0)
    return SupportTable(tuple(seqs), np.array(probs))


def exact_expectation(table: SupportTable, f) -> np.ndarray:
    """``sum_y p(y) f(y)`` over the support table."""
    total = None
    for seq, p in zip(table.sequences, table.probs):
        if p == 0.0:
            continue
        term = p * np.atleast_1d(np.asarray(f(Hypothesis(seq, math.log(p))), dtype=float))
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class TruncationShift:
    """What core truncation hides from a design, computed exactly.

    ``excluded_mass`` is the annealed probability of sequences with some
    token outside the core of its untempered row. ``raw_bias`` and
    ``normalized_bias`` are the exact limits of the raw and self-normalized
    Horvitz-Thompson estimates minus the true expectation.
    """

    removed_tokens: int
    excluded_mass: float
    raw_bias: float
    normalized_bias: float


def truncation_shift(
    model: ToyModel, f, tau: float, truncation: float, budget: int = DEFAULT_SEQUENCE_BUDGET
) -> TruncationShift:
    table = enumerate_support(model, tau, budget)
    removed = 0
    for row in model.probs:
        logs = [math.log(q) if q > 0 else -math.inf for q in row]
        removed += sum(c == -math.inf < x for c, x in zip(_core(logs, truncation), logs))
    total = lost = lost_mass = 0.0
    for seq, p in zip(table.sequences, table.probs):
        if p == 0.0:
            continue
        value = p * float(np.atleast_1d(f(Hypothesis(seq, math.log(p))))[0])
        total += value
        reachable = all(
            _core(_annealed_row(model, seq[:i], 1.0), truncation)[model.vocab_size if seq[i] == EOS else seq[i]]
            > -math.inf
            for i in range(1, len(seq))
        )
        if not reachable:
            lost += value
            lost_mass += p
    normalized = (total - lost) / (math.fsum(table.probs) - lost_mass) - total
    return TruncationShift(removed, lost_mass, -lost, normalized if lost_mass else 0.0)


def exact_cp_distribution(w, K: int, budget: int = DEFAULT_SUBSET_BUDGET) -> dict[tuple[int, ...], float]:
    """Brute-force CP masses of every size-K subset (0-based sorted index tuples)."""
    w = [float(x) for x in w]
    if math.comb(len(w), K) > budget:
        raise BudgetExceededError(f"C({len(w)}, {K}) subsets exceed the oracle budget of {budget}")
    masses = {s: math.prod(w[i] for i in s) for s in itertools.combinations(range(len(w)), K)}
    z = math.fsum(masses.values())
    return {s: m / z for s, m in masses.items()}


def exact_cp_marginals(w, K: int, budget: int = DEFAULT_SUBSET_BUDGET) -> np.ndarray:
    pi = np.zeros(len(w))
    for s, p in exact_cp_distribution(w, K, budget).items():
        pi[list(s)] += p
    return pi


def brute_force_normalizer(w, K: int, budget: int = DEFAULT_SUBSET_BUDGET) -> float:
    w = [float(x) for x in w]
    if math.comb(len(w), K) > budget:
        raise BudgetExceededError(f"C({len(w)}, {K}) subsets exceed the oracle budget of {budget}")
    return math.fsum(math.prod(w[i] for i in s) for s in itertools.combinations(range(len(w)), K))


class _BeamEnumerator:
    """Shared machinery for trajectory enumeration with memoization on the beam."""

    def __init__(self, model, K, tau, truncation, budget):
        self.model = model
        self.K = K
        self.tau = tau
        self.truncation = truncation
        self.budget = budget
        self.visited = 0

    def candidates(self, beam) -> list[tuple[tuple[int, ...], float]]:
        """(tokens, design log-probability) for every candidate of a beam."""
        out = []
        for tokens, lp in beam:
            if tokens[-1] == EOS:
                out.append((tokens, lp))
                continue
            row = _annealed_row(self.model, tokens, self.tau)
            if self.truncation < 1.0:
                raw = _core(_annealed_row(self.model, tokens, 1.0), self.truncation)
                row = [q if r > -math.inf else -math.inf for q, r in zip(row, raw)]
            for col, q in enumerate(row):
                if q > -math.inf:
                    out.append((tokens + (_symbol(self.model, col),), lp + q))
        return out

    def subsets(self, cands):
        """Yield (subset indices, CP probability) for the step's design."""
        k = min(self.K, len(cands))
        log_w = [_log_odds(lp) for _, lp in cands]
        self.visited += math.comb(len(cands), k)
        if self.visited > self.budget:
            raise BudgetExceededError(
                f"beam enumeration exceeded the trajectory budget of {self.budget}"
            )
        combos = list(itertools.combinations(range(len(cands)), k))
        logs = [math.fsum(log_w[i] for i in s) for s in combos]
        top = max(logs)
        masses = [math.exp(x - top) for x in logs]
        z = math.fsum(masses)
        for s, m in zip(combos, masses):
            if m > 0.0:
                yield s, m / z


def _key(beam) -> tuple:
    return tuple(sorted(tokens for tokens, _ in beam))


def exact_beam_distribution(
    model: ToyModel,
    K: int,
    tau: float = 1.0,
    truncation: float = 1.0,
    budget: int = DEFAULT_TRAJECTORY_BUDGET,
) -> BeamDistribution:
    """Exact ``P(Y_T)`` by summing over every compatible sequence of beams."""
    enum = _BeamEnumerator(model, K, tau, truncation, budget)

    @lru_cache(maxsize=None)
    def final(beam: tuple) -> tuple:
        if all(tokens[-1] == EOS for tokens, _ in beam):
            return ((_key(beam), 1.0),)
        cands = enum.candidates(beam)
        acc: dict = {}
        for subset, q in enum.subsets(cands):
            nxt = tuple(sorted(cands[i] for i in subset))
            for fin, r in final(nxt):
                acc[fin] = acc.get(fin, 0.0) + q * r
        return tuple(acc.items())

    return BeamDistribution(dict(final((((BOS,), 0.0),))))


@dataclass(frozen=True)
class HindsightMoments:
    """Exact moments of one hindsight draw ``prod_t pi_Q`` for a target sequence."""

    mean: float
    second_moment: float
    max_product: float

    @property
    def variance(self) -> float:
        return max(self.second_moment - self.mean**2, 0.0)

    def ratio_bound(self, pi_p: float) -> float:
        """Largest ``prod_t pi_Q / pi_P`` over all hindsight trajectories."""
        return self.max_product / pi_p


def exact_hindsight_moments(
    model: ToyModel,
    K: int,
    target,
    tau: float = 1.0,
    truncation: float = 1.0,
    budget: int = DEFAULT_TRAJECTORY_BUDGET,
) -> HindsightMoments:
    """Enumerate the hindsight proposal exactly.

    At each step the proposal is the CP design restricted to subsets that
    contain the target's prefix, renormalized by that prefix's inclusion
    probability.  Returns the first two moments and the maximum of the
    product of those inclusion probabilities.
    """
    y = target.tokens if isinstance(target, Hypothesis) else tuple(target)
    enum = _BeamEnumerator(model, K, tau, truncation, budget)

    def visit(beam, t: int) -> tuple[float, float, float]:
        if all(tokens[-1] == EOS for tokens, _ in beam):
            return 1.0, 1.0, 1.0
        cands = enum.candidates(beam)
        prefix = y[: t + 2]
        idx = [i for i, (tokens, _) in enumerate(cands) if tokens == prefix]
        if not idx:
            raise ZeroInclusionError(f"prefix {prefix} has zero probability")
        f = idx[0]
        options = [(s, q) for s, q in enum.subsets(cands) if f in s]
        pi = math.fsum(q for _, q in options)
        m1 = m2 = 0.0
        mx = 0.0
        for s, q in options:
            a, b, c = visit(tuple(cands[i] for i in s), t + 1)
            m1 += q * a
            m2 += q * pi * b
            mx = max(mx, pi * c)
        return m1, m2, mx

    m1, m2, mx = visit((((BOS,), 0.0),), 0)
    return HindsightMoments(m1, m2, mx)
