"""Beam-structured decoders over a :class:`~cpsbs.seq_model.ToyModel`.

All decoders share one step structure: the candidate set at step ``t`` is
every positive-probability one-token extension of the unfinished beam items
plus the finished items carried as they are.  They differ in how the next
beam is chosen from it:

* :func:`beam_search` keeps the K most probable candidates;
* :func:`cpsbs` draws K of them from a conditional Poisson design with odds
  weights ``p / (1 - p)`` of the candidates' prefix probabilities;
* :func:`hindsight_cpsbs` does the same while forcing a target's prefix into
  every beam, accumulating the per-step inclusion probabilities;
* :func:`sbs` propagates truncated Gumbels down the prefix tree;
* :func:`diverse_beam_search` runs penalized groups of beam search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .cp_design import NEG_INF, _draw, _esp_rows, log1mexp, log_odds
from .errors import ContractError, DesignError, ZeroInclusionError
from .seq_model import BOS, EOS, Hypothesis, ToyModel

# (tokens, model log-prob, design log-prob); the design log-prob differs from
# the model one only under core truncation.
_Node = tuple


@dataclass(frozen=True)
class Beam:
    items: tuple[Hypothesis, ...]
    step: int

    def __iter__(self) -> Iterator[Hypothesis]:
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def token_set(self) -> frozenset:
        return frozenset(h.tokens for h in self.items)


@dataclass(frozen=True)
class TrajectoryStep:
    """One CPSBS step: the candidate set, its log weights and the chosen indices."""

    candidates: tuple[Hypothesis, ...]
    log_weights: tuple[float, ...]
    k: int
    selected: tuple[int, ...]

    @property
    def beam(self) -> tuple[Hypothesis, ...]:
        return tuple(self.candidates[i] for i in self.selected)


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajectoryStep, ...]

    @property
    def beams(self) -> list[tuple[Hypothesis, ...]]:
        return [s.beam for s in self.steps]


@dataclass(frozen=True)
class GumbelStats:
    """Perturbed log-probabilities of the returned items and the threshold ``kappa``.

    ``kappa`` is the largest perturbed value among everything pruned, i.e. the
    (K+1)-th largest over all complete sequences; ``-inf`` if nothing was pruned.
    """

    gumbels: tuple[float, ...]
    kappa: float


def _root() -> list[_Node]:
    return [((BOS,), 0.0, 0.0)]


def _expand(model: ToyModel, beam: list[_Node], tau: float, truncation: float) -> list[_Node]:
    cands = []
    for node in beam:
        tokens, lp, dlp = node
        if tokens[-1] == EOS:
            cands.append(node)
            continue
        full = model.log_row(tokens, tau)
        design = full if truncation >= 1.0 else model.log_row(tokens, tau, truncation)
        for col, dl in enumerate(design):
            if dl == NEG_INF:
                continue
            cands.append((tokens + (model.symbol(col),), lp + full[col], dlp + dl))
    return cands


def _done(beam: list[_Node]) -> bool:
    return all(node[0][-1] == EOS for node in beam)


def _check_k(K: int) -> None:
    if K < 1:
        raise DesignError(f"beam size must be >= 1, got {K}")


def _hyps(nodes) -> tuple[Hypothesis, ...]:
    return tuple(Hypothesis(n[0], n[1]) for n in nodes)


def candidate_weights(cands: list[_Node], weight_tau: float = 1.0) -> list[float]:
    """Log odds weights of candidates, optionally annealed by ``1/weight_tau``."""
    lw = [log_odds(n[2]) for n in cands]
    if weight_tau != 1.0:
        lw = [x / weight_tau for x in lw]
    return lw


def _top_k(nodes: list[_Node], K: int, score=None) -> list[_Node]:
    if score is None:
        key = lambda n: (-n[1], n[0])  # noqa: E731
    else:
        key = lambda n: (-score[n[0]], n[0])  # noqa: E731
    return sorted(nodes, key=key)[:K]


def beam_search(model: ToyModel, K: int, tau: float = 1.0) -> Beam:
    """Deterministic beam search under the annealed model.

    Keeps the K candidates of highest prefix probability at each step; ties go
    to the lexicographically smaller token tuple.  ``K = 1`` is greedy decoding.
    """
    _check_k(K)
    beam = _root()
    t = 0
    while not _done(beam):
        t += 1
        beam = _top_k(_expand(model, beam, tau, 1.0), K)
    return Beam(_hyps(beam), t)


def _run_cpsbs(model, K, tau, truncation, rng, weight_tau, record):
    beam = _root()
    steps = []
    t = 0
    while not _done(beam):
        t += 1
        cands = _expand(model, beam, tau, truncation)
        N = len(cands)
        k = min(K, N)
        lw = candidate_weights(cands, weight_tau)
        if k == N:
            selected = list(range(N))
        else:
            rows = _esp_rows(lw, k)
            if rows[-1][k] == NEG_INF:
                raise ZeroInclusionError("fewer than K candidates have positive weight")
            selected = _draw(lw, rows, k, rng.random(N).tolist())
        beam = [cands[i] for i in selected]
        if record:
            steps.append(TrajectoryStep(_hyps(cands), tuple(lw), k, tuple(selected)))
    return beam, t, steps


def cpsbs(
    model: ToyModel,
    K: int,
    tau: float = 1.0,
    truncation: float = 1.0,
    rng: np.random.Generator | None = None,
    *,
    weight_tau: float = 1.0,
) -> tuple[Beam, Trajectory]:
    """Conditional Poisson stochastic beam search.

    At every step a size ``min(K, N)`` subset of the N candidates is drawn from
    the CP design with weights ``odds(p_tau(prefix))``, where ``p_tau`` is the
    per-step annealed model, optionally restricted to its core ``truncation``
    mass.  ``weight_tau`` additionally anneals the odds weights themselves.
    Returns the final beam and the full trajectory.
    """
    _check_k(K)
    rng = np.random.default_rng() if rng is None else rng
    beam, t, steps = _run_cpsbs(model, K, tau, truncation, rng, weight_tau, True)
    return Beam(_hyps(beam), t), Trajectory(tuple(steps))


def cpsbs_tokens(model, K, tau, truncation, rng, weight_tau: float = 1.0) -> list[_Node]:
    """Final-beam nodes only; the allocation-light path used by the estimators."""
    return _run_cpsbs(model, K, tau, truncation, rng, weight_tau, False)[0]


def hindsight_log_inclusion(
    model: ToyModel,
    K: int,
    tau: float,
    truncation: float,
    target,
    rng: np.random.Generator,
    *,
    weight_tau: float = 1.0,
) -> float:
    """Log of one hindsight draw: ``sum_t log pi_Q(y_<=t | Y_{t-1})``.

    The beams are drawn from the CP design conditioned on containing the
    target's prefix: the prefix is added deterministically and the remaining
    ``k - 1`` slots are a CP draw over the other candidates.  The prefix's
    own inclusion probability comes out of the same table:
    ``pi = w_f e_{k-1}(others) / (e_k(others) + w_f e_{k-1}(others))``.
    """
    _check_k(K)
    y = target.tokens if isinstance(target, Hypothesis) else tuple(target)
    if len(y) < 2 or y[0] != BOS or y[-1] != EOS:
        raise ContractError("hindsight target must be a complete BOS ... EOS sequence")
    beam = _root()
    total = 0.0
    t = 0
    while not _done(beam):
        t += 1
        prefix = y[: t + 1]
        cands = _expand(model, beam, tau, truncation)
        try:
            f = next(i for i, n in enumerate(cands) if n[0] == prefix)
        except StopIteration:
            raise ZeroInclusionError(
                f"prefix {prefix} has zero probability under the (truncated) model"
            ) from None
        N = len(cands)
        k = min(K, N)
        if k == N:
            beam = cands
            continue
        lw = candidate_weights(cands, weight_tau)
        others = lw[:f] + lw[f + 1 :]
        rows = _esp_rows(others, k)
        last = rows[-1]
        lw_f = lw[f]
        log_num = lw_f + last[k - 1]
        a, b = (last[k], log_num) if last[k] > log_num else (log_num, last[k])
        log_z = a if b == NEG_INF else a + math.log1p(math.exp(b - a))
        if log_num == NEG_INF or log_z == NEG_INF:
            raise ZeroInclusionError(f"prefix {prefix} cannot be included at step {t}")
        total += min(log_num - log_z, 0.0)
        rest = _draw(others, rows, k - 1, rng.random(N - 1).tolist())
        beam = [cands[f]] + [cands[i if i < f else i + 1] for i in rest]
    return total


def hindsight_cpsbs(
    model: ToyModel,
    K: int,
    tau: float,
    truncation: float,
    target,
    rng: np.random.Generator,
    *,
    weight_tau: float = 1.0,
) -> float:
    """Product over steps of the target prefix's inclusion probability along a hindsight trajectory.

    Its expectation is the CPSBS inclusion probability of ``target``.
    Raises :class:`~cpsbs.errors.ZeroInclusionError` when a prefix of the
    target has zero weight at some step (possible under truncation).
    """
    return math.exp(
        hindsight_log_inclusion(model, K, tau, truncation, target, rng, weight_tau=weight_tau)
    )


def _shift_gumbels(phis: list[float], g_phis: list[float], parent: float) -> list[float]:
    """Condition i.i.d. Gumbels ``g_phis`` on their max being ``parent``."""
    z = max(g_phis)
    out = []
    for g in g_phis:
        if g == z:
            out.append(parent)
            continue
        v = parent - g + log1mexp(g - z)
        out.append(parent - max(v, 0.0) - math.log1p(math.exp(-abs(v))))
    return out


def sbs(model: ToyModel, K: int, tau: float = 1.0, rng: np.random.Generator | None = None) -> tuple[Beam, GumbelStats]:
    """Stochastic beam search: Gumbel-top-K over complete sequences.

    Each prefix carries a Gumbel-perturbed log-probability equal to the
    maximum over the sequences below it; children are sampled by conditioning
    fresh Gumbels on that maximum, and the beam keeps the K largest.
    """
    _check_k(K)
    rng = np.random.default_rng() if rng is None else rng
    # (tokens, logp, perturbed)
    beam: list[tuple] = [((BOS,), 0.0, 0.0)]
    kappa = NEG_INF
    t = 0
    while not all(n[0][-1] == EOS for n in beam):
        t += 1
        cands = []
        for tokens, lp, g in beam:
            if tokens[-1] == EOS:
                cands.append((tokens, lp, g))
                continue
            row = model.log_row(tokens, tau)
            kids = [(col, lp + x) for col, x in enumerate(row) if x != NEG_INF]
            phis = [phi for _, phi in kids]
            noisy = (np.asarray(phis) + rng.gumbel(size=len(phis))).tolist()
            for (col, phi), gk in zip(kids, _shift_gumbels(phis, noisy, g)):
                cands.append((tokens + (model.symbol(col),), phi, gk))
        cands.sort(key=lambda n: -n[2])
        if len(cands) > K:
            kappa = max(kappa, cands[K][2])
        beam = cands[:K]
    items = tuple(Hypothesis(n[0], n[1]) for n in beam)
    return Beam(items, t), GumbelStats(tuple(n[2] for n in beam), kappa)


def diverse_beam_search(
    model: ToyModel, K: int, strength: float, groups: int, tau: float = 1.0
) -> Beam:
    """Diverse beam search with a Hamming penalty at the current position.

    The beam is split into ``groups`` groups of ``K // groups`` items, decoded
    in lockstep.  At each step group ``g`` scores its candidates by their
    running score minus ``strength`` times the number of earlier groups'
    selections at this step that emitted the same token; the penalty
    accumulates into the group's running score.  A group may not select a
    sequence already chosen by an earlier group at the same step.
    """
    _check_k(K)
    if groups < 1 or K % groups:
        raise DesignError(f"beam size {K} is not divisible into {groups} groups")
    width = K // groups
    # per group: list of (tokens, logp, design logp) and running scores
    beams = [_root() for _ in range(groups)]
    scores = [{(BOS,): 0.0} for _ in range(groups)]
    t = 0
    while not all(_done(b) for b in beams):
        t += 1
        counts: dict[int, int] = {}
        taken: set = set()
        for g in range(groups):
            cands = []
            running = {}
            for node in beams[g]:
                tokens, lp, _ = node
                base = scores[g][tokens]
                if tokens[-1] == EOS:
                    if tokens not in taken:
                        cands.append(node)
                        running[tokens] = base
                    continue
                row = model.log_row(tokens, tau)
                for col, x in enumerate(row):
                    if x == NEG_INF:
                        continue
                    child = tokens + (model.symbol(col),)
                    if child in taken:
                        continue
                    cands.append((child, lp + x, lp + x))
                    running[child] = base + x - strength * counts.get(child[-1], 0)
            chosen = _top_k(cands, width, running)
            carried = {n[0] for n in beams[g]}
            for node in chosen:
                taken.add(node[0])
                if node[0] not in carried:
                    counts[node[0][-1]] = counts.get(node[0][-1], 0) + 1
            beams[g] = chosen
            scores[g] = {n[0]: running[n[0]] for n in chosen}
    items = [n for b in beams for n in b]
    return Beam(_hyps(items), t)
