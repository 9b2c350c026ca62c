"""Conditional Poisson (CP) sampling design over a weighted finite base set.

A CP design of size ``K`` over items ``0..N-1`` with weights ``w`` puts mass
``prod(w[Y]) / Z`` on every subset ``Y`` of size exactly ``K``.  ``Z`` is the
``K``-th elementary symmetric polynomial of the weights and is computed by a
weighted Pascal-triangle recurrence.

Everything is evaluated in log space.  Weights built from products of
annealed sequence probabilities routinely span thousands of nats, which no
amount of linear rescaling can represent.  Every public function therefore
accepts ``log=True`` to signal that the vector passed in already holds log
weights (``-inf`` for a zero weight).

Indices are 0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateDesignError,
    DesignError,
    ImpossibleConditioningError,
    SizeError,
)

NEG_INF = -math.inf
ODDS_EPS = 1e-9
_LOG_ONE_MINUS_EPS = math.log1p(-ODDS_EPS)


def logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


def log1mexp(x: float) -> float:
    """``log(1 - exp(x))`` for ``x <= 0``, accurate on both ends."""
    if x > -0.6931471805599453:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def _as_log_weights(w, log: bool) -> list[float]:
    arr = np.asarray(w, dtype=float)
    if arr.ndim != 1:
        raise DesignError(f"weights must be a 1-d vector, got shape {arr.shape}")
    if log:
        if np.any(np.isnan(arr)) or np.any(arr == np.inf):
            raise DesignError("log weights must be finite or -inf")
        return arr.tolist()
    if not np.all(np.isfinite(arr)):
        raise DesignError("weights must be finite")
    if np.any(arr < 0):
        raise DesignError("weights must be nonnegative")
    with np.errstate(divide="ignore"):
        return np.log(arr).tolist()


def _esp_rows(lw: Sequence[float], K: int) -> list[list[float]]:
    """Log elementary symmetric polynomials ``log W[n][k]`` for n <= N, k <= K."""
    row = [0.0] + [NEG_INF] * K
    rows = [row]
    for x in lw:
        prev = row
        row = [0.0]
        for k in range(1, K + 1):
            a = prev[k]
            b = x + prev[k - 1]
            if a < b:
                a, b = b, a
            row.append(a if b == NEG_INF else a + math.log1p(math.exp(b - a)))
        rows.append(row)
    return rows


def _draw(lw: Sequence[float], rows: list[list[float]], K: int, uniforms: Sequence[float]) -> list[int]:
    """Sequential CP draw visiting items N-1 down to 0, one uniform per visit."""
    chosen = []
    k = K
    i = 0
    for n in range(len(lw), 0, -1):
        if k == 0:
            break
        log_p = lw[n - 1] + rows[n - 1][k - 1] - rows[n][k]
        if uniforms[i] < math.exp(log_p):
            chosen.append(n - 1)
            k -= 1
        i += 1
    chosen.reverse()
    return chosen


def _log_grad(lw: Sequence[float], rows: list[list[float]], K: int) -> list[float]:
    """Reverse-mode adjoint of the recurrence: ``log dZ/dw_n`` for every n."""
    N = len(lw)
    adj = [NEG_INF] * (K + 1)
    adj[K] = 0.0
    grad = [NEG_INF] * N
    for n in range(N, 0, -1):
        prev = rows[n - 1]
        x = lw[n - 1]
        nxt = [NEG_INF] * (K + 1)
        g = NEG_INF
        for k in range(K, 0, -1):
            a = adj[k]
            if a == NEG_INF:
                continue
            g = logaddexp(g, a + prev[k - 1])
            nxt[k - 1] = logaddexp(nxt[k - 1], a + x)
            nxt[k] = logaddexp(nxt[k], a)
        grad[n - 1] = g
        adj = nxt
    return grad


def _log_inclusion(lw: Sequence[float], rows: list[list[float]], K: int) -> list[float]:
    log_z = rows[-1][K]
    return [min(x + g - log_z, 0.0) for x, g in zip(lw, _log_grad(lw, rows, K))]


@dataclass(frozen=True)
class SymmetricPolyTable:
    """Elementary symmetric polynomial table of rescaled weights.

    ``log_W[n, k]`` is the log of ``W[n][k]`` computed from the weights
    divided by ``exp(scale)`` (the largest weight), so the true value of
    ``W[n][k]`` is ``exp(log_W[n, k] + k * scale)``.
    """

    log_W: np.ndarray
    scale: float
    log_w: np.ndarray
    _rows: list = field(repr=False, compare=False)
    _lw: list = field(repr=False, compare=False)

    @property
    def N(self) -> int:
        return self.log_W.shape[0] - 1

    @property
    def K(self) -> int:
        return self.log_W.shape[1] - 1

    @property
    def W(self) -> np.ndarray:
        """The rescaled table in linear space."""
        return np.exp(self.log_W)

    @property
    def weights(self) -> np.ndarray:
        """The rescaled weights the table was built from."""
        return np.exp(self.log_w)

    @property
    def log_normalizer(self) -> float:
        return float(self.log_W[-1, -1]) + self.K * self.scale

    @property
    def normalizing_constant(self) -> float:
        return math.exp(self.log_normalizer)

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        """Draw one size-K subset (sorted indices)."""
        lw = self._lw
        return tuple(_draw(lw, self._rows, self.K, rng.random(len(lw)).tolist()))

    def inclusion_probabilities(self) -> np.ndarray:
        return np.exp(_log_inclusion(self._lw, self._rows, self.K))

    def normalizer_gradient(self) -> np.ndarray:
        """``dZ/dw_n`` with respect to the original (unscaled) weights."""
        g = np.asarray(_log_grad(self._lw, self._rows, self.K))
        return np.exp(g + (self.K - 1) * self.scale)

    def log_mass(self, subset: Iterable[int]) -> float:
        idx = set(int(i) for i in subset)
        if len(idx) != self.K or any(i < 0 or i >= self.N for i in idx):
            return NEG_INF
        return sum(self._lw[i] for i in idx) - self._rows[-1][self.K]


def build_table(w, K: int, *, log: bool = False) -> SymmetricPolyTable:
    """Build the CP normalizer table for weights ``w`` and subset size ``K``.

    Runs in O(NK).  Raises :class:`SizeError` if ``K`` is not in ``[0, N]``
    and :class:`DegenerateDesignError` when fewer than ``K`` weights are
    positive (so ``Z == 0``).
    """
    lw = _as_log_weights(w, log)
    N = len(lw)
    if K < 0 or K > N:
        raise SizeError(f"subset size K={K} is outside [0, N={N}]")
    finite = [x for x in lw if x != NEG_INF]
    scale = max(finite) if finite else 0.0
    lw = [x - scale for x in lw]
    rows = _esp_rows(lw, K)
    if rows[-1][K] == NEG_INF:
        raise DegenerateDesignError(
            f"only {len(finite)} positive weights; cannot form a set of size {K}"
        )
    return SymmetricPolyTable(
        log_W=np.array(rows), scale=scale, log_w=np.array(lw), _rows=rows, _lw=lw
    )


def normalizing_constant(w, K: int, *, log: bool = False) -> float:
    return build_table(w, K, log=log).normalizing_constant


def cp_sample(w, K: int, rng: np.random.Generator, *, log: bool = False) -> tuple[int, ...]:
    """Draw a size-``K`` subset with probability proportional to its weight product."""
    return build_table(w, K, log=log).sample(rng)


def cp_sample_forced(
    w, K: int, forced: int, rng: np.random.Generator, *, log: bool = False
) -> tuple[int, ...]:
    """Draw from the CP design conditioned on ``forced`` being in the set.

    Conditioning on membership of one item leaves a CP design of size K-1
    over the remaining items, so the forced item is added deterministically
    and the rest is drawn as usual.
    """
    lw = _as_log_weights(w, log)
    N = len(lw)
    if K < 1 or K > N:
        raise SizeError(f"subset size K={K} is outside [1, N={N}]")
    if not 0 <= forced < N:
        raise DesignError(f"forced index {forced} out of range for N={N}")
    if lw[forced] == NEG_INF:
        raise ImpossibleConditioningError(f"item {forced} has zero weight")
    others = [i for i in range(N) if i != forced]
    table = build_table([lw[i] for i in others], K - 1, log=True)
    rest = table.sample(rng)
    return tuple(sorted([forced] + [others[i] for i in rest]))


def inclusion_probabilities(w, K: int, *, log: bool = False) -> np.ndarray:
    """Exact inclusion probabilities ``pi_n = (w_n / Z) dZ/dw_n``.

    The gradient comes from a hand-written reverse sweep over the same
    recurrence that builds ``Z``, so the whole vector costs O(NK).
    """
    return build_table(w, K, log=log).inclusion_probabilities()


def normalizer_gradient(w, K: int, *, log: bool = False) -> np.ndarray:
    return build_table(w, K, log=log).normalizer_gradient()


def cp_mass(w, K: int, subset: Iterable[int], *, log: bool = False) -> float:
    """Probability of ``subset`` under the size-``K`` design (0 if ``|subset| != K``)."""
    return math.exp(build_table(w, K, log=log).log_mass(subset))


def anneal_weights(w, tau: float, *, log: bool = False) -> np.ndarray:
    """Raise weights to the power ``1/tau`` (divide log weights by ``tau``).

    As ``tau -> 0`` the design concentrates on the top-K set.  Small ``tau``
    overflows in linear space; pass log weights with ``log=True`` there.
    """
    if not tau > 0:
        raise DesignError(f"temperature must be positive, got {tau}")
    arr = np.asarray(w, dtype=float)
    if log:
        return arr / tau
    with np.errstate(over="ignore"):
        return np.power(arr, 1.0 / tau)


def odds_weights(p, *, log: bool = False) -> np.ndarray:
    """Odds transform ``p / (1 - p)`` with ``p`` clamped to at most ``1 - 1e-9``.

    With ``log=True`` both input and output are in log space.
    """
    arr = np.asarray(p, dtype=float)
    if log:
        return np.vectorize(log_odds, otypes=[float])(arr)
    if np.any(arr < 0) or np.any(arr > 1):
        raise DesignError("probabilities must lie in [0, 1]")
    return np.minimum(arr, 1.0 - ODDS_EPS) / np.maximum(1.0 - arr, ODDS_EPS)


def log_odds(log_p: float) -> float:
    """Scalar log-space odds transform used on decoding hot paths."""
    if log_p == NEG_INF:
        return NEG_INF
    if log_p > _LOG_ONE_MINUS_EPS:
        log_p = _LOG_ONE_MINUS_EPS
    return log_p - log1mexp(log_p)
