"""Locally normalized toy sequence models.

A :class:`ToyModel` is an order-1 Markov table over a vocabulary
``0..V-1`` plus an end symbol.  Row ``s`` of the table is the next-token
distribution after token ``s`` (row ``V`` is the start state), and column
``V`` holds the end-of-sequence probability.  Once a sequence body reaches
``t_max`` tokens the only continuation is EOS, so the distribution over
complete sequences is finite and sums to one.

Token sequences always start with :data:`BOS`; finished ones end with
:data:`EOS`.  Both are negative ids so they never collide with vocabulary
tokens.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cp_design import NEG_INF
from .errors import ContractError

BOS = -1
EOS = -2

_ROW_TOL = 1e-12
_LOAD_TOL = 1e-9
_CORE_TOL = 1e-12


@dataclass(frozen=True)
class Hypothesis:
    """A token sequence with its cached log-probability.

    Equality and hashing use the tokens only.
    """

    tokens: tuple[int, ...]
    logp: float = field(default=0.0, compare=False)

    @property
    def finished(self) -> bool:
        return len(self.tokens) > 1 and self.tokens[-1] == EOS

    @property
    def body(self) -> tuple[int, ...]:
        end = len(self.tokens) - 1 if self.finished else len(self.tokens)
        return self.tokens[1:end]

    def __len__(self) -> int:
        return len(self.body)


def _tokens(seq) -> tuple[int, ...]:
    if isinstance(seq, Hypothesis):
        return seq.tokens
    return tuple(int(t) for t in seq)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    finite = x[np.isfinite(x)]
    m = finite.max()
    with np.errstate(divide="ignore"):
        return x - (m + np.log(np.exp(x - m).sum()))


class ToyModel:
    """Order-1 Markov next-token table with a hard length bound.

    ``probs`` has shape ``(V + 1, V + 1)``: rows are states (tokens, then the
    start state), columns are next symbols (tokens, then EOS).
    """

    def __init__(self, probs, t_max: int):
        probs = np.array(probs, dtype=float)
        if probs.ndim != 2 or probs.shape[0] != probs.shape[1] or probs.shape[0] < 2:
            raise ContractError(f"probability table must be (V+1, V+1) with V >= 1, got {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ContractError("probability table entries must be finite and nonnegative")
        sums = probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _ROW_TOL):
            raise ContractError(f"rows must sum to 1, got {sums}")
        if int(t_max) < 1:
            raise ContractError(f"t_max must be >= 1, got {t_max}")
        probs.setflags(write=False)
        self._probs = probs
        self.t_max = int(t_max)
        self.vocab_size = probs.shape[0] - 1
        self._rows: dict = {}
        self._cdfs: dict = {}

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def eos_column(self) -> int:
        return self.vocab_size

    def __repr__(self) -> str:
        return f"ToyModel(vocab_size={self.vocab_size}, t_max={self.t_max})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ToyModel)
            and self.t_max == other.t_max
            and np.array_equal(self._probs, other._probs)
        )

    __hash__ = None  # type: ignore[assignment]

    def symbol(self, column: int) -> int:
        return EOS if column == self.vocab_size else column

    def column(self, token: int) -> int:
        if token == EOS:
            return self.vocab_size
        if not 0 <= token < self.vocab_size:
            raise ContractError(f"token {token} is not in the vocabulary")
        return token

    def _state(self, last: int) -> int:
        return self.vocab_size if last == BOS else self.column(last)

    def log_row(self, tokens: Sequence[int], tau: float = 1.0, truncation: float = 1.0) -> tuple[float, ...]:
        """Annealed, optionally core-truncated log next-symbol distribution.

        ``tokens`` is an unfinished prefix starting with BOS.  Rows are cached
        per (state, tau, truncation); the forced-EOS row is returned once the
        body holds ``t_max`` tokens.  Truncation keeps the tokens in the core
        of the untempered row and is applied to the annealed row without
        renormalizing.
        """
        if len(tokens) - 1 >= self.t_max:
            key = ("eos",)
        else:
            key = (self._state(tokens[-1]), tau, truncation)
        row = self._rows.get(key)
        if row is None:
            row = self._build_row(key)
            self._rows[key] = row
        return row

    def _build_row(self, key) -> tuple[float, ...]:
        if key[0] == "eos":
            row = [NEG_INF] * (self.vocab_size + 1)
            row[self.vocab_size] = 0.0
            return tuple(row)
        state, tau, truncation = key
        if not tau > 0:
            raise ContractError(f"temperature must be positive, got {tau}")
        with np.errstate(divide="ignore"):
            logp = np.log(self._probs[state])
        annealed = _log_softmax(logp / tau)
        if truncation < 1.0:
            kept = truncate_core(self._probs[state], truncation) > 0
            annealed = np.where(kept, annealed, NEG_INF)
        return tuple(annealed.tolist())

    def cdf(self, tokens: Sequence[int], tau: float = 1.0) -> list[float]:
        if len(tokens) - 1 >= self.t_max:
            key = ("eos",)
        else:
            key = (self._state(tokens[-1]), tau)
        cdf = self._cdfs.get(key)
        if cdf is None:
            cdf = np.cumsum(np.exp(self.log_row(tokens, tau))).tolist()
            self._cdfs[key] = cdf
        return cdf

    def to_dict(self) -> dict:
        rows = {"BOS": self._probs[self.vocab_size].tolist()}
        for s in range(self.vocab_size):
            rows[str(s)] = self._probs[s].tolist()
        return {"vocab_size": self.vocab_size, "t_max": self.t_max, "rows": rows}

    @classmethod
    def from_dict(cls, data: dict) -> "ToyModel":
        try:
            V = int(data["vocab_size"])
            t_max = int(data["t_max"])
            rows = data["rows"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed model document: {exc}") from exc
        if V < 1:
            raise ContractError("vocab_size must be positive")
        table = np.zeros((V + 1, V + 1))
        for s in range(V + 1):
            name = "BOS" if s == V else str(s)
            if name not in rows:
                raise ContractError(f"model document is missing row {name!r}")
            row = np.asarray(rows[name], dtype=float)
            if row.shape != (V + 1,):
                raise ContractError(f"row {name!r} must have {V + 1} entries (tokens then EOS)")
            if np.any(row < 0) or abs(row.sum() - 1.0) > _LOAD_TOL:
                raise ContractError(f"row {name!r} is not a probability vector (sum={row.sum()})")
            table[s] = row / row.sum()
        extra = set(rows) - {"BOS"} - {str(s) for s in range(V)}
        if extra:
            raise ContractError(f"unknown states in model document: {sorted(extra)}")
        return cls(table, t_max)


def load_model(path) -> ToyModel:
    return ToyModel.from_dict(json.loads(Path(path).read_text()))


def save_model(model: ToyModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2))


def _check_prefix(model: ToyModel, tokens: tuple[int, ...]) -> None:
    if not tokens or tokens[0] != BOS:
        raise ContractError("sequences must start with BOS")
    if len(tokens) > 1 and tokens[-1] == EOS:
        raise ContractError("prefix is already finished")
    if len(tokens) - 1 > model.t_max:
        raise ContractError(f"prefix body exceeds t_max={model.t_max}")
    for t in tokens[1:]:
        model.column(t)


def next_distribution(model: ToyModel, prefix, tau: float = 1.0) -> np.ndarray:
    """``p(. | prefix)`` over tokens then EOS, annealed by ``1/tau`` and renormalized."""
    tokens = _tokens(prefix)
    _check_prefix(model, tokens)
    return np.exp(np.asarray(model.log_row(tokens, tau)))


def truncate_core(dist, mass: float) -> np.ndarray:
    """Zero out everything outside the smallest top-probability core of ``mass``.

    Tokens are ranked by descending probability (stable on ties) and the
    shortest prefix whose cumulative probability reaches ``mass`` is kept.
    Kept entries keep their raw values.
    """
    p = np.asarray(dist, dtype=float)
    if not 0 < mass <= 1:
        raise ContractError(f"core mass must lie in (0, 1], got {mass}")
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    n_keep = int(np.searchsorted(cum, mass - _CORE_TOL)) + 1
    n_keep = min(max(n_keep, 1), len(p))
    out = np.zeros_like(p)
    keep = order[:n_keep]
    out[keep] = p[keep]
    return out


def sequence_logprob(model: ToyModel, tokens, tau: float = 1.0) -> float:
    """Sum of annealed conditional log-probabilities of a complete sequence."""
    tokens = _tokens(tokens)
    if len(tokens) < 2 or tokens[0] != BOS or tokens[-1] != EOS:
        raise ContractError("a complete sequence must be BOS ... EOS")
    if len(tokens) - 2 > model.t_max:
        raise ContractError(f"sequence body exceeds t_max={model.t_max}")
    total = 0.0
    for t in range(1, len(tokens)):
        tok = tokens[t]
        if tok == EOS and t != len(tokens) - 1:
            raise ContractError("EOS may only appear at the end")
        total += model.log_row(tokens[:t], tau)[model.column(tok)]
    return total


def ancestral_sample(model: ToyModel, tau: float, rng: np.random.Generator) -> Hypothesis:
    """One i.i.d. draw from the annealed model, with its annealed log-probability."""
    tokens: tuple[int, ...] = (BOS,)
    logp = 0.0
    while True:
        cdf = model.cdf(tokens, tau)
        col = min(bisect.bisect_right(cdf, rng.random() * cdf[-1]), len(cdf) - 1)
        logp += model.log_row(tokens, tau)[col]
        tokens = tokens + (model.symbol(col),)
        if col == model.eos_column:
            return Hypothesis(tokens, logp)


def sample_excluding(
    model: ToyModel, tau: float, exclude: Iterable, rng: np.random.Generator
) -> Hypothesis:
    """Draw from the annealed model restricted to sequences outside ``exclude``.

    Exact: walks the prefix tree choosing each child in proportion to the
    probability mass below it that is not excluded.
    """
    blocked: dict[tuple[int, ...], float] = {}
    for seq in exclude:
        toks = _tokens(seq)
        p = math.exp(sequence_logprob(model, toks, tau))
        for end in range(1, len(toks) + 1):
            blocked[toks[:end]] = blocked.get(toks[:end], 0.0) + p
    tokens: tuple[int, ...] = (BOS,)
    logp = 0.0
    while True:
        row = model.log_row(tokens, tau)
        base = math.exp(logp)
        free = []
        for col, lp in enumerate(row):
            child = tokens + (model.symbol(col),)
            free.append(max(base * math.exp(lp) - blocked.get(child, 0.0), 0.0))
        total = sum(free)
        if total <= 0.0:
            raise ContractError("every continuation of the model is excluded")
        u = rng.random() * total
        col = min(bisect.bisect_right(np.cumsum(free).tolist(), u), len(free) - 1)
        while free[col] == 0.0:
            col -= 1
        logp += row[col]
        tokens = tokens + (model.symbol(col),)
        if col == model.eos_column:
            return Hypothesis(tokens, logp)


def random_model(seed: int, vocab_size: int, t_max: int, concentration: float = 1.0) -> ToyModel:
    """Toy model with rows drawn from a symmetric Dirichlet(concentration).

    Gamma variates are drawn in log space (``Gamma(a) = Gamma(a+1) U^(1/a)``)
    so very small concentrations give near point masses instead of NaNs.
    """
    if vocab_size < 1 or t_max < 1 or not concentration > 0:
        raise ContractError("vocab_size, t_max and concentration must be positive")
    rng = np.random.default_rng(seed)
    shape = (vocab_size + 1, vocab_size + 1)
    log_g = np.log(rng.gamma(concentration + 1.0, size=shape)) + np.log(rng.random(shape)) / concentration
    log_g -= log_g.max(axis=1, keepdims=True)
    probs = np.exp(log_g)
    probs /= probs.sum(axis=1, keepdims=True)
    return ToyModel(probs, t_max)
