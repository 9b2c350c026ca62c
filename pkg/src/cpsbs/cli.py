"""Command-line experiment harness.

Subcommands
-----------
estimate   estimator replicates over a (method, K, tau) grid, with RMSE per cell
diversity  min/mean/max BLEU and n-gram diversity over the tau/strength grid
timing     wall-clock per decode call (first three calls discarded)
verify     run the acceptance suite and emit a JSON report
sample     one-shot decode dump

Settings come from an optional TOML file (``--config``) and are overridden
by flags.  Every (cell, replicate) pair draws from its own stream,
``SeedSequence([master, cell, replicate])``, so output is reproducible and
independent of evaluation order.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .decoders import beam_search, cpsbs_tokens, diverse_beam_search, sbs
from .errors import BudgetExceededError, CPSBSError, ConfigError
from .estimators import (
    EstimateReport,
    cpsbs_ht_pipeline,
    mc_estimate,
    mc_sample_estimate,
    sas_estimate,
    sbs_estimate,
)
from .metrics import bleu_estimand, neg_logprob, ngram_diversity, sentence_bleu
from .oracle import enumerate_support, exact_expectation
from .seq_model import Hypothesis, ToyModel, ancestral_sample, load_model, random_model, sample_excluding

METHODS = ("mc", "sas", "sbs", "cpsbs", "beam", "diversebs")
ZERO_POLICIES = ("fail", "drop")
DIVERSITY_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
WARMUP_CALLS = 3
BASELINE_STREAM = 2**32 - 1
BASELINE_RUNS = 50
BASELINE_SAMPLES = 200

ESTIMATE_SCHEMA = "# cpsbs-estimate v1"
SUMMARY_SCHEMA = "# cpsbs-rmse v1"
DIVERSITY_SCHEMA = "# cpsbs-diversity v1"
TIMING_SCHEMA = "# cpsbs-timing v1"
SAMPLE_SCHEMA = "# cpsbs-sample v1"


@dataclass
class ExperimentConfig:
    """Everything an experiment run depends on.

    The model is either loaded from ``model`` (a JSON file) or generated by
    :func:`~cpsbs.seq_model.random_model` from the ``vocab``/``t_max``/
    ``concentration``/``model_seed`` fields.
    """

    model: str | None = None
    vocab: int = 3
    t_max: int = 3
    concentration: float = 1.0
    model_seed: int = 0
    methods: list[str] = field(default_factory=lambda: ["mc", "sbs", "cpsbs"])
    k: list[int] = field(default_factory=lambda: list(range(1, 21)))
    tau: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.5])
    replicates: int = 20
    m_incl: int = 1
    truncation: float = 1.0
    normalized: bool = True
    zero_inclusion: str = "fail"
    seed: int = 0
    out: str | None = None
    estimand: str = "bleu:mode"
    reference: list[int] | None = None
    groups: int | None = None
    strength: float = 0.5
    weight_tau: float = 1.0
    baseline_budget: int = 10**5

    def validate(self) -> "ExperimentConfig":
        for name in ("methods", "k", "tau"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be a nonempty list")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if any(int(k) < 1 for k in self.k):
            raise ConfigError("every K must be >= 1")
        if any(not t > 0 for t in self.tau):
            raise ConfigError("every tau must be > 0")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.replicates >= BASELINE_STREAM:
            raise ConfigError("too many replicates")
        if self.m_incl < 1:
            raise ConfigError("m_incl must be >= 1")
        if not 0 < self.truncation <= 1:
            raise ConfigError("truncation mass must lie in (0, 1]")
        if self.zero_inclusion not in ZERO_POLICIES:
            raise ConfigError(f"zero_inclusion must be one of {list(ZERO_POLICIES)}")
        if self.groups is not None and self.groups < 1:
            raise ConfigError("groups must be >= 1")
        if not self.weight_tau > 0:
            raise ConfigError("weight_tau must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        return self


def load_config(path) -> dict:
    """Read a TOML config; keys are the :class:`ExperimentConfig` field names."""
    data = tomllib.loads(Path(path).read_text())
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def make_config(file_values: dict | None = None, **overrides) -> ExperimentConfig:
    """Merge file values with overrides (overrides win; ``None`` means unset)."""
    values = dict(file_values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.methods = [str(m) for m in cfg.methods]
    cfg.k = [int(k) for k in cfg.k]
    cfg.tau = [float(t) for t in cfg.tau]
    return cfg.validate()


def build_model(cfg: ExperimentConfig) -> ToyModel:
    if cfg.model is not None:
        return load_model(cfg.model)
    return random_model(cfg.model_seed, cfg.vocab, cfg.t_max, cfg.concentration)


def cell_rng(master: int, cell: int, replicate: int) -> tuple[np.random.Generator, int]:
    """Independent generator for one (cell, replicate) pair, plus a printable seed."""
    ss = np.random.SeedSequence([master, cell, replicate])
    return np.random.default_rng(ss), int(ss.generate_state(1)[0])


def reference_sequence(model: ToyModel, cfg: ExperimentConfig) -> tuple[int, ...]:
    """The BLEU reference body: configured explicitly, or the model's mode."""
    if cfg.reference is not None:
        return tuple(int(t) for t in cfg.reference)
    if cfg.estimand.startswith("bleu:") and cfg.estimand[5:].strip() not in ("", "mode"):
        return _parse_tokens(cfg.estimand[5:])
    return model_mode(model, cfg.baseline_budget)


def model_mode(model: ToyModel, budget: int = 10**5) -> tuple[int, ...]:
    """Body of the most probable sequence with a nonempty body.

    An empty reference would make BLEU identically zero.  Models too large
    to enumerate fall back to the best nonempty result of a width-10 beam.
    """
    try:
        table = enumerate_support(model, 1.0, budget)
    except BudgetExceededError:
        bodies = [y.body for y in beam_search(model, 10).items if y.body]
        if not bodies:
            raise ConfigError("could not find a nonempty reference; pass one explicitly") from None
        return bodies[0]
    return Hypothesis(table.mode(nonempty=True)).body


def _parse_tokens(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"cannot parse token list {text!r}") from exc


def make_estimand(name: str, model: ToyModel, tau: float, reference) -> Callable:
    """``"neglogp"`` or ``"bleu:<tokens|mode>"``."""
    if name == "neglogp":
        return neg_logprob(model, tau)
    if name.startswith("bleu:"):
        return bleu_estimand(reference)
    raise ConfigError(f"unknown estimand {name!r}; use 'neglogp' or 'bleu:<tokens|mode>'")


def _weighted_set(items, f: Callable, method: str) -> EstimateReport:
    """Probability-weighted average of ``f`` over a deterministic set."""
    items = tuple(items)
    p = np.exp([y.logp for y in items])
    fvals = np.vstack([np.atleast_1d(np.asarray(f(y), dtype=float)) for y in items])
    return EstimateReport(
        estimator=method,
        value=(p @ fvals) / p.sum(),
        items=items,
        p=p,
        pihat=np.full(len(items), np.nan),
        weights=p,
        fvals=fvals,
        sample_size=len(items),
        normalized=True,
    )


def _groups(cfg: ExperimentConfig, K: int) -> int:
    groups = K if cfg.groups is None else cfg.groups
    if K % groups:
        raise ConfigError(f"K={K} is not divisible into {groups} groups")
    return groups


def run_method(
    method: str, model: ToyModel, K: int, tau: float, f: Callable, rng, cfg: ExperimentConfig, seed=None
) -> EstimateReport:
    if method == "mc":
        return mc_sample_estimate(model, K, tau, f, rng, seed)
    if method == "sas":
        return sas_estimate(model, K, tau, f, rng, seed)
    if method == "sbs":
        return sbs_estimate(model, K, tau, f, rng, cfg.normalized, zero_policy=cfg.zero_inclusion, seed=seed)
    if method == "cpsbs":
        return cpsbs_ht_pipeline(
            model, K, tau, cfg.truncation, f, cfg.m_incl, cfg.normalized, rng,
            zero_policy=cfg.zero_inclusion, seed=seed, weight_tau=cfg.weight_tau,
        )
    if method == "beam":
        return _weighted_set(beam_search(model, K, tau).items, f, method)
    if method == "diversebs":
        beam = diverse_beam_search(model, K, cfg.strength, _groups(cfg, K), tau)
        return _weighted_set(beam.items, f, method)
    raise ConfigError(f"unknown method {method!r}")


def _check_methods(cfg: ExperimentConfig) -> None:
    if "sas" in cfg.methods and min(cfg.k) < 2:
        raise ConfigError("sum-and-sample needs every K >= 2")
    if "diversebs" in cfg.methods:
        for K in cfg.k:
            _groups(cfg, K)


def baseline_value(model: ToyModel, f: Callable, tau: float, cfg: ExperimentConfig, cell: int) -> float:
    """Exact expectation when enumerable, else the mean of 50 Monte Carlo runs of 200 samples."""
    try:
        table = enumerate_support(model, tau, cfg.baseline_budget)
    except BudgetExceededError:
        rng, _ = cell_rng(cfg.seed, cell, BASELINE_STREAM)
        runs = [
            mc_estimate([ancestral_sample(model, tau, rng) for _ in range(BASELINE_SAMPLES)], f).scalar
            for _ in range(BASELINE_RUNS)
        ]
        return float(np.mean(runs))
    return float(exact_expectation(table, f)[0])


@dataclass(frozen=True)
class ResultRow:
    method: str
    K: int
    tau: float
    replicate: int
    estimate: float
    n_items: int
    baseline: float
    sq_error: float
    wall_ns: int
    seed: int


def estimate_grid(cfg: ExperimentConfig) -> list[ResultRow]:
    """One row per (method, K, tau, replicate), in that nesting order."""
    _check_methods(cfg)
    model = build_model(cfg)
    ref = reference_sequence(model, cfg)
    rows = []
    baselines: dict[float, float] = {}
    cell = 0
    for method in cfg.methods:
        for K in cfg.k:
            for tau in cfg.tau:
                f = make_estimand(cfg.estimand, model, tau, ref)
                if tau not in baselines:
                    baselines[tau] = baseline_value(model, f, tau, cfg, cfg.tau.index(tau))
                base = baselines[tau]
                for r in range(cfg.replicates):
                    rng, seed = cell_rng(cfg.seed, cell, r)
                    start = time.perf_counter_ns()
                    report = run_method(method, model, K, tau, f, rng, cfg, seed)
                    wall = time.perf_counter_ns() - start
                    est = report.scalar
                    rows.append(ResultRow(method, K, tau, r, est, len(report.items), base, (est - base) ** 2, wall, seed))
                cell += 1
    return rows


def rmse_summary(rows: list[ResultRow]) -> list[dict]:
    cells: dict = {}
    for row in rows:
        cells.setdefault((row.method, row.K, row.tau), []).append(row)
    out = []
    for (method, K, tau), group in cells.items():
        est = np.array([r.estimate for r in group])
        out.append(
            {
                "method": method,
                "K": K,
                "tau": tau,
                "replicates": len(group),
                "mean": float(est.mean()),
                "std": float(est.std(ddof=1)) if len(group) > 1 else 0.0,
                "baseline": group[0].baseline,
                "rmse": math.sqrt(float(np.mean([r.sq_error for r in group]))),
            }
        )
    return out


def _csv(schema: str, header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write(schema + "\n")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def estimate_csv(rows: list[ResultRow]) -> str:
    header = [f.name for f in dataclasses.fields(ResultRow)]
    return _csv(ESTIMATE_SCHEMA, header, (dataclasses.astuple(r) for r in rows))


def summary_csv(summary: list[dict]) -> str:
    header = ["method", "K", "tau", "replicates", "mean", "std", "baseline", "rmse"]
    return _csv(SUMMARY_SCHEMA, header, ([s[h] for h in header] for s in summary))


def run_estimate(cfg: ExperimentConfig) -> tuple[str, str]:
    """Returns (per-replicate CSV, RMSE summary CSV)."""
    rows = estimate_grid(cfg)
    return estimate_csv(rows), summary_csv(rmse_summary(rows))


def decode_set(
    method: str, model: ToyModel, K: int, tau: float, rng, cfg: ExperimentConfig, strength: float | None = None
) -> list[Hypothesis]:
    """A set of K sequences from ``method`` (``strength`` defaults to the configured one)."""
    if method == "mc":
        return [ancestral_sample(model, tau, rng) for _ in range(K)]
    if method == "sas":
        fixed = list(beam_search(model, K - 1, tau).items) if K > 1 else []
        return fixed + [sample_excluding(model, tau, fixed, rng)]
    if method == "sbs":
        return list(sbs(model, K, tau, rng)[0].items)
    if method == "cpsbs":
        nodes = cpsbs_tokens(model, K, tau, cfg.truncation, rng, cfg.weight_tau)
        return [Hypothesis(n[0], n[1]) for n in nodes]
    if method == "beam":
        return list(beam_search(model, K, tau).items)
    if method == "diversebs":
        lam = cfg.strength if strength is None else strength
        return list(diverse_beam_search(model, K, lam, _groups(cfg, K), tau).items)
    raise ConfigError(f"unknown method {method!r}")


def run_diversity(cfg: ExperimentConfig) -> str:
    """BLEU spread and diversity per (method, K, grid value), averaged over replicates.

    The grid value is the temperature for every method except diversebs,
    where it is the penalty strength (decoded at temperature 1).
    """
    model = build_model(cfg)
    ref = reference_sequence(model, cfg)
    header = ["method", "K", "param", "bleu_min", "bleu_mean", "bleu_max", "diversity", "replicates"]
    rows = []
    cell = 0
    for method in cfg.methods:
        for K in cfg.k:
            for value in DIVERSITY_GRID:
                stats = []
                for r in range(cfg.replicates):
                    rng, _ = cell_rng(cfg.seed, cell, r)
                    if method == "diversebs":
                        items = decode_set(method, model, K, 1.0, rng, cfg, strength=value)
                    else:
                        items = decode_set(method, model, K, value, rng, cfg)
                    bleu = [sentence_bleu(y, ref) for y in items]
                    stats.append((min(bleu), float(np.mean(bleu)), max(bleu), ngram_diversity(items)))
                mean = np.mean(stats, axis=0)
                rows.append([method, K, value, *(float(x) for x in mean), cfg.replicates])
                cell += 1
    return _csv(DIVERSITY_SCHEMA, header, rows)


def _render(items) -> str:
    return "|".join(" ".join(str(t) for t in y.body) for y in items)


def run_timing(cfg: ExperimentConfig) -> str:
    """Per-call wall clock for each (method, K, tau); outputs are seeded, timings are not."""
    model = build_model(cfg)
    header = ["method", "K", "tau", "call", "wall_ns", "n_items", "output"]
    rows = []
    cell = 0
    for method in cfg.methods:
        for K in cfg.k:
            for tau in cfg.tau:
                for w in range(WARMUP_CALLS):
                    decode_set(method, model, K, tau, np.random.default_rng(w), cfg)
                for r in range(cfg.replicates):
                    rng, _ = cell_rng(cfg.seed, cell, r)
                    start = time.perf_counter_ns()
                    items = decode_set(method, model, K, tau, rng, cfg)
                    wall = time.perf_counter_ns() - start
                    rows.append([method, K, tau, r, wall, len(items), _render(items)])
                cell += 1
    return _csv(TIMING_SCHEMA, header, rows)


def run_sample(cfg: ExperimentConfig) -> str:
    """Decode once per (method, K, tau) and dump the returned sequences."""
    model = build_model(cfg)
    header = ["method", "K", "tau", "rank", "tokens", "logp"]
    rows = []
    cell = 0
    for method in cfg.methods:
        for K in cfg.k:
            for tau in cfg.tau:
                rng, _ = cell_rng(cfg.seed, cell, 0)
                for i, y in enumerate(decode_set(method, model, K, tau, rng, cfg)):
                    rows.append([method, K, tau, i, " ".join(str(t) for t in y.body), float(y.logp)])
                cell += 1
    return _csv(SAMPLE_SCHEMA, header, rows)


def run_verify(criteria=None, seed: int = 0) -> tuple[bool, dict]:
    from .acceptance import run_all

    results = run_all(criteria, seed=seed)
    report = {
        "passed": all(r.passed for r in results),
        "seed": seed,
        "criteria": [r.as_dict() for r in results],
    }
    return report["passed"], report


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, newline="")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpsbs", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with ExperimentConfig fields")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output path (default stdout)")
    common.add_argument("--method", nargs="+", choices=METHODS, dest="methods")
    common.add_argument("--k", nargs="+", type=int)
    common.add_argument("--tau", nargs="+", type=float)
    common.add_argument("--replicates", type=int)
    common.add_argument("--m-incl", type=int, dest="m_incl")
    common.add_argument("--truncation", type=float)
    common.add_argument("--normalized", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--zero-inclusion", choices=ZERO_POLICIES, dest="zero_inclusion")
    common.add_argument("--model", help="model JSON file")
    common.add_argument("--vocab", type=int)
    common.add_argument("--t-max", type=int, dest="t_max")
    common.add_argument("--concentration", type=float)
    common.add_argument("--model-seed", type=int, dest="model_seed")
    common.add_argument("--estimand", help="'neglogp' or 'bleu:<tokens|mode>'")
    common.add_argument("--reference", nargs="+", type=int, help="BLEU reference body")
    common.add_argument("--groups", type=int, help="diverse beam search groups (default K)")
    common.add_argument("--strength", type=float, help="diverse beam search strength in estimate")
    common.add_argument("--weight-tau", type=float, dest="weight_tau", help="cpsbs: anneal the odds weights")
    common.add_argument("--summary", help="estimate: path for the RMSE summary CSV (default stderr)")
    for name in ("estimate", "diversity", "timing", "sample"):
        sub.add_parser(name, parents=[common])
    verify = sub.add_parser("verify")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--out", help="JSON report path (default stdout)")
    verify.add_argument("--criteria", nargs="+", type=int, help="subset of criterion numbers")
    return parser


_CONFIG_FLAGS = [f.name for f in dataclasses.fields(ExperimentConfig)]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify":
            ok, report = run_verify(args.criteria, args.seed)
            _emit(json.dumps(report, indent=2) + "\n", args.out)
            return 0 if ok else 1
        file_values = load_config(args.config) if args.config else {}
        overrides = {name: getattr(args, name, None) for name in _CONFIG_FLAGS}
        cfg = make_config(file_values, **overrides)
        if args.command == "estimate":
            rows, summary = run_estimate(cfg)
            _emit(rows, cfg.out)
            if args.summary:
                Path(args.summary).write_text(summary, newline="")
            else:
                sys.stderr.write(summary)
        elif args.command == "diversity":
            _emit(run_diversity(cfg), cfg.out)
        elif args.command == "timing":
            _emit(run_timing(cfg), cfg.out)
        else:
            _emit(run_sample(cfg), cfg.out)
    except (CPSBSError, OSError, tomllib.TOMLDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
