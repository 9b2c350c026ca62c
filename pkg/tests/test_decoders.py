import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsbs.cp_design import inclusion_probabilities
from cpsbs.decoders import (
    beam_search,
    candidate_weights,
    cpsbs,
    diverse_beam_search,
    hindsight_cpsbs,
    sbs,
)
from cpsbs.errors import DesignError, ZeroInclusionError
from cpsbs.oracle import enumerate_support, exact_beam_distribution
from cpsbs.seq_model import BOS, EOS, ToyModel, random_model


def chain():
    probs = np.zeros((3, 3))
    probs[2, 0] = 1.0
    probs[0, 1] = 1.0
    probs[1, 2] = 1.0
    return ToyModel(probs, 3)


def single_step(p):
    """t_max = 1 model: first token from ``p`` (tokens then EOS), then forced EOS."""
    V = len(p) - 1
    probs = np.tile(np.asarray(p, dtype=float), (V + 1, 1))
    return ToyModel(probs, 1)


def test_beam_search_greedy_and_deterministic_model():
    model = random_model(5, 3, 3)
    greedy = beam_search(model, 1)
    tokens = (BOS,)
    while tokens[-1] != EOS:
        row = model.log_row(tokens)
        tokens = tokens + (model.symbol(int(np.argmax(row))),)
    assert greedy.items[0].tokens == tokens
    for K in (1, 2, 5):
        assert beam_search(chain(), K).token_set() == {(BOS, 0, 1, EOS)}


def _global_top(model, K):
    table = enumerate_support(model)
    return {s for s, _ in sorted(table.as_dict().items(), key=lambda kv: -kv[1])[:K]}


def test_beam_search_against_global_top_k():
    # seed 4: the greedy set is the global top-2
    model = random_model(4, 3, 3)
    assert beam_search(model, 2).token_set() == _global_top(model, 2)
    # seed 0: two short sequences lose to longer prefixes at step one; flagged
    model = random_model(0, 3, 3)
    assert beam_search(model, 2).token_set() != _global_top(model, 2)
    for seed in range(10):
        model = random_model(seed, 3, 3)
        p = enumerate_support(model).as_dict()
        got = sum(p[s] for s in beam_search(model, 2).token_set())
        assert got <= sum(p[s] for s in _global_top(model, 2)) + 1e-12


def test_beam_search_tie_breaking_is_lexicographic():
    model = single_step([0.4, 0.4, 0.2])
    assert beam_search(model, 1).items[0].tokens == (BOS, 0, EOS)


def test_cpsbs_full_support_when_k_is_large():
    model = random_model(1, 2, 2)
    support = set(enumerate_support(model).sequences)
    rng = np.random.default_rng(0)
    for _ in range(20):
        beam, _ = cpsbs(model, 50, 1.0, 1.0, rng)
        assert beam.token_set() == support


def test_cpsbs_trajectory_structure():
    model = random_model(2, 3, 3)
    rng = np.random.default_rng(1)
    for _ in range(50):
        beam, traj = cpsbs(model, 4, 0.7, 1.0, rng)
        previous = {(BOS,)}
        finished = {}
        for step in traj.steps:
            assert len(set(step.selected)) == len(step.selected) == step.k
            for cand in step.candidates:
                parent = cand.tokens if cand.finished and cand.tokens in previous else cand.tokens[:-1]
                assert parent in previous
            current = {h.tokens for h in step.beam}
            assert len(current) == len(step.beam)
            for h in step.beam:
                if h.finished:
                    assert finished.setdefault(h.tokens, h.logp) == h.logp
            previous = current
        assert beam.token_set() == previous
        assert all(h.finished for h in beam)


def test_cpsbs_step_weights_are_odds_of_prefix_probabilities():
    model = random_model(3, 3, 2)
    _, traj = cpsbs(model, 2, 0.5, 1.0, np.random.default_rng(2))
    for step in traj.steps:
        p = np.exp([h.logp for h in step.candidates])
        odds = np.minimum(p, 1 - 1e-9) / np.maximum(1 - p, 1e-9)
        assert np.allclose(np.exp(step.log_weights), odds, rtol=1e-9)


def test_cpsbs_annealing_limit_matches_beam_search():
    rng = np.random.default_rng(0)
    for seed in range(30):
        model = random_model(seed, 3, 2)
        for K in (1, 2, 3):
            out, _ = cpsbs(model, K, 1e-4, 1.0, rng)
            ref = beam_search(model, K, 1e-4)
            got = sorted(h.logp for h in out)
            want = sorted(h.logp for h in ref)
            assert np.allclose(got, want, rtol=1e-9, atol=1e-9)


def test_cpsbs_final_beam_distribution_matches_oracle():
    model = random_model(0, 2, 2)
    exact = exact_beam_distribution(model, 2).probs
    rng = np.random.default_rng(4)
    runs = 200_000
    counts = Counter(tuple(sorted(cpsbs(model, 2, 1.0, 1.0, rng)[0].token_set())) for _ in range(runs))
    tv = 0.5 * sum(abs(counts.get(b, 0) / runs - p) for b, p in exact.items())
    tv += 0.5 * sum(c / runs for b, c in counts.items() if b not in exact)
    assert tv <= 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.1, 2.0))
def test_decoders_return_distinct_sequences(seed, K, tau):
    model = random_model(seed, 3, 3)
    rng = np.random.default_rng(seed)
    for items in (
        beam_search(model, K, tau).items,
        cpsbs(model, K, tau, 1.0, rng)[0].items,
        sbs(model, K, tau, rng)[0].items,
        diverse_beam_search(model, K, 1.0, K, tau).items,
    ):
        tokens = [h.tokens for h in items]
        assert len(tokens) == len(set(tokens))
        assert len(tokens) <= K


def test_hindsight_single_step_is_exact():
    p = [0.5, 0.3, 0.2]
    model = single_step(p)
    target = (BOS, 1, EOS)
    # the first step chooses 2 of 3 candidates; the second step keeps both
    pi = inclusion_probabilities(np.array(p) / (1 - np.array(p)), 2)[1]
    rng = np.random.default_rng(0)
    values = {hindsight_cpsbs(model, 2, 1.0, 1.0, target, rng) for _ in range(20)}
    assert len(values) == 1
    assert values.pop() == pytest.approx(pi, rel=1e-12)
    assert hindsight_cpsbs(model, 3, 1.0, 1.0, target, rng) == 1.0


def test_hindsight_mean_equals_oracle_inclusion():
    model = random_model(0, 2, 2)
    pi = exact_beam_distribution(model, 2).inclusion_probabilities()
    rng = np.random.default_rng(3)
    target = max(pi, key=lambda y: pi[y] * (1 - pi[y]))
    draws = np.array([hindsight_cpsbs(model, 2, 1.0, 1.0, target, rng) for _ in range(100_000)])
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - pi[target]) <= 3 * se


def test_hindsight_zero_inclusion_under_truncation():
    model = single_step([0.6, 0.395, 0.005])
    with pytest.raises(ZeroInclusionError):
        hindsight_cpsbs(model, 1, 1.0, 0.99, (BOS, EOS), np.random.default_rng(0))


def test_truncation_removes_tail_candidates_from_cpsbs():
    model = single_step([0.6, 0.395, 0.005])
    rng = np.random.default_rng(0)
    for _ in range(200):
        beam, traj = cpsbs(model, 3, 1.0, 0.99, rng)
        assert (BOS, EOS) not in beam.token_set()
        assert len(traj.steps[0].candidates) == 2


def test_weight_annealing_knob():
    model = random_model(6, 3, 2)
    _, traj = cpsbs(model, 2, 1.0, 1.0, np.random.default_rng(0), weight_tau=0.5)
    step = traj.steps[0]
    plain = candidate_weights([(h.tokens, h.logp, h.logp) for h in step.candidates])
    assert np.allclose(step.log_weights, np.array(plain) / 0.5)


def test_sbs_k1_marginal_is_the_model():
    model = random_model(0, 3, 2)
    p = enumerate_support(model).as_dict()
    rng = np.random.default_rng(7)
    draws = 100_000
    counts = Counter(sbs(model, 1, 1.0, rng)[0].items[0].tokens for _ in range(draws))
    tv = 0.5 * sum(abs(counts.get(y, 0) / draws - q) for y, q in p.items())
    assert tv <= 0.01


def test_sbs_edge_cases():
    rng = np.random.default_rng(1)
    beam, stats = sbs(chain(), 3, 1.0, rng)
    assert beam.token_set() == {(BOS, 0, 1, EOS)}
    assert stats.kappa == -math.inf
    model = random_model(1, 2, 2)
    support = set(enumerate_support(model).sequences)
    for _ in range(20):
        beam, stats = sbs(model, 10, 1.0, rng)
        assert beam.token_set() == support


def test_sbs_gumbels_are_sorted_and_exceed_threshold():
    model = random_model(2, 3, 3)
    rng = np.random.default_rng(2)
    for _ in range(200):
        beam, stats = sbs(model, 4, 1.0, rng)
        g = stats.gumbels
        assert list(g) == sorted(g, reverse=True)
        assert min(g) >= stats.kappa


def test_sbs_top_k_inclusion_matches_gumbel_top_k():
    # Gumbel-top-k over sequences: the chance that y is among the K largest
    # perturbed values is the same as for i.i.d. perturbations of the leaves.
    model = random_model(0, 2, 2)
    p = enumerate_support(model).as_dict()
    seqs = list(p)
    logp = np.log([p[s] for s in seqs])
    rng = np.random.default_rng(5)
    draws = 40_000
    ref = Counter()
    for _ in range(draws):
        top = np.argsort(-(logp + rng.gumbel(size=len(seqs))))[:3]
        ref.update(seqs[i] for i in top)
    got = Counter()
    for _ in range(draws):
        got.update(sbs(model, 3, 1.0, rng)[0].token_set())
    for s in seqs:
        assert abs(got[s] - ref[s]) / draws < 0.015


def test_diverse_beam_search_basics():
    model = random_model(4, 3, 2)
    assert diverse_beam_search(model, 4, 3.0, 1).token_set() == beam_search(model, 4).token_set()
    # with a single group per width-1 beam and no penalty, group one is greedy decoding
    first = diverse_beam_search(model, 2, 0.0, 2).items[0]
    assert first.tokens == beam_search(model, 1).items[0].tokens
    with pytest.raises(DesignError):
        diverse_beam_search(model, 3, 0.5, 2)


def test_diverse_beam_search_penalty_changes_second_group_token():
    model = random_model(0, 3, 2)
    out = diverse_beam_search(model, 2, 100.0, 2)
    a, b = out.items
    assert a.body[:1] != b.body[:1]
