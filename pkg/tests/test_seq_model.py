import itertools
import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsbs.errors import ContractError
from cpsbs.oracle import enumerate_support
from cpsbs.seq_model import (
    BOS,
    EOS,
    Hypothesis,
    ToyModel,
    ancestral_sample,
    load_model,
    next_distribution,
    random_model,
    sample_excluding,
    save_model,
    sequence_logprob,
    truncate_core,
)


def deterministic_chain():
    # BOS -> 0 -> 1 -> EOS with certainty, t_max = 3
    probs = np.zeros((3, 3))
    probs[2, 0] = 1.0
    probs[0, 1] = 1.0
    probs[1, 2] = 1.0
    return ToyModel(probs, 3)


def uniform_model(V, t_max):
    return ToyModel(np.full((V + 1, V + 1), 1.0 / (V + 1)), t_max)


def test_hypothesis_fields():
    y = Hypothesis((BOS, 2, 0, EOS), -1.5)
    assert y.finished and y.body == (2, 0) and len(y) == 2
    assert Hypothesis((BOS, 2)) == Hypothesis((BOS, 2), -9.0)
    assert not Hypothesis((BOS,)).finished


def test_model_validation():
    with pytest.raises(ContractError):
        ToyModel(np.full((3, 3), 0.3), 2)
    with pytest.raises(ContractError):
        ToyModel(np.eye(3), 0)
    with pytest.raises(ContractError):
        ToyModel(np.ones((2, 3)) / 3, 2)
    model = uniform_model(2, 2)
    with pytest.raises(ValueError):
        model.probs[0, 0] = 0.5


def test_next_distribution_annealing():
    probs = np.array([[0.9, 0.1], [0.9, 0.1]])
    model = ToyModel(probs, 2)
    assert np.allclose(next_distribution(model, (BOS,), 0.5), [0.81 / 0.82, 0.01 / 0.82], atol=1e-12)
    half = ToyModel(np.full((2, 2), 0.5), 2)
    assert np.allclose(next_distribution(half, (BOS,), 0.5), [0.5, 0.5])
    chain = deterministic_chain()
    assert np.allclose(next_distribution(chain, (BOS,), 0.3), [1, 0, 0])


def test_next_distribution_forces_eos_and_rejects_finished():
    model = uniform_model(2, 2)
    assert np.allclose(next_distribution(model, (BOS, 0, 1)), [0, 0, 1])
    with pytest.raises(ContractError):
        next_distribution(model, (BOS, 0, EOS))
    with pytest.raises(ContractError):
        next_distribution(model, (0, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_annealing_keeps_the_argmax(seed, tau):
    model = random_model(seed, 3, 2)
    for prefix in [(BOS,), (BOS, 0), (BOS, 2)]:
        assert np.argmax(next_distribution(model, prefix, tau)) == np.argmax(next_distribution(model, prefix))


def test_truncate_core():
    assert np.allclose(truncate_core([0.6, 0.3, 0.1], 0.9), [0.6, 0.3, 0.0])
    assert np.allclose(truncate_core([0.6, 0.3, 0.1], 1.0), [0.6, 0.3, 0.1])
    assert np.allclose(truncate_core([0.0, 1.0, 0.0], 0.5), [0.0, 1.0, 0.0])
    assert np.allclose(truncate_core([0.25, 0.25, 0.5], 0.6), [0.25, 0.0, 0.5])
    with pytest.raises(ContractError):
        truncate_core([0.5, 0.5], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.floats(1e-3, 1.0))
def test_truncate_core_keeps_the_top_token(raw, mass):
    p = np.asarray(raw) + 1e-3
    p = p / p.sum()
    out = truncate_core(p, mass)
    assert out[np.argmax(p)] == p[np.argmax(p)]
    assert (out > 0).sum() >= 1
    assert out.sum() >= mass - 1e-9
    kept = out > 0
    if not kept.all():
        assert p[kept].min() >= p[~kept].max()


def test_truncated_rows_use_the_untempered_core():
    probs = np.array([[0.55, 0.44, 0.01], [0.55, 0.44, 0.01], [0.55, 0.44, 0.01]])
    model = ToyModel(probs, 2)
    row = np.exp(model.log_row((BOS,), 0.5, 0.99))
    annealed = np.array([0.55, 0.44, 0.01]) ** 2
    annealed /= annealed.sum()
    assert np.allclose(row, [annealed[0], annealed[1], 0.0])


def test_sequence_logprob():
    assert sequence_logprob(deterministic_chain(), (BOS, 0, 1, EOS)) == 0.0
    two = ToyModel(np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.5, 0.5, 0.0]]), 2)
    for body in itertools.product([0, 1], repeat=2):
        assert sequence_logprob(two, (BOS, *body, EOS)) == pytest.approx(math.log(0.25))
    model = random_model(3, 3, 3)
    P = model.probs
    assert sequence_logprob(model, (BOS, 2, 0, EOS)) == pytest.approx(
        math.log(P[3, 2] * P[2, 0] * P[0, 3]), rel=1e-13
    )
    with pytest.raises(ContractError):
        sequence_logprob(model, (BOS, 1))
    with pytest.raises(ContractError):
        sequence_logprob(model, (BOS, 1, EOS, 2, EOS))
    with pytest.raises(ContractError):
        sequence_logprob(model, (BOS, 0, 0, 0, 0, EOS))
    # EOS is forced once the body reaches t_max, so it contributes a factor of 1
    assert sequence_logprob(model, (BOS, 0, 1, 2, EOS)) == pytest.approx(
        math.log(P[3, 0] * P[0, 1] * P[1, 2]), rel=1e-13
    )


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 4), st.integers(1, 4), st.floats(0.1, 3.0))
def test_global_normalization(seed, V, t_max, tau):
    table = enumerate_support(random_model(seed, V, t_max), tau)
    assert math.fsum(table.probs) == pytest.approx(1.0, abs=1e-9)


def test_ancestral_sampling():
    rng = np.random.default_rng(0)
    y = ancestral_sample(deterministic_chain(), 1.0, rng)
    assert y.tokens == (BOS, 0, 1, EOS) and y.logp == 0.0
    model = random_model(7, 3, 3)
    table = enumerate_support(model)
    draws = 100_000
    counts = Counter(ancestral_sample(model, 1.0, rng).tokens for _ in range(draws))
    tv = 0.5 * sum(abs(counts.get(s, 0) / draws - p) for s, p in table.as_dict().items())
    assert tv <= 0.01


def test_ancestral_logp_is_annealed():
    model = random_model(1, 3, 3)
    rng = np.random.default_rng(1)
    for _ in range(50):
        y = ancestral_sample(model, 0.4, rng)
        assert y.logp == pytest.approx(sequence_logprob(model, y, 0.4), abs=1e-12)


def test_sample_excluding_matches_conditional():
    model = random_model(2, 2, 2)
    table = enumerate_support(model)
    p = table.as_dict()
    excluded = sorted(p, key=p.get)[-3:]
    rest = {s: q for s, q in p.items() if s not in excluded}
    z = sum(rest.values())
    rng = np.random.default_rng(9)
    draws = 60_000
    counts = Counter(sample_excluding(model, 1.0, excluded, rng).tokens for _ in range(draws))
    assert not set(counts) & set(excluded)
    tv = 0.5 * sum(abs(counts.get(s, 0) / draws - q / z) for s, q in rest.items())
    assert tv <= 0.01


def test_random_model_properties():
    a = random_model(7, 3, 3)
    assert a == random_model(7, 3, 3)
    assert a != random_model(8, 3, 3)
    assert np.allclose(a.probs.sum(axis=1), 1.0, atol=1e-12)
    peaked = random_model(0, 4, 2, concentration=1e-3)
    assert np.all(peaked.probs.max(axis=1) > 0.99)


def test_json_round_trip(tmp_path):
    model = random_model(4, 3, 2)
    path = tmp_path / "m.json"
    save_model(model, path)
    assert load_model(path) == model or np.allclose(load_model(path).probs, model.probs, atol=1e-15)
    doc = json.loads(path.read_text())
    assert set(doc["rows"]) == {"BOS", "0", "1", "2"}
    doc["rows"]["0"] = [0.5, 0.5, 0.0, 1e-10]
    loaded = ToyModel.from_dict(doc)
    assert loaded.probs[0].sum() == pytest.approx(1.0, abs=1e-15)
    doc["rows"]["0"] = [0.5, 0.5, 0.1, 0.0]
    with pytest.raises(ContractError):
        ToyModel.from_dict(doc)
    del doc["rows"]["BOS"]
    with pytest.raises(ContractError):
        ToyModel.from_dict(doc)
