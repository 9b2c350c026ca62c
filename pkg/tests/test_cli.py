import csv
import io
import json

import numpy as np
import pytest

from cpsbs import acceptance
from cpsbs.cli import (
    DIVERSITY_GRID,
    ESTIMATE_SCHEMA,
    ExperimentConfig,
    cell_rng,
    estimate_grid,
    load_config,
    main,
    make_config,
    model_mode,
    rmse_summary,
    run_diversity,
    run_estimate,
    run_sample,
    run_timing,
)
from cpsbs.errors import ConfigError
from cpsbs.oracle import enumerate_support
from cpsbs.seq_model import ToyModel, random_model, save_model


def table(text):
    lines = text.splitlines()
    assert lines[0].startswith("# cpsbs-")
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def small(**kw):
    values = dict(vocab=2, t_max=2, k=[2, 3], tau=[0.5, 1.0], replicates=4, estimand="neglogp")
    values.update(kw)
    return make_config(**values)


def test_estimate_csv_is_deterministic():
    cfg = small(methods=["mc", "sas", "sbs", "cpsbs", "beam"])
    rows_a, summary_a = run_estimate(cfg)
    rows_b, summary_b = run_estimate(cfg)
    assert rows_a.splitlines()[0] == ESTIMATE_SCHEMA
    strip = lambda t: [{k: v for k, v in r.items() if k != "wall_ns"} for r in table(t)]  # noqa: E731
    assert strip(rows_a) == strip(rows_b)
    assert summary_a == summary_b
    assert len(table(rows_a)) == 5 * 2 * 2 * 4
    assert "\r\n" in rows_a


def test_rmse_zero_when_beam_covers_the_support():
    model = random_model(0, 2, 2)
    size = len(enumerate_support(model))
    cfg = small(methods=["cpsbs", "sas", "beam"], k=[size + 3], replicates=3)
    for cell in rmse_summary(estimate_grid(cfg)):
        assert cell["rmse"] == pytest.approx(0.0, abs=1e-12)


def test_rmse_zero_for_deterministic_model(tmp_path):
    probs = np.zeros((3, 3))
    probs[2, 0] = 1.0
    probs[0, 1] = 1.0
    probs[1, 2] = 1.0
    path = tmp_path / "chain.json"
    save_model(ToyModel(probs, 3), path)
    cfg = make_config(model=str(path), methods=["mc", "sbs", "cpsbs"], k=[1, 2], tau=[1.0], replicates=3,
                      estimand="bleu:mode")
    for cell in rmse_summary(estimate_grid(cfg)):
        assert cell["rmse"] == 0.0
        assert cell["baseline"] == 1.0


def test_seeds_are_distinct_per_cell_and_replicate():
    seeds = {cell_rng(0, c, r)[1] for c in range(20) for r in range(20)}
    assert len(seeds) == 400
    a, _ = cell_rng(5, 1, 2)
    b, _ = cell_rng(5, 1, 2)
    assert a.random() == b.random()


def test_diversity_rows_and_determinism():
    cfg = small(methods=["mc", "cpsbs", "diversebs"], k=[2], replicates=2)
    out = run_diversity(cfg)
    rows = table(out)
    assert len(rows) == 3 * len(DIVERSITY_GRID)
    assert out == run_diversity(cfg)
    for row in rows:
        assert 0 <= float(row["bleu_min"]) <= float(row["bleu_mean"]) <= float(row["bleu_max"]) <= 1
        assert 0 <= float(row["diversity"]) <= 4


def test_timing_rows_and_outputs():
    cfg = small(methods=["beam", "cpsbs"], k=[2], tau=[0.5], replicates=5)
    first, second = table(run_timing(cfg)), table(run_timing(cfg))
    assert len(first) == 2 * 5
    assert [r["output"] for r in first] == [r["output"] for r in second]
    assert all(int(r["wall_ns"]) > 0 for r in first)


def test_sample_lists_at_most_k_sequences():
    rows = table(run_sample(small(methods=["sbs", "sas"], k=[3], tau=[1.0])))
    assert 1 <= len(rows) <= 6
    assert {r["method"] for r in rows} == {"sbs", "sas"}


def test_config_validation():
    for bad in (
        dict(methods=["greedy"]),
        dict(k=[0]),
        dict(tau=[0.0]),
        dict(replicates=0),
        dict(truncation=1.5),
        dict(zero_inclusion="smooth"),
        dict(k=[]),
        dict(nonsense=1),
    ):
        with pytest.raises(ConfigError):
            make_config(**bad)
    with pytest.raises(ConfigError):
        estimate_grid(small(methods=["sas"], k=[1]))
    with pytest.raises(ConfigError):
        estimate_grid(small(methods=["diversebs"], k=[3], groups=2))
    with pytest.raises(ConfigError):
        estimate_grid(small(estimand="accuracy"))


def test_toml_config_and_flag_precedence(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('methods = ["mc"]\nk = [2]\ntau = [0.5]\nreplicates = 7\nseed = 3\n')
    cfg = make_config(load_config(path), replicates=2)
    assert cfg.methods == ["mc"] and cfg.replicates == 2 and cfg.seed == 3
    assert isinstance(cfg, ExperimentConfig)
    (tmp_path / "bad.toml").write_text("colour = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_main_estimate_writes_files(tmp_path, capsys):
    config = tmp_path / "run.toml"
    config.write_text('vocab = 2\nt_max = 2\nk = [2]\ntau = [1.0]\nreplicates = 2\n')
    out, summary = tmp_path / "rows.csv", tmp_path / "rmse.csv"
    code = main(["estimate", "--config", str(config), "--method", "cpsbs", "--out", str(out),
                 "--summary", str(summary)])
    assert code == 0
    assert len(table(out.read_text())) == 2
    assert len(table(summary.read_text())) == 1


def test_main_reports_errors(capsys):
    assert main(["estimate", "--k", "0"]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["sample", "--config", "/nonexistent.toml"]) == 2


def test_verify_subset_and_failure(tmp_path, monkeypatch, capsys):
    out = tmp_path / "verify.json"
    assert main(["verify", "--criteria", "1", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["passed"] and [c["number"] for c in report["criteria"]] == [1]
    monkeypatch.setitem(acceptance.CRITERIA, 1, ("always fails", lambda seed: (False, {}), 5.0))
    assert main(["verify", "--criteria", "1"]) == 1
    assert json.loads(capsys.readouterr().out)["passed"] is False


def test_model_mode_is_nonempty():
    model = random_model(0, 3, 3)
    assert len(model_mode(model)) > 0
    assert len(model_mode(model, budget=5)) > 0


def test_weight_annealing_leaves_other_methods_alone():
    def rows(**kw):
        return table(run_sample(small(methods=["beam", "sbs"], k=[2], tau=[1.0], **kw)))

    assert rows() == rows(weight_tau=0.2)
    with pytest.raises(ConfigError):
        small(weight_tau=0.0)
    assert main(["sample", "--vocab", "2", "--t-max", "2", "--k", "2", "--tau", "1.0", "--weight-tau", "0.3"]) == 0
