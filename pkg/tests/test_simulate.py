import csv
import json

import numpy as np
import pytest

from crossfit_gee.simulate import (
    ScenarioConfig,
    TrueCovariance,
    generate,
    run_experiment,
    write_metrics_csv,
    write_summary_json,
)


def test_seed_determinism():
    cfg = ScenarioConfig(n=50, p=10, seed=4)
    a, _ = generate(cfg)
    b, _ = generate(cfg)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    c, _ = generate(cfg, seed=5)
    assert not np.array_equal(a.y, c.y)


def test_homoscedastic_residual_covariance():
    cfg = ScenarioConfig(n=5000, p=5, l=3, s=2, m=1, covariance="homoscedastic",
                         active_set=(), rho=0.4, sigma2=2.0, seed=1)
    data, truth = generate(cfg)
    r = data.y - data.linear_predictor(truth.beta0)
    target = truth.covariance.for_data(data)[0]
    emp = r.T @ r / cfg.n
    assert np.max(np.abs(emp - target)) <= 0.1 * np.max(np.abs(target))


@pytest.mark.parametrize("family", ["diag-exp", "exchangeable-varying"])
def test_mean_of_errors_is_zero(family):
    cfg = ScenarioConfig(n=5000, p=6, l=2, covariance=family, active_set=(1, 2), seed=9)
    data, truth = generate(cfg)
    r = data.y - data.linear_predictor(truth.beta0)
    se = r.std(axis=0, ddof=1) / np.sqrt(cfg.n)
    assert np.all(np.abs(r.mean(axis=0)) <= 3 * se)


@pytest.mark.parametrize("family", ["homoscedastic", "diag-exp", "exchangeable-varying"])
def test_generated_covariance_is_spd_on_grid(family):
    tc = TrueCovariance(family, (0, 1), 3, strength=1.5, rho=0.3)
    axis = np.linspace(-1, 1, 5)
    grid = np.array(np.meshgrid(*[axis] * 6)).reshape(6, -1).T.reshape(-1, 2, 3)
    vals = np.linalg.eigvalsh(tc.matrices(grid))
    assert np.all(vals > 0)


def test_true_coefficients_pattern():
    cfg = ScenarioConfig(n=100, p=20, s=4, m=3, m_value=0.25, seed=2)
    _, truth = generate(cfg)
    assert truth.m_set == (0, 1, 2)
    assert len(truth.signal_set) == 4 and min(truth.signal_set) >= 3
    np.testing.assert_array_equal(np.abs(truth.beta0[list(truth.signal_set)]), 1.0)
    np.testing.assert_array_equal(truth.beta0[:3], 0.25)
    drifted = ScenarioConfig(n=100, p=20, s=4, m=3, drift=(1.0, 2.0, 0.0), seed=2)
    _, t2 = generate(drifted)
    np.testing.assert_allclose(t2.beta0[:3], [0.1, 0.2, 0.0])


def test_invalid_configs():
    with pytest.raises(ValueError):
        ScenarioConfig(p=5, s=4, m=2)
    with pytest.raises(ValueError):
        ScenarioConfig(p=5, active_set=(7,))
    with pytest.raises(ValueError):
        ScenarioConfig(covariance="ar1")


def test_bounded_errors_are_bounded():
    cfg = ScenarioConfig(n=300, p=4, l=1, s=1, m=1, covariance="homoscedastic",
                         active_set=(), errors="bounded", sigma2=1.0, seed=3)
    data, truth = generate(cfg)
    r = data.y - data.linear_predictor(truth.beta0)
    assert np.max(np.abs(r)) <= np.sqrt(3) + 1e-12


def test_run_experiment_rows_and_determinism(tmp_path):
    cfg = ScenarioConfig(n=100, n_large=200, p=10, s=2, m=1, seed=6)
    a = run_experiment("rate", cfg, reps=4)
    b = run_experiment("rate", cfg, reps=4)
    assert len(a.rows) == 4 and a.summary["failures"] == 0
    assert a.rows == b.rows
    assert a.summary["median_ratio"] > 1
    write_metrics_csv(a, tmp_path / "m.csv")
    write_summary_json(a, tmp_path / "s.json")
    with open(tmp_path / "m.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["experiment"] == "rate" and doc["summary"]["replications"] == 4


def test_replication_failures_are_recorded(monkeypatch):
    from crossfit_gee import simulate

    calls = []

    def flaky(cfg, seeds):
        calls.append(1)
        if len(calls) == 2:
            raise np.linalg.LinAlgError("singular")
        return {"err_small": 1.0, "err_large": 0.5}

    monkeypatch.setitem(simulate._REPLICATION, "rate", flaky)
    res = run_experiment("rate", ScenarioConfig(seed=1), reps=3)
    assert [r["failed"] for r in res.rows] == [False, True, False]
    assert "LinAlgError" in res.rows[1]["message"]
    assert res.summary["failures"] == 1
    assert res.summary["median_ratio"] == 2.0


def test_unknown_experiment():
    with pytest.raises(ValueError):
        run_experiment("bogus", ScenarioConfig(), reps=1)
    with pytest.raises(ValueError):
        run_experiment("power", ScenarioConfig(), reps=1)
