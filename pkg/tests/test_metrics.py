import json
import math

import numpy as np
import pytest
from scipy import stats

from dnfode.errors import ContractViolation, EmptyDataError
from dnfode.metrics import MetricsReport, coverage, dumps_report, evaluate_ensemble, mnll, mse


def test_mse_trivial_and_loop(rng):
    x = rng.normal(size=(7, 3))
    assert mse(x, x) == 0.0
    assert mse(x + 1, x) == pytest.approx(1.0, abs=1e-15)
    y = rng.normal(size=(7, 3))
    mask = rng.random((7, 3)) > 0.4
    total, n = 0.0, 0
    for i in range(7):
        for j in range(3):
            if mask[i, j]:
                total += (x[i, j] - y[i, j]) ** 2
                n += 1
    assert mse(x, y, mask) == pytest.approx(total / n, rel=1e-13)


def test_nothing_to_score():
    with pytest.raises(EmptyDataError):
        mse(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(EmptyDataError):
        mnll(np.zeros((3, 2, 2)), np.zeros((2, 2)), 1.0, np.zeros((2, 2), bool))
    with pytest.raises(EmptyDataError):
        coverage(np.zeros((30, 2, 2)), np.zeros((2, 2)), mask=np.zeros((2, 2), bool))


def test_mnll_values():
    assert mnll(np.zeros((1, 1, 1)), np.zeros((1, 1)), 1.0) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert mnll(np.zeros((1, 1, 1)), np.zeros((1, 1)), 1.0) == pytest.approx(0.91893853, abs=1e-8)
    two = np.array([1.0, -1.0]).reshape(2, 1, 1)
    assert mnll(two, np.zeros((1, 1)), 1.0) == pytest.approx(1.41893853, abs=1e-8)


def test_mnll_single_sample_is_gaussian_nll(rng):
    x = rng.normal(size=(1, 6, 2))
    y = rng.normal(size=(6, 2))
    R = np.array([0.3, 2.0])
    ref = -np.mean(stats.norm.logpdf(y, x[0], np.sqrt(R)))
    assert mnll(x, y, R) == pytest.approx(ref, abs=1e-12)
    # identical members give the same value
    assert mnll(np.repeat(x, 5, axis=0), y, R) == pytest.approx(ref, abs=1e-12)


def test_mnll_is_stable_far_from_the_ensemble():
    val = mnll(np.zeros((3, 1, 1)), np.full((1, 1), 1e3), 1e-4)
    assert np.isfinite(val) and val > 1e9


def test_coverage_trivial_cases(rng):
    ens = rng.normal(size=(200, 1, 1)) * 5
    assert coverage(ens, np.median(ens, axis=0)) == 1.0
    assert coverage(ens, np.full((1, 1), 1e3)) == 0.0


def test_coverage_self_calibration(rng):
    S, n = 500, 10_000
    scale = rng.uniform(0.5, 2.0, size=(n, 1))
    ens = rng.normal(size=(S, n, 1)) * scale
    truth = rng.normal(size=(n, 1)) * scale
    assert abs(coverage(ens, truth, 0.95) - 0.95) <= 0.01


def test_coverage_noise_inclusive_calibration(rng):
    # dynamics spread 0.5, noise variance 0.75: predictive sd 1
    S, n = 500, 4000
    ens = rng.normal(size=(S, n, 1)) * 0.5
    truth = rng.normal(size=(n, 1))
    assert abs(coverage(ens, truth, 0.9, noise_R=[0.75], rng=1) - 0.9) <= 0.02
    assert coverage(ens, truth, 0.9) < 0.7


def test_coverage_monotone_in_level(rng):
    ens = rng.normal(size=(100, 50, 2))
    truth = rng.normal(size=(50, 2)) * 1.3
    vals = [coverage(ens, truth, lv, noise_R=[0.1, 0.2], rng=4) for lv in (0.5, 0.7, 0.9, 0.95, 0.99)]
    assert vals == sorted(vals)


def test_coverage_stddev_mode(rng):
    ens = rng.normal(size=(400, 2000, 1))
    truth = rng.normal(size=(2000, 1))
    assert abs(coverage(ens, truth, mode="stddev") - 0.9545) <= 0.02
    with pytest.raises(ContractViolation):
        coverage(ens, truth, mode="hdi")
    with pytest.raises(ContractViolation):
        coverage(ens, truth, level=1.0)


def test_coverage_warns_for_small_ensembles():
    with pytest.warns(UserWarning):
        coverage(np.zeros((5, 1, 1)), np.zeros((1, 1)))


def test_report_and_json_are_stable(rng):
    ens = rng.normal(size=(30, 8, 2))
    truth = rng.normal(size=(8, 2))
    a = evaluate_ensemble(ens, truth, [0.1, 0.2], rng=3)
    b = evaluate_ensemble(ens, truth, [0.1, 0.2], rng=3)
    ta, tb = dumps_report(a.to_dict()), dumps_report(b.to_dict())
    assert ta == tb
    loaded = json.loads(ta)
    assert loaded["mse"] == a.mse and loaded["mnll"] == a.mnll
    assert list(loaded) == sorted(loaded)
    assert len(loaded["per_dimension"]["mse"]) == 2
    assert np.mean(loaded["per_dimension"]["mse"]) == pytest.approx(a.mse)


def test_dumps_report_formatting():
    text = dumps_report({"b": 0.1, "a": [1, 2.5], "c": {"z": None, "y": True}, "nan": float("nan")})
    assert text == ('{\n  "a": [1, 2.5],\n  "b": 0.10000000000000001,\n'
                    '  "c": {\n    "y": true,\n    "z": null\n  },\n  "nan": null\n}\n')


def test_report_invariants():
    with pytest.raises(ContractViolation):
        MetricsReport(mse=-1.0, mnll=0.0, coverage=0.5, n_divergent=0)
    with pytest.raises(ContractViolation):
        MetricsReport(mse=0.0, mnll=0.0, coverage=1.5, n_divergent=0)
