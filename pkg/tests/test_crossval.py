import json

import numpy as np
import pytest

from conftest import build_toy_session
from errp_detector.config import load_settings
from errp_detector.crossval import cross_validate, cross_validation_chance
from errp_detector.errors import InsufficientTrialsError


@pytest.fixture(scope="module")
def cv_settings():
    return load_settings(environ={}, cv_reps=2, cv_folds=3)


@pytest.fixture(scope="module")
def session():
    return build_toy_session(seed=4)


@pytest.fixture(scope="module")
def result(session, cv_settings):
    return cross_validate(session, cv_settings, seed=0)


def test_curve_count_and_selection(result, cv_settings):
    assert result.n_curves == 6
    assert result.tpr_mean.shape == result.tnr_mean.shape == (41,)
    assert result.tau_star in cv_settings.tau_grid
    idx = int(np.flatnonzero(cv_settings.tau_grid == result.tau_star)[0])
    product = result.tpr_mean * result.tnr_mean
    assert product[idx] == pytest.approx(product.max())
    assert result.tpr == pytest.approx(result.tpr_mean[idx])


def test_folds_never_train_on_test_trials(result):
    for record in result.folds:
        assert not set(record.train_trials) & set(record.test_trials)
        assert set(record.epoch_trials) <= set(record.train_trials)


def test_each_repetition_partitions_the_trials(result, session):
    every = {t.trial_id for t in session.trials}
    for rep in range(2):
        tested = [tid for r in result.folds if r.rep == rep for tid in r.test_trials]
        assert sorted(tested) == sorted(every)


def test_folds_are_stratified(result, session):
    errors = {t.trial_id for t in session.trials if t.is_error}
    for record in result.folds:
        n_err = len(errors & set(record.test_trials))
        assert 5 <= n_err <= 6


def test_planted_errors_are_found(result):
    assert result.tpr * result.tnr > 0.25


def test_cross_validation_is_seeded(session, cv_settings, result):
    again = cross_validate(session, cv_settings, seed=0)
    np.testing.assert_array_equal(again.tpr_mean, result.tpr_mean)
    assert [r.test_trials for r in again.folds] == [r.test_trials for r in result.folds]


def test_too_few_error_trials(cv_settings):
    session = build_toy_session(seed=5, n_blocks=1, n_error=2)
    with pytest.raises(InsufficientTrialsError):
        cross_validate(session, cv_settings)


@pytest.fixture(scope="module")
def chance_run(session, cv_settings):
    result = cross_validate(session, cv_settings, seed=0)
    null = cross_validation_chance(result, session, cv_settings, seed=1)
    return result, null


def test_permuted_cross_validation_chance(chance_run):
    result, null = chance_run
    assert null["tpr"].shape == null["tnr"].shape == (6,)
    assert result.n_perm == 6 and len(result.chance_folds) == 6
    assert set(result.p_values) == {"tpr", "tnr", "product"}
    for value in result.p_values.values():
        assert 1 / 7 <= value <= 1.0
    assert result.chance["product"] == pytest.approx(float(np.mean(null["product"])))


def test_chance_curves_span_the_grid(chance_run, cv_settings):
    result, null = chance_run
    assert result.chance_tpr.shape == result.chance_tnr.shape == (41,)
    idx = int(np.flatnonzero(cv_settings.tau_grid == result.tau_star)[0])
    assert result.chance_tpr[idx] == pytest.approx(float(np.mean(null["tpr"])))
    assert result.chance_tnr[idx] == pytest.approx(float(np.mean(null["tnr"])))


def test_chance_folds_never_train_on_test_trials(chance_run):
    result, _ = chance_run
    for record in result.chance_folds:
        assert not set(record.train_trials) & set(record.test_trials)
        assert set(record.epoch_trials) <= set(record.train_trials)


def test_summary_carries_curves_with_bands(chance_run):
    result, _ = chance_run
    summary = json.loads(json.dumps(result.summary()))
    assert summary["group"] == "control"
    assert summary["n_curves"] == 6 and summary["n_perm"] == 6
    curves = summary["curves"]
    for key in ("tpr", "tnr", "chance_tpr", "chance_tnr"):
        mean, low, high = (np.array(curves[k]) for k in (key, f"{key}_ci_low", f"{key}_ci_high"))
        assert mean.shape == (41,)
        assert np.all(low <= mean + 1e-12) and np.all(mean <= high + 1e-12)
    np.testing.assert_allclose(curves["tpr"], result.tpr_mean)


def test_curves_without_chance(result):
    curves = result.curves()
    assert set(curves) == {"tau", "tpr", "tpr_ci_low", "tpr_ci_high", "tnr", "tnr_ci_low", "tnr_ci_high"}
