import numpy as np
import pytest

from errp_detector.chance import (bank_probabilities, build_chance_bank, chance_metrics, chance_summary,
                                  fit_bank_member, permutation_chance, prepare_bank_corpus, retuned_thresholds)
from errp_detector.classifier_core import train_generic
from errp_detector.config import load_settings
from errp_detector.errors import UndefinedMetricError
from errp_detector.evaluation import evaluate_session, onset_map
from errp_detector.features import session_epochs, stack_epochs
from conftest import build_toy_session


@pytest.fixture(scope="module")
def corpus(settings):
    session = build_toy_session(seed=3)
    return stack_epochs(session_epochs(session, onset_map(session), settings))


@pytest.fixture(scope="module")
def bank(corpus, settings):
    X, y = corpus
    return build_chance_bank(X, settings, n_perm=6, seed=11, labels=y)


def test_bank_shapes(bank):
    assert bank.weights.shape == (2 * 225, 6)
    assert bank.n_perm == 6
    assert bank.n_channels == 2


def test_bank_is_seeded(bank, corpus, settings):
    X, y = corpus
    again = build_chance_bank(X, settings, n_perm=6, seed=11, labels=y)
    np.testing.assert_array_equal(again.weights, bank.weights)
    other = build_chance_bank(X, settings, n_perm=6, seed=12, labels=y)
    assert not np.array_equal(other.weights, bank.weights)


def test_bank_member_matches_generic_training(corpus, settings):
    X, y = corpus
    weights, bias = fit_bank_member(prepare_bank_corpus(X, settings), y, settings)
    scorer = train_generic(X, settings, labels=y)[0].scorer
    scale = float(np.abs(scorer.weights).max())
    np.testing.assert_allclose(weights, scorer.weights, rtol=1e-6, atol=1e-7 * scale)
    assert bias == pytest.approx(scorer.bias, rel=1e-6, abs=1e-6)


def test_refit_mode_retrains_the_same_members(bank, corpus):
    X, y = corpus
    refit = load_settings(environ={}, chance_refit_pca=True)
    again = build_chance_bank(X, refit, n_perm=6, seed=11, labels=y)
    assert again.weights.shape == (450, 6)
    scale = float(np.abs(bank.weights).max())
    np.testing.assert_allclose(again.weights, bank.weights, rtol=1e-6, atol=1e-7 * scale)
    np.testing.assert_allclose(again.biases, bank.biases, rtol=1e-6, atol=1e-6)


def test_bank_needs_a_permutation(corpus, settings):
    X, y = corpus
    with pytest.raises(UndefinedMetricError):
        build_chance_bank(X, settings, n_perm=0, seed=1, labels=y)


def test_bank_probabilities_per_member(toy_session, bank, settings):
    times, probs = bank_probabilities(toy_session, bank, 1, settings)
    np.testing.assert_array_equal(times, toy_session.streams[1].times)
    assert probs.shape == (times.size, 6)
    assert np.all((probs >= 0) & (probs <= 1))


def test_final_threshold_metrics(toy_session, bank, settings):
    null = chance_metrics(toy_session, bank, 0.7, [3, 4], settings)
    for metric in ("tpr", "tnr", "edr", "product"):
        assert null[metric].shape == (6,)
        assert np.all((null[metric] >= 0) & (null[metric] <= 1))
    assert np.all(null["tpr"] <= null["edr"])


def test_default_scores_every_member_at_the_final_threshold(toy_session, bank, settings):
    assert settings.chance_threshold == "final"
    report, _ = evaluate_session(toy_session, settings, blocks=[4])
    null = permutation_chance(report, toy_session, bank, settings)
    assert null["tau"].shape == (6,)
    assert np.all(null["tau"] == report.tau)


def test_retuned_members_use_their_own_thresholds(toy_session, bank):
    settings = load_settings(environ={}, chance_threshold="retuned")
    report, _ = evaluate_session(toy_session, settings, blocks=[4])
    null = permutation_chance(report, toy_session, bank, settings)
    np.testing.assert_array_equal(null["tau"], retuned_thresholds(toy_session, bank, settings, [1, 2, 3]))


def test_chance_needs_a_finite_threshold(toy_session, bank, settings):
    with pytest.raises(UndefinedMetricError):
        chance_metrics(toy_session, bank, float("nan"), [4], settings)


def test_retuned_thresholds_come_from_grid(toy_session, bank, settings):
    taus = retuned_thresholds(toy_session, bank, settings, [1, 2, 3])
    assert taus.shape == (6,)
    assert np.all(np.isin(taus, settings.tau_grid))


@pytest.mark.parametrize("mode", ["retuned", "final"])
def test_permutation_chance_fills_report(toy_session, bank, mode):
    settings = load_settings(environ={}, chance_threshold=mode)
    report, _ = evaluate_session(toy_session, settings, blocks=[4])
    null = permutation_chance(report, toy_session, bank, settings)
    assert report.n_perm == 6
    assert set(report.p_values) == {"tpr", "tnr", "edr", "product"}
    for value in report.p_values.values():
        assert 1 / 7 <= value <= 1.0
    assert report.chance["product"] == pytest.approx(float(np.mean(null["product"])))


def test_chance_summary_without_null():
    chance, p = chance_summary({"tpr": 0.5, "tnr": 0.5, "edr": 0.5, "product": 0.25}, None)
    assert all(v is None for v in chance.values())
    assert all(v is None for v in p.values())
