import math

import numpy as np
import pytest

from errp_detector.errors import DegenerateDataError, DimensionError
from errp_detector.features import (Onset, extract_epochs, fit_pca, project_pca, rank_class_outliers,
                                    reconstruct_pca, reject_outliers_mahalanobis, session_epochs, stack_epochs)
from errp_detector.evaluation import onset_map
from errp_detector.session import CORRECT, ERROR


def test_epochs_are_cut_at_offset_and_skipped_outside():
    fs = 500.0
    signal = np.tile(np.arange(2000, dtype=float), (2, 1))
    onsets = [Onset(1.0, ERROR, "a"), Onset(3.5, CORRECT, "b"), Onset(-0.5, CORRECT, "c")]
    epochs, skipped = extract_epochs(signal, onsets, fs, offset_s=0.3, length_s=0.45)
    assert skipped == 2
    assert len(epochs) == 1
    assert epochs[0].data.shape == (2, 225)
    assert epochs[0].data[0, 0] == 650.0
    assert epochs[0].trial_id == "a"


def test_time_origin_shifts_epochs():
    signal = np.tile(np.arange(1000, dtype=float), (1, 1))
    epochs, _ = extract_epochs(signal, [(10.2, ERROR, "x")], 500.0, 0.0, 0.1, time_origin=10.0)
    assert epochs[0].data[0, 0] == 100.0


def test_session_epochs_cover_every_trial(toy_session, settings):
    epochs = session_epochs(toy_session, onset_map(toy_session), settings)
    assert len(epochs) == len(toy_session.trials)
    X, y = stack_epochs(epochs)
    assert X.shape == (40, 2 * 225)
    assert int(y.sum()) == 16


def test_pca_keeps_smallest_k_reaching_target():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 30)) * np.linspace(5.0, 0.1, 30)
    model = fit_pca(X, 0.9)
    cumulative = np.cumsum(model.explained_variance_ratio)
    assert cumulative[-1] >= 0.9
    assert model.k == 1 or cumulative[-2] < 0.9


def test_full_variance_pca_reconstructs():
    X = np.random.default_rng(1).standard_normal((20, 8))
    model = fit_pca(X, 1.0)
    np.testing.assert_allclose(reconstruct_pca(model, project_pca(model, X)), X, atol=1e-10)


def test_project_single_vector_and_window():
    X = np.random.default_rng(2).standard_normal((20, 6))
    model = fit_pca(X, 0.99)
    assert project_pca(model, X[0]).shape == (model.k,)
    assert project_pca(model, X[0].reshape(2, 3)).shape == (model.k,)
    with pytest.raises(DimensionError):
        project_pca(model, np.zeros((3, 5)))


def test_pca_component_signs_are_canonical():
    X = np.random.default_rng(3).standard_normal((50, 10))
    comps = fit_pca(X, 0.99).components
    peaks = comps[np.argmax(np.abs(comps), axis=0), np.arange(comps.shape[1])]
    assert np.all(peaks > 0)


def test_pca_degenerate_inputs():
    with pytest.raises(DegenerateDataError):
        fit_pca(np.ones((10, 4)))
    with pytest.raises(DegenerateDataError):
        fit_pca(np.ones((1, 4)))


def test_projection_geometry():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((300, 12)) * np.linspace(3.0, 0.5, 12) + 7.0
    model = fit_pca(X, 0.95)
    np.testing.assert_allclose(project_pca(model, model.mean), np.zeros(model.k), atol=1e-12)
    e1 = np.zeros(model.k)
    e1[0] = 1.0
    np.testing.assert_allclose(project_pca(model, model.mean + model.components[:, 0]), e1, atol=1e-12)
    Z = project_pca(model, X)
    np.testing.assert_allclose(np.cov(Z, rowvar=False), np.diag(model.explained_variance), atol=1e-9)


def test_planted_outliers_are_rejected():
    rng = np.random.default_rng(7)
    inliers = rng.standard_normal((1000, 20))
    planted = 10.0 * rng.standard_normal((10, 20))
    errors = rng.standard_normal((200, 20)) + 0.5
    X = np.vstack([inliers, planted, errors])
    labels = np.array([CORRECT] * 1010 + [ERROR] * 200)

    result = reject_outliers_mahalanobis(X, labels, fraction=0.01, variance_target=0.99)
    assert set(range(1000, 1010)) <= set(result.rejected.tolist())
    assert result.counts[CORRECT]["rejected"] == math.ceil(0.01 * 1010)
    assert result.counts[ERROR]["rejected"] == 2
    assert len(result.kept) + len(result.rejected) == X.shape[0]


def test_distances_match_brute_force():
    rng = np.random.default_rng(8)
    Z = rng.standard_normal((120, 5))
    labels = np.array([0] * 70 + [1] * 50)
    result = rank_class_outliers(Z, labels, 0.05)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        D = Z[idx] - Z[idx].mean(axis=0)
        inv = np.linalg.inv(np.cov(D, rowvar=False))
        brute = np.array([d @ inv @ d for d in D])
        np.testing.assert_allclose(result.distances[idx], brute, rtol=1e-8)
        worst = idx[np.argsort(-brute)[:math.ceil(0.05 * idx.size)]]
        assert set(worst.tolist()) <= set(result.rejected.tolist())


def test_zero_fraction_keeps_everything():
    Z = np.random.default_rng(9).standard_normal((30, 3))
    result = rank_class_outliers(Z, np.arange(30) % 2, 0.0)
    assert result.rejected.size == 0
    assert result.kept.size == 30


def test_rejection_needs_both_classes():
    with pytest.raises(DegenerateDataError):
        reject_outliers_mahalanobis(np.random.default_rng(0).standard_normal((10, 3)), [CORRECT] * 10)


def test_rejection_ignores_row_order():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((160, 8))
    labels = np.array([CORRECT] * 100 + [ERROR] * 60)
    X[labels == ERROR] += 0.8
    order = rng.permutation(160)
    before = reject_outliers_mahalanobis(X, labels, fraction=0.05)
    after = reject_outliers_mahalanobis(X[order], labels[order], fraction=0.05)
    assert sorted(order[after.rejected].tolist()) == before.rejected.tolist()
    np.testing.assert_allclose(after.distances, before.distances[order], rtol=1e-8)
