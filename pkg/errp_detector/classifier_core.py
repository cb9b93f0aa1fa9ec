# errp_detector/classifier_core.py
import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

import numpy as np
from pydantic import BaseModel
from scipy import linalg
from scipy.special import expit
from sklearn.covariance import ledoit_wolf_shrinkage

from .dsp import FilterSpec
from .errors import DegeneratePatternError, DimensionError, TrainingError
from .features import (PcaModel, fit_pca, project_pca, reject_outliers_mahalanobis,
                       stack_epochs)
from .session import CORRECT, ERROR

logger = logging.getLogger(__name__)

# ---------------- Labels ----------------
CLASS_ORDER = (CORRECT, ERROR)


def _binary_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind in "iub":
        return labels.astype(int)
    return (labels == ERROR).astype(int)


# ---------------- Shrinkage LDA ----------------
@dataclass(frozen=True, eq=False)
class LdaModel:
    weights: np.ndarray
    bias: float
    shrinkage: float
    classes: tuple = CLASS_ORDER

    def score(self, features: np.ndarray) -> np.ndarray:
        """Linear score w.x + b; positive favors the error class."""
        Z = np.atleast_2d(np.asarray(features, dtype=float))
        if Z.shape[1] != self.weights.shape[0]:
            raise DimensionError(f"expected {self.weights.shape[0]} features, got {Z.shape[1]}")
        return Z @ self.weights + self.bias


def train_shrinkage_lda(features: np.ndarray, labels, shrinkage: Optional[float] = None) -> LdaModel:
    """Two-class LDA on the pooled within-class covariance blended towards nu*I.

    ``shrinkage`` overrides the analytic Ledoit-Wolf intensity when given.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise DimensionError(f"features must be n x k, got shape {X.shape}")
    y = _binary_labels(labels)
    n, k = X.shape
    if len(y) != n:
        raise DimensionError(f"{len(y)} labels for {n} feature rows")
    if n <= 2 or np.all(y == 0) or np.all(y == 1):
        raise TrainingError("shrinkage LDA needs more than 2 samples and both classes")

    mu_error = X[y == 1].mean(axis=0)
    mu_correct = X[y == 0].mean(axis=0)
    centered = X - np.where(y[:, None] == 1, mu_error, mu_correct)
    scatter = centered.T @ centered / (n - 2)
    nu = np.trace(scatter) / k

    if shrinkage is None:
        gamma = float(ledoit_wolf_shrinkage(centered, assume_centered=True))
    else:
        gamma = float(shrinkage)
    gamma = float(np.clip(gamma, 0.0, 1.0))

    cov = (1.0 - gamma) * scatter + gamma * nu * np.eye(k)
    diff = mu_error - mu_correct
    try:
        w = linalg.solve(cov, diff, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        logger.warning("[TRAIN] Covariance not positive definite, using least squares")
        w = linalg.lstsq(cov, diff)[0]
    if not np.all(np.isfinite(w)):
        raise TrainingError("non-finite discriminant weights")

    bias = -float(np.sum(w * (mu_error + mu_correct) / 2.0))
    return LdaModel(weights=w, bias=bias, shrinkage=gamma)


def error_probability(scores) -> np.ndarray:
    """Two-class softmax of the score, i.e. the logistic function."""
    return expit(np.asarray(scores, dtype=float))


# ---------------- Window scoring ----------------
@dataclass(frozen=True, eq=False)
class LinearWindowScorer:
    """PCA and LDA folded into one weight vector over flattened channels x samples windows."""
    weights: np.ndarray
    bias: float
    threshold: float
    filter_spec: FilterSpec
    n_channels: int
    window_samples: int
    leap_samples: int

    @property
    def n_features(self) -> int:
        return self.n_channels * self.window_samples

    def score_windows(self, flat: np.ndarray) -> np.ndarray:
        # row-wise reduction keeps each score independent of how windows are batched
        flat = np.ascontiguousarray(flat, dtype=float)
        if flat.ndim != 2 or flat.shape[1] != self.n_features:
            raise DimensionError(f"expected windows of {self.n_features} features, got {flat.shape}")
        return np.sum(flat * self.weights, axis=1) + self.bias


@dataclass(frozen=True, eq=False)
class GenericModel:
    pca: PcaModel
    lda: LdaModel
    threshold: float
    filter_spec: FilterSpec
    n_channels: int = 61
    window_s: float = 0.450
    leap_s: float = 0.018

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.pca.k != self.lda.weights.shape[0]:
            raise DimensionError(f"PCA keeps {self.pca.k} components but LDA has {self.lda.weights.shape[0]} weights")
        if self.pca.n_features != self.n_channels * self.window_samples:
            raise DimensionError("PCA feature length does not match channels x window samples")

    @property
    def sample_rate(self) -> float:
        return self.filter_spec.sample_rate

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def leap_samples(self) -> int:
        return int(round(self.leap_s * self.sample_rate))

    @cached_property
    def scorer(self) -> LinearWindowScorer:
        weights = np.ascontiguousarray(self.pca.components @ self.lda.weights)
        bias = self.lda.bias - float(np.sum(self.pca.mean * weights))
        return LinearWindowScorer(weights=weights, bias=bias, threshold=self.threshold,
                                  filter_spec=self.filter_spec, n_channels=self.n_channels,
                                  window_samples=self.window_samples, leap_samples=self.leap_samples)

    def with_threshold(self, tau: float) -> "GenericModel":
        return replace(self, threshold=float(tau))

    def score_windows(self, flat: np.ndarray) -> np.ndarray:
        return self.scorer.score_windows(flat)


def predict_probability(model: GenericModel, window: np.ndarray) -> tuple[float, float]:
    """(p_correct, p_error) for one filtered channels x samples window."""
    window = np.asarray(window, dtype=float)
    expected = (model.n_channels, model.window_samples)
    if window.shape != expected:
        raise DimensionError(f"expected window of shape {expected}, got {window.shape}")
    p_error = float(error_probability(model.score_windows(window.reshape(1, -1)))[0])
    return 1.0 - p_error, p_error


# ---------------- Activation pattern ----------------
@dataclass
class ActivationPattern:
    pattern: np.ndarray
    channel_map: Optional[np.ndarray] = None


def activation_pattern(lda: LdaModel, features: np.ndarray, pca: Optional[PcaModel] = None,
                       n_channels: int = 61) -> ActivationPattern:
    """Forward-model pattern a = cov.w / (w'.cov.w), back-projected to channels x time if ``pca`` is given."""
    Z = np.atleast_2d(np.asarray(features, dtype=float))
    if Z.shape[1] != lda.weights.shape[0]:
        raise DimensionError(f"expected {lda.weights.shape[0]} features, got {Z.shape[1]}")
    cov = np.atleast_2d(np.cov(Z, rowvar=False))
    projected = cov @ lda.weights
    denom = float(lda.weights @ projected)
    if not np.isfinite(denom) or denom <= 0:
        raise DegeneratePatternError(f"w'.cov.w = {denom}")
    pattern = projected / denom

    channel_map = None
    if pca is not None:
        channel_map = (pca.components @ pattern).reshape(n_channels, -1)
    return ActivationPattern(pattern=pattern, channel_map=channel_map)


# ---------------- Generic classifier training ----------------
class TrainingSummary(BaseModel):
    n_epochs: int
    n_correct: int
    n_error: int
    n_correct_kept: int
    n_error_kept: int
    n_components: int
    explained_variance: float
    shrinkage: float
    threshold: float
    source: str = "epochs"
    seed: Optional[int] = None
    sessions: list[str] = []


def train_generic(epochs, settings, labels=None) -> tuple[GenericModel, TrainingSummary]:
    """Preliminary PCA, per-class outlier rejection, PCA refit, shrinkage LDA."""
    if labels is None:
        X, y = stack_epochs(epochs)
        n_channels = epochs[0].data.shape[0]
    else:
        X, y = np.asarray(epochs, dtype=float), _binary_labels(labels)
        n_channels = X.shape[1] // settings.window_samples
    if np.all(y == 0) or np.all(y == 1):
        raise TrainingError("training corpus needs both correct and error epochs")

    logger.info(f"[TRAIN] {X.shape[0]} epochs ({int(np.sum(y == 0))} correct, {int(np.sum(y == 1))} error), "
                f"{X.shape[1]} features")
    rejection = reject_outliers_mahalanobis(X, y, settings.outlier_fraction, settings.pca_variance)
    logger.info(f"[TRAIN] Outlier rejection: {rejection.summary()}")

    X_kept, y_kept = X[rejection.kept], y[rejection.kept]
    pca = fit_pca(X_kept, settings.pca_variance)
    Z = project_pca(pca, X_kept)
    lda = train_shrinkage_lda(Z, y_kept, settings.shrinkage)
    logger.info(f"[TRAIN] PCA kept k={pca.k} components, shrinkage gamma={lda.shrinkage:.4f}")

    model = GenericModel(pca=pca, lda=lda, threshold=settings.tau_initial, filter_spec=settings.filter_spec,
                         n_channels=n_channels, window_s=settings.epoch_length_s, leap_s=settings.window_leap_s)
    summary = TrainingSummary(
        n_epochs=int(X.shape[0]),
        n_correct=int(np.sum(y == 0)), n_error=int(np.sum(y == 1)),
        n_correct_kept=int(np.sum(y_kept == 0)), n_error_kept=int(np.sum(y_kept == 1)),
        n_components=pca.k, explained_variance=float(np.sum(pca.explained_variance_ratio)),
        shrinkage=lda.shrinkage, threshold=model.threshold,
    )
    return model, summary
