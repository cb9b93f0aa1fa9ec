"""Permutation chance levels of the generic classifier.

A bank of classifiers is trained once on label-permuted copies of the training
corpus, each one running the full generic training pipeline; every evaluated
participant is then replayed through every member of the bank at that
participant's final threshold (or, opt-in, at a threshold each member
personalizes on the adaptation blocks).
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from .classifier_core import error_probability, train_generic, train_shrinkage_lda
from .detector import fire_mask, iter_window_batches
from .errors import DegenerateDataError, UndefinedMetricError
from .evaluation import p_value, select_index, smooth_curve, trial_hits, trial_window_range
from .features import (filter_block, fit_pca, n_components_for, project_pca, rank_class_outliers,
                       stack_epochs)
from .session import SessionLog

logger = logging.getLogger(__name__)

METRICS = ("tpr", "tnr", "edr", "product")


@dataclass
class ChanceBank:
    """Folded window weights (features x permutations) and biases of label-permuted classifiers."""
    weights: np.ndarray
    biases: np.ndarray
    window_samples: int
    leap_samples: int
    n_channels: int

    @property
    def n_perm(self) -> int:
        return int(self.biases.size)


# ---------- bank training ----------
@dataclass
class BankCorpus:
    """Label-independent pieces of the training corpus, computed once for every permutation.

    ``scores`` are the preliminary PCA scores used for outlier ranking; ``gram`` is the
    Gram matrix of the mean-centred epochs, from which the PCA of any subset of rows
    can be recovered without another decomposition of the full feature matrix.
    """
    centered: np.ndarray
    mean: np.ndarray
    scores: np.ndarray
    gram: np.ndarray

    @property
    def n_epochs(self) -> int:
        return int(self.centered.shape[0])


def prepare_bank_corpus(X: np.ndarray, settings) -> BankCorpus:
    X = np.asarray(X, dtype=float)
    prelim = fit_pca(X, settings.pca_variance)
    mean = X.mean(axis=0)
    centered = X - mean
    return BankCorpus(centered=centered, mean=mean, scores=project_pca(prelim, X), gram=centered @ centered.T)


def fit_bank_member(corpus: BankCorpus, labels, settings) -> tuple[np.ndarray, float]:
    """Outlier rejection, PCA refit on the kept epochs and shrinkage LDA, folded to window weights.

    Same model as ``train_generic`` on these labels; the refit PCA comes from the
    eigendecomposition of the kept rows' centred Gram matrix.
    """
    y = np.asarray(labels, dtype=int)
    kept = rank_class_outliers(corpus.scores, y, settings.outlier_fraction).kept
    G = corpus.gram[np.ix_(kept, kept)]
    row_mean = G.mean(axis=0)
    G = G - row_mean[None, :] - row_mean[:, None] + row_mean.mean()

    evals, evecs = linalg.eigh(G)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    evals = np.where(evals > evals[0] * G.shape[0] * np.finfo(float).eps, evals, 0.0)
    if evals[0] <= 0:
        raise DegenerateDataError("kept epochs have zero variance")
    k = n_components_for(evals / evals.sum(), settings.pca_variance)
    s = np.sqrt(evals[:k])
    lda = train_shrinkage_lda(evecs[:, :k] * s, y[kept], settings.shrinkage)

    coef = evecs[:, :k] @ (lda.weights / s)
    rows = corpus.centered[kept]
    subset_mean = rows.mean(axis=0)
    weights = rows.T @ coef - subset_mean * coef.sum()
    bias = lda.bias - float(np.sum((corpus.mean + subset_mean) * weights))
    return weights, bias


def _permuted_member(corpus: Optional[BankCorpus], X, y, seed_seq, settings):
    y_perm = np.random.default_rng(seed_seq).permutation(y)
    if corpus is None:
        model, _ = train_generic(X, settings, labels=y_perm)
        return model.scorer.weights, model.scorer.bias
    return fit_bank_member(corpus, y_perm, settings)


def build_chance_bank(epochs, settings, n_perm: int, seed: int, labels=None) -> ChanceBank:
    """Train ``n_perm`` classifiers on label-permuted training data, one child seed each."""
    if n_perm < 1:
        raise UndefinedMetricError(f"chance bank needs at least one permutation, got {n_perm}")
    if labels is None:
        X, y = stack_epochs(epochs)
        n_channels = epochs[0].data.shape[0]
    else:
        X, y = np.asarray(epochs, dtype=float), np.asarray(labels, dtype=int)
        n_channels = X.shape[1] // settings.window_samples

    corpus = None if settings.chance_refit_pca else prepare_bank_corpus(X, settings)
    children = np.random.SeedSequence(seed).spawn(n_perm)
    logger.info(f"[EVAL] Building chance bank: {n_perm} permutations of {X.shape[0]} epochs")
    results = Parallel(n_jobs=settings.n_jobs)(
        delayed(_permuted_member)(corpus, X if corpus is None else None, y, child, settings)
        for child in children)
    weights = np.stack([w for w, _ in results], axis=1)
    biases = np.array([b for _, b in results])
    return ChanceBank(weights=weights, biases=biases, window_samples=settings.window_samples,
                      leap_samples=settings.leap_samples, n_channels=n_channels)


# ---------- bank evaluation ----------
def bank_probabilities(session: SessionLog, bank: ChanceBank, block: int, settings,
                       artifact_stage=None) -> tuple[np.ndarray, np.ndarray]:
    """(window end times, windows x permutations p_error) of one block."""
    filtered = filter_block(session, block, settings.filter_spec, artifact_stage=artifact_stage)
    start = session.block(block).start_sample
    times, probs = [], []
    for ends, flat in iter_window_batches(filtered, bank.window_samples, bank.leap_samples):
        times.append((start + ends) / session.sample_rate)
        probs.append(error_probability(flat @ bank.weights + bank.biases))
    if not times:
        return np.zeros(0), np.zeros((0, bank.n_perm))
    return np.concatenate(times), np.concatenate(probs)


def _tally(session: SessionLog, bank: ChanceBank, blocks, thresholds, settings, artifact_stage=None):
    """TPR, TNR and EDR of every bank member; ``thresholds`` broadcasts against (windows, n_perm[, grid])."""
    thresholds = np.asarray(thresholds, dtype=float)
    n_tn = n_tp = n_hit = 0.0
    n_correct = n_error = 0
    for block in blocks:
        times, probs = bank_probabilities(session, bank, block, settings, artifact_stage)
        if thresholds.ndim == 3:
            probs = probs[:, :, None]
        for trial in session.trials_in([block]):
            lo, hi = trial_window_range(trial, times)
            fires = fire_mask(probs[lo:hi] > thresholds, settings.single_event_per_run)
            good, hit = trial_hits(trial, times[lo:hi], fires, settings.tp_window_s)
            if trial.is_error:
                n_error += 1
                n_tp = n_tp + good
                n_hit = n_hit + hit
            else:
                n_correct += 1
                n_tn = n_tn + good
    if not n_error or not n_correct:
        raise UndefinedMetricError("chance levels need at least one correct and one error trial")
    return n_tp / n_error, n_tn / n_correct, n_hit / n_error


def retuned_thresholds(session: SessionLog, bank: ChanceBank, settings, adapt_blocks, artifact_stage=None):
    """Per-member threshold chosen by the same sweep, smoothing and selection as the real classifier."""
    grid = settings.tau_grid
    tpr, tnr, _ = _tally(session, bank, adapt_blocks, grid[None, None, :], settings, artifact_stage)
    idx = select_index(smooth_curve(tpr, settings.smoothing_window) * smooth_curve(tnr, settings.smoothing_window))
    return grid[idx]


def chance_metrics(session: SessionLog, bank: ChanceBank, tau: float, blocks, settings,
                   adapt_blocks=None, artifact_stage=None) -> dict[str, np.ndarray]:
    """Per-permutation TPR, TNR, EDR, TPR*TNR and the threshold each member was scored at.

    Every member is evaluated at ``tau``, or, when ``adapt_blocks`` is given, at its
    own threshold personalized on those blocks.
    """
    if not np.isfinite(tau):
        raise UndefinedMetricError(f"chance levels need a finite threshold, got {tau}")
    if adapt_blocks:
        taus = retuned_thresholds(session, bank, settings, adapt_blocks, artifact_stage)
    else:
        taus = np.full(bank.n_perm, float(tau))
    tpr, tnr, edr = _tally(session, bank, blocks, taus[None, :], settings, artifact_stage)
    tpr, tnr, edr = (np.broadcast_to(v, (bank.n_perm,)).astype(float) for v in (tpr, tnr, edr))
    return {"tpr": tpr, "tnr": tnr, "edr": edr, "product": tpr * tnr, "tau": taus}


def chance_summary(observed: dict, null: Optional[dict]) -> tuple[dict, dict]:
    """Chance level (mean over permutations) and add-one p-value per metric."""
    if not null:
        return {m: None for m in METRICS}, {m: None for m in METRICS}
    chance = {m: float(np.mean(null[m])) for m in METRICS}
    p_values = {m: p_value(observed[m], null[m]) for m in METRICS}
    return chance, p_values


def permutation_chance(report, session: SessionLog, bank: ChanceBank, settings, artifact_stage=None):
    """Attach chance levels and p-values to a MetricsReport, in place; returns the null distributions."""
    adapt_blocks = None
    if settings.chance_threshold == "retuned":
        adapt_blocks = [b.index for b in session.blocks if b.index <= settings.adapt_blocks]
    null = chance_metrics(session, bank, report.tau, report.blocks, settings, adapt_blocks, artifact_stage)
    observed = {"tpr": report.tpr, "tnr": report.tnr, "edr": report.edr, "product": report.tpr * report.tnr}
    report.chance, report.p_values = chance_summary(observed, null)
    report.n_perm = bank.n_perm
    logger.info(f"[EVAL] {report.participant_id}: chance TPR={report.chance['tpr']:.3f} "
                f"TNR={report.chance['tnr']:.3f}, p(TPR*TNR)={report.p_values['product']:.4f}")
    return null
