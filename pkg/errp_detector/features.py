"""Feature pipeline: epoch extraction, PCA and per-class Mahalanobis outlier rejection."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import linalg

from .dsp import FilterState, apply_causal, apply_zero_phase, design_butterworth_bandpass
from .errors import DegenerateDataError, DimensionError
from .session import CORRECT, ERROR, SessionLog

logger = logging.getLogger(__name__)

ArtifactStage = Callable[[np.ndarray], np.ndarray]


# ---------- epochs ----------
@dataclass
class Epoch:
    data: np.ndarray
    label: str
    onset_time: float
    participant_id: str = ""
    trial_id: str = ""

    @property
    def n_features(self) -> int:
        return self.data.size

    def flatten(self) -> np.ndarray:
        return np.ascontiguousarray(self.data, dtype=float).ravel()


class Onset(NamedTuple):
    time: float
    label: str
    trial_id: str = ""


def extract_epochs(signal: np.ndarray, onsets, sample_rate: float, offset_s: float = 0.300,
                   length_s: float = 0.450, participant_id: str = "",
                   time_origin: float = 0.0) -> tuple[list[Epoch], int]:
    """Cut [onset + offset, onset + offset + length) out of an already filtered signal.

    ``time_origin`` is the session time of ``signal[:, 0]``. Epochs that leave the
    recording are skipped; the number skipped is returned alongside the epochs.
    """
    n_samples = int(round(length_s * sample_rate))
    total = signal.shape[1]
    epochs, skipped = [], 0
    for onset in onsets:
        onset = Onset(*onset)
        start = int(round((onset.time - time_origin + offset_s) * sample_rate))
        if start < 0 or start + n_samples > total:
            skipped += 1
            continue
        epochs.append(Epoch(data=np.array(signal[:, start:start + n_samples], dtype=float),
                            label=onset.label, onset_time=onset.time,
                            participant_id=participant_id, trial_id=onset.trial_id))
    if skipped:
        logger.warning(f"[DSP] {skipped} epoch(s) outside the recording were skipped ({participant_id or 'signal'})")
    return epochs, skipped


def filter_block(session: SessionLog, block: int, filter_spec, zero_phase: bool = False,
                 artifact_stage: Optional[ArtifactStage] = None) -> np.ndarray:
    """Filter one block from a fresh state, as the online detector sees it after a reset."""
    raw = np.asarray(session.block_samples(block), dtype=float)
    if zero_phase:
        filtered = apply_zero_phase(raw, filter_spec)
    else:
        state = FilterState(design_butterworth_bandpass(filter_spec), raw.shape[0])
        filtered = apply_causal(state, raw)
    if artifact_stage is not None:
        filtered = artifact_stage(filtered)
    return filtered


def session_epochs(session: SessionLog, onsets: dict, settings, blocks=None, zero_phase: bool = False,
                   artifact_stage: Optional[ArtifactStage] = None) -> list[Epoch]:
    """Epochs of every trial in ``blocks`` whose id appears in ``onsets`` (trial_id -> onset time)."""
    block_ids = [b.index for b in session.blocks] if blocks is None else list(blocks)
    epochs = []
    for block in block_ids:
        trials = [t for t in session.trials_in([block]) if t.trial_id in onsets]
        if not trials:
            continue
        filtered = filter_block(session, block, settings.filter_spec, zero_phase, artifact_stage)
        marks = [Onset(onsets[t.trial_id], ERROR if t.is_error else CORRECT, t.trial_id) for t in trials]
        found, _ = extract_epochs(filtered, marks, session.sample_rate, settings.epoch_offset_s,
                                  settings.epoch_length_s, session.participant_id,
                                  time_origin=session.block_start_time(block))
        epochs.extend(found)
    return epochs


def stack_epochs(epochs) -> tuple[np.ndarray, np.ndarray]:
    """(n, d) feature matrix and 0/1 error labels."""
    if not epochs:
        raise DegenerateDataError("no epochs to stack")
    X = np.stack([e.flatten() for e in epochs])
    y = np.array([e.label == ERROR for e in epochs], dtype=int)
    return X, y


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        X = data
    else:
        X = np.stack([e.flatten() if isinstance(e, Epoch) else np.ravel(e) for e in data])
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X


# ---------- PCA ----------
@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return int(self.components.shape[1])

    @property
    def n_features(self) -> int:
        return int(self.mean.shape[0])


def n_components_for(ratio: np.ndarray, variance_target: float) -> int:
    """Smallest k whose leading explained-variance ratios (sorted descending) reach the target."""
    cumulative = np.cumsum(ratio)
    return min(int(np.searchsorted(cumulative, variance_target - 1e-12, side="left")) + 1, len(ratio))


def fit_pca(epochs, variance_target: float = 0.99) -> PcaModel:
    X = _as_matrix(epochs)
    n, d = X.shape
    if n < 2:
        raise DegenerateDataError(f"PCA needs at least 2 epochs, got {n}")
    if not 0 < variance_target <= 1:
        raise ValueError(f"variance_target must lie in (0, 1], got {variance_target}")

    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = linalg.svd(centered, full_matrices=False, check_finite=True)
    energy = s ** 2
    total = energy.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateDataError("data has zero variance")

    ratio = energy / total
    k = n_components_for(ratio, variance_target)

    components = vt[:k].T.copy()
    # sign convention: the largest-magnitude coordinate of each component is positive
    peak = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[peak, np.arange(k)])
    signs[signs == 0] = 1.0
    components *= signs

    return PcaModel(mean=mean, components=np.ascontiguousarray(components),
                    explained_variance=energy[:k] / (n - 1), explained_variance_ratio=ratio[:k])


def project_pca(model: PcaModel, data) -> np.ndarray:
    """componentsᵀ (x - mean) for one epoch (returns a vector) or many (returns n x k)."""
    if isinstance(data, Epoch):
        single, X = True, data.flatten()[None, :]
    elif isinstance(data, np.ndarray) and (data.ndim == 1 or (data.ndim == 2 and data.shape[1] != model.n_features
                                                              and data.size == model.n_features)):
        # a flat vector or a single channels x samples window
        single, X = True, np.reshape(np.asarray(data, dtype=float), (1, -1))
    else:
        single, X = False, _as_matrix(data)
    if X.shape[1] != model.n_features:
        raise DimensionError(f"expected {model.n_features} features, got {X.shape[1]}")
    Z = (X - model.mean) @ model.components
    return Z[0] if single else Z


def reconstruct_pca(model: PcaModel, Z: np.ndarray) -> np.ndarray:
    return model.mean + np.atleast_2d(Z) @ model.components.T


# ---------- outlier rejection ----------
@dataclass
class OutlierRejection:
    kept: np.ndarray
    rejected: np.ndarray
    distances: np.ndarray
    counts: dict

    def summary(self) -> str:
        parts = [f"{label}: kept {c['kept']} rejected {c['rejected']}" for label, c in self.counts.items()]
        return ", ".join(parts)


def _class_distances(Z: np.ndarray) -> np.ndarray:
    mu = Z.mean(axis=0)
    D = Z - mu
    if Z.shape[0] < 2:
        return np.zeros(Z.shape[0])
    cov = np.atleast_2d(np.cov(D, rowvar=False))
    k = cov.shape[0]
    if np.linalg.cond(cov) > 1e10:
        logger.warning("[TRAIN] Class covariance ill-conditioned, adding diagonal regularization")
        cov = cov + 1e-8 * np.trace(cov) / k * np.eye(k)
    try:
        factor = linalg.cho_factor(cov)
        solved = linalg.cho_solve(factor, D.T).T
    except linalg.LinAlgError:
        logger.warning("[TRAIN] Cholesky failed, falling back to pseudo-inverse")
        solved = D @ linalg.pinvh(cov)
    return np.einsum("ij,ij->i", D, solved)


def reject_outliers_mahalanobis(epochs, labels=None, fraction: float = 0.01,
                                variance_target: float = 0.99) -> OutlierRejection:
    """Drop, per class, the ceil(fraction * class size) epochs farthest from their class mean.

    Distances are Mahalanobis distances in the space of a preliminary PCA fitted
    on all epochs, with the covariance estimated per class.
    """
    X = _as_matrix(epochs)
    if labels is None:
        labels = [e.label for e in epochs]
    labels = np.asarray(labels)
    if labels.dtype.kind in "iub":
        labels = np.where(labels.astype(int) == 1, ERROR, CORRECT)
    if len(labels) != X.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {X.shape[0]} epochs")
    classes = [c for c in (CORRECT, ERROR) if np.any(labels == c)]
    if len(classes) < 2:
        raise DegenerateDataError("outlier rejection needs both classes")
    if not 0 <= fraction < 0.5:
        raise ValueError(f"fraction must lie in [0, 0.5), got {fraction}")

    return rank_class_outliers(project_pca(fit_pca(X, variance_target), X), labels, fraction)


def rank_class_outliers(Z: np.ndarray, labels, fraction: float) -> OutlierRejection:
    """Per-class Mahalanobis ranking of rows of an already reduced feature matrix."""
    labels = np.asarray(labels)
    if labels.dtype.kind in "iub":
        labels = np.where(labels.astype(int) == 1, ERROR, CORRECT)
    classes = [c for c in (CORRECT, ERROR) if np.any(labels == c)]
    distances = np.zeros(Z.shape[0])
    rejected, counts = [], {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        d2 = _class_distances(Z[idx])
        distances[idx] = d2
        n_reject = math.ceil(round(fraction * len(idx), 9))
        order = np.argsort(-d2, kind="stable")
        rejected.extend(idx[order[:n_reject]].tolist())
        counts[c] = {"kept": len(idx) - n_reject, "rejected": n_reject}

    rejected = np.array(sorted(rejected), dtype=int)
    kept = np.setdiff1d(np.arange(Z.shape[0]), rejected)
    return OutlierRejection(kept=kept, rejected=rejected, distances=distances, counts=counts)
