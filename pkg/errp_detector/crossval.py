"""Personalized classifier: repeated stratified k-fold over trials, evaluated asynchronously per fold."""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.model_selection import RepeatedStratifiedKFold

from .chance import METRICS, chance_summary
from .classifier_core import error_probability, train_generic
from .detector import fire_mask
from .errors import InsufficientTrialsError
from .evaluation import confidence_band, mean_error_latency, select_index, trial_hits, trial_window_range
from .features import filter_block
from .session import SessionLog

logger = logging.getLogger(__name__)


@dataclass
class FoldRecord:
    rep: int
    fold: int
    train_trials: list[str]
    test_trials: list[str]
    epoch_trials: list[str]
    tpr: np.ndarray = field(repr=False)
    tnr: np.ndarray = field(repr=False)


@dataclass
class CrossValidationResult:
    participant_id: str
    tau_grid: np.ndarray
    tpr_mean: np.ndarray
    tnr_mean: np.ndarray
    tau_star: float
    tpr: float
    tnr: float
    folds: list[FoldRecord]
    group: str = ""
    chance: dict = field(default_factory=dict)
    p_values: dict = field(default_factory=dict)
    n_perm: int = 0
    chance_folds: list[FoldRecord] = field(default_factory=list, repr=False)
    chance_tpr: Optional[np.ndarray] = field(default=None, repr=False)
    chance_tnr: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_curves(self) -> int:
        return len(self.folds)

    def curves(self) -> dict[str, list]:
        """Fold-averaged TPR/TNR per threshold with 95% bands, plus the chance curves once computed."""
        out = {"tau": self.tau_grid.tolist()}
        sources = [("", self.folds)]
        if self.chance_folds:
            sources.append(("chance_", self.chance_folds))
        for prefix, records in sources:
            for metric in ("tpr", "tnr"):
                mean, low, high = confidence_band([getattr(r, metric) for r in records])
                out[f"{prefix}{metric}"] = mean.tolist()
                out[f"{prefix}{metric}_ci_low"] = low.tolist()
                out[f"{prefix}{metric}_ci_high"] = high.tolist()
        return out

    def summary(self) -> dict:
        return {"participant_id": self.participant_id, "group": self.group, "tau_star": self.tau_star,
                "tpr": self.tpr, "tnr": self.tnr, "n_curves": self.n_curves, "chance": self.chance,
                "p_values": self.p_values, "n_perm": self.n_perm, "curves": self.curves()}


class _BlockWindows:
    """Causally filtered block plus the end times of every sliding window in it."""

    def __init__(self, session: SessionLog, block: int, settings, artifact_stage=None):
        self.filtered = filter_block(session, block, settings.filter_spec, artifact_stage=artifact_stage)
        self.start_sample = session.block(block).start_sample
        self.window = settings.window_samples
        self.ends = np.arange(self.window, self.filtered.shape[1] + 1, settings.leap_samples)
        self.times = (self.start_sample + self.ends) / session.sample_rate
        self.fs = session.sample_rate

    def epoch(self, onset: float, settings) -> Optional[np.ndarray]:
        start = int(round((onset - self.start_sample / self.fs + settings.epoch_offset_s) * self.fs))
        n = settings.window_samples
        if start < 0 or start + n > self.filtered.shape[1]:
            return None
        return np.ascontiguousarray(self.filtered[:, start:start + n]).ravel()

    def trial_windows(self, trial) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = trial_window_range(trial, self.times)
        view = sliding_window_view(self.filtered, self.window, axis=1)
        windows = view[:, self.ends[lo:hi] - self.window, :]
        flat = np.ascontiguousarray(windows.transpose(1, 0, 2)).reshape(hi - lo, -1)
        return self.times[lo:hi], flat


def _run_fold(blocks: dict, trials, train_idx, test_idx, rep: int, fold: int, settings,
              permute_seed=None) -> FoldRecord:
    train = [trials[i] for i in train_idx]
    test = [trials[i] for i in test_idx]
    latency = mean_error_latency(train)

    X, y, epoch_ids = [], [], []
    for t in train:
        onset = t.error_onset if t.is_error else t.start + latency
        vec = blocks[t.block].epoch(onset, settings)
        if vec is None:
            continue
        X.append(vec)
        y.append(int(t.is_error))
        epoch_ids.append(t.trial_id)
    y = np.asarray(y)
    if permute_seed is not None:
        y = np.random.default_rng(permute_seed).permutation(y)
    model, _ = train_generic(np.stack(X), settings, labels=y)

    grid = settings.tau_grid
    n_tp = np.zeros(grid.size)
    n_tn = np.zeros(grid.size)
    n_error = n_correct = 0
    for t in test:
        times, flat = blocks[t.block].trial_windows(t)
        probs = error_probability(model.score_windows(flat)) if flat.shape[0] else np.zeros(0)
        fires = fire_mask(probs[:, None] > grid[None, :], settings.single_event_per_run)
        good, _ = trial_hits(t, times, fires, settings.tp_window_s)
        if t.is_error:
            n_error += 1
            n_tp += good
        else:
            n_correct += 1
            n_tn += good
    return FoldRecord(rep=rep, fold=fold, train_trials=[t.trial_id for t in train],
                      test_trials=[t.trial_id for t in test], epoch_trials=epoch_ids,
                      tpr=n_tp / max(n_error, 1), tnr=n_tn / max(n_correct, 1))


def _prepare(session: SessionLog, settings, blocks, folds: int, artifact_stage=None):
    trials = session.trials_in(blocks)
    labels = np.array([int(t.is_error) for t in trials])
    if labels.sum() < folds or (labels.size - labels.sum()) < folds:
        raise InsufficientTrialsError(
            f"{session.participant_id}: {int(labels.sum())} error and {int(labels.size - labels.sum())} correct "
            f"trials, need at least {folds} of each")
    windows = {b: _BlockWindows(session, b, settings, artifact_stage) for b in sorted({t.block for t in trials})}
    return trials, labels, windows


def cross_validate(session: SessionLog, settings, seed: int = 0, blocks=None, reps: Optional[int] = None,
                   folds: Optional[int] = None, artifact_stage=None) -> CrossValidationResult:
    """reps x folds trial-level CV; tau* maximizes the product of the averaged TPR and TNR curves."""
    reps = settings.cv_reps if reps is None else reps
    folds = settings.cv_folds if folds is None else folds
    trials, labels, windows = _prepare(session, settings, blocks, folds, artifact_stage)

    splitter = RepeatedStratifiedKFold(n_splits=folds, n_repeats=reps, random_state=seed)
    splits = list(splitter.split(np.zeros(labels.size), labels))
    records = Parallel(n_jobs=settings.n_jobs)(
        delayed(_run_fold)(windows, trials, tr, te, i // folds, i % folds, settings)
        for i, (tr, te) in enumerate(splits))

    tpr_mean = np.mean([r.tpr for r in records], axis=0)
    tnr_mean = np.mean([r.tnr for r in records], axis=0)
    idx = select_index(tpr_mean * tnr_mean)
    grid = settings.tau_grid
    logger.info(f"[EVAL] {session.participant_id} CV {reps}x{folds}: tau*={grid[idx]:.3f} "
                f"TPR={tpr_mean[idx]:.3f} TNR={tnr_mean[idx]:.3f}")
    return CrossValidationResult(participant_id=session.participant_id, group=str(session.profile.get("group", "")),
                                 tau_grid=grid, tpr_mean=tpr_mean, tnr_mean=tnr_mean, tau_star=float(grid[idx]),
                                 tpr=float(tpr_mean[idx]), tnr=float(tnr_mean[idx]), folds=records)


def cross_validation_chance(result: CrossValidationResult, session: SessionLog, settings, seed: int = 0,
                            reps: Optional[int] = None, blocks=None, artifact_stage=None) -> dict:
    """Repeated k-fold CV in which every fold classifier is trained on permuted labels, in place.

    Fills the per-threshold chance curves and the chance levels and add-one p-values
    at tau*; the null distribution holds one value per permuted fold classifier.
    """
    reps = settings.cv_reps if reps is None else reps
    folds = settings.cv_folds
    trials, labels, windows = _prepare(session, settings, blocks, folds, artifact_stage)
    idx = int(np.argmin(np.abs(settings.tau_grid - result.tau_star)))

    root = np.random.SeedSequence(seed)
    splitter = RepeatedStratifiedKFold(n_splits=folds, n_repeats=reps, random_state=int(root.generate_state(1)[0]))
    splits = list(splitter.split(np.zeros(labels.size), labels))
    records = Parallel(n_jobs=settings.n_jobs)(
        delayed(_run_fold)(windows, trials, tr, te, i // folds, i % folds, settings, permute_seed=child)
        for i, ((tr, te), child) in enumerate(zip(splits, root.spawn(len(splits)))))

    result.chance_folds = records
    result.chance_tpr = np.mean([r.tpr for r in records], axis=0)
    result.chance_tnr = np.mean([r.tnr for r in records], axis=0)
    null = {"tpr": np.array([r.tpr[idx] for r in records]), "tnr": np.array([r.tnr[idx] for r in records])}
    null["edr"] = np.full(len(records), np.nan)
    null["product"] = null["tpr"] * null["tnr"]

    observed = {"tpr": result.tpr, "tnr": result.tnr, "edr": np.nan, "product": result.tpr * result.tnr}
    chance, p_values = chance_summary(observed, null)
    result.chance = {m: chance[m] for m in METRICS if m != "edr"}
    result.p_values = {m: p_values[m] for m in METRICS if m != "edr"}
    result.n_perm = len(records)
    logger.info(f"[EVAL] {session.participant_id} CV chance ({reps}x{folds} permuted): "
                f"TPR={result.chance['tpr']:.3f} TNR={result.chance['tnr']:.3f} at tau*={result.tau_star:.3f}")
    return null
