"""Trial-based evaluation: verdicts, TPR/TNR/EDR/FAR, threshold sweeps and ERP statistics."""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, model_validator
from scipy import stats

from .detector import fire_mask, replay_probabilities
from .errors import InsufficientTrialsError, TrialConsistencyError, UndefinedMetricError, UndefinedThresholdError
from .features import extract_epochs, filter_block
from .session import CORRECT, ERROR, ProbabilityStream, SessionLog, Trial

logger = logging.getLogger(__name__)

TN, FALSE_POS_CORRECT, TP, MISSED_OR_EARLY = "TN", "FalsePosCorrect", "TP", "MissedOrEarly"


# ---------- Onsets ----------
def mean_error_latency(trials) -> float:
    latencies = [t.error_onset - t.start for t in trials if t.is_error and t.error_onset is not None]
    if not latencies:
        raise InsufficientTrialsError("virtual onsets need at least one error trial")
    return float(np.mean(latencies))


def virtual_onsets(session: SessionLog, blocks=None, reference_trials=None) -> dict[str, float]:
    """Onset for every correct trial at the participant's mean error-onset latency.

    The latency is averaged over ``reference_trials`` (default: the trials of ``blocks``).
    """
    trials = session.trials_in(blocks)
    latency = mean_error_latency(trials if reference_trials is None else reference_trials)
    return {t.trial_id: t.start + latency for t in trials if not t.is_error}


def onset_map(session: SessionLog, blocks=None) -> dict[str, float]:
    """Error onsets of error trials plus virtual onsets of correct trials."""
    onsets = {t.trial_id: t.error_onset for t in session.trials_in(blocks) if t.is_error}
    onsets.update(virtual_onsets(session, blocks))
    return onsets


# ---------- Verdicts ----------
@dataclass
class TrialOutcome:
    trial_id: str
    block: int
    label: str
    verdict: str
    detections: tuple = ()
    onset: Optional[float] = None
    post_onset_hit: bool = False

    @property
    def first_latency(self) -> Optional[float]:
        """First detection after the onset, relative to it."""
        after = [d for d in self.detections if d > 0]
        return after[0] if after and self.onset is not None else None


def judge_trial(trial: Trial, detection_times, tp_window_s: float = 1.5) -> TrialOutcome:
    """TN/FalsePosCorrect for correct trials, TP/MissedOrEarly for error trials."""
    times = np.sort(np.asarray(detection_times, dtype=float))
    if times.size and (times[0] < trial.start or times[-1] > trial.end):
        raise TrialConsistencyError(f"detection outside trial {trial.trial_id} [{trial.start}, {trial.end}]")

    if not trial.is_error:
        ref = trial.virtual_onset if trial.virtual_onset is not None else trial.start
        verdict = TN if times.size == 0 else FALSE_POS_CORRECT
        return TrialOutcome(trial.trial_id, trial.block, CORRECT, verdict,
                            tuple(float(t - ref) for t in times), trial.virtual_onset)

    onset = trial.error_onset
    if onset is None:
        raise TrialConsistencyError(f"error trial {trial.trial_id} has no corrected onset")
    early = bool(np.any(times < onset))
    hit = bool(np.any((times > onset) & (times <= onset + tp_window_s)))
    verdict = TP if hit and not early else MISSED_OR_EARLY
    return TrialOutcome(trial.trial_id, trial.block, ERROR, verdict,
                        tuple(float(t - onset) for t in times), onset, hit)


def trial_window_range(trial: Trial, times: np.ndarray) -> tuple[int, int]:
    """Index range of windows whose end lies inside [start, end]."""
    return int(np.searchsorted(times, trial.start, "left")), int(np.searchsorted(times, trial.end, "right"))


def trial_detection_times(trial: Trial, stream: ProbabilityStream, tau: float,
                          single_event_per_run: bool = True) -> np.ndarray:
    """Detections of one trial, with the rule re-armed at the trial start."""
    lo, hi = trial_window_range(trial, stream.times)
    fires = fire_mask(stream.probabilities[lo:hi] > tau, single_event_per_run)
    return stream.times[lo:hi][fires]


def session_outcomes(session: SessionLog, streams: dict, tau: float, blocks, settings):
    """Outcomes and per-trial detection times of every trial in ``blocks``."""
    outcomes, detections = [], {}
    for trial in session.trials_in(blocks):
        times = trial_detection_times(trial, streams[trial.block], tau, settings.single_event_per_run)
        detections[trial.trial_id] = times
        outcomes.append(judge_trial(trial, times, settings.tp_window_s))
    return outcomes, detections


# ---------- Metrics ----------
def far_intervals(trial: Trial, detection_times, interval_s: float = 1.0) -> tuple[int, int]:
    """(intervals, contaminated intervals) tiling a correct trial or an error trial's pre-onset period."""
    stop = trial.error_onset if trial.is_error else trial.end
    n = int(math.floor((stop - trial.start) / interval_s + 1e-9))
    if n <= 0:
        return 0, 0
    times = np.asarray(detection_times, dtype=float)
    times = times[(times >= trial.start) & (times < trial.start + n * interval_s)]
    slots = np.unique(np.floor((times - trial.start) / interval_s).astype(int))
    return n, int(np.count_nonzero(slots < n))


@dataclass
class SessionMetrics:
    tnr: float
    tpr: float
    edr: float
    far: float
    far_correct: Optional[float]
    far_error: Optional[float]
    counts: dict = field(default_factory=dict)


def session_metrics(outcomes, trials, detections: dict, settings) -> SessionMetrics:
    correct = [o for o in outcomes if o.label == CORRECT]
    errors = [o for o in outcomes if o.label == ERROR]
    if not correct or not errors:
        raise UndefinedMetricError("metrics need at least one correct and one error trial")

    n_tn = sum(o.verdict == TN for o in correct)
    n_tp = sum(o.verdict == TP for o in errors)
    n_edr = sum(o.post_onset_hit for o in errors)

    by_id = {t.trial_id: t for t in trials}
    totals = {CORRECT: [0, 0], ERROR: [0, 0]}
    for o in outcomes:
        n, dirty = far_intervals(by_id[o.trial_id], detections.get(o.trial_id, ()), settings.far_interval_s)
        totals[o.label][0] += n
        totals[o.label][1] += dirty

    def _ratio(dirty, n):
        return dirty / n if n else None

    n_int = totals[CORRECT][0] + totals[ERROR][0]
    n_dirty = totals[CORRECT][1] + totals[ERROR][1]
    return SessionMetrics(
        tnr=n_tn / len(correct), tpr=n_tp / len(errors), edr=n_edr / len(errors),
        far=n_dirty / n_int if n_int else 0.0,
        far_correct=_ratio(totals[CORRECT][1], totals[CORRECT][0]),
        far_error=_ratio(totals[ERROR][1], totals[ERROR][0]),
        counts={"n_correct": len(correct), "n_error": len(errors), "n_tn": n_tn, "n_tp": n_tp,
                "n_edr": n_edr, "far_intervals": n_int, "far_contaminated": n_dirty},
    )


# ---------- Threshold sweep and selection ----------
@dataclass
class SweepResult:
    tau: np.ndarray
    tpr: np.ndarray
    tnr: np.ndarray
    edr: np.ndarray


def trial_hits(trial: Trial, times: np.ndarray, fires: np.ndarray, tp_window_s: float):
    """Per-column (TN or TP, post-onset hit) flags of one trial from a (windows, columns) fire mask."""
    if not trial.is_error:
        clean = ~fires.any(axis=0)
        return clean, np.zeros_like(clean)
    onset = trial.error_onset
    early = fires[times < onset].any(axis=0)
    hit = fires[(times > onset) & (times <= onset + tp_window_s)].any(axis=0)
    return hit & ~early, hit


def sweep_trials(trials, streams: dict, tau_grid, settings) -> SweepResult:
    tau_grid = np.asarray(tau_grid, dtype=float)
    n_tn = np.zeros(tau_grid.size)
    n_tp = np.zeros(tau_grid.size)
    n_hit = np.zeros(tau_grid.size)
    n_correct = n_error = 0
    for trial in trials:
        stream = streams[trial.block]
        lo, hi = trial_window_range(trial, stream.times)
        supra = stream.probabilities[lo:hi, None] > tau_grid[None, :]
        fires = fire_mask(supra, settings.single_event_per_run)
        good, hit = trial_hits(trial, stream.times[lo:hi], fires, settings.tp_window_s)
        if trial.is_error:
            n_error += 1
            n_tp += good
            n_hit += hit
        else:
            n_correct += 1
            n_tn += good
    if not n_correct or not n_error:
        raise UndefinedMetricError("sweep needs at least one correct and one error trial")
    return SweepResult(tau=tau_grid, tpr=n_tp / n_error, tnr=n_tn / n_correct, edr=n_hit / n_error)


def threshold_sweep(session: SessionLog, streams: dict, tau_grid, blocks, settings) -> SweepResult:
    """TPR(tau) and TNR(tau) re-derived from stored probability streams."""
    return sweep_trials(session.trials_in(blocks), streams, tau_grid, settings)


def smooth_curve(values, window: int = 7) -> np.ndarray:
    """Centered moving average along the last axis; the window shrinks symmetrically at the edges."""
    values = np.asarray(values, dtype=float)
    half = window // 2
    n = values.shape[-1]
    out = np.empty_like(values)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[..., i] = np.mean(values[..., i - h:i + h + 1], axis=-1)
    return out


def select_index(product, tolerance: float = 1e-12):
    """First grid index whose product is within ``tolerance`` of the maximum (per row for 2-D input)."""
    product = np.asarray(product, dtype=float)
    near = product >= np.max(product, axis=-1, keepdims=True) - tolerance
    idx = np.argmax(near, axis=-1)
    return int(idx) if product.ndim == 1 else idx


@dataclass
class ThresholdSelection:
    tau: float
    index: int
    tau_grid: np.ndarray
    tpr: np.ndarray
    tnr: np.ndarray
    tpr_smooth: np.ndarray
    tnr_smooth: np.ndarray

    @property
    def product(self) -> np.ndarray:
        return self.tpr_smooth * self.tnr_smooth

    def curves(self) -> dict:
        return {"tau": self.tau_grid.tolist(), "tpr": self.tpr.tolist(), "tnr": self.tnr.tolist(),
                "tpr_smooth": self.tpr_smooth.tolist(), "tnr_smooth": self.tnr_smooth.tolist()}


def smooth_and_select(tpr, tnr, tau_grid, window: int = 7) -> ThresholdSelection:
    tpr_s, tnr_s = smooth_curve(tpr, window), smooth_curve(tnr, window)
    idx = select_index(tpr_s * tnr_s)
    tau_grid = np.asarray(tau_grid, dtype=float)
    return ThresholdSelection(tau=float(tau_grid[idx]), index=idx, tau_grid=tau_grid,
                              tpr=np.asarray(tpr, dtype=float), tnr=np.asarray(tnr, dtype=float),
                              tpr_smooth=tpr_s, tnr_smooth=tnr_s)


def adapt_threshold(session: SessionLog, settings, blocks, streams: Optional[dict] = None) -> ThresholdSelection:
    """Personalized threshold from the online probability streams of ``blocks``."""
    streams = session.streams if streams is None else streams
    sweep = threshold_sweep(session, streams, settings.tau_grid, blocks, settings)
    selection = smooth_and_select(sweep.tpr, sweep.tnr, sweep.tau, settings.smoothing_window)
    logger.info(f"[EVAL] {session.participant_id}: tau*={selection.tau:.3f} from blocks {list(blocks)}")
    return selection


# ---------- Permutation p-values ----------
def p_value(observed: float, null) -> Optional[float]:
    """Add-one permutation p-value; None for an empty null distribution."""
    null = np.asarray(null, dtype=float)
    if null.size == 0:
        return None
    return float((1 + np.count_nonzero(null >= observed)) / (1 + null.size))



def confidence_band(curves, level: float = 0.95) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean over the first axis with a Student-t confidence interval; NaN bounds for a single curve."""
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    mean = curves.mean(axis=0)
    n = curves.shape[0]
    if n < 2:
        nan = np.full_like(mean, np.nan)
        return mean, nan, nan.copy()
    half = stats.t.ppf(0.5 + level / 2.0, n - 1) * stats.sem(curves, axis=0)
    return mean, mean - half, mean + half


# ---------- Reports ----------
class MetricsReport(BaseModel):
    participant_id: str
    group: str = ""
    blocks: list[int]
    tau: float
    tnr: float
    tpr: float
    edr: float
    far: float
    far_correct: Optional[float] = None
    far_error: Optional[float] = None
    counts: dict[str, int] = {}
    chance: dict[str, Optional[float]] = {}
    p_values: dict[str, Optional[float]] = {}
    n_perm: int = 0
    sweep: Optional[dict[str, list[float]]] = None
    thresholds: list[dict] = []
    durations: dict[str, Optional[float]] = {}

    @model_validator(mode="after")
    def _check_fractions(self):
        for name in ("tnr", "tpr", "edr", "far", "far_correct", "far_error"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.tpr > self.edr:
            raise ValueError("TPR cannot exceed EDR")
        return self

    @property
    def product(self) -> float:
        return self.tpr * self.tnr


def duration_summary(session: SessionLog, blocks=None) -> dict[str, Optional[float]]:
    trials = session.trials_in(blocks)

    def _stats(values, prefix):
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            return {f"{prefix}_mean": None, f"{prefix}_sd": None}
        sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        return {f"{prefix}_mean": float(np.mean(values)), f"{prefix}_sd": sd}

    out = {}
    out.update(_stats([t.duration for t in trials if not t.is_error], "correct_duration"))
    out.update(_stats([t.duration for t in trials if t.is_error], "error_duration"))
    out.update(_stats([t.error_onset - t.start for t in trials if t.is_error], "onset_latency"))
    return out


def evaluate_session(session: SessionLog, settings, model=None, blocks=None, tau: Optional[float] = None,
                     streams: Optional[dict] = None) -> tuple[MetricsReport, list[TrialOutcome]]:
    """Trial-based metrics of ``blocks`` at ``tau`` (default: the threshold in force in the last block)."""
    available = [b.index for b in session.blocks]
    blocks = [b for b in (settings.eval_blocks if blocks is None else blocks) if b in available]
    if not blocks:
        raise UndefinedMetricError(f"none of the requested blocks exist in session {session.participant_id}")
    if streams is None:
        if model is not None:
            streams = replay_probabilities(session, model, blocks, single_event_per_run=settings.single_event_per_run)
        else:
            streams = session.streams
    missing = [b for b in blocks if b not in streams]
    if missing:
        raise UndefinedMetricError(f"no probability stream for blocks {missing}")
    if tau is None:
        tau = session.block(blocks[-1]).threshold
    if not np.isfinite(tau):
        raise UndefinedThresholdError(
            f"no finite threshold for session {session.participant_id} (blocks {blocks}); pass tau explicitly")

    outcomes, detections = session_outcomes(session, streams, tau, blocks, settings)
    metrics = session_metrics(outcomes, session.trials_in(blocks), detections, settings)
    sweep = threshold_sweep(session, streams, settings.tau_grid, blocks, settings)
    curves = {"tau": sweep.tau.tolist(), "tpr": sweep.tpr.tolist(), "tnr": sweep.tnr.tolist(),
              "tpr_smooth": smooth_curve(sweep.tpr, settings.smoothing_window).tolist(),
              "tnr_smooth": smooth_curve(sweep.tnr, settings.smoothing_window).tolist()}
    logger.info(f"[EVAL] {session.participant_id} blocks {blocks[0]}-{blocks[-1]} tau={tau:.3f}: "
                f"TPR={metrics.tpr:.3f} TNR={metrics.tnr:.3f} EDR={metrics.edr:.3f} FAR={metrics.far:.3f}")
    return MetricsReport(
        participant_id=session.participant_id, group=str(session.profile.get("group", "")), blocks=blocks,
        tau=float(tau), tnr=metrics.tnr, tpr=metrics.tpr, edr=metrics.edr, far=metrics.far,
        far_correct=metrics.far_correct, far_error=metrics.far_error, counts=metrics.counts,
        sweep=curves, thresholds=[{k: v for k, v in h.items() if k != "curves"} for h in session.threshold_history],
        durations=duration_summary(session, blocks),
    ), outcomes


# ---------- ERP statistics ----------
@dataclass
class ErpStatistics:
    times: np.ndarray
    mean_error: np.ndarray
    mean_correct: np.ndarray
    ci_error: tuple
    ci_correct: tuple
    p_values: np.ndarray
    significant: np.ndarray
    alpha: float
    n_error: int
    n_correct: int

    @property
    def n_significant(self) -> int:
        return int(np.count_nonzero(self.significant))


def erp_statistics(error_epochs, correct_epochs, alpha: float = 0.01, times=None) -> ErpStatistics:
    """Pointwise class means, 95% CIs and Bonferroni-corrected rank-sum tests (time on the last axis)."""
    err = np.asarray(error_epochs, dtype=float)
    cor = np.asarray(correct_epochs, dtype=float)
    if err.shape[0] < 5 or cor.shape[0] < 5:
        raise InsufficientTrialsError("ERP statistics need at least 5 epochs per class")
    if err.shape[1:] != cor.shape[1:]:
        raise UndefinedMetricError(f"epoch shapes differ: {err.shape[1:]} vs {cor.shape[1:]}")

    def _ci(x):
        mean, half = x.mean(axis=0), 1.96 * stats.sem(x, axis=0)
        return mean, (mean - half, mean + half)

    mean_e, ci_e = _ci(err)
    mean_c, ci_c = _ci(cor)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.asarray(stats.mannwhitneyu(err, cor, axis=0, method="asymptotic", use_continuity=True,
                                          alternative="two-sided").pvalue, dtype=float)
    pooled = np.concatenate([err, cor], axis=0)
    degenerate = np.ptp(pooled, axis=0) == 0
    if np.any(np.isnan(p) & ~degenerate):
        logger.warning("[EVAL] NaN rank-sum p-values set to 1")
    p = np.where(degenerate | np.isnan(p), 1.0, p)

    n_points = err.shape[-1]
    significant = p < alpha / n_points
    times = np.arange(n_points) if times is None else np.asarray(times)
    return ErpStatistics(times, mean_e, mean_c, ci_e, ci_c, p, significant, alpha, err.shape[0], cor.shape[0])


def _erp_epochs(session: SessionLog, settings, blocks=None, channel: Optional[str] = None):
    channel = settings.erp_channel if channel is None else channel
    if channel not in session.channel_names:
        raise UndefinedMetricError(f"channel {channel} not recorded in session {session.participant_id}")
    ch = session.channel_names.index(channel)
    onsets = onset_map(session, blocks)
    length = settings.erp_tmax_s - settings.erp_tmin_s
    epochs = []
    for block in sorted({t.block for t in session.trials_in(blocks)}):
        filtered = filter_block(session, block, settings.filter_spec, zero_phase=True)
        marks = [(onsets[t.trial_id], t.kind, t.trial_id) for t in session.trials_in([block])]
        found, _ = extract_epochs(filtered, marks, session.sample_rate, settings.erp_tmin_s, length,
                                  session.participant_id, time_origin=session.block_start_time(block))
        epochs.extend(found)
    err = [e.data[ch] for e in epochs if e.label == ERROR]
    cor = [e.data[ch] for e in epochs if e.label == CORRECT]
    return err, cor


def _erp_times(settings) -> np.ndarray:
    n = int(round((settings.erp_tmax_s - settings.erp_tmin_s) * settings.sample_rate))
    return settings.erp_tmin_s + np.arange(n) / settings.sample_rate


def session_erp(session: SessionLog, settings, blocks=None, channel: Optional[str] = None) -> ErpStatistics:
    """Grand averages at one channel on zero-phase filtered data, aligned to error and virtual onsets."""
    err, cor = _erp_epochs(session, settings, blocks, channel)
    return erp_statistics(err, cor, settings.erp_alpha, _erp_times(settings))


def group_erp(sessions, settings, blocks=None, channel: Optional[str] = None) -> ErpStatistics:
    """Epochs of several participants pooled before averaging and testing."""
    err, cor = [], []
    for session in sessions:
        e, c = _erp_epochs(session, settings, blocks, channel)
        err.extend(e)
        cor.extend(c)
    logger.info(f"[EVAL] Pooled ERP of {len(sessions)} sessions: {len(err)} error, {len(cor)} correct epochs")
    return erp_statistics(err, cor, settings.erp_alpha, _erp_times(settings))
