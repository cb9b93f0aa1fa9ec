"""Closed-loop synthetic experiment: block plans, trial timing, synthetic EEG and detector feedback."""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import signal, stats

from .detector import OnlineDetector
from .errors import SimulationError
from .evaluation import adapt_threshold, onset_map
from .features import session_epochs
from .montage import CHANNEL_NAMES, N_CHANNELS, spatial_weights
from .session import CORRECT, ERROR, Block, Detection, ProbabilityStream, SessionLog, Trial

logger = logging.getLogger(__name__)

MAX_PLAN_ATTEMPTS = 1_000_000
STEP_S = 0.1
TEMPLATE_SPAN_S = 0.75

# 3rd-order pinking filter, close to 1/f above a few tenths of a hertz
_PINK_B = np.array([0.049922035, -0.095993537, 0.050612699, -0.004408786])
_PINK_A = np.array([1.0, -2.494956002, 2.017265875, -0.522189400])
_PINK_GAIN = float(np.sqrt(np.sum(signal.lfilter(_PINK_B, _PINK_A, np.eye(1, 20000)[0]) ** 2)))


# ---------- Participants ----------
class ParticipantProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    participant_id: str
    group: str = "control"
    errp_amplitude_scale: float = Field(1.0, ge=0.0)
    neg_peak_uv: float = -5.5
    neg_latency_s: float = 0.176
    pos_peak_uv: float = 5.8
    pos_latency_s: float = 0.334
    lobe_sd_s: float = Field(0.040, gt=0.0)
    noise_rms_uv: float = Field(8.0, ge=0.0)
    seed: int = 0

    @field_validator("neg_latency_s", "pos_latency_s")
    @classmethod
    def _latency_in_span(cls, v):
        if not 0.0 < v < TEMPLATE_SPAN_S:
            raise ValueError(f"latency must lie in (0, {TEMPLATE_SPAN_S}) s")
        return v


def make_profile(participant_id: str, group: str, scale: float, settings, seed: int) -> ParticipantProfile:
    neg_latency, pos_latency = settings.neg_latency_s, settings.pos_latency_s
    if group == "sci":
        neg_latency, pos_latency = 0.154, 0.332
    return ParticipantProfile(participant_id=participant_id, group=group, errp_amplitude_scale=scale,
                              neg_peak_uv=settings.neg_peak_uv, neg_latency_s=neg_latency,
                              pos_peak_uv=settings.pos_peak_uv, pos_latency_s=pos_latency,
                              lobe_sd_s=settings.lobe_sd_s, noise_rms_uv=settings.noise_rms_uv, seed=seed)


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_cohort(settings, seed: int) -> list[ParticipantProfile]:
    """Evaluation cohort: control-like (scale 1), SCI-like and zero-amplitude participants."""
    groups = ([("control", 1.0)] * settings.n_control + [("sci", settings.sci_amplitude_scale)] * settings.n_sci
              + [("null", 0.0)] * settings.n_null)
    seeds = _child_seeds(seed, len(groups))
    return [make_profile(f"P{i + 1:02d}", group, scale, settings, s)
            for i, ((group, scale), s) in enumerate(zip(groups, seeds))]


def make_training_profiles(settings, seed: int) -> list[ParticipantProfile]:
    """Donor population for the generic classifier, with per-participant jitter."""
    rng = np.random.default_rng(seed)
    seeds = _child_seeds(seed + 1, settings.n_training_participants)
    profiles = []
    for i, s in enumerate(seeds):
        base = make_profile(f"T{i + 1:02d}", "training", float(rng.uniform(0.8, 1.2)), settings, s)
        shift = float(np.clip(rng.normal(0.0, 0.010), -0.03, 0.03))
        profiles.append(base.model_copy(update={
            "neg_latency_s": base.neg_latency_s + shift,
            "pos_latency_s": base.pos_latency_s + shift,
            "noise_rms_uv": base.noise_rms_uv * float(rng.uniform(0.9, 1.1)),
        }))
    return profiles


# ---------- Block plans ----------
@dataclass
class TrialPlan:
    kind: str
    target: str
    error_distance: Optional[float] = None


@dataclass
class BlockPlan:
    trials: list[TrialPlan] = field(default_factory=list)

    @property
    def kinds(self) -> list[str]:
        return [t.kind for t in self.trials]

    @property
    def targets(self) -> list[str]:
        return [t.target for t in self.trials]


def longest_run(values, value=None) -> int:
    best = run = 0
    prev = object()
    for v in values:
        run = run + 1 if v == prev else 1
        prev = v
        if value is None or v == value:
            best = max(best, run)
    return best


def plan_block(rng: np.random.Generator, settings) -> BlockPlan:
    """Shuffle error/correct kinds and left/right targets until the sequencing limits hold."""
    n = settings.trials_per_block
    kinds = np.array([ERROR] * settings.error_trials_per_block + [CORRECT] * (n - settings.error_trials_per_block))
    targets = np.array(["left"] * (n // 2) + ["right"] * (n // 2))

    attempts = 0
    while True:
        attempts += 1
        kinds = rng.permutation(kinds)
        if longest_run(kinds, ERROR) <= settings.max_consecutive_errors:
            break
        if attempts >= MAX_PLAN_ATTEMPTS:
            raise SimulationError("could not satisfy the error-trial sequencing limit")
    while True:
        attempts += 1
        targets = rng.permutation(targets)
        if longest_run(targets) <= settings.max_consecutive_targets:
            break
        if attempts >= MAX_PLAN_ATTEMPTS:
            raise SimulationError("could not satisfy the target sequencing limit")

    trials = []
    for kind, target in zip(kinds, targets):
        distance = None
        if kind == ERROR:
            distance = float(rng.uniform(settings.error_distance_min_cm, settings.error_distance_max_cm))
        trials.append(TrialPlan(kind=str(kind), target=str(target), error_distance=distance))
    return BlockPlan(trials)


def draw_reach_duration(rng: np.random.Generator, settings) -> float:
    """Time to reach the target on an undisturbed trial (truncated Gaussian)."""
    mean, sd = settings.correct_duration_mean_s, settings.correct_duration_sd_s
    a = (settings.correct_duration_min_s - mean) / sd
    b = (settings.correct_duration_max_s - mean) / sd
    return float(stats.truncnorm.rvs(a, b, loc=mean, scale=sd, random_state=rng))


# ---------- Synthetic EEG ----------
class PinkNoiseSource:
    """Streaming 1/f background: independent per-channel noise plus a common component."""

    def __init__(self, n_channels: int, rms_uv: float, common_fraction: float, rng: np.random.Generator,
                 burn_in: int = 2500):
        self.n_channels = n_channels
        self.rms_uv = rms_uv
        self.common_fraction = common_fraction
        self.rng = rng
        self.zi = np.zeros((n_channels + 1, len(_PINK_A) - 1))
        if burn_in:
            self.generate(burn_in)

    def generate(self, n: int) -> np.ndarray:
        white = self.rng.standard_normal((self.n_channels + 1, n))
        pink, self.zi = signal.lfilter(_PINK_B, _PINK_A, white, axis=1, zi=self.zi)
        pink /= _PINK_GAIN
        mixed = (np.sqrt(1.0 - self.common_fraction) * pink[:-1]
                 + np.sqrt(self.common_fraction) * pink[-1:])
        return self.rms_uv * mixed


def errp_template(profile: ParticipantProfile, settings) -> np.ndarray:
    """(channels, samples) biphasic waveform starting at the error onset."""
    fs = settings.sample_rate
    t = np.arange(int(round(TEMPLATE_SPAN_S * fs))) / fs
    sd2 = 2.0 * profile.lobe_sd_s ** 2
    wave = (profile.neg_peak_uv * np.exp(-(t - profile.neg_latency_s) ** 2 / sd2)
            + profile.pos_peak_uv * np.exp(-(t - profile.pos_latency_s) ** 2 / sd2))
    weights = spatial_weights(settings.erp_channel, settings.space_constant)
    return profile.errp_amplitude_scale * weights[:, None] * wave[None, :]


def add_templates(segment: np.ndarray, template: np.ndarray, starts, segment_start: int = 0) -> None:
    """Add ``template`` in place wherever a copy starting at one of ``starts`` overlaps the segment."""
    span = template.shape[1]
    segment_stop = segment_start + segment.shape[1]
    for s0 in starts:
        lo, hi = max(s0, segment_start), min(s0 + span, segment_stop)
        if lo < hi:
            segment[:, lo - segment_start:hi - segment_start] += template[:, lo - s0:hi - s0]


def synthesize_eeg(profile: ParticipantProfile, onsets, n_samples: int, settings,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Background noise of ``n_samples`` frames with the ErrP template added at each onset (seconds)."""
    rng = np.random.default_rng(profile.seed) if rng is None else rng
    noise = PinkNoiseSource(N_CHANNELS, profile.noise_rms_uv, settings.common_noise_fraction, rng)
    eeg = noise.generate(n_samples)
    starts = [int(round(onset * settings.sample_rate)) for onset in onsets]
    add_templates(eeg, errp_template(profile, settings), [s for s in starts if 0 <= s < n_samples])
    return eeg


# ---------- Block recording ----------
class _BlockRecorder:
    """Generates one block sample by sample, feeding the detector as time advances."""

    def __init__(self, block: int, offset: int, profile, settings, rng, detector: Optional[OnlineDetector]):
        self.block = block
        self.offset = offset
        self.fs = settings.sample_rate
        self.noise = PinkNoiseSource(N_CHANNELS, profile.noise_rms_uv, settings.common_noise_fraction, rng)
        self.template = errp_template(profile, settings)
        self.detector = detector
        self.n = 0
        self.pending: list[int] = []
        self.chunks: list[np.ndarray] = []
        self.times: list[np.ndarray] = []
        self.probs: list[np.ndarray] = []
        self.detections: list[Detection] = []
        if detector is not None:
            detector.reset(offset)

    def time_of(self, local_sample: int) -> float:
        return (self.offset + local_sample) / self.fs

    def add_template(self, local_sample: int):
        self.pending.append(local_sample)

    def advance(self, to_sample: int) -> list[Detection]:
        n = to_sample - self.n
        if n <= 0:
            return []
        seg = self.noise.generate(n)
        add_templates(seg, self.template, self.pending, self.n)
        self.pending = [s0 for s0 in self.pending if s0 + self.template.shape[1] > to_sample]
        seg = seg.astype(np.float32)
        self.chunks.append(seg)
        self.n = to_sample

        if self.detector is None:
            return []
        times, probs, events = self.detector.push_samples(seg)
        self.times.append(times)
        self.probs.append(probs)
        found = [Detection(e.time, e.probability, self.block, e.window_index) for e in events]
        self.detections.extend(found)
        return found

    def stream(self) -> ProbabilityStream:
        times = np.concatenate(self.times) if self.times else np.zeros(0)
        probs = np.concatenate(self.probs) if self.probs else np.zeros(0)
        return ProbabilityStream(block=self.block, times=times, probabilities=probs)


def _simulate_trial(rec: _BlockRecorder, plan: TrialPlan, trial_id: str, index: int, rng, settings) -> Trial:
    fs = settings.sample_rate
    start = rec.n
    trial = Trial(trial_id=trial_id, block=rec.block, index=index, kind=plan.kind, target=plan.target,
                  start=rec.time_of(start), error_distance=plan.error_distance)
    reach = draw_reach_duration(rng, settings)

    if plan.kind == CORRECT:
        end = start + int(round(reach * fs))
        rec.advance(end)
        trial.end, trial.feedback = rec.time_of(end), "target"
        return trial

    latency = plan.error_distance / settings.robot_speed_cm_s
    onset = start + int(round(latency * fs))
    trial.error_onset = rec.time_of(onset)
    trial.error_marker = trial.error_onset - settings.marker_delay_s
    rec.add_template(onset)

    timeout = start + int(round(settings.trial_timeout_s * fs))
    step = int(round(STEP_S * fs))
    hit = None
    while rec.n < timeout and hit is None:
        found = rec.advance(min(rec.n + step, timeout))
        after = [d for d in found if d.time > trial.error_onset]
        if after:
            hit = after[0]

    if hit is None:
        trial.end, trial.feedback = rec.time_of(timeout), "red"
        return trial

    # the participant resumes control and finishes the remaining reach
    trial.corrected = True
    cap = start + int(round((settings.trial_timeout_s + settings.extension_s) * fs))
    finish = hit.time - trial.start + settings.resume_delay_s + max(0.0, reach - latency)
    end = start + int(round(finish * fs))
    if end <= cap:
        trial.feedback = "green"
    else:
        end, trial.feedback = cap, "red"
    rec.advance(max(end, rec.n))
    trial.end = rec.time_of(rec.n)
    return trial


def simulate_block(block: int, offset: int, plan: BlockPlan, profile, settings, rng,
                   detector: Optional[OnlineDetector] = None) -> tuple[_BlockRecorder, list[Trial]]:
    gap = int(round(settings.inter_trial_gap_s * settings.sample_rate))
    rec = _BlockRecorder(block, offset, profile, settings, rng, detector)
    rec.advance(gap)
    trials = []
    for i, trial_plan in enumerate(plan.trials, start=1):
        trials.append(_simulate_trial(rec, trial_plan, f"b{block}t{i:02d}", i, rng, settings))
        rec.advance(rec.n + gap)
    return rec, trials


def _new_session(profile: ParticipantProfile, settings) -> SessionLog:
    return SessionLog(participant_id=profile.participant_id, sample_rate=settings.sample_rate,
                      channel_names=list(CHANNEL_NAMES), samples=np.zeros((N_CHANNELS, 0), dtype=np.float32),
                      profile=profile.model_dump())


def _append_block(session: SessionLog, rec: _BlockRecorder, trials: list[Trial], tau: float, chunks: list):
    session.blocks.append(Block(index=rec.block, start_sample=rec.offset, stop_sample=rec.offset + rec.n,
                                threshold=tau))
    session.trials.extend(trials)
    session.detections.extend(rec.detections)
    if rec.detector is not None:
        session.streams[rec.block] = rec.stream()
    chunks.extend(rec.chunks)


def simulate_calibration_session(profile: ParticipantProfile, settings, n_blocks: Optional[int] = None) -> SessionLog:
    """Open-loop recording without detector feedback; error trials run into the timeout."""
    rng = np.random.default_rng(profile.seed)
    n_blocks = settings.training_blocks if n_blocks is None else n_blocks
    session = _new_session(profile, settings)
    chunks, offset = [], 0
    for block in range(1, n_blocks + 1):
        rec, trials = simulate_block(block, offset, plan_block(rng, settings), profile, settings, rng)
        _append_block(session, rec, trials, float("nan"), chunks)
        offset += rec.n
    session.samples = np.concatenate(chunks, axis=1)
    logger.info(f"[SIM] Calibration session {profile.participant_id}: {n_blocks} blocks, "
                f"{session.duration:.1f} s")
    return session


def run_closed_loop_session(profile: ParticipantProfile, model, settings, artifact_stage=None) -> SessionLog:
    """Full schedule: tau0 in block 1, re-optimized after each adaptation block, then fixed."""
    rng = np.random.default_rng(profile.seed)
    detector = OnlineDetector(model, artifact_stage, settings.single_event_per_run)
    session = _new_session(profile, settings)
    tau = settings.tau_initial
    session.threshold_history.append({"block": 1, "tau": tau, "source": "initial"})
    chunks, offset = [], 0

    for block in range(1, settings.n_blocks + 1):
        detector.threshold = tau
        rec, trials = simulate_block(block, offset, plan_block(rng, settings), profile, settings, rng, detector)
        _append_block(session, rec, trials, tau, chunks)
        offset += rec.n
        n_corrected = sum(t.corrected for t in trials)
        logger.info(f"[SIM] {profile.participant_id} block {block}: tau={tau:.3f}, "
                    f"{len(rec.detections)} detections, {n_corrected} corrected error trials")

        if block <= settings.adapt_blocks and block < settings.n_blocks:
            selection = adapt_threshold(session, settings, blocks=range(1, block + 1))
            tau = selection.tau
            session.threshold_history.append({"block": block + 1, "tau": tau, "source": f"after block {block}",
                                              "curves": selection.curves()})

    session.samples = np.concatenate(chunks, axis=1)
    return session


def run_cohort(profiles, model, settings) -> list[SessionLog]:
    return Parallel(n_jobs=settings.n_jobs)(
        delayed(run_closed_loop_session)(p, model, settings) for p in profiles)


# ---------- Training corpus ----------
def _calibration_epochs(profile: ParticipantProfile, settings):
    session = simulate_calibration_session(profile, settings)
    return session_epochs(session, onset_map(session), settings)


def training_corpus(settings, seed: int, profiles=None) -> list:
    """Epochs of every donor participant, aligned to error and virtual onsets."""
    profiles = make_training_profiles(settings, seed) if profiles is None else profiles
    per_participant = Parallel(n_jobs=settings.n_jobs)(
        delayed(_calibration_epochs)(p, settings) for p in profiles)
    epochs = [e for group in per_participant for e in group]
    logger.info(f"[SIM] Training corpus: {len(epochs)} epochs from {len(profiles)} participants")
    return epochs
