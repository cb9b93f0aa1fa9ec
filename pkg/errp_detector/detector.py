"""Asynchronous sliding-window ErrP detector.

Every ``leap`` samples the last ``window`` causally filtered samples are scored;
an ErrP detection is emitted when two consecutive windows exceed the threshold.
With ``single_event_per_run`` only the first such pair of each supra-threshold
run is reported; a sub-threshold window re-arms the rule.
"""
import logging
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .classifier_core import error_probability
from .dsp import FilterState, apply_causal, design_butterworth_bandpass
from .errors import DimensionError
from .features import ArtifactStage
from .session import Detection, ProbabilityStream, SessionLog

logger = logging.getLogger(__name__)

BATCH_WINDOWS = 128


@dataclass
class DetectionEvent:
    time: float
    probability: float
    window_index: int


@dataclass
class RuleState:
    prev_supra: bool = False
    prev_pair: bool = False


def fire_mask(supra: np.ndarray, single_event_per_run: bool = True,
              prev_supra: bool = False, prev_pair: bool = False) -> np.ndarray:
    """Two-consecutive rule along axis 0 of a boolean supra-threshold array.

    Extra axes are independent streams (thresholds, permutations) sharing the
    same starting state.
    """
    supra = np.asarray(supra, dtype=bool)
    if supra.shape[0] == 0:
        return supra.copy()
    lead = np.full((1,) + supra.shape[1:], prev_supra)
    pair = supra & np.concatenate([lead, supra[:-1]], axis=0)
    if not single_event_per_run:
        return pair
    lead = np.full((1,) + supra.shape[1:], prev_pair)
    return pair & ~np.concatenate([lead, pair[:-1]], axis=0)


def rule_events(probabilities: np.ndarray, tau: float, single_event_per_run: bool = True,
                state: Optional[RuleState] = None) -> np.ndarray:
    """Indices of windows that complete a detection; ``state`` carries across calls and is updated."""
    state = RuleState() if state is None else state
    p = np.asarray(probabilities, dtype=float)
    if p.size == 0:
        return np.zeros(0, dtype=int)
    supra = p > tau
    fires = fire_mask(supra, single_event_per_run, state.prev_supra, state.prev_pair)
    state.prev_pair = bool(supra[-1] and (supra[-2] if supra.size > 1 else state.prev_supra))
    state.prev_supra = bool(supra[-1])
    return np.flatnonzero(fires)


def iter_window_batches(filtered: np.ndarray, window_samples: int, leap_samples: int,
                        first_end: Optional[int] = None, batch: int = BATCH_WINDOWS
                        ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (window end indices, flattened windows) over a filtered (channels, n) block."""
    n = filtered.shape[1]
    first_end = window_samples if first_end is None else first_end
    ends = np.arange(first_end, n + 1, leap_samples)
    if ends.size == 0:
        return
    view = sliding_window_view(filtered, window_samples, axis=1)
    for i in range(0, ends.size, batch):
        chunk_ends = ends[i:i + batch]
        windows = view[:, chunk_ends - window_samples, :]
        flat = np.ascontiguousarray(windows.transpose(1, 0, 2)).reshape(chunk_ends.size, -1)
        yield chunk_ends, flat


class OnlineDetector:
    """Streaming detector for one recording; feed raw chunks with ``push_samples``."""

    def __init__(self, model, artifact_stage: Optional[ArtifactStage] = None,
                 single_event_per_run: bool = True, threshold: Optional[float] = None):
        self.model = model
        self.artifact_stage = artifact_stage
        self.single_event_per_run = single_event_per_run
        self.threshold = float(model.threshold if threshold is None else threshold)
        self.n_channels = model.n_channels
        self.window = model.window_samples
        self.leap = model.leap_samples
        self.sample_rate = model.filter_spec.sample_rate
        self._sos = design_butterworth_bandpass(model.filter_spec)
        self.reset()

    def reset(self, start_sample: int = 0):
        """Clear buffers, filter memory and arming; ``start_sample`` is the session index of the next sample."""
        self.start_sample = int(start_sample)
        self.filter_state = FilterState(self._sos, self.n_channels)
        self.rule = RuleState()
        self.buffer = np.zeros((self.n_channels, 0))
        self.buffer_offset = 0
        self.n_seen = 0
        self.next_end = self.window
        self.n_windows = 0
        self.events: list[DetectionEvent] = []
        return self

    @property
    def current_time(self) -> float:
        return (self.start_sample + self.n_seen) / self.sample_rate

    def push_samples(self, chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[DetectionEvent]]:
        """Filter and buffer ``chunk``; return (window end times, p_error, new events)."""
        chunk = np.asarray(chunk, dtype=float)
        if chunk.ndim != 2 or chunk.shape[0] != self.n_channels:
            raise DimensionError(f"expected ({self.n_channels}, n) chunk, got {chunk.shape}")
        filtered = apply_causal(self.filter_state, chunk)
        if self.artifact_stage is not None:
            filtered = self.artifact_stage(filtered)
        self.buffer = np.concatenate([self.buffer, filtered], axis=1)
        self.n_seen += chunk.shape[1]

        ends, probs = [], []
        for batch_ends, flat in iter_window_batches(self.buffer, self.window, self.leap,
                                                    first_end=self.next_end - self.buffer_offset):
            ends.append(batch_ends + self.buffer_offset)
            probs.append(error_probability(self.model.score_windows(flat)))
        if not ends:
            return np.zeros(0), np.zeros(0), []

        ends = np.concatenate(ends)
        probs = np.concatenate(probs)
        times = (self.start_sample + ends) / self.sample_rate
        fired = rule_events(probs, self.threshold, self.single_event_per_run, self.rule)
        new_events = [DetectionEvent(float(times[i]), float(probs[i]), self.n_windows + int(i)) for i in fired]
        self.events.extend(new_events)

        self.n_windows += ends.size
        self.next_end = int(ends[-1]) + self.leap
        keep_from = self.next_end - self.window - self.buffer_offset
        if keep_from > 0:
            self.buffer = self.buffer[:, keep_from:]
            self.buffer_offset += keep_from
        return times, probs, new_events


def replay_probabilities(session: SessionLog, model, blocks=None, artifact_stage=None,
                         single_event_per_run: bool = True) -> dict[int, ProbabilityStream]:
    """Re-run the detector offline over archived blocks, one reset per block."""
    block_ids = [b.index for b in session.blocks] if blocks is None else list(blocks)
    detector = OnlineDetector(model, artifact_stage, single_event_per_run)
    streams = {}
    for block in block_ids:
        detector.reset(session.block(block).start_sample)
        times, probs, _ = detector.push_samples(session.block_samples(block))
        streams[block] = ProbabilityStream(block=block, times=times, probabilities=probs)
        logger.debug(f"[DETECTOR] Replayed block {block}: {times.size} windows")
    return streams


def block_detections(stream: ProbabilityStream, tau: float, single_event_per_run: bool = True) -> list[Detection]:
    """Continuous-arming detections of one block's stored probability stream."""
    idx = rule_events(stream.probabilities, tau, single_event_per_run)
    return [Detection(float(stream.times[i]), float(stream.probabilities[i]), stream.block, int(i)) for i in idx]
