"""In-memory session log: the trials, blocks, detections and raw samples of one participant."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CORRECT = "correct"
ERROR = "error"

# order used to break ties between events sharing a timestamp
EVENT_ORDER = {
    "block_start": 0,
    "threshold": 1,
    "trial_start": 2,
    "error_marker": 3,
    "error_onset": 4,
    "virtual_onset": 5,
    "detection": 6,
    "feedback": 7,
    "trial_end": 8,
    "block_end": 9,
}


@dataclass
class Trial:
    trial_id: str
    block: int
    index: int
    kind: str
    target: str
    start: float
    end: float = float("nan")
    error_distance: Optional[float] = None
    error_marker: Optional[float] = None
    error_onset: Optional[float] = None
    feedback: Optional[str] = None
    corrected: bool = False
    virtual_onset: Optional[float] = None

    @property
    def is_error(self) -> bool:
        return self.kind == ERROR

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Block:
    index: int
    start_sample: int
    stop_sample: int
    threshold: float


@dataclass
class Detection:
    time: float
    probability: float
    block: int
    window_index: int


@dataclass(frozen=True)
class EventMarker:
    t: float
    kind: str
    payload: dict


@dataclass
class ProbabilityStream:
    """Per-block classifier output: one (time, p_error) pair per window."""
    block: int
    times: np.ndarray
    probabilities: np.ndarray


@dataclass
class SessionLog:
    participant_id: str
    sample_rate: float
    channel_names: list[str]
    samples: np.ndarray = field(repr=False)
    blocks: list[Block] = field(default_factory=list)
    trials: list[Trial] = field(default_factory=list)
    detections: list[Detection] = field(default_factory=list)
    streams: dict[int, ProbabilityStream] = field(default_factory=dict, repr=False)
    profile: dict = field(default_factory=dict)
    threshold_history: list[dict] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(self.samples.shape[1])

    @property
    def duration(self) -> float:
        return self.n_frames / self.sample_rate

    def block(self, index: int) -> Block:
        for b in self.blocks:
            if b.index == index:
                return b
        raise KeyError(f"block {index} not in session {self.participant_id}")

    def block_samples(self, index: int) -> np.ndarray:
        b = self.block(index)
        return self.samples[:, b.start_sample:b.stop_sample]

    def block_start_time(self, index: int) -> float:
        return self.block(index).start_sample / self.sample_rate

    def trials_in(self, blocks=None) -> list[Trial]:
        if blocks is None:
            return list(self.trials)
        wanted = set(blocks)
        return [t for t in self.trials if t.block in wanted]

    def events(self) -> list[EventMarker]:
        """Flatten the log into time-sorted event markers."""
        events = []
        for b in self.blocks:
            t0 = b.start_sample / self.sample_rate
            events.append(EventMarker(t0, "block_start", {"block": b.index, "start_sample": b.start_sample,
                                                          "stop_sample": b.stop_sample}))
            events.append(EventMarker(t0, "threshold", {"block": b.index, "tau": b.threshold}))
            events.append(EventMarker(b.stop_sample / self.sample_rate, "block_end", {"block": b.index}))
        for tr in self.trials:
            events.append(EventMarker(tr.start, "trial_start", {
                "trial_id": tr.trial_id, "block": tr.block, "index": tr.index, "kind": tr.kind,
                "target": tr.target, "error_distance": tr.error_distance}))
            if tr.error_marker is not None:
                events.append(EventMarker(tr.error_marker, "error_marker", {"trial_id": tr.trial_id}))
            if tr.error_onset is not None:
                events.append(EventMarker(tr.error_onset, "error_onset", {"trial_id": tr.trial_id}))
            if tr.virtual_onset is not None:
                events.append(EventMarker(tr.virtual_onset, "virtual_onset", {"trial_id": tr.trial_id}))
            if tr.feedback is not None:
                events.append(EventMarker(tr.end, "feedback", {"trial_id": tr.trial_id, "feedback": tr.feedback,
                                                               "corrected": tr.corrected}))
            events.append(EventMarker(tr.end, "trial_end", {"trial_id": tr.trial_id}))
        for d in self.detections:
            events.append(EventMarker(d.time, "detection", {"block": d.block, "probability": d.probability,
                                                            "window_index": d.window_index}))
        return sorted(events, key=lambda e: (e.t, EVENT_ORDER.get(e.kind, 99)))
