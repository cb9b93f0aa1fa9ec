"""Butterworth bandpass design plus causal (streaming) and zero-phase application.

A bandpass of order N is an order-N highpass at ``low_cut`` cascaded with an
order-N lowpass at ``high_cut``, i.e. 2N poles in total; "order 4" therefore
yields an 8-pole filter made of four second-order sections.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import DimensionError, FilterDesignError, SignalLengthError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterSpec:
    low_cut: float
    high_cut: float
    order: int
    sample_rate: float

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2.0

    def to_dict(self) -> dict:
        return {"low_cut": self.low_cut, "high_cut": self.high_cut,
                "order": self.order, "sample_rate": self.sample_rate}


def design_butterworth_bandpass(spec: FilterSpec) -> np.ndarray:
    """Return the (n_sections, 6) SOS cascade: highpass sections first, then lowpass."""
    if int(spec.order) != spec.order or spec.order < 1:
        raise FilterDesignError(f"filter order must be a positive integer, got {spec.order}")
    if not 0 < spec.low_cut < spec.high_cut < spec.nyquist:
        raise FilterDesignError(
            f"need 0 < low_cut < high_cut < Nyquist, got {spec.low_cut}, {spec.high_cut}, {spec.nyquist}")

    # butter() pre-warps the cutoffs before the bilinear transform when fs is given
    highpass = signal.butter(int(spec.order), spec.low_cut, btype="highpass", fs=spec.sample_rate, output="sos")
    lowpass = signal.butter(int(spec.order), spec.high_cut, btype="lowpass", fs=spec.sample_rate, output="sos")
    sos = np.vstack([highpass, lowpass])
    if not np.all(np.isfinite(sos)):
        raise FilterDesignError("non-finite filter coefficients")
    return sos


def magnitude_response(sos: np.ndarray, freqs, sample_rate: float) -> np.ndarray:
    _, h = signal.sosfreqz(sos, worN=np.atleast_1d(np.asarray(freqs, dtype=float)), fs=sample_rate)
    return np.abs(h)


def edge_gains(sos: np.ndarray) -> tuple[float, float]:
    """Gains at DC (z = 1) and Nyquist (z = -1), evaluated in real arithmetic."""
    b, a = sos[:, :3], sos[:, 3:]
    dc = np.prod((b[:, 0] + b[:, 1] + b[:, 2]) / (a[:, 0] + a[:, 1] + a[:, 2]))
    nyquist = np.prod((b[:, 0] - b[:, 1] + b[:, 2]) / (a[:, 0] - a[:, 1] + a[:, 2]))
    return float(abs(dc)), float(abs(nyquist))


class FilterState:
    """Per-channel delay lines of an SOS cascade; shape (n_sections, n_channels, 2)."""

    def __init__(self, sos: np.ndarray, n_channels: int):
        self.sos = np.asarray(sos, dtype=float)
        self.n_channels = int(n_channels)
        self.zi = np.zeros((self.sos.shape[0], self.n_channels, 2))

    def reset(self):
        self.zi[...] = 0.0


def apply_causal(state: FilterState, chunk: np.ndarray) -> np.ndarray:
    """Filter a (channels, samples) chunk, carrying state so chunking never changes the output."""
    chunk = np.asarray(chunk, dtype=float)
    if chunk.ndim != 2 or chunk.shape[0] != state.n_channels:
        raise DimensionError(f"expected ({state.n_channels}, n) chunk, got {chunk.shape}")
    if chunk.shape[1] == 0:
        return chunk.copy()
    out, state.zi = signal.sosfilt(state.sos, chunk, axis=-1, zi=state.zi)
    return out


def filter_causal(data: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """One-shot causal filtering from a zero state."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    state = FilterState(design_butterworth_bandpass(spec), data.shape[0])
    return apply_causal(state, data)


def apply_zero_phase(data: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Zero-phase filtering along the last axis.

    Averages the forward-backward and the backward-forward passes, so the
    operator commutes exactly with time reversal. Each pass reflect-pads by
    3 x order samples.
    """
    data = np.asarray(data, dtype=float)
    padlen = 3 * int(spec.order)
    if data.shape[-1] <= padlen:
        raise SignalLengthError(f"signal of {data.shape[-1]} samples too short for padding of {padlen}")
    sos = design_butterworth_bandpass(spec)
    forward = signal.sosfiltfilt(sos, data, axis=-1, padtype="even", padlen=padlen)
    backward = signal.sosfiltfilt(sos, data[..., ::-1], axis=-1, padtype="even", padlen=padlen)[..., ::-1]
    return 0.5 * (forward + backward)
