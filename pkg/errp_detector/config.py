import logging
import os
from pathlib import Path
from typing import Literal

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .dsp import FilterSpec
from .errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "ERRP_"


# ---------- Settings ----------
class Settings(BaseModel):
    """Every tunable constant of the pipeline, simulator and evaluation.

    Values come from the built-in defaults, optionally overridden by a flat
    ``KEY=VALUE`` file and then by ``ERRP_*`` environment variables.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # acquisition / filtering
    sample_rate: float = 500.0
    low_cut: float = 1.0
    high_cut: float = 10.0
    filter_order: int = 4

    # epochs and sliding windows
    epoch_offset_s: float = 0.300
    epoch_length_s: float = 0.450
    window_leap_s: float = 0.018

    # generic classifier
    pca_variance: float = 0.99
    outlier_fraction: float = 0.01
    shrinkage: float | None = None

    # detection and thresholds
    tau_initial: float = 0.7
    tau_step: float = 0.025
    smoothing_window: int = 7
    single_event_per_run: bool = True

    # trial-based metrics
    tp_window_s: float = 1.5
    far_interval_s: float = 1.0

    # experiment protocol
    robot_speed_cm_s: float = 8.0
    error_distance_min_cm: float = 6.0
    error_distance_max_cm: float = 15.0
    marker_delay_s: float = 0.225
    trial_timeout_s: float = 6.0
    extension_s: float = 6.0
    resume_delay_s: float = 0.5
    inter_trial_gap_s: float = 1.5
    correct_duration_mean_s: float = 2.05
    correct_duration_sd_s: float = 0.13
    correct_duration_min_s: float = 1.5
    correct_duration_max_s: float = 6.0
    trials_per_block: int = 30
    error_trials_per_block: int = 9
    max_consecutive_errors: int = 2
    max_consecutive_targets: int = 3
    n_blocks: int = 8
    adapt_blocks: int = 3
    first_eval_block: int = 4

    # synthetic EEG
    noise_rms_uv: float = 8.0
    common_noise_fraction: float = 0.3
    neg_peak_uv: float = -5.5
    neg_latency_s: float = 0.176
    pos_peak_uv: float = 5.8
    pos_latency_s: float = 0.334
    lobe_sd_s: float = 0.040
    space_constant: float = 2.0
    sci_amplitude_scale: float = 0.45

    # cohorts
    n_training_participants: int = 15
    training_blocks: int = 8
    n_control: int = 8
    n_sci: int = 4
    n_null: int = 4

    # statistics
    n_perm: int = 500
    cv_reps: int = 10
    cv_folds: int = 5
    chance_refit_pca: bool = False
    chance_threshold: Literal["final", "retuned"] = "final"
    erp_alpha: float = 0.01
    erp_channel: str = "FCz"
    erp_tmin_s: float = -0.2
    erp_tmax_s: float = 0.8

    n_jobs: int = 1

    @model_validator(mode="after")
    def _check_ranges(self):
        if not 0 < self.low_cut < self.high_cut < self.sample_rate / 2:
            raise ValueError("expected 0 < low_cut < high_cut < sample_rate/2")
        if not 0 < self.pca_variance <= 1:
            raise ValueError("pca_variance must lie in (0, 1]")
        if not 0 <= self.outlier_fraction < 0.5:
            raise ValueError("outlier_fraction must lie in [0, 0.5)")
        if not 0 <= self.tau_initial <= 1:
            raise ValueError("tau_initial must lie in [0, 1]")
        if self.error_trials_per_block > self.trials_per_block:
            raise ValueError("more error trials than trials per block")
        if self.trials_per_block % 2:
            raise ValueError("trials_per_block must be even (targets are split evenly)")
        if self.first_eval_block > self.n_blocks:
            raise ValueError("first_eval_block beyond n_blocks")
        if self.n_perm < 1 or self.cv_reps < 1:
            raise ValueError("n_perm and cv_reps must be at least 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        return self

    # ---------- derived values ----------
    @property
    def filter_spec(self) -> FilterSpec:
        return FilterSpec(self.low_cut, self.high_cut, self.filter_order, self.sample_rate)

    @property
    def window_samples(self) -> int:
        return int(round(self.epoch_length_s * self.sample_rate))

    @property
    def leap_samples(self) -> int:
        return int(round(self.window_leap_s * self.sample_rate))

    @property
    def tau_grid(self) -> np.ndarray:
        steps = int(round(1.0 / self.tau_step))
        return np.round(np.arange(steps + 1) * self.tau_step, 10)

    @property
    def eval_blocks(self) -> list[int]:
        return list(range(self.first_eval_block, self.n_blocks + 1))


def _coerce_keys(raw: dict, source: str) -> dict:
    known = set(Settings.model_fields)
    values = {}
    for key, value in raw.items():
        name = key.lower()
        if name not in known:
            raise ConfigError(f"unknown configuration key {key!r} in {source}")
        if value is None or value == "":
            continue
        values[name] = None if value.lower() == "none" else value
    return values


def load_settings(path: str | os.PathLike | None = None, environ=None, **overrides) -> Settings:
    """Build Settings from defaults < config file < ``ERRP_*`` environment < keyword overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(_coerce_keys(dotenv_values(path), str(path)))
        logger.info(f"[CLI] Loaded configuration from {path}")

    environ = os.environ if environ is None else environ
    env_values = {k[len(ENV_PREFIX):]: v for k, v in environ.items() if k.startswith(ENV_PREFIX)}
    if env_values:
        values.update(_coerce_keys(env_values, "environment"))

    values.update(overrides)
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
