import numpy as np
import pytest

from errp_detector.classifier_core import GenericModel, train_generic, train_shrinkage_lda
from errp_detector.config import load_settings
from errp_detector.detector import block_detections, replay_probabilities
from errp_detector.evaluation import onset_map
from errp_detector.features import fit_pca, project_pca, session_epochs
from errp_detector.session import CORRECT, ERROR, Block, SessionLog, Trial

TRIAL_S = 3.0
GAP_S = 1.0


def build_toy_session(seed: int = 0, n_channels: int = 2, n_blocks: int = 4, trials_per_block: int = 10,
                      n_error: int = 4, amplitude: float = 20.0, noise: float = 5.0,
                      sample_rate: float = 500.0, threshold: float = 0.7) -> SessionLog:
    """Small recording with a positive bump 0.4 s after every error onset."""
    rng = np.random.default_rng(seed)
    fs = sample_rate
    trial_n, gap_n = int(TRIAL_S * fs), int(GAP_S * fs)
    block_n = gap_n + trials_per_block * (trial_n + gap_n)
    t = np.arange(int(0.75 * fs)) / fs
    bump = amplitude * np.exp(-(t - 0.4) ** 2 / (2 * 0.05 ** 2))

    samples = noise * rng.standard_normal((n_channels, n_blocks * block_n))
    blocks, trials = [], []
    for b in range(n_blocks):
        offset = b * block_n
        blocks.append(Block(index=b + 1, start_sample=offset, stop_sample=offset + block_n, threshold=threshold))
        kinds = rng.permutation([ERROR] * n_error + [CORRECT] * (trials_per_block - n_error))
        for i, kind in enumerate(kinds):
            start_n = offset + gap_n + i * (trial_n + gap_n)
            trial = Trial(trial_id=f"b{b + 1}t{i + 1:02d}", block=b + 1, index=i + 1, kind=str(kind),
                          target="left" if i % 2 else "right", start=start_n / fs, end=(start_n + trial_n) / fs,
                          feedback="target")
            if kind == ERROR:
                onset_n = start_n + int(round(rng.uniform(0.9, 1.5) * fs))
                samples[:, onset_n:onset_n + bump.size] += bump
                trial.error_onset = onset_n / fs
                trial.error_marker = trial.error_onset - 0.225
                trial.error_distance = float((onset_n - start_n) / fs * 8.0)
                trial.feedback = "red"
            trials.append(trial)

    return SessionLog(participant_id="X01", sample_rate=fs, channel_names=[f"C{i}" for i in range(n_channels)],
                      samples=samples.astype(np.float32), blocks=blocks, trials=trials,
                      profile={"group": "control", "participant_id": "X01"})


def attach_streams(session: SessionLog, model, tau: float = 0.7) -> SessionLog:
    session.streams = replay_probabilities(session, model)
    session.detections = [d for b in sorted(session.streams) for d in block_detections(session.streams[b], tau)]
    return session


def random_model(settings, n_channels: int = 3, n_epochs: int = 40, seed: int = 0) -> GenericModel:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_epochs, n_channels * settings.window_samples))
    y = np.arange(n_epochs) % 2
    X[y == 1] += 0.3
    pca = fit_pca(X, 0.99)
    lda = train_shrinkage_lda(project_pca(pca, X), y)
    return GenericModel(pca=pca, lda=lda, threshold=0.7, filter_spec=settings.filter_spec, n_channels=n_channels,
                        window_s=settings.epoch_length_s, leap_s=settings.window_leap_s)


@pytest.fixture(scope="session")
def settings():
    return load_settings(environ={})


@pytest.fixture(scope="session")
def toy_model(settings):
    session = build_toy_session(seed=1)
    model, _ = train_generic(session_epochs(session, onset_map(session), settings), settings)
    return model


@pytest.fixture
def toy_session(toy_model):
    return attach_streams(build_toy_session(seed=2), toy_model)
