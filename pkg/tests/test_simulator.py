from types import SimpleNamespace

import numpy as np
import pytest

from conftest import random_model
from errp_detector.config import load_settings
from errp_detector.detector import replay_probabilities
from errp_detector.evaluation import erp_statistics
from errp_detector.montage import N_CHANNELS, channel_index
from errp_detector.session import ERROR, EVENT_ORDER
from errp_detector.simulator import (ParticipantProfile, add_templates, draw_reach_duration, errp_template, longest_run,
                                     make_cohort, make_profile, make_training_profiles, plan_block,
                                     run_closed_loop_session, simulate_block, simulate_calibration_session,
                                     synthesize_eeg)


@pytest.fixture(scope="module")
def small():
    return load_settings(environ={}, trials_per_block=10, error_trials_per_block=3, n_blocks=3, adapt_blocks=1,
                         first_eval_block=2)


def test_longest_run():
    assert longest_run([]) == 0
    assert longest_run(["a", "a", "b", "a"]) == 2
    assert longest_run(["e", "c", "e", "e", "e"], "e") == 3
    assert longest_run(["c", "c", "c", "e"], "e") == 1


def test_block_plans_respect_sequencing_limits(settings):
    rng = np.random.default_rng(0)
    for _ in range(50):
        plan = plan_block(rng, settings)
        assert len(plan.trials) == 30
        assert plan.kinds.count(ERROR) == 9
        assert longest_run(plan.kinds, ERROR) <= 2
        assert plan.targets.count("left") == plan.targets.count("right") == 15
        assert longest_run(plan.targets) <= 3
        for t in plan.trials:
            if t.kind == ERROR:
                assert 6.0 <= t.error_distance <= 15.0
            else:
                assert t.error_distance is None


def test_reach_durations_are_truncated(settings):
    rng = np.random.default_rng(1)
    draws = np.array([draw_reach_duration(rng, settings) for _ in range(2000)])
    assert draws.min() >= 1.5 and draws.max() <= 6.0
    assert draws.mean() == pytest.approx(2.05, abs=0.02)


def test_cohort_composition(settings):
    cohort = make_cohort(settings, seed=3)
    assert [p.participant_id for p in cohort][:2] == ["P01", "P02"]
    groups = [p.group for p in cohort]
    assert groups.count("control") == 8 and groups.count("sci") == 4 and groups.count("null") == 4
    assert {p.errp_amplitude_scale for p in cohort if p.group == "sci"} == {0.45}
    assert {p.errp_amplitude_scale for p in cohort if p.group == "null"} == {0.0}
    assert len({p.seed for p in cohort}) == len(cohort)
    assert make_cohort(settings, seed=3) == cohort


def test_training_profiles_are_jittered(settings):
    profiles = make_training_profiles(settings, seed=4)
    assert len(profiles) == 15
    assert all(0.8 <= p.errp_amplitude_scale <= 1.2 for p in profiles)
    assert len({p.neg_latency_s for p in profiles}) > 1


def test_profile_rejects_latency_outside_template():
    with pytest.raises(ValueError):
        ParticipantProfile(participant_id="bad", neg_latency_s=0.9)


def test_template_peaks_at_fcz_after_onset(settings):
    profile = make_profile("P01", "control", 1.0, settings, seed=0)
    template = errp_template(profile, settings)
    assert template.shape == (N_CHANNELS, 375)
    ch, t = np.unravel_index(np.argmax(template), template.shape)
    assert ch == channel_index("FCz")
    assert t / 500.0 == pytest.approx(0.334, abs=0.004)
    assert np.argmin(template[ch]) / 500.0 == pytest.approx(0.176, abs=0.004)
    assert not errp_template(make_profile("P13", "null", 0.0, settings, 0), settings).any()


def test_synthesize_adds_template_at_onsets(settings):
    profile = make_profile("P01", "control", 1.0, settings, seed=0).model_copy(update={"noise_rms_uv": 0.0})
    eeg = synthesize_eeg(profile, [1.0], 2000, settings)
    np.testing.assert_allclose(eeg[:, 500:875], errp_template(profile, settings))
    assert not eeg[:, :500].any()


def test_templates_split_across_segments_match_one_pass():
    template = np.arange(1.0, 21.0).reshape(2, 10)
    whole = np.zeros((2, 40))
    add_templates(whole, template, [3, 15, 35])
    pieces = [np.zeros((2, 12)), np.zeros((2, 28))]
    add_templates(pieces[0], template, [3, 15, 35], 0)
    add_templates(pieces[1], template, [3, 15, 35], 12)
    np.testing.assert_array_equal(np.concatenate(pieces, axis=1), whole)
    np.testing.assert_array_equal(whole[:, 15:25], template)
    np.testing.assert_array_equal(whole[:, 35:], template[:, :5])


def test_calibration_session_timing(small):
    profile = make_profile("T01", "training", 1.0, small, seed=5)
    session = simulate_calibration_session(profile, small, n_blocks=2)
    assert session.samples.shape[0] == N_CHANNELS
    assert session.samples.dtype == np.float32
    assert len(session.trials) == 20
    assert all(np.isnan(b.threshold) for b in session.blocks)
    assert session.blocks[1].start_sample == session.blocks[0].stop_sample
    for trial in session.trials:
        if trial.is_error:
            assert trial.error_onset - trial.error_marker == pytest.approx(0.225)
            assert trial.error_onset - trial.start == pytest.approx(trial.error_distance / 8.0, abs=1 / 500)
            assert trial.duration == pytest.approx(6.0)
            assert trial.feedback == "red" and not trial.corrected
        else:
            assert 1.5 - 1e-3 <= trial.duration <= 6.0 + 1e-3
    assert session.detections == [] and session.streams == {}


def test_calibration_is_reproducible(small):
    profile = make_profile("T02", "training", 1.0, small, seed=6)
    a = simulate_calibration_session(profile, small, n_blocks=1)
    b = simulate_calibration_session(profile, small, n_blocks=1)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.trials == b.trials


@pytest.fixture(scope="module")
def closed_loop(small):
    model = random_model(small, n_channels=N_CHANNELS, n_epochs=30)
    profile = make_profile("P01", "control", 1.0, small, seed=7)
    return model, run_closed_loop_session(profile, model, small)


def test_closed_loop_stream_equals_offline_replay(closed_loop):
    model, session = closed_loop
    replayed = replay_probabilities(session, model)
    for block, stream in session.streams.items():
        np.testing.assert_array_equal(replayed[block].times, stream.times)
        np.testing.assert_array_equal(replayed[block].probabilities, stream.probabilities)


def test_closed_loop_threshold_schedule(closed_loop, small):
    _, session = closed_loop
    assert session.blocks[0].threshold == small.tau_initial
    assert len(session.threshold_history) == small.adapt_blocks + 1
    adapted = session.threshold_history[-1]
    assert adapted["block"] == 2 and adapted["tau"] in small.tau_grid
    assert session.blocks[1].threshold == session.blocks[2].threshold == adapted["tau"]


def test_closed_loop_trials_and_events(closed_loop):
    _, session = closed_loop
    for trial in session.trials:
        if trial.corrected:
            assert trial.feedback in ("green", "red")
            assert trial.duration <= 12.0 + 1e-9
    stream_times = {b: set(s.times.tolist()) for b, s in session.streams.items()}
    assert all(d.time in stream_times[d.block] for d in session.detections)
    events = session.events()
    keys = [(e.t, EVENT_ORDER[e.kind]) for e in events]
    assert keys == sorted(keys)


def _fcz_epochs(eeg, onsets, settings, tmin=-0.1, tmax=0.75):
    fs = settings.sample_rate
    lo, hi = int(round(tmin * fs)), int(round(tmax * fs))
    fcz = eeg[channel_index("FCz")]
    return np.array([fcz[int(round(o * fs)) + lo:int(round(o * fs)) + hi] for o in onsets])


def test_zero_amplitude_participant_has_no_significant_erp(settings):
    profile = make_profile("P13", "null", 0.0, settings, seed=21)
    onsets = 1.0 + np.arange(80) * 1.0
    eeg = synthesize_eeg(profile, onsets, int(82 * settings.sample_rate), settings, np.random.default_rng(21))
    epochs = _fcz_epochs(eeg, onsets, settings)
    erp = erp_statistics(epochs[::2], epochs[1::2], alpha=0.01)
    assert erp.n_significant == 0


def test_control_grand_average_recovers_the_negative_peak(settings):
    profile = make_profile("P01", "control", 1.0, settings, seed=22)
    onsets = 0.5 + np.arange(100) * 1.0
    n_samples = int(101 * settings.sample_rate)
    epochs = np.concatenate([_fcz_epochs(synthesize_eeg(profile, onsets, n_samples, settings,
                                                        np.random.default_rng(100 + i)), onsets, settings)
                             for i in range(8)])
    baseline = int(round(0.1 * settings.sample_rate))
    average = (epochs - epochs[:, :baseline].mean(axis=1, keepdims=True)).mean(axis=0)
    times = (np.arange(average.size) - baseline) / settings.sample_rate
    window = (times >= 0.1) & (times <= 0.3)
    peak = int(np.argmin(np.where(window, average, np.inf)))
    assert -6.325 <= average[peak] <= -4.675
    assert times[peak] == pytest.approx(0.176, abs=0.02)


class _EveryChunkDetector:
    """Stands in for the online detector: one detection at the end of every pushed chunk."""

    def __init__(self, fs):
        self.fs = fs
        self.n = 0

    def reset(self, offset):
        self.n = offset

    def push_samples(self, seg):
        self.n += seg.shape[1]
        t = self.n / self.fs
        return np.array([t]), np.array([0.9]), [SimpleNamespace(time=t, probability=0.9, window_index=self.n)]


@pytest.mark.parametrize("reach", [2.0, 12.0])
def test_detected_error_trial_resumes_the_reach(monkeypatch, reach):
    monkeypatch.setattr("errp_detector.simulator.draw_reach_duration", lambda rng, s: reach)
    local = load_settings(environ={}, trials_per_block=6, error_trials_per_block=2)
    rng = np.random.default_rng(23)
    plan = plan_block(rng, local)
    profile = make_profile("P01", "control", 1.0, local, seed=23)
    rec, trials = simulate_block(1, 0, plan, profile, local, rng, detector=_EveryChunkDetector(local.sample_rate))

    errors = [t for t in trials if t.is_error]
    assert len(errors) == 2
    for trial in errors:
        assert trial.corrected
        hit = min(d.time for d in rec.detections if d.time > trial.error_onset)
        latency = trial.error_onset - trial.start
        expected = hit - trial.start + local.resume_delay_s + max(0.0, reach - latency)
        if expected <= local.trial_timeout_s + local.extension_s:
            assert trial.feedback == "green"
            assert trial.duration == pytest.approx(expected, abs=1 / local.sample_rate)
        else:
            assert trial.feedback == "red"
            assert trial.duration == pytest.approx(12.0, abs=1 / local.sample_rate)
    if reach == 2.0:
        assert all(t.feedback == "green" for t in errors)
    else:
        assert all(t.feedback == "red" for t in errors)
