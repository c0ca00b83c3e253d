"""Tests for filtering, resampling, epoching and standardization."""

import logging

import numpy as np
import pytest
from scipy import signal

from conftest import make_trial
from rest_adapt.config import PreprocConfig
from rest_adapt.errors import ConfigError, EpochError, SignalLengthError
from rest_adapt.kinds import TrialKind
from rest_adapt.preprocess import bandpass, epoch, preprocess_all, preprocess_trial, resample, standardize


def _sines(freqs: list[float], fs: float = 250.0, seconds: float = 6.0) -> np.ndarray:
    t = np.arange(int(fs * seconds)) / fs
    return np.stack([np.sin(2 * np.pi * f * t) for f in freqs])


def _band_power(x: np.ndarray, fs: float, lo: float, hi: float) -> float:
    freqs, psd = signal.periodogram(x, fs=fs)
    return float(psd[(freqs >= lo) & (freqs <= hi)].sum())


class TestBandpass:
    """Tests for the zero-phase Butterworth bandpass."""

    def test_passband_kept_stopband_removed(self):
        """Test that a 10 Hz tone survives and a 60 Hz tone is attenuated by a 0.5-40 Hz bandpass."""
        x = _sines([10.0]) + _sines([60.0])
        out = bandpass(make_trial(data=x[:1]), 0.5, 40.0).data[0]
        middle = slice(250, 1250)
        assert _band_power(out[middle], 250.0, 8, 12) > 0.8 * _band_power(x[0, middle], 250.0, 8, 12)
        assert _band_power(out[middle], 250.0, 55, 65) < 1e-2 * _band_power(x[0, middle], 250.0, 55, 65)

    def test_zero_phase(self):
        """Test that a passband tone is not shifted in time."""
        x = _sines([12.0])
        out = bandpass(make_trial(data=x), 0.5, 40.0).data[0]
        middle = slice(300, 1200)
        lag = np.argmax(np.correlate(out[middle], x[0, middle], mode="full")) - (900 - 1)
        assert lag == 0

    def test_shape_and_metadata_preserved(self):
        """Test that filtering keeps shape, id, label and sampling rate."""
        trial = make_trial("x", label=1)
        out = bandpass(trial, 1.0, 30.0)
        assert out.data.shape == trial.data.shape
        assert (out.id, out.label, out.fs) == ("x", 1, 250.0)

    def test_high_edge_at_nyquist(self):
        """Test that hi >= Nyquist is a configuration error."""
        with pytest.raises(ConfigError):
            bandpass(make_trial(fs=250.0), 0.5, 125.0)

    def test_inverted_edges(self):
        """Test that lo >= hi is a configuration error."""
        with pytest.raises(ConfigError):
            bandpass(make_trial(), 30.0, 10.0)

    def test_too_short_for_filter(self):
        """Test that a signal shorter than the filter padding raises SignalLengthError."""
        with pytest.raises(SignalLengthError):
            bandpass(make_trial(shape=(2, 10)), 0.5, 40.0)

    def test_linear(self):
        """Test that filtering a linear combination equals the combination of the filtered signals."""
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 1500))
        y = rng.standard_normal((2, 1500))
        combined = bandpass(make_trial(data=2.0 * x - 0.5 * y), 0.5, 40.0).data
        separate = 2.0 * bandpass(make_trial(data=x), 0.5, 40.0).data - 0.5 * bandpass(make_trial(data=y), 0.5, 40.0).data
        np.testing.assert_allclose(combined, separate, atol=1e-10)

    def test_passband_amplitude_within_two_percent(self):
        """Test that a unit 10 Hz tone keeps its amplitude within 2% away from the edges."""
        out = bandpass(make_trial(data=_sines([10.0])), 0.5, 40.0).data[0]
        middle = out[250:1250]
        amplitude = np.sqrt(2.0 * np.mean(middle**2))
        assert abs(amplitude - 1.0) < 0.02


class TestResample:
    """Tests for integer-factor decimation."""

    def test_halves_sample_count(self):
        """Test that 250 Hz -> 125 Hz keeps T/2 samples and updates fs."""
        out = resample(make_trial(shape=(3, 1500)), 125.0)
        assert out.data.shape == (3, 750)
        assert out.fs == 125.0

    def test_identity_at_same_rate(self):
        """Test that resampling to the current rate returns the trial unchanged."""
        trial = make_trial()
        assert resample(trial, 250.0) is trial

    def test_preserves_low_frequency_tone(self):
        """Test that a 5 Hz tone survives decimation by 2."""
        x = _sines([5.0], seconds=4.0)
        out = resample(make_trial(data=x), 125.0).data[0]
        t = np.arange(out.shape[0]) / 125.0
        middle = slice(60, 440)
        assert np.max(np.abs(out[middle] - np.sin(2 * np.pi * 5.0 * t[middle]))) < 0.05

    def test_drops_incomplete_tail(self):
        """Test that samples not filling a whole decimation step are dropped."""
        out = resample(make_trial(shape=(2, 1001)), 125.0)
        assert out.data.shape == (2, 500)

    def test_non_integer_ratio(self):
        """Test that 250 -> 100 Hz is rejected as a non-integer factor."""
        with pytest.raises(ConfigError):
            resample(make_trial(), 100.0)

    def test_upsampling_rejected(self):
        """Test that increasing the rate is rejected."""
        with pytest.raises(ConfigError):
            resample(make_trial(), 500.0)


class TestStandardize:
    """Tests for per-channel z-scoring."""

    def test_zero_mean_unit_std(self):
        """Test that each channel ends up with mean 0 and population std 1."""
        rng = np.random.default_rng(0)
        data = rng.normal(5.0, 3.0, size=(4, 500))
        out = standardize(make_trial(data=data.astype(np.float32))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-6)

    def test_constant_channel_warns_and_zeroes(self, caplog):
        """Test that a flat channel becomes zeros and logs a warning naming the trial and channel."""
        data = np.ones((2, 100), dtype=np.float32)
        data[1] = np.random.default_rng(0).standard_normal(100)
        with caplog.at_level(logging.WARNING, logger="rest_adapt.preprocess"):
            out = standardize(make_trial("flat", data=data)).data
        assert np.all(out[0] == 0.0)
        assert np.all(np.isfinite(out))
        assert "flat" in caplog.text and "channel 0" in caplog.text

    def test_exact_values(self):
        """Test that [1, 2, 3] becomes [-sqrt(1.5), 0, sqrt(1.5)]."""
        out = standardize(make_trial(data=np.array([[1.0, 2.0, 3.0]]))).data
        np.testing.assert_allclose(out[0], [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], atol=1e-12)

    def test_idempotent(self):
        """Test that standardizing a standardized trial changes nothing."""
        data = np.random.default_rng(2).normal(-3.0, 7.0, size=(3, 400))
        once = standardize(make_trial(data=data))
        np.testing.assert_allclose(standardize(once).data, once.data, atol=1e-9)


class TestEpoch:
    """Tests for RS/TS epoching."""

    def test_windows_and_labels(self):
        """Test that a 6 s TS recording yields an unlabeled RS epoch and a labeled TS epoch of 3 s each."""
        data = np.tile(np.arange(1500, dtype=np.float32), (2, 1))
        rs, ts = epoch(make_trial("r1", label=1, data=data))
        assert rs.kind == TrialKind.RS and rs.label is None and rs.id == "r1-rs"
        assert ts.kind == TrialKind.TS and ts.label == 1 and ts.id == "r1-ts"
        assert rs.data.shape == ts.data.shape == (2, 750)
        assert rs.data[0, 0] == 0 and ts.data[0, 0] == 750

    def test_resting_input_rejected(self):
        """Test that an RS recording cannot be cut into RS + TS."""
        with pytest.raises(EpochError):
            epoch(make_trial(kind=TrialKind.RS))

    def test_too_short(self):
        """Test that a 5 s recording cannot provide a [3, 6) s window."""
        with pytest.raises(EpochError):
            epoch(make_trial(shape=(2, 1250)))


class TestPreprocessTrial:
    """Tests for the full per-recording chain."""

    def test_task_recording_yields_two_float32_epochs(self):
        """Test that a TS recording produces standardized float32 RS and TS epochs at the target rate."""
        out = preprocess_trial(make_trial("x", label=0), PreprocConfig(target_fs=125.0))
        assert [e.id for e in out] == ["x-rs", "x-ts"]
        for e in out:
            assert e.data.dtype == np.float32
            assert e.data.shape == (3, 375)
            assert e.fs == 125.0
            np.testing.assert_allclose(e.data.std(axis=1), 1.0, atol=1e-4)

    def test_resting_recording_yields_one_epoch(self):
        """Test that an RS recording produces only its resting window."""
        out = preprocess_trial(make_trial("r", kind=TrialKind.RS), PreprocConfig())
        assert len(out) == 1
        assert out[0].id == "r-rs" and out[0].kind == TrialKind.RS
        assert out[0].data.shape == (3, 750)

    def test_preprocess_all_keeps_order_with_workers(self, raw_trials, preproc_config):
        """Test that threaded preprocessing equals sequential preprocessing."""
        sequential = preprocess_all(raw_trials[:6], preproc_config, workers=1)
        threaded = preprocess_all(raw_trials[:6], preproc_config, workers=3)
        assert [e.id for e in sequential] == [e.id for e in threaded]
        for a, b in zip(sequential, threaded):
            np.testing.assert_array_equal(a.data, b.data)
