"""
Signal preprocessing: resampling, zero-phase bandpass, RS/TS epoching and
per-epoch standardization.

Raw trials are processed in the order resample → bandpass → epoch →
standardize, so filters run at the final rate on the whole recording and each
epoch is standardized with its own statistics.  All functions are pure; the
individual steps compute in float64, `preprocess_trial` hands out float32
epochs (the model precision).

Key functions: `bandpass`, `resample`, `standardize`, `epoch`,
    `preprocess_trial`, `preprocess_all`
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import signal

from rest_adapt.config import PreprocConfig
from rest_adapt.eegpack.models import Trial
from rest_adapt.errors import ConfigError, EpochError, SignalLengthError
from rest_adapt.kinds import TrialKind

log = logging.getLogger("rest_adapt.preprocess")

STD_EPSILON = 1e-8

RS_SUFFIX = "-rs"
TS_SUFFIX = "-ts"


def bandpass(trial: Trial, lo: float, hi: float, order: int = 4) -> Trial:
    """
    Zero-phase Butterworth bandpass of every channel.

    The `order` Butterworth design is applied forward and backward, so the
    magnitude response is squared and the phase is zero.
    """
    nyquist = trial.fs / 2
    if not 0 < lo < hi:
        raise ConfigError(f"Bandpass edges must satisfy 0 < lo < hi, got lo={lo}, hi={hi}")
    if hi >= nyquist:
        raise ConfigError(f"Bandpass high edge {hi} Hz is not below Nyquist ({nyquist} Hz) of trial {trial.id}")
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=trial.fs, output="sos")
    try:
        filtered = signal.sosfiltfilt(sos, np.asarray(trial.data, dtype=np.float64), axis=-1)
    except ValueError as exc:
        raise SignalLengthError(f"Trial {trial.id} ({trial.n_samples} samples) too short for order-{order} filtering: {exc}") from exc
    return trial.replace(data=filtered)


def resample(trial: Trial, target_fs: float) -> Trial:
    """
    Integer-factor decimation to `target_fs`.

    The signal is low-passed with the zero-phase Chebyshev type I filter of
    `scipy.signal.decimate` (cut-off at 0.8 × the target Nyquist) and then
    every q-th sample is kept.  Trailing samples that do not fill a whole
    decimation step are dropped, so the output has ``T * target_fs / fs``
    samples exactly.
    """
    if target_fs == trial.fs:
        return trial
    ratio = trial.fs / target_fs
    factor = int(round(ratio))
    if factor < 2 or abs(ratio - factor) > 1e-9:
        raise ConfigError(f"Resampling {trial.fs} Hz → {target_fs} Hz needs an integer decimation factor, got ratio {ratio:g}")
    usable = trial.n_samples - trial.n_samples % factor
    data = np.asarray(trial.data[:, :usable], dtype=np.float64)
    try:
        decimated = signal.decimate(data, factor, ftype="iir", axis=-1, zero_phase=True)
    except ValueError as exc:
        raise SignalLengthError(f"Trial {trial.id} ({trial.n_samples} samples) too short for decimation by {factor}: {exc}") from exc
    return trial.replace(data=np.ascontiguousarray(decimated), fs=float(target_fs))


def standardize(trial: Trial) -> Trial:
    """
    Per-channel z-score with the population standard deviation.

    A constant channel is divided by ``std + 1e-8`` (yielding zeros) and
    reported with a warning.
    """
    data = np.asarray(trial.data, dtype=np.float64)
    mean = data.mean(axis=1, keepdims=True)
    std = data.std(axis=1, keepdims=True)
    flat = std[:, 0] < STD_EPSILON
    for channel in np.flatnonzero(flat):
        log.warning("Trial %s channel %d is constant; dividing by epsilon-padded std", trial.id, channel)
    divisor = np.where(flat[:, None], std + STD_EPSILON, std)
    return trial.replace(data=(data - mean) / divisor)


def _window(trial: Trial, window: tuple[float, float]) -> np.ndarray:
    start = int(round(window[0] * trial.fs))
    stop = int(round(window[1] * trial.fs))
    if stop > trial.n_samples:
        raise EpochError(f"Trial {trial.id} has {trial.n_samples} samples ({trial.duration:g} s); window {window} s needs {stop}")
    return np.array(trial.data[:, start:stop], copy=True)


def epoch(trial: Trial, rs_window: tuple[float, float] = (0.0, 3.0), ts_window: tuple[float, float] = (3.0, 6.0)) -> tuple[Trial, Trial]:
    """
    Cut a labeled recording into its resting epoch and its task epoch.

    The resting epoch is kind RS without a label, the task epoch keeps the
    label.  Ids get the ``-rs`` / ``-ts`` suffixes.
    """
    if trial.kind != TrialKind.TS:
        raise EpochError(f"Trial {trial.id} is a resting recording; only TS recordings are cut into RS + TS epochs")
    end = max(rs_window[1], ts_window[1])
    if trial.n_samples < int(round(end * trial.fs)):
        raise EpochError(f"Trial {trial.id} lasts {trial.duration:g} s, epoching needs at least {end:g} s")
    rs = trial.replace(id=trial.id + RS_SUFFIX, kind=TrialKind.RS, label=None, data=_window(trial, rs_window))
    ts = trial.replace(id=trial.id + TS_SUFFIX, data=_window(trial, ts_window))
    return rs, ts


def preprocess_trial(trial: Trial, config: PreprocConfig) -> list[Trial]:
    """
    Full chain for one raw recording.

    TS recordings yield ``[rs_epoch, ts_epoch]``; RS recordings yield the
    resting window only.
    """
    trial = resample(trial, config.target_fs)
    trial = bandpass(trial, config.band_lo, config.band_hi, order=config.filter_order)
    if trial.kind == TrialKind.TS:
        epochs = list(epoch(trial, config.rs_window, config.ts_window))
    else:
        epochs = [trial.replace(id=trial.id + RS_SUFFIX, data=_window(trial, config.rs_window))]
    standardized = [standardize(e) for e in epochs]
    return [e.replace(data=e.data.astype(np.float32)) for e in standardized]


def preprocess_all(trials: Sequence[Trial], config: PreprocConfig, workers: int = 1) -> list[Trial]:
    """
    Preprocess every raw trial; output order follows input order.
    """
    if workers <= 1:
        results = [preprocess_trial(t, config) for t in trials]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: preprocess_trial(t, config), trials))
    epochs = [e for group in results for e in group]
    log.debug("Preprocessed %d raw trials into %d epochs", len(trials), len(epochs))
    return epochs
