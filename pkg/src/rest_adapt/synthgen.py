"""
Synthetic cross-subject EEG with known subject and task structure.

Each subject has latent sources of spectrally shaped pink noise with
subject-specific per-band gains and scales, mixed into channels through a
subject-specific orthonormal matrix.  Resting structure therefore exists in
every sample.  A class-k trial additionally carries a Hann-enveloped burst at
``class_freqs[k]`` in the second half of the recording (the [3, 6) s task
window of a 6 s trial) on a class-specific subset of sources.

Randomness is derived from (seed, subject index, trial index) only; the class
label never feeds the generator, so a class trial with ``snr = 0`` equals the
resting trial generated at the same index.

Key classes: `SubjectSignature`
Key functions: `gen_subject`, `gen_trial`, `gen_dataset`
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import windows

from rest_adapt.config import SynthConfig
from rest_adapt.eegpack.models import DatasetManifest, Trial
from rest_adapt.eegpack.pack import write_pack
from rest_adapt.kinds import TrialKind

log = logging.getLogger("rest_adapt.synthgen")

# Band edges (Hz) of the per-source spectral gains: delta, theta, alpha, beta, gamma.
BAND_EDGES = (0.0, 4.0, 8.0, 13.0, 30.0, np.inf)
# Below this frequency the 1/f shaping is flat.
PINK_FLOOR_HZ = 1.0
AMPLITUDE_UV = 10.0


@dataclass(frozen=True, eq=False)
class SubjectSignature:
    """
    Ground-truth structure of one synthetic subject.

    `mixing` is an orthonormal [C × C] source-to-channel matrix,
    `band_gains` a [C × bands] gain table shaping each source's spectrum and
    `source_scale` the RMS of each source.
    """

    subject: str
    index: int
    seed: int
    mixing: np.ndarray
    band_gains: np.ndarray
    source_scale: np.ndarray


def subject_name(index: int) -> str:
    return f"S{index + 1}"


def gen_subject(config: SynthConfig, index: int) -> SubjectSignature:
    """
    Draw the signature of subject `index`; deterministic in (seed, index).
    """
    if not 0 <= index < config.n_subjects:
        raise IndexError(f"subject index {index} outside [0, {config.n_subjects})")
    seed = int(config.seed or 0)
    rng = np.random.default_rng([seed, index])
    q, r = np.linalg.qr(rng.standard_normal((config.channels, config.channels)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    mixing = q * signs
    band_gains = rng.lognormal(mean=0.0, sigma=0.35, size=(config.channels, len(BAND_EDGES) - 1))
    source_scale = rng.lognormal(mean=0.0, sigma=0.5, size=config.channels)
    return SubjectSignature(subject=subject_name(index), index=index, seed=seed, mixing=mixing, band_gains=band_gains,
                            source_scale=source_scale)


def _burst_sources(label: int, n_classes: int, channels: int) -> list[int]:
    sources = [j for j in range(channels) if j % n_classes == label]
    return sources or [label % channels]


def _shaped_noise(rng: np.random.Generator, sig: SubjectSignature, n_samples: int, fs: float) -> np.ndarray:
    white = rng.standard_normal((sig.mixing.shape[0], n_samples))
    spectrum = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / fs)
    shape = 1.0 / np.sqrt(np.maximum(freqs, PINK_FLOOR_HZ))
    band = np.clip(np.searchsorted(BAND_EDGES, freqs, side="right") - 1, 0, len(BAND_EDGES) - 2)
    gains = sig.band_gains[:, band] * shape[None, :]
    spectrum[:, 0] = 0.0
    noise = np.fft.irfft(spectrum * gains, n=n_samples, axis=-1)
    noise /= noise.std(axis=1, keepdims=True)
    return noise * sig.source_scale[:, None]


def gen_trial(sig: SubjectSignature, label: int | None, config: SynthConfig, index: int) -> Trial:
    """
    Generate trial number `index` of subject `sig`.

    `label` None produces a resting recording, otherwise a class-`label`
    task recording.
    """
    n_samples = int(round(config.duration * config.fs))
    rng = np.random.default_rng([sig.seed, sig.index, index])
    sources = _shaped_noise(rng, sig, n_samples, config.fs)
    phases = rng.uniform(0.0, 2 * np.pi, size=sources.shape[0])

    if label is not None:
        if not 0 <= label < config.n_classes:
            raise IndexError(f"class {label} outside [0, {config.n_classes})")
        assert config.class_freqs is not None
        start = n_samples // 2
        t = np.arange(n_samples - start) / config.fs
        envelope = windows.hann(n_samples - start, sym=True)
        for j in _burst_sources(label, config.n_classes, sources.shape[0]):
            amplitude = config.snr * sig.source_scale[j]
            sources[j, start:] += amplitude * envelope * np.sin(2 * np.pi * config.class_freqs[label] * t + phases[j])

    data = (sig.mixing @ sources) * AMPLITUDE_UV
    kind = TrialKind.RS if label is None else TrialKind.TS
    tag = "R" if label is None else "T"
    return Trial(id=f"{sig.subject}-{tag}{index:04d}", subject=sig.subject, session="1", kind=kind, label=label, fs=config.fs,
                 data=data.astype(np.float32))


def gen_subject_trials(config: SynthConfig, index: int) -> list[Trial]:
    """
    All trials of one subject: class trials (class-major), then resting trials.
    """
    sig = gen_subject(config, index)
    trials: list[Trial] = []
    trial_index = 0
    for label in range(config.n_classes):
        for _ in range(config.trials_per_class):
            trials.append(gen_trial(sig, label, config, trial_index))
            trial_index += 1
    for _ in range(config.rs_trials_per_subject):
        trials.append(gen_trial(sig, None, config, trial_index))
        trial_index += 1
    return trials


def gen_dataset(config: SynthConfig, directory: str | Path, workers: int = 1) -> DatasetManifest:
    """
    Generate every subject and write the result as an eegpack under `directory`.
    """
    indices = range(config.n_subjects)
    if workers <= 1:
        per_subject = [gen_subject_trials(config, i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_subject = list(pool.map(lambda i: gen_subject_trials(config, i), indices))
    trials = [t for group in per_subject for t in group]
    manifest = write_pack(trials, directory, name="synthetic", n_classes=config.n_classes)
    log.info("Generated synthetic pack with %d subjects and %d trials in %s", config.n_subjects, len(trials), directory)
    return manifest
