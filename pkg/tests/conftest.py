"""Pytest configuration and fixtures for rest-adapt tests.

Fixtures build a tiny synthetic dataset (3 subjects, 2 classes, 3 channels,
downsampled to 125 Hz) and a narrow encoder so that training, calibration and
adaptation finish in seconds on a CPU.
"""

import numpy as np
import pytest
import torch

from rest_adapt.config import AdaptConfig, CalibConfig, ModelConfig, PreprocConfig, RunConfig, SynthConfig, TrainConfig
from rest_adapt.eegpack.models import Trial
from rest_adapt.eegpack.store import TrialStore
from rest_adapt.kinds import TrialKind
from rest_adapt.losses import init_prototypes
from rest_adapt.nncore.model import forward_trials, init_model
from rest_adapt.preprocess import preprocess_all
from rest_adapt.synthgen import gen_subject_trials

TINY_FS = 125.0
TINY_SAMPLES = 375  # 3 s epochs at 125 Hz


def make_trial(trial_id: str = "t0", subject: str = "S1", kind: TrialKind = TrialKind.TS, label: int | None = 0, fs: float = 250.0,
               data: np.ndarray | None = None, shape: tuple[int, int] = (3, 1500), seed: int = 0, session: str = "1") -> Trial:
    """Build a trial with Gaussian data unless `data` is given."""
    if kind == TrialKind.RS:
        label = None
    if data is None:
        data = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    return Trial(id=trial_id, subject=subject, session=session, kind=kind, label=label, fs=fs, data=data)


@pytest.fixture
def synth_config():
    """Three small synthetic subjects with strong class bursts."""
    return SynthConfig(n_subjects=3, trials_per_class=4, rs_trials_per_subject=2, channels=3, fs=250.0, duration=6.0, n_classes=2,
                       snr=3.0, seed=0)


@pytest.fixture
def preproc_config():
    """Default chain with decimation 250 Hz -> 125 Hz."""
    return PreprocConfig(target_fs=TINY_FS)


@pytest.fixture
def model_config():
    """Narrow encoder without dropout."""
    return ModelConfig(f1=4, depth=2, f2=8, kern_length=32, separable_length=8, dropout=0.0, seed=0)


@pytest.fixture
def raw_trials(synth_config):
    """Raw (unprocessed) synthetic recordings of every subject."""
    return [t for i in range(synth_config.n_subjects) for t in gen_subject_trials(synth_config, i)]


@pytest.fixture
def epochs(raw_trials, preproc_config):
    """Preprocessed RS and TS epochs of every subject."""
    return preprocess_all(raw_trials, preproc_config)


@pytest.fixture
def store(epochs):
    """Audited store over the preprocessed epochs."""
    return TrialStore(epochs)


@pytest.fixture
def tiny_model(model_config):
    """Freshly initialized encoder in eval mode for 3 x 375 inputs and 2 classes."""
    return init_model(3, TINY_SAMPLES, 2, model_config).eval()


@pytest.fixture
def tiny_bank(tiny_model, store):
    """Prototypes at the class means of the non-target task epochs under `tiny_model`."""
    trials = [t for t in store.get_many(store.ids(kind=TrialKind.TS)) if t.subject != "S1"]
    with torch.no_grad():
        f = forward_trials(tiny_model, trials).f
    labels = torch.tensor([t.label for t in trials])
    return init_prototypes(f, labels, 2, eps=1e-5)


@pytest.fixture
def target_rs(store):
    """The first two resting epochs of subject S1."""
    return store.get_many(store.ids(subject="S1", kind=TrialKind.RS)[:2])


@pytest.fixture
def tiny_run_config(tmp_path, synth_config, preproc_config, model_config):
    """Complete run configuration writing under a temporary directory."""
    return RunConfig(synth=synth_config, preprocess=preproc_config, model=model_config, train=TrainConfig(epochs=2, batch_size=8),
                     calibrate=CalibConfig(steps=5), adapt=AdaptConfig(epochs=2, batch_size=8), output_dir=str(tmp_path / "run"), seed=0,
                     sweep_fractions=[0.5, 1.0], export_real_per_subject=4)
