"""
Configuration management for rest-adapt.

A run is described by one declarative file (JSON, or YAML which is parsed the
same way) validated into `RunConfig`.  Every section validates its own
invariants; unknown keys are rejected everywhere.  Relative paths inside the
file are resolved against the file's own directory.

Key classes: `RunConfig`, `ConfigManager`
Key functions: `validate_config`
"""

import json
import logging
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from rest_adapt.eegpack.atomic_io import atomic_write_text
from rest_adapt.errors import ConfigError
from rest_adapt.kinds import CalibInit, CalibMethod

SCHEMA_VERSION = 1

# Stage seeds that are not set explicitly are derived from the global seed by these offsets.
SEED_OFFSETS: dict[str, int] = {
    "split": 0,
    "model": 1,
    "train": 2,
    "calibrate": 3,
    "adapt": 4,
    "synth": 5,
}

DEFAULT_CLASS_FREQS: dict[int, list[float]] = {
    2: [10.0, 22.0],
    4: [10.0, 14.0, 22.0, 30.0],
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PreprocConfig(_Strict):
    """
    Filtering, resampling and epoching parameters.
    """

    band_lo: float = Field(default=0.5, gt=0, description="Bandpass low edge in Hz")
    band_hi: float = Field(default=40.0, gt=0, description="Bandpass high edge in Hz")
    target_fs: float = Field(default=250.0, gt=0, description="Sampling rate after resampling, Hz")
    filter_order: int = Field(default=4, ge=1, description="Butterworth order of the bandpass design")
    rs_window: tuple[float, float] = Field(default=(0.0, 3.0), description="Resting-state window [start, end) in seconds")
    ts_window: tuple[float, float] = Field(default=(3.0, 6.0), description="Task window [start, end) in seconds")

    @model_validator(mode="after")
    def _check_band_and_windows(self) -> "PreprocConfig":
        if not self.band_lo < self.band_hi < self.target_fs / 2:
            raise ValueError(f"need 0 < band_lo < band_hi < target_fs/2, got band_lo={self.band_lo}, band_hi={self.band_hi}, "
                             f"target_fs={self.target_fs}")
        for name, (start, end) in (("rs_window", self.rs_window), ("ts_window", self.ts_window)):
            if not 0 <= start < end:
                raise ValueError(f"{name} must satisfy 0 <= start < end, got {(start, end)}")
        rs_start, rs_end = self.rs_window
        ts_start, ts_end = self.ts_window
        if rs_start < ts_end and ts_start < rs_end:
            raise ValueError(f"rs_window {self.rs_window} overlaps ts_window {self.ts_window}")
        return self


class SynthConfig(_Strict):
    """
    Synthetic cross-subject EEG generator settings.
    """

    n_subjects: int = Field(default=6, ge=1, description="Number of synthetic subjects")
    trials_per_class: int = Field(default=40, ge=1, description="Labeled trials per class and subject")
    rs_trials_per_subject: int = Field(default=20, ge=0, description="Additional resting recordings per subject")
    channels: int = Field(default=3, ge=1, description="Channel count C")
    fs: float = Field(default=250.0, gt=0, description="Sampling rate in Hz")
    duration: float = Field(default=6.0, gt=0, description="Trial length in seconds")
    n_classes: int = Field(default=2, ge=2, description="Class count K")
    class_freqs: list[float] | None = Field(default=None, description="Burst centre frequency per class, Hz")
    snr: float = Field(default=2.0, ge=0, description="Burst amplitude relative to the source noise RMS")
    seed: int | None = Field(default=None, ge=0, description="Generator seed; derived from the run seed when unset")

    @model_validator(mode="after")
    def _fill_class_freqs(self) -> "SynthConfig":
        if self.class_freqs is None:
            default = DEFAULT_CLASS_FREQS.get(self.n_classes)
            if default is None:
                step = 22.0 / (self.n_classes - 1)
                default = [round(8.0 + step * k, 3) for k in range(self.n_classes)]
            self.class_freqs = list(default)
        if len(self.class_freqs) != self.n_classes:
            raise ValueError(f"class_freqs has {len(self.class_freqs)} entries for n_classes={self.n_classes}")
        if any(f <= 0 or f >= self.fs / 2 for f in self.class_freqs):
            raise ValueError(f"class_freqs must lie in (0, fs/2), got {self.class_freqs}")
        return self


class ModelConfig(_Strict):
    """
    Compact convolutional encoder hyperparameters.
    """

    f1: int = Field(default=8, ge=1, description="Temporal filters in the stem")
    depth: int = Field(default=2, ge=1, description="Depth multiplier of the spatial convolution")
    f2: int = Field(default=16, ge=1, description="Pointwise filters; also the feature dimension")
    kern_length: int = Field(default=64, ge=2, description="Temporal kernel length in samples")
    separable_length: int = Field(default=16, ge=1, description="Depthwise kernel length of the separable block")
    dropout: float = Field(default=0.25, ge=0, lt=1, description="Dropout rate")
    norm_momentum: float = Field(default=0.1, gt=0, le=1, description="Running-statistics momentum of the norm layers")
    norm_eps: float = Field(default=1e-5, gt=0, description="Epsilon of the norm layers")
    seed: int | None = Field(default=None, ge=0, description="Initialization seed")


class LossWeights(_Strict):
    """
    Weights of the stage-1 objective terms and the shared metric-learning margin.
    """

    lambda1: float = Field(default=0.5, ge=0, description="Weight of the prototype task loss")
    lambda2: float = Field(default=0.05, ge=0, description="Weight of the subject triplet loss")
    margin: float = Field(default=1.0, gt=0, description="Margin m of the task and subject hinges")


class TrainConfig(_Strict):
    """
    Stage-1 schedule.
    """

    lr: float = Field(default=5e-4, gt=0, description="Initial Adam learning rate")
    epochs: int = Field(default=100, ge=1, description="Training epochs")
    decay: float = Field(default=0.99, gt=0, le=1, description="Learning-rate multiplier")
    decay_every: int = Field(default=10, ge=1, description="Epochs between learning-rate decays")
    batch_size: int = Field(default=64, ge=2, description="Labeled trials per batch")
    rs_per_subject: int = Field(default=2, ge=0, description="Resting epochs drawn per batch subject for the triplet loss")
    betas: tuple[float, float] = Field(default=(0.9, 0.999), description="Adam betas")
    adam_eps: float = Field(default=1e-8, gt=0, description="Adam epsilon")
    weights: LossWeights = Field(default_factory=LossWeights)
    proto_eps: float = Field(default=1e-5, ge=0, description="Prototype moving-average rate")
    val_fraction: float = Field(default=0.2, gt=0, lt=1, description="Share of non-target trials held out for validation")
    seed: int | None = Field(default=None, ge=0, description="Shuffling / dropout / triplet seed")


class CalibConfig(_Strict):
    """
    Stage-2 input optimization.
    """

    gamma1: float = Field(default=1.0, ge=0, description="Weight of the prototype task loss")
    gamma2: float = Field(default=10.0, ge=0, description="Weight of the subject-embedding distance")
    steps: int = Field(default=300, ge=0, description="Adam updates per (signal, class) pair")
    lr: float = Field(default=5e-3, gt=0, description="Adam learning rate on the input")
    margin: float = Field(default=1.0, gt=0, description="Margin of the task hinge")
    init: CalibInit = Field(default=CalibInit.RS, description="Start from the resting signal or from Gaussian noise")
    method: CalibMethod = Field(default=CalibMethod.RESTL, description="Synthesis objective")
    tv_weight: float = Field(default=1e-4, ge=0, description="Total-variation prior weight (baselines)")
    l2_weight: float = Field(default=1e-5, ge=0, description="Squared-norm prior weight (baselines)")
    stats_weight: float = Field(default=1e-2, ge=0, description="Normalization-statistics weight (DeepInversion)")
    seed: int | None = Field(default=None, ge=0, description="Noise-initialization seed")


class AdaptConfig(_Strict):
    """
    Stage-3 fine-tuning.
    """

    epochs: int = Field(default=10, ge=0, description="Fine-tuning epochs")
    lr: float = Field(default=5e-4, gt=0, description="Constant Adam learning rate")
    batch_size: int = Field(default=64, ge=1, description="Calibrated signals per batch")
    seed: int | None = Field(default=None, ge=0, description="Shuffling / dropout seed")


class RunConfig(_Strict):
    """
    Complete, declarative description of a run.

    When `dataset` is unset the run works on a synthetic pack generated from
    `synth` (defaulted when absent).
    """

    schema_version: Literal[1] = Field(default=SCHEMA_VERSION, description="Config schema version")
    dataset: str | None = Field(default=None, description="Path of an eegpack directory")
    synth: SynthConfig | None = Field(default=None, description="Synthetic dataset settings")
    preprocess: PreprocConfig = Field(default_factory=PreprocConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    calibrate: CalibConfig = Field(default_factory=CalibConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    targets: list[str] = Field(default_factory=list, description="Target subjects; empty means every subject")
    output_dir: str = Field(default="runs", description="Directory receiving all artifacts")
    seed: int = Field(default=0, ge=0, description="Global seed; stage seeds derive from it")
    sweep_fractions: list[float] = Field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0],
                                         description="Resting-signal fractions of the sweep")
    export_real_per_subject: int = Field(default=20, ge=0,
                                         description="Real task epochs per non-target subject included in feature exports")

    @model_validator(mode="after")
    def _resolve(self) -> "RunConfig":
        if self.dataset is None and self.synth is None:
            self.synth = SynthConfig()
        if any(not 0 < f <= 1 for f in self.sweep_fractions):
            raise ValueError(f"sweep_fractions must lie in (0, 1], got {self.sweep_fractions}")
        if self.synth is not None and self.synth.class_freqs is not None:
            too_high = [f for f in self.synth.class_freqs if f >= self.preprocess.band_hi]
            if too_high:
                raise ValueError(f"synth.class_freqs {too_high} not below preprocess.band_hi={self.preprocess.band_hi}")
        for section in ("model", "train", "calibrate", "adapt"):
            sub = getattr(self, section)
            if sub.seed is None:
                sub.seed = self.stage_seed(section)
        if self.synth is not None and self.synth.seed is None:
            self.synth.seed = self.stage_seed("synth")
        return self

    def stage_seed(self, stage: str) -> int:
        """
        Seed of `stage` derived from the global seed.
        """
        return self.seed + SEED_OFFSETS[stage]


def format_violations(exc: ValidationError) -> list[str]:
    """
    Flatten a pydantic `ValidationError` into ``"<path>: <message>"`` strings.
    """
    violations = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        violations.append(f"{loc}: {err['msg']}")
    return violations


def parse_run_config(data: dict[str, Any]) -> RunConfig:
    """
    Validate a raw mapping into `RunConfig`, reporting every violation at once.
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        violations = format_violations(exc)
        raise ConfigError("Invalid run configuration:\n  " + "\n  ".join(violations), violations=violations) from exc


class ConfigManager:
    """
    Loads run configurations and writes resolved snapshots.

    `config_path` is the JSON/YAML run file.  When None, a fully defaulted
    configuration rooted at the current directory is produced.
    """

    SNAPSHOT_FILE = "config.json"

    def __init__(self, config_path: str | Path | None = None) -> None:
        self.log = logging.getLogger("ConfigManager")
        self.config_path = Path(config_path) if config_path is not None else None

    @property
    def base_dir(self) -> Path:
        """
        Directory that relative paths in the config are resolved against.
        """
        if self.config_path is None:
            return Path.cwd()
        return self.config_path.resolve().parent

    def load(self) -> RunConfig:
        """
        Load, validate and path-resolve the run configuration.
        """
        if self.config_path is None:
            self.log.debug("No config file given, using defaults")
            return self._resolve_paths(parse_run_config({}))
        if not self.config_path.is_file():
            raise ConfigError(f"Config file not found: {self.config_path}")

        self.log.debug("Loading configuration from %s", self.config_path)
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"Config file {self.config_path} is not valid JSON/YAML: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"Config file {self.config_path} cannot be read: {exc.strerror or exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {self.config_path} must contain an object, got {type(loaded).__name__}")
        return self._resolve_paths(parse_run_config(loaded))

    def _resolve_paths(self, config: RunConfig) -> RunConfig:
        updates: dict[str, Any] = {"output_dir": str(self.base_dir / config.output_dir)}
        if config.dataset is not None:
            updates["dataset"] = str(self.base_dir / config.dataset)
        return config.model_copy(update=updates)

    def save_snapshot(self, config: RunConfig, run_dir: str | Path) -> Path:
        """
        Write the exact resolved configuration into `run_dir` and return its path.
        """
        path = Path(run_dir) / self.SNAPSHOT_FILE
        atomic_write_text(path, json.dumps(config.model_dump(mode="json"), indent=2) + "\n")
        self.log.debug("Saved config snapshot to %s", path)
        return path


def validate_config(path: str | Path) -> RunConfig:
    """
    Load `path` and return the normalized configuration with all defaults filled.
    """
    return ConfigManager(path).load()
