"""
Data model of the eegpack container.

`Trial` is the in-memory epoch (metadata + channel × sample matrix).
`TrialRecord`, `DatasetManifest` and `SplitSpec` are the serialized,
Pydantic-validated side of the format.

Key classes: `Trial`, `TrialRecord`, `DatasetManifest`, `SplitSpec`
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from rest_adapt.errors import FormatError
from rest_adapt.kinds import TrialKind

MANIFEST_VERSION = 1


@dataclass(eq=False)
class Trial:
    """
    One EEG epoch.

    `data` is a [channels × samples] matrix in microvolts (or standardized
    units after preprocessing).  `label` is present iff `kind` is TS.
    """

    id: str
    subject: str
    session: str
    kind: TrialKind
    label: int | None
    fs: float
    data: np.ndarray

    def __post_init__(self) -> None:
        self.kind = TrialKind(self.kind)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise FormatError(f"Trial {self.id}: data must be a non-empty [C x T] matrix, got shape {self.data.shape}")
        if self.fs <= 0:
            raise FormatError(f"Trial {self.id}: sampling rate must be positive, got {self.fs}")
        if (self.label is not None) != (self.kind == TrialKind.TS):
            raise FormatError(f"Trial {self.id}: label must be present iff kind is TS (kind={self.kind.value}, label={self.label})")
        if self.label is not None and self.label < 0:
            raise FormatError(f"Trial {self.id}: negative label {self.label}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError(f"Trial {self.id}: data contains non-finite values")

    @property
    def n_channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1])

    @property
    def duration(self) -> float:
        """
        Length in seconds.
        """
        return self.n_samples / self.fs

    def replace(self, **changes: Any) -> "Trial":
        """
        Return a copy with `changes` applied (invariants are re-checked).
        """
        return dataclasses.replace(self, **changes)


class TrialRecord(BaseModel):
    """
    Manifest entry of one trial.  `path` is relative to the pack directory.
    """

    model_config = ConfigDict(extra="forbid")

    id: str
    subject: str
    session: str
    kind: TrialKind
    label: int | None = None
    path: str
    shape: tuple[int, int]


class DatasetManifest(BaseModel):
    """
    Contents of `manifest.json`.

    All trials share the channel count and sampling rate; ids are unique and
    every TS label is below `n_classes`.
    """

    model_config = ConfigDict(extra="forbid")

    schema_version: int = MANIFEST_VERSION
    name: str
    n_classes: int = Field(..., ge=1)
    channels: int = Field(..., ge=1)
    fs: float = Field(..., gt=0)
    trials: list[TrialRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_records(self) -> "DatasetManifest":
        seen: set[str] = set()
        for record in self.trials:
            if record.id in seen:
                raise ValueError(f"duplicate trial id {record.id!r}")
            seen.add(record.id)
            if record.shape[0] != self.channels:
                raise ValueError(f"trial {record.id!r} has {record.shape[0]} channels, manifest declares {self.channels}")
            if (record.label is not None) != (record.kind == TrialKind.TS):
                raise ValueError(f"trial {record.id!r}: label must be present iff kind is TS")
            if record.label is not None and not 0 <= record.label < self.n_classes:
                raise ValueError(f"trial {record.id!r}: label {record.label} outside [0, {self.n_classes})")
        return self

    @property
    def subjects(self) -> list[str]:
        """
        Distinct subjects in first-appearance order.
        """
        return list(dict.fromkeys(record.subject for record in self.trials))

    def record(self, trial_id: str) -> TrialRecord:
        """
        Look up the record of `trial_id` (KeyError when absent).
        """
        for record in self.trials:
            if record.id == trial_id:
                return record
        raise KeyError(trial_id)


class SplitSpec(BaseModel):
    """
    Leave-one-subject-out split request.
    """

    model_config = ConfigDict(extra="forbid")

    target_subject: str
    seed: int = 0
    val_fraction: float = Field(default=0.2, gt=0, lt=1)
