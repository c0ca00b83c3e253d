"""
Reading and writing eegpack directories.

Directory layout:
```
{pack_dir}/
  manifest.json        # DatasetManifest, UTF-8
  data/{trial_id}.f32  # little-endian float32, row-major [channel][sample]
```

The format is the interchange point for datasets converted by external
tools; anything that can write raw float32 and a JSON file can produce one.

Key functions: `write_pack`, `read_pack`, `read_manifest`
"""

import json
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from rest_adapt.eegpack.atomic_io import atomic_write_bytes, atomic_write_text, decode_f32, encode_f32
from rest_adapt.eegpack.models import DatasetManifest, Trial, TrialRecord
from rest_adapt.errors import ArtifactIOError, FormatError, PackIOError, PackLoadError

MANIFEST_NAME = "manifest.json"
DATA_DIR = "data"
DATA_SUFFIX = ".f32"

log = logging.getLogger("rest_adapt.eegpack")


def write_pack(trials: Sequence[Trial], directory: str | Path, name: str = "pack", n_classes: int | None = None) -> DatasetManifest:
    """
    Write `trials` as an eegpack under `directory` and return the manifest.

    `n_classes` defaults to the largest TS label + 1.  Trials must share the
    channel count and sampling rate; ids must be unique.
    """
    if not trials:
        raise FormatError("Cannot write an empty pack")
    channels = trials[0].n_channels
    fs = trials[0].fs
    for trial in trials:
        if trial.n_channels != channels:
            raise FormatError(f"Trial {trial.id} has {trial.n_channels} channels, expected {channels}")
        if trial.fs != fs:
            raise FormatError(f"Trial {trial.id} sampled at {trial.fs} Hz, expected {fs}")

    labels = [t.label for t in trials if t.label is not None]
    if n_classes is None:
        n_classes = max(labels) + 1 if labels else 1

    records = [
        TrialRecord(id=t.id, subject=t.subject, session=t.session, kind=t.kind, label=t.label, path=f"{DATA_DIR}/{t.id}{DATA_SUFFIX}",
                    shape=(t.n_channels, t.n_samples)) for t in trials
    ]
    try:
        manifest = DatasetManifest(name=name, n_classes=n_classes, channels=channels, fs=fs, trials=records)
    except ValidationError as exc:
        raise FormatError(f"Trials do not form a valid pack: {exc}") from exc

    root = Path(directory)
    try:
        for trial, record in zip(trials, records):
            atomic_write_bytes(root / record.path, encode_f32(trial.data))
        atomic_write_text(root / MANIFEST_NAME, json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n")
    except ArtifactIOError as exc:
        raise PackIOError(f"Cannot write pack to {root}: {exc.message}", path=exc.path) from exc

    log.debug("Wrote pack %r with %d trials to %s", name, len(trials), root)
    return manifest


def read_manifest(directory: str | Path) -> DatasetManifest:
    """
    Load and validate `manifest.json` only.
    """
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise PackLoadError(f"Manifest not found: {path}", path=str(path))
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise PackLoadError(f"Invalid manifest {path}: {exc}", path=str(path)) from exc


def read_pack(directory: str | Path) -> tuple[DatasetManifest, list[Trial]]:
    """
    Read a pack; trials are returned in manifest order with float32 data.

    Missing files, byte counts that disagree with the recorded shape and
    non-finite samples raise `PackLoadError` naming the trial and file.
    """
    root = Path(directory)
    manifest = read_manifest(root)
    trials: list[Trial] = []
    for record in manifest.trials:
        path = root / record.path
        if not path.is_file():
            raise PackLoadError(f"Trial {record.id}: data file missing: {path}", trial_id=record.id, path=str(path))
        try:
            data = decode_f32(path.read_bytes(), record.shape)
        except ValueError as exc:
            raise PackLoadError(f"Trial {record.id}: shape mismatch with manifest {record.shape} in {path}: {exc}", trial_id=record.id,
                                path=str(path)) from exc
        if not np.all(np.isfinite(data)):
            raise PackLoadError(f"Trial {record.id}: non-finite values in {path}", trial_id=record.id, path=str(path))
        trials.append(
            Trial(id=record.id, subject=record.subject, session=record.session, kind=record.kind, label=record.label, fs=manifest.fs,
                  data=data))
    log.debug("Read pack %r with %d trials from %s", manifest.name, len(trials), root)
    return manifest, trials
