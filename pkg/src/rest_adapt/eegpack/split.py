"""
Leave-one-subject-out splitting.

Every trial (TS and RS) of the target subject forms the test set.  The
remaining trials are divided into train and validation sets, stratified by
(subject, class) with resting trials stratified by subject; when a stratum is
too small for stratification the split falls back to a uniform draw.

Key classes: `LosoSplit`
Key functions: `loso_split`
"""

import logging
from typing import NamedTuple

from sklearn.model_selection import train_test_split

from rest_adapt.eegpack.models import DatasetManifest, SplitSpec, TrialRecord
from rest_adapt.errors import SplitError

log = logging.getLogger("rest_adapt.eegpack.split")


class LosoSplit(NamedTuple):
    """
    Trial ids of each partition, each list in manifest order.
    """

    train: list[str]
    val: list[str]
    test: list[str]


def _stratum(record: TrialRecord) -> str:
    label = "RS" if record.label is None else str(record.label)
    return f"{record.subject}|{label}"


def loso_split(manifest: DatasetManifest, spec: SplitSpec) -> LosoSplit:
    """
    Split `manifest` for target `spec.target_subject`.

    Deterministic in (manifest, spec).  The validation set holds
    ``ceil(val_fraction * n)`` of the `n` non-target trials.
    """
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise SplitError(f"Leave-one-subject-out needs at least 2 subjects, manifest {manifest.name!r} has {len(subjects)}")
    if spec.target_subject not in subjects:
        raise SplitError(f"Target subject {spec.target_subject!r} not in manifest (subjects: {', '.join(subjects)})")

    test = [r.id for r in manifest.trials if r.subject == spec.target_subject]
    pool = [r for r in manifest.trials if r.subject != spec.target_subject]
    order = {r.id: i for i, r in enumerate(manifest.trials)}
    ids = [r.id for r in pool]

    try:
        train_ids, val_ids = train_test_split(ids, test_size=spec.val_fraction, random_state=spec.seed,
                                              stratify=[_stratum(r) for r in pool])
    except ValueError as exc:
        log.info("Stratified validation split impossible (%s); falling back to a uniform draw", exc)
        train_ids, val_ids = train_test_split(ids, test_size=spec.val_fraction, random_state=spec.seed)

    return LosoSplit(train=sorted(train_ids, key=order.__getitem__), val=sorted(val_ids, key=order.__getitem__), test=test)
