"""
Trial data model, the eegpack on-disk container and leave-one-subject-out splitting.
"""

from rest_adapt.eegpack.models import DatasetManifest, SplitSpec, Trial, TrialRecord
from rest_adapt.eegpack.pack import read_manifest, read_pack, write_pack
from rest_adapt.eegpack.split import LosoSplit, loso_split
from rest_adapt.eegpack.store import TrialStore

__all__ = [
    "DatasetManifest",
    "LosoSplit",
    "SplitSpec",
    "Trial",
    "TrialRecord",
    "TrialStore",
    "loso_split",
    "read_manifest",
    "read_pack",
    "write_pack",
]
