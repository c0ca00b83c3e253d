"""Tests for the eegpack container, splitting, the audited store and hashing."""

import json

import numpy as np
import pytest
import torch

from conftest import make_trial
from rest_adapt.eegpack.atomic_io import atomic_write_bytes, atomic_write_text, decode_f32, encode_f32
from rest_adapt.eegpack.hashing import hash_arrays, hash_state
from rest_adapt.eegpack.models import DatasetManifest, SplitSpec, Trial, TrialRecord
from rest_adapt.eegpack.pack import MANIFEST_NAME, read_manifest, read_pack, write_pack
from rest_adapt.eegpack.split import loso_split
from rest_adapt.eegpack.store import TrialStore
from rest_adapt.errors import ArtifactIOError, FormatError, PackIOError, PackLoadError, SplitError
from rest_adapt.kinds import TrialKind


def _manifest(subject_counts: dict[str, int], rs_per_subject: int = 0) -> DatasetManifest:
    records = []
    for subject, count in subject_counts.items():
        for i in range(count):
            records.append(TrialRecord(id=f"{subject}-T{i}", subject=subject, session="1", kind=TrialKind.TS, label=i % 2,
                                       path=f"data/{subject}-T{i}.f32", shape=(2, 10)))
        for i in range(rs_per_subject):
            records.append(TrialRecord(id=f"{subject}-R{i}", subject=subject, session="1", kind=TrialKind.RS,
                                       path=f"data/{subject}-R{i}.f32", shape=(2, 10)))
    return DatasetManifest(name="m", n_classes=2, channels=2, fs=100.0, trials=records)


class TestTrial:
    """Tests for the in-memory trial invariants."""

    def test_label_required_for_task_trials(self):
        """Test that a TS trial without a label is rejected."""
        with pytest.raises(FormatError):
            Trial(id="x", subject="S1", session="1", kind=TrialKind.TS, label=None, fs=250.0, data=np.zeros((2, 4), dtype=np.float32))

    def test_label_forbidden_for_resting_trials(self):
        """Test that an RS trial carrying a label is rejected."""
        with pytest.raises(FormatError):
            Trial(id="x", subject="S1", session="1", kind=TrialKind.RS, label=1, fs=250.0, data=np.zeros((2, 4), dtype=np.float32))

    def test_non_finite_data_rejected(self):
        """Test that NaN samples are rejected at construction."""
        data = np.zeros((2, 4), dtype=np.float32)
        data[1, 2] = np.nan
        with pytest.raises(FormatError):
            make_trial(data=data)

    def test_replace_rechecks_invariants(self):
        """Test that replace() validates the new field combination."""
        trial = make_trial()
        assert trial.replace(id="y").id == "y"
        with pytest.raises(FormatError):
            trial.replace(label=None)

    def test_duration(self):
        """Test that duration is samples divided by sampling rate."""
        assert make_trial(shape=(3, 750), fs=250.0).duration == pytest.approx(3.0)


class TestPack:
    """Tests for write_pack / read_pack."""

    def test_read_returns_written_trials(self, tmp_path):
        """Test that a written pack reads back with identical metadata and float32 data."""
        trials = [
            make_trial("S1-T0", label=1, seed=1),
            make_trial("S1-R0", kind=TrialKind.RS, seed=2),
            make_trial("S2-T0", subject="S2", label=0, seed=3),
        ]
        manifest = write_pack(trials, tmp_path / "pack", name="demo", n_classes=2)
        loaded_manifest, loaded = read_pack(tmp_path / "pack")

        assert loaded_manifest == manifest
        assert [t.id for t in loaded] == ["S1-T0", "S1-R0", "S2-T0"]
        assert loaded[1].kind == TrialKind.RS and loaded[1].label is None
        assert loaded[0].data.dtype == np.float32
        np.testing.assert_array_equal(loaded[2].data, trials[2].data)

    def test_layout_on_disk(self, tmp_path):
        """Test that every trial is stored as data/<id>.f32 of C*T*4 bytes."""
        write_pack([make_trial("a", shape=(3, 20))], tmp_path)
        assert (tmp_path / MANIFEST_NAME).is_file()
        assert (tmp_path / "data" / "a.f32").stat().st_size == 3 * 20 * 4
        raw = json.loads((tmp_path / MANIFEST_NAME).read_text())
        assert raw["trials"][0]["path"] == "data/a.f32"

    def test_n_classes_defaults_to_max_label(self, tmp_path):
        """Test that n_classes is inferred as the largest label plus one."""
        manifest = write_pack([make_trial("a", label=0), make_trial("b", label=3)], tmp_path)
        assert manifest.n_classes == 4

    def test_duplicate_ids_rejected(self, tmp_path):
        """Test that duplicate trial ids fail with FormatError."""
        with pytest.raises(FormatError):
            write_pack([make_trial("a"), make_trial("a", seed=1)], tmp_path)

    def test_mixed_channel_counts_rejected(self, tmp_path):
        """Test that trials must share the channel count."""
        with pytest.raises(FormatError):
            write_pack([make_trial("a", shape=(3, 10)), make_trial("b", shape=(4, 10))], tmp_path)

    def test_empty_pack_rejected(self, tmp_path):
        """Test that an empty trial list cannot be written."""
        with pytest.raises(FormatError):
            write_pack([], tmp_path)

    def test_missing_manifest(self, tmp_path):
        """Test that reading a directory without manifest raises PackLoadError."""
        with pytest.raises(PackLoadError):
            read_manifest(tmp_path)

    def test_missing_data_file_names_trial(self, tmp_path):
        """Test that a deleted data file is reported with its trial id."""
        write_pack([make_trial("a"), make_trial("b", seed=1)], tmp_path)
        (tmp_path / "data" / "b.f32").unlink()
        with pytest.raises(PackLoadError) as exc_info:
            read_pack(tmp_path)
        assert exc_info.value.trial_id == "b"

    def test_truncated_data_file(self, tmp_path):
        """Test that a byte count disagreeing with the manifest shape is rejected."""
        write_pack([make_trial("a", shape=(3, 10))], tmp_path)
        path = tmp_path / "data" / "a.f32"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(PackLoadError) as exc_info:
            read_pack(tmp_path)
        assert exc_info.value.trial_id == "a"

    def test_non_finite_data_file(self, tmp_path):
        """Test that NaN samples on disk are rejected at load time."""
        write_pack([make_trial("a", shape=(2, 4))], tmp_path)
        bad = np.zeros((2, 4), dtype=np.float32)
        bad[0, 0] = np.inf
        (tmp_path / "data" / "a.f32").write_bytes(encode_f32(bad))
        with pytest.raises(PackLoadError):
            read_pack(tmp_path)

    def test_f32_codec_is_little_endian(self):
        """Test that the blob codec writes little-endian float32."""
        raw = encode_f32(np.array([[1.0, -2.0]]))
        assert raw == np.array([1.0, -2.0], dtype="<f4").tobytes()
        np.testing.assert_array_equal(decode_f32(raw, (1, 2)), [[1.0, -2.0]])
        with pytest.raises(ValueError):
            decode_f32(raw, (1, 3))

    def test_unwritable_directory(self, tmp_path):
        """Test that a pack below a regular file raises PackIOError naming the failing file."""
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        with pytest.raises(PackIOError) as exc_info:
            write_pack([make_trial("a")], blocker / "pack")
        assert exc_info.value.exit_code == 2
        assert exc_info.value.path is not None and "blocker" in exc_info.value.path


class TestAtomicWrite:
    """Tests for the atomic artifact writer."""

    def test_writes_and_replaces(self, tmp_path):
        """Test that a second write replaces the file and leaves no staging files behind."""
        path = tmp_path / "sub" / "report.json"
        atomic_write_text(path, "one")
        atomic_write_text(path, "two")
        assert path.read_text() == "two"
        assert [p.name for p in path.parent.iterdir()] == ["report.json"]

    def test_os_failure_becomes_artifact_error(self, tmp_path):
        """Test that an operating-system failure is raised as ArtifactIOError with the destination path."""
        (tmp_path / "blocker").write_bytes(b"x")
        with pytest.raises(ArtifactIOError, match="blocker"):
            atomic_write_bytes(tmp_path / "blocker" / "out" / "model.ckpt", b"\x00")


class TestLosoSplit:
    """Tests for leave-one-subject-out splitting."""

    def test_target_trials_only_in_test(self):
        """Test that all target trials are in test and none in train or validation."""
        manifest = _manifest({"S1": 10, "S2": 10, "S3": 10}, rs_per_subject=2)
        split = loso_split(manifest, SplitSpec(target_subject="S2", seed=0))
        assert set(split.test) == {r.id for r in manifest.trials if r.subject == "S2"}
        assert not any(t.startswith("S2-") for t in split.train + split.val)

    def test_partition_is_complete_and_disjoint(self):
        """Test that train, validation and test cover the manifest exactly once."""
        manifest = _manifest({"S1": 10, "S2": 10, "S3": 10}, rs_per_subject=2)
        split = loso_split(manifest, SplitSpec(target_subject="S1", seed=3))
        everything = split.train + split.val + split.test
        assert sorted(everything) == sorted(r.id for r in manifest.trials)
        assert len(set(everything)) == len(everything)

    def test_validation_size(self):
        """Test that the validation share is ceil(val_fraction * n) of the non-target trials."""
        manifest = _manifest({"S1": 10, "S2": 10, "S3": 10})
        split = loso_split(manifest, SplitSpec(target_subject="S3", seed=0, val_fraction=0.2))
        assert len(split.val) == 4
        assert len(split.train) == 16

    def test_deterministic_in_seed(self):
        """Test that equal seeds give equal splits and the output follows manifest order."""
        manifest = _manifest({"S1": 12, "S2": 12})
        a = loso_split(manifest, SplitSpec(target_subject="S1", seed=5))
        b = loso_split(manifest, SplitSpec(target_subject="S1", seed=5))
        assert a == b
        order = [r.id for r in manifest.trials]
        assert a.train == sorted(a.train, key=order.index)

    def test_two_subjects_is_minimum(self):
        """Test that a two-subject manifest splits and a one-subject manifest fails."""
        split = loso_split(_manifest({"S1": 5, "S2": 5}), SplitSpec(target_subject="S2"))
        assert len(split.test) == 5
        with pytest.raises(SplitError):
            loso_split(_manifest({"S1": 5}), SplitSpec(target_subject="S1"))

    def test_unknown_target(self):
        """Test that a target absent from the manifest raises SplitError."""
        with pytest.raises(SplitError):
            loso_split(_manifest({"S1": 5, "S2": 5}), SplitSpec(target_subject="S9"))

    def test_unstratifiable_pool_falls_back(self):
        """Test that strata too small to stratify still produce a valid split."""
        manifest = _manifest({"S1": 2, "S2": 3, "S3": 2})
        split = loso_split(manifest, SplitSpec(target_subject="S1", seed=0, val_fraction=0.4))
        assert len(split.val) == 2
        assert len(split.train) == 3


class TestTrialStore:
    """Tests for the audited trial store."""

    def test_reads_are_attributed_to_scope(self):
        """Test that reads inside an audit scope are counted per subject."""
        store = TrialStore([make_trial("a", subject="S1"), make_trial("b", subject="S2"), make_trial("c", subject="S2")])
        with store.audit("train"):
            store.get("b")
            store.get_many(["b", "c"])
        store.get("a")
        assert store.reads("train") == {"S2": 3}
        assert store.subjects_read("train") == {"S2"}
        assert store.reads("") == {"S1": 1}

    def test_metadata_lookups_do_not_count(self):
        """Test that ids/subject_of/kind_of are not reads."""
        store = TrialStore([make_trial("a", subject="S1"), make_trial("r", subject="S1", kind=TrialKind.RS)])
        with store.audit("meta"):
            assert store.ids(subject="S1", kind=TrialKind.RS) == ["r"]
            assert store.subject_of("a") == "S1"
            assert store.kind_of("r") == TrialKind.RS
        assert store.reads("meta") == {}

    def test_nested_scopes_restore(self):
        """Test that leaving an inner scope restores the outer one."""
        store = TrialStore([make_trial("a", subject="S1")])
        with store.audit("outer"):
            with store.audit("inner"):
                store.get("a")
            store.get("a")
        assert store.reads("inner") == {"S1": 1}
        assert store.reads("outer") == {"S1": 1}

    def test_duplicate_ids(self):
        """Test that duplicate ids are rejected."""
        with pytest.raises(KeyError):
            TrialStore([make_trial("a"), make_trial("a")])


class TestHashing:
    """Tests for array and model-state hashing."""

    def test_hash_ignores_insertion_order(self):
        """Test that mapping order does not change the hash."""
        a, b = np.arange(4.0), np.ones((2, 2))
        assert hash_arrays({"a": a, "b": b}) == hash_arrays({"b": b, "a": a})

    def test_hash_sensitive_to_dtype_and_values(self):
        """Test that dtype and value changes alter the hash."""
        base = hash_arrays({"a": np.zeros(3, dtype=np.float32)})
        assert base != hash_arrays({"a": np.zeros(3, dtype=np.float64)})
        assert base != hash_arrays({"a": np.array([0, 0, 1], dtype=np.float32)})
        assert len(base) == 16

    def test_hash_state_covers_buffers(self, tiny_model):
        """Test that running statistics are part of the model hash."""
        before = hash_state(tiny_model)
        with torch.no_grad():
            tiny_model.norm_layers()[0].running_mean += 1.0
        assert hash_state(tiny_model) != before
