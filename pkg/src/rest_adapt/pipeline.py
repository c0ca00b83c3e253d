"""
Orchestrator that glues the stages together per target subject.

`TransferPipeline` loads (or synthesizes) the dataset, preprocesses every raw
recording once into an audited `TrialStore`, and runs leave-one-subject-out
folds: stage-1 training on the other subjects, calibration of the target's
resting epochs, adaptation and evaluation.  Sweep, ablation, feature export
and gradient checks reuse the stage-1 checkpoint of a fold.

Artifacts of a target live under ``<output_dir>/<target>/``:
```
stage1.ckpt  stage1.key  history.ndjson
calibrated/  (eegpack + provenance.json)
adapted.ckpt
features.tsv  features_metrics.json  sweep.json  ablation.json
```

Key classes: `TransferPipeline`
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch

from rest_adapt.adapt import (AblationRow, AdaptResult, EvalResult, FeatureExport, RunReport, SubjectResult, SweepRow, adapt_model,
                              evaluate, export_features, rs_fraction_sweep)
from rest_adapt.calibrate import CalibratedSet, calibrate_all, restl_objective, save_calibrated_set
from rest_adapt.cli_format import format_report_tsv
from rest_adapt.config import ConfigManager, RunConfig
from rest_adapt.eegpack.atomic_io import atomic_write_text
from rest_adapt.eegpack.models import DatasetManifest, SplitSpec, Trial
from rest_adapt.eegpack.pack import MANIFEST_NAME, read_pack
from rest_adapt.eegpack.split import LosoSplit, loso_split
from rest_adapt.eegpack.store import TrialStore
from rest_adapt.errors import DataError
from rest_adapt.kinds import CalibInit, CalibMethod, TrialKind
from rest_adapt.losses import init_prototypes, total_loss
from rest_adapt.nncore.checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from rest_adapt.nncore.gradients import GradCheckReport, check_input_gradients, check_param_gradients
from rest_adapt.nncore.model import init_model, trials_to_tensor
from rest_adapt.preprocess import RS_SUFFIX, TS_SUFFIX, preprocess_all
from rest_adapt.synthgen import gen_dataset
from rest_adapt.trainer import TrainHistory, TrainResult, sample_triplets, train_stage1

ABLATION_VARIANTS: list[tuple[CalibMethod, CalibInit]] = [
    (CalibMethod.DEEPDREAM, CalibInit.NOISE),
    (CalibMethod.DEEPDREAM, CalibInit.RS),
    (CalibMethod.DEEPINVERSION, CalibInit.NOISE),
    (CalibMethod.DEEPINVERSION, CalibInit.RS),
    (CalibMethod.RESTL, CalibInit.RS),
]


class TransferPipeline:
    """
    Leave-one-subject-out transfer pipeline over one dataset.

    `config` is the resolved run configuration, `workers` bounds the thread
    pools of preprocessing, synthesis and calibration.  The dataset is loaded
    lazily on first use.
    """

    STAGE1_CKPT = "stage1.ckpt"
    STAGE1_KEY = "stage1.key"
    HISTORY = "history.ndjson"
    ADAPTED_CKPT = "adapted.ckpt"
    CALIBRATED_DIR = "calibrated"

    def __init__(self, config: RunConfig, workers: int = 1, config_manager: ConfigManager | None = None) -> None:
        self.log = logging.getLogger("TransferPipeline")
        self.config = config
        self.workers = max(1, workers)
        self.config_manager = config_manager or ConfigManager()
        self.output_dir = Path(config.output_dir)
        self._manifest: DatasetManifest | None = None
        self._store: TrialStore | None = None
        self._stage1: dict[str, TrainResult] = {}

    # ------------------------------------------------------------------
    # Data

    @property
    def dataset_dir(self) -> Path:
        if self.config.dataset is not None:
            return Path(self.config.dataset)
        return self.output_dir / "synthetic"

    def load(self) -> TrialStore:
        """
        Read (generating it first when synthetic) and preprocess the dataset.
        """
        if self._store is not None:
            return self._store
        directory = self.dataset_dir
        if self.config.dataset is None and not (directory / MANIFEST_NAME).is_file():
            assert self.config.synth is not None
            gen_dataset(self.config.synth, directory, workers=self.workers)
        manifest, raw = read_pack(directory)
        epochs = preprocess_all(raw, self.config.preprocess, workers=self.workers)
        self._manifest = manifest
        self._store = TrialStore(epochs)
        self.log.info("Loaded %s: %d subjects, %d raw trials, %d epochs", manifest.name, len(manifest.subjects), len(raw), len(epochs))
        return self._store

    @property
    def manifest(self) -> DatasetManifest:
        self.load()
        assert self._manifest is not None
        return self._manifest

    @property
    def store(self) -> TrialStore:
        return self.load()

    def targets(self, all_subjects: bool = False) -> list[str]:
        """
        Configured targets, or every subject when `all_subjects` or none are configured.
        """
        subjects = self.manifest.subjects
        if all_subjects or not self.config.targets:
            return subjects
        missing = [t for t in self.config.targets if t not in subjects]
        if missing:
            raise DataError(f"Target subjects {missing} not in dataset (subjects: {', '.join(subjects)})")
        return list(self.config.targets)

    def split(self, target: str) -> LosoSplit:
        """
        Split of the epoch ids: every epoch follows the partition of its raw recording.
        """
        spec = SplitSpec(target_subject=target, seed=self.config.stage_seed("split"), val_fraction=self.config.train.val_fraction)
        raw_split = loso_split(self.manifest, spec)
        store = self.store

        def expand(raw_ids: list[str]) -> list[str]:
            return [rid + suffix for rid in raw_ids for suffix in (RS_SUFFIX, TS_SUFFIX) if rid + suffix in store]

        return LosoSplit(train=expand(raw_split.train), val=expand(raw_split.val), test=expand(raw_split.test))

    def target_trials(self, target: str, kind: TrialKind) -> list[Trial]:
        """
        Every epoch of `target` of the given kind, across all sessions.
        """
        with self.store.audit(f"target:{target}"):
            return self.store.get_many(self.store.ids(subject=target, kind=kind))

    def subject_dir(self, target: str) -> Path:
        return self.output_dir / target

    # ------------------------------------------------------------------
    # Stage 1

    def _stage1_key(self, target: str) -> str:
        relevant = self.config.model_dump(mode="json", include={"dataset", "synth", "preprocess", "model", "train", "seed"})
        relevant["target"] = target
        return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def stage1(self, target: str, reuse: bool = True) -> TrainResult:
        """
        Stage-1 model for fold `target`.

        A checkpoint on disk produced with the same data / model / training
        settings is reused; otherwise the model is trained and saved.
        """
        if reuse and target in self._stage1:
            return self._stage1[target]
        out = self.subject_dir(target)
        ckpt, key_file = out / self.STAGE1_CKPT, out / self.STAGE1_KEY
        key = self._stage1_key(target)
        if reuse and ckpt.is_file() and key_file.is_file() and key_file.read_text(encoding="utf-8").strip() == key:
            model, bank = load_checkpoint(ckpt)
            history = TrainHistory(selected_epoch=self._selected_epoch(out / self.HISTORY))
            self.log.info("Reusing stage-1 checkpoint %s", ckpt)
            result = TrainResult(model=model, bank=bank, history=history)
        else:
            result = self._train(target)
            save_checkpoint(result.model, result.bank, ckpt)
            result.history.write_ndjson(out / self.HISTORY)
            atomic_write_text(key_file, key + "\n")
        self._stage1[target] = result
        return result

    @staticmethod
    def _selected_epoch(history_path: Path) -> int:
        if not history_path.is_file():
            return -1
        for line in history_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                if row.get("selected"):
                    return int(row["epoch"])
        return -1

    def _train(self, target: str) -> TrainResult:
        split = self.split(target)
        scope = f"stage1:{target}"
        with self.store.audit(scope):
            result = train_stage1(self.store, split.train, split.val, self.config.train, self.config.model, self.manifest.n_classes)
        touched = self.store.subjects_read(scope)
        if target in touched:
            raise DataError(f"Stage-1 training for target {target} read trials of the target subject")
        self.log.debug("Stage 1 for %s read subjects %s", target, sorted(touched))
        return result

    # ------------------------------------------------------------------
    # Stages 2 and 3

    def calibrate(self, target: str, method: CalibMethod | None = None, init: CalibInit | None = None,
                  rs_trials: list[Trial] | None = None) -> CalibratedSet:
        """
        Calibrate the target's resting epochs with the stage-1 model of the fold.
        """
        stage1 = self.stage1(target)
        updates = {k: v for k, v in (("method", method), ("init", init)) if v is not None}
        config = self.config.calibrate.model_copy(update=updates)
        rs = rs_trials if rs_trials is not None else self.target_trials(target, TrialKind.RS)
        return calibrate_all(stage1.model, stage1.bank, rs, config, workers=self.workers)

    def run_subject(self, target: str) -> SubjectResult:
        """
        Full fold: stage 1 → baseline evaluation → calibration → adaptation → evaluation.
        """
        out = self.subject_dir(target)
        stage1 = self.stage1(target)
        test = self.target_trials(target, TrialKind.TS)
        rs = self.target_trials(target, TrialKind.RS)
        baseline = evaluate(stage1.model, test)
        self.log.info("%s: stage-1 accuracy %.4f on %d trials", target, baseline.accuracy, baseline.n_trials)

        calibrated = self.calibrate(target, rs_trials=rs)
        self.save_calibration(target, calibrated)
        adapted = adapt_model(stage1.model, calibrated, self.config.adapt)
        save_checkpoint(adapted.model, stage1.bank, out / self.ADAPTED_CKPT)
        result = evaluate(adapted.model, test)
        self.log.info("%s: adapted accuracy %.4f (baseline %.4f)", target, result.accuracy, baseline.accuracy)

        return SubjectResult(subject=target, baseline_accuracy=baseline.accuracy, accuracy=result.accuracy, confusion=result.confusion,
                             n_test=result.n_trials, n_rs=len(rs), n_calibrated=len(calibrated), n_flagged=len(calibrated.flagged),
                             selected_epoch=stage1.selected_epoch, checkpoint_hash=checkpoint_hash(out / self.STAGE1_CKPT),
                             adapt_loss_trace=adapted.loss_trace)

    def save_calibration(self, target: str, calibrated: CalibratedSet) -> Path:
        directory = self.subject_dir(target) / self.CALIBRATED_DIR
        save_calibrated_set(calibrated, directory, name=f"calibrated-{target}")
        return directory

    def adapt(self, target: str) -> AdaptResult:
        """
        Adapt the stage-1 model of `target` on its saved calibrated set and save `adapted.ckpt`.

        When no calibrated set was saved yet, the target is calibrated first.
        """
        directory = self.subject_dir(target) / self.CALIBRATED_DIR
        if (directory / MANIFEST_NAME).is_file():
            _, trials = read_pack(directory)
            self.log.info("Using %d calibrated signals from %s", len(trials), directory)
        else:
            calibrated = self.calibrate(target)
            self.save_calibration(target, calibrated)
            trials = calibrated.to_trials()
        stage1 = self.stage1(target)
        adapted = adapt_model(stage1.model, trials, self.config.adapt)
        save_checkpoint(adapted.model, stage1.bank, self.subject_dir(target) / self.ADAPTED_CKPT)
        return adapted

    def evaluate_target(self, target: str) -> tuple[EvalResult, EvalResult | None]:
        """
        Stage-1 and (when `adapted.ckpt` exists) adapted accuracy on every task epoch of `target`.
        """
        test = self.target_trials(target, TrialKind.TS)
        baseline = evaluate(self.stage1(target).model, test)
        adapted_path = self.subject_dir(target) / self.ADAPTED_CKPT
        if not adapted_path.is_file():
            return baseline, None
        model, _ = load_checkpoint(adapted_path)
        return baseline, evaluate(model, test)

    def run(self, targets: list[str] | None = None, all_subjects: bool = False) -> RunReport:
        """
        Run every fold and write `report.json` / `report.tsv` plus the config snapshot.
        """
        chosen = targets or self.targets(all_subjects)
        self.config_manager.save_snapshot(self.config, self.output_dir)
        results = [self.run_subject(t) for t in chosen]
        report = RunReport.from_results(results, seed=self.config.seed, config=self.config.model_dump(mode="json"))
        atomic_write_text(self.output_dir / "report.json", report.model_dump_json(indent=2) + "\n")
        atomic_write_text(self.output_dir / "report.tsv", format_report_tsv(report))
        return report

    def sweep(self, target: str, fractions: list[float] | None = None) -> list[SweepRow]:
        """
        RS-fraction sweep on the stage-1 model of `target`.
        """
        stage1 = self.stage1(target)
        rows = rs_fraction_sweep(stage1.model, stage1.bank, self.target_trials(target, TrialKind.RS),
                                 self.target_trials(target, TrialKind.TS), fractions or self.config.sweep_fractions, self.config.calibrate,
                                 self.config.adapt, seed=self.config.stage_seed("split"), workers=self.workers)
        atomic_write_text(self.subject_dir(target) / "sweep.json", json.dumps([r.model_dump() for r in rows], indent=2) + "\n")
        return rows

    def ablation(self, target: str) -> list[AblationRow]:
        """
        Adaptation accuracy for each synthesis method / initialization pair, one shared stage-1 model.
        """
        stage1 = self.stage1(target)
        test = self.target_trials(target, TrialKind.TS)
        rs = self.target_trials(target, TrialKind.RS)
        rows = []
        for method, init in ABLATION_VARIANTS:
            calibrated = self.calibrate(target, method=method, init=init, rs_trials=rs)
            adapted = adapt_model(stage1.model, calibrated, self.config.adapt)
            accuracy = evaluate(adapted.model, test).accuracy
            rows.append(AblationRow(method=method.value, init=init.value, accuracy=accuracy, n_calibrated=len(calibrated)))
            self.log.info("%s: %s/%s accuracy %.4f", target, method.value, init.value, accuracy)
        atomic_write_text(self.subject_dir(target) / "ablation.json", json.dumps([r.model_dump() for r in rows], indent=2) + "\n")
        return rows

    def export(self, target: str) -> FeatureExport:
        """
        Feature export of the target's calibrated signals next to real task
        epochs (up to `export_real_per_subject` per subject).
        """
        stage1 = self.stage1(target)
        rs = self.target_trials(target, TrialKind.RS)
        calibrated = self.calibrate(target, rs_trials=rs)
        real_ids: list[str] = []
        for subject in self.store.subjects:
            real_ids.extend(self.store.ids(subject=subject, kind=TrialKind.TS)[:self.config.export_real_per_subject])
        with self.store.audit(f"export:{target}"):
            real = self.store.get_many(real_ids)
        out = self.subject_dir(target)
        export = export_features(stage1.model, stage1.bank, calibrated, real, sources=rs, path=out / "features.tsv")
        atomic_write_text(out / "features_metrics.json", json.dumps(export.metrics.as_dict(), indent=2) + "\n")
        return export

    # ------------------------------------------------------------------
    # Gradient verification

    def gradcheck(self, n_param_coords: int = 200, n_input_coords: int = 100) -> list[GradCheckReport]:
        """
        Finite-difference check of the stage-1 composite (parameters) and the
        calibration composite (input) on a freshly initialized double-precision model.
        """
        store = self.store
        subjects = store.subjects[:2]
        if len(subjects) < 2:
            raise DataError("Gradient check needs a dataset with at least 2 subjects")
        ts_ids = [tid for s in subjects for tid in store.ids(subject=s, kind=TrialKind.TS)[:3]]
        rs_pool = {s: store.ids(subject=s, kind=TrialKind.RS)[:2] for s in subjects}
        seed = self.config.stage_seed("model")
        plan = sample_triplets([store.subject_of(t) for t in ts_ids], rs_pool, seed, rs_per_subject=1)
        trials = store.get_many(ts_ids + plan.rs_ids)
        x = trials_to_tensor(trials, dtype=torch.float64)
        labels = torch.tensor([-1 if t.label is None else t.label for t in trials], dtype=torch.long)

        model = init_model(trials[0].n_channels, trials[0].n_samples, self.manifest.n_classes, self.config.model).double().eval()
        with torch.no_grad():
            labeled = labels >= 0
            bank = init_prototypes(model(x[labeled]).f, labels[labeled], self.manifest.n_classes, self.config.train.proto_eps)
            # Offset the prototypes so no distance sits at the clamp floor.
            bank.prototypes += torch.from_numpy(np.random.default_rng(seed).normal(0.0, 0.1, bank.prototypes.shape))
        triplets = plan.as_triplets()
        weights = self.config.train.weights

        def stage1_objective(out, _x):
            return total_loss(out, labels, triplets, bank, weights).total

        params = check_param_gradients(model, stage1_objective, x, n_coords=n_param_coords, seed=seed)
        z = x[len(ts_ids)]
        with torch.no_grad():
            g_ref = model(z[None]).g
        inputs = check_input_gradients(model, restl_objective(bank, 0, g_ref + 0.05, self.config.calibrate), z, n_coords=n_input_coords,
                                       seed=seed)
        return [params, inputs]
