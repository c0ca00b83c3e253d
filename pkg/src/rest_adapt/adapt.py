"""
Stage 3: fine-tuning on calibrated signals, evaluation and the run report.

`adapt_model` fine-tunes a copy of the stage-1 model with cross-entropy only
(all parameters trainable, normalization statistics keep updating).
`evaluate` scores a model on labeled target trials.  `rs_fraction_sweep`
repeats calibration + adaptation on nested subsets of the resting trials, and
`export_features` writes per-trial features with a 2-D projection and cluster
metrics.

Key classes: `AdaptResult`, `EvalResult`, `SubjectResult`, `SweepRow`,
    `AblationRow`, `FeatureMetrics`, `RunReport`
Key functions: `adapt_model`, `evaluate`, `rs_fraction_subset`,
    `rs_fraction_sweep`, `export_features`
"""

import copy
import csv
import io
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from pydantic import BaseModel, Field
from sklearn.decomposition import PCA
from sklearn.metrics import confusion_matrix, silhouette_score

from rest_adapt.calibrate import CalibratedSet, calibrate_all
from rest_adapt.config import AdaptConfig, CalibConfig
from rest_adapt.eegpack.atomic_io import atomic_write_text
from rest_adapt.eegpack.hashing import hash_state
from rest_adapt.eegpack.models import Trial
from rest_adapt.errors import AdaptationError, EvaluationError
from rest_adapt.kinds import TrialKind
from rest_adapt.losses import PrototypeBank, ce_loss, euclidean
from rest_adapt.nncore.model import DisentangledEEGNet, trials_to_tensor

log = logging.getLogger("rest_adapt.adapt")


@dataclass
class AdaptResult:
    """
    Fine-tuned model and the calibrated-set cross-entropy (eval mode) before
    training and after each epoch.
    """

    model: DisentangledEEGNet
    loss_trace: list[float] = field(default_factory=list)


@torch.no_grad()
def _eval_ce(model: DisentangledEEGNet, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> float:
    model.eval()
    total = 0.0
    for start in range(0, x.shape[0], batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        total += float(ce_loss(model(xb).logits, yb)) * xb.shape[0]
    return total / x.shape[0]


def adapt_model(model: DisentangledEEGNet, calibrated: CalibratedSet | Sequence[Trial], config: AdaptConfig) -> AdaptResult:
    """
    CE-only fine-tuning of every parameter on the calibrated signals.

    The input model is not modified; a deep copy is trained and returned in
    eval mode.  Deterministic in `config.seed`.
    """
    trials = calibrated.to_trials() if isinstance(calibrated, CalibratedSet) else list(calibrated)
    if not trials:
        raise AdaptationError("Adaptation needs at least one calibrated signal")
    if any(t.label is None for t in trials):
        raise AdaptationError("Calibrated signals must carry class labels")
    adapted = copy.deepcopy(model)
    for p in adapted.parameters():
        p.requires_grad_(True)
    x = trials_to_tensor(trials)
    y = torch.tensor([t.label for t in trials], dtype=torch.long)
    seed = int(config.seed or 0)
    trace = [_eval_ce(adapted, x, y, config.batch_size)]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        optimizer = torch.optim.Adam(adapted.parameters(), lr=config.lr)
        for epoch in range(config.epochs):
            adapted.train()
            order = torch.from_numpy(rng.permutation(len(trials)))
            for start in range(0, len(trials), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss = ce_loss(adapted(x[idx]).logits, y[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            trace.append(_eval_ce(adapted, x, y, config.batch_size))
            log.debug("Adaptation epoch %d/%d: calibrated CE %.4f", epoch + 1, config.epochs, trace[-1])

    adapted.eval()
    return AdaptResult(model=adapted, loss_trace=trace)


@dataclass
class EvalResult:
    accuracy: float
    confusion: list[list[int]]
    n_trials: int
    predictions: list[int]


def evaluate(model: DisentangledEEGNet, trials: Sequence[Trial], batch_size: int = 256) -> EvalResult:
    """
    Accuracy and confusion matrix (rows = true class) on labeled trials.

    The model's mode is restored afterwards and its state is not changed.
    """
    if not trials:
        raise EvaluationError("Cannot evaluate on an empty test set")
    if any(t.kind != TrialKind.TS for t in trials):
        raise EvaluationError("Evaluation trials must all be labeled task trials")
    was_training = model.training
    model.eval()
    predictions: list[int] = []
    try:
        with torch.no_grad():
            for start in range(0, len(trials), batch_size):
                logits = model(trials_to_tensor(trials[start:start + batch_size]).to(next(model.parameters()).dtype)).logits
                predictions.extend(int(p) for p in logits.argmax(dim=1))
    finally:
        model.train(was_training)
    labels = [int(t.label) for t in trials if t.label is not None]
    confusion = confusion_matrix(labels, predictions, labels=list(range(model.n_classes)))
    accuracy = float(np.trace(confusion)) / len(trials)
    return EvalResult(accuracy=accuracy, confusion=confusion.astype(int).tolist(), n_trials=len(trials), predictions=predictions)


def rs_fraction_subset(rs_trials: Sequence[Trial], fraction: float, seed: int) -> list[Trial]:
    """
    First ``floor(fraction * N)`` trials of one seeded permutation, in original order.

    Subsets for increasing fractions are nested; fraction 1.0 returns every trial.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = int(math.floor(fraction * len(rs_trials) + 1e-9))
    chosen = sorted(np.random.default_rng(seed).permutation(len(rs_trials))[:count].tolist())
    return [rs_trials[i] for i in chosen]


class SweepRow(BaseModel):
    fraction: float
    n_rs: int
    n_calibrated: int = 0
    accuracy: float | None = None
    checkpoint_hash: str = ""
    skipped: bool = False


def rs_fraction_sweep(model: DisentangledEEGNet, bank: PrototypeBank, rs_trials: Sequence[Trial], test_trials: Sequence[Trial],
                      fractions: Sequence[float], calib_config: CalibConfig, adapt_config: AdaptConfig, seed: int,
                      workers: int = 1) -> list[SweepRow]:
    """
    Calibration + adaptation + evaluation for each resting-trial fraction.

    The same stage-1 model is reused for every fraction; its state hash is
    recorded per row.  Fractions selecting no trial yield a skipped row.
    """
    rows = []
    for fraction in fractions:
        subset = rs_fraction_subset(rs_trials, fraction, seed)
        state = hash_state(model)
        if not subset:
            log.warning("RS fraction %.2f selects no resting trials out of %d; skipped", fraction, len(rs_trials))
            rows.append(SweepRow(fraction=fraction, n_rs=0, checkpoint_hash=state, skipped=True))
            continue
        calibrated = calibrate_all(model, bank, subset, calib_config, workers=workers)
        adapted = adapt_model(model, calibrated, adapt_config)
        result = evaluate(adapted.model, test_trials)
        rows.append(SweepRow(fraction=fraction, n_rs=len(subset), n_calibrated=len(calibrated), accuracy=result.accuracy,
                             checkpoint_hash=state))
        log.info("RS fraction %.2f: %d resting trials, accuracy %.4f", fraction, len(subset), result.accuracy)
    return rows


@dataclass
class FeatureMetrics:
    """
    Cluster measurements of an export.

    `proto_agreement`: share of calibrated signals whose task feature is
    nearest to the prototype of their target class.
    `subject_silhouette`: silhouette of subject embeddings labeled by subject.
    `calib_subject_distance`: mean distance between the subject embedding of
    a calibrated signal and that of its resting source.
    `inter_subject_distance`: mean distance between subject embeddings of
    real trials belonging to different subjects.
    """

    proto_agreement: float
    subject_silhouette: float
    calib_subject_distance: float
    inter_subject_distance: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


@dataclass
class FeatureExport:
    rows: list[dict[str, Any]]
    metrics: FeatureMetrics


@torch.no_grad()
def _features(model: DisentangledEEGNet, trials: Sequence[Trial]) -> tuple[np.ndarray, np.ndarray]:
    if not trials:
        dim = model.feature_dim
        return np.zeros((0, dim)), np.zeros((0, dim))
    out = model(trials_to_tensor(trials).to(next(model.parameters()).dtype))
    return out.f.numpy().astype(np.float64), out.g.numpy().astype(np.float64)


def _project(features: np.ndarray) -> np.ndarray:
    if features.shape[0] < 2:
        return np.zeros((features.shape[0], 2))
    components = min(2, features.shape[0], features.shape[1])
    projected = PCA(n_components=components).fit_transform(features)
    if components < 2:
        projected = np.hstack([projected, np.zeros((projected.shape[0], 2 - components))])
    return projected


def _mean_cross_distance(g: np.ndarray, subjects: Sequence[str]) -> float:
    labels = np.asarray(subjects)
    diff = labels[:, None] != labels[None, :]
    if not diff.any():
        return float("nan")
    dist = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)
    return float(dist[diff].mean())


def export_features(model: DisentangledEEGNet, bank: PrototypeBank, calibrated: CalibratedSet, real: Sequence[Trial],
                    sources: Sequence[Trial] = (), path: str | Path | None = None) -> FeatureExport:
    """
    Task features, subject embeddings and their 2-D PCA projections of
    calibrated and real trials, with cluster metrics.

    `sources` are the resting trials the calibrated signals came from; when
    given, the subject-preservation distance is measured against them.  With
    `path` the rows are written as a tab-separated file with a header row.
    """
    was_training = model.training
    model.eval()
    try:
        calib_trials = calibrated.to_trials()
        f_cal, g_cal = _features(model, calib_trials)
        f_real, g_real = _features(model, real)
        source_by_id = {t.id: t for t in sources}
        source_list = [source_by_id[t.source_id] for t in calibrated.trials if t.source_id in source_by_id]
        _, g_src = _features(model, source_list)
    finally:
        model.train(was_training)

    f_all = np.vstack([f_cal, f_real])
    g_all = np.vstack([g_cal, g_real])
    f_proj, g_proj = _project(f_all), _project(g_all)

    groups = [("calibrated", t, c.source_id, c.method.value) for t, c in zip(calib_trials, calibrated.trials)]
    groups += [("real", t, "", "") for t in real]
    rows: list[dict[str, Any]] = []
    for i, (group, trial, source, method) in enumerate(groups):
        row: dict[str, Any] = {
            "id": trial.id,
            "group": group,
            "subject": trial.subject,
            "class": "" if trial.label is None else trial.label,
            "source": source,
            "method": method,
        }
        row.update({f"f{j}": f"{v:.6g}" for j, v in enumerate(f_all[i])})
        row.update({f"g{j}": f"{v:.6g}" for j, v in enumerate(g_all[i])})
        row.update({"f_pc1": f"{f_proj[i, 0]:.6g}", "f_pc2": f"{f_proj[i, 1]:.6g}"})
        row.update({"g_pc1": f"{g_proj[i, 0]:.6g}", "g_pc2": f"{g_proj[i, 1]:.6g}"})
        rows.append(row)

    prototypes = bank.prototypes.detach().double().numpy()
    if len(calib_trials):
        nearest = np.linalg.norm(f_cal[:, None, :] - prototypes[None, :, :], axis=-1).argmin(axis=1)
        agreement = float(np.mean(nearest == np.array([t.target_class for t in calibrated.trials])))
    else:
        agreement = float("nan")

    subjects = [t.subject for t in calib_trials] + [t.subject for t in real]
    n_subjects = len(set(subjects))
    if 2 <= n_subjects < len(subjects):
        silhouette = float(silhouette_score(g_all, subjects, metric="euclidean"))
    else:
        silhouette = float("nan")

    if len(source_list) == len(calib_trials) and len(source_list):
        calib_distance = float(np.linalg.norm(g_cal - g_src, axis=1).mean())
    else:
        calib_distance = float("nan")
    metrics = FeatureMetrics(proto_agreement=agreement, subject_silhouette=silhouette, calib_subject_distance=calib_distance,
                             inter_subject_distance=_mean_cross_distance(g_real, [t.subject for t in real]))

    if path is not None:
        buffer = io.StringIO()
        fieldnames = list(rows[0]) if rows else ["id"]
        writer = csv.DictWriter(buffer, fieldnames=fieldnames, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        atomic_write_text(path, buffer.getvalue())
        log.info("Exported %d feature rows to %s", len(rows), path)
    return FeatureExport(rows=rows, metrics=metrics)


class AblationRow(BaseModel):
    method: str
    init: str
    accuracy: float
    n_calibrated: int


class SubjectResult(BaseModel):
    """
    Outcome of one leave-one-subject-out fold.
    """

    subject: str
    baseline_accuracy: float = Field(..., ge=0, le=1, description="Stage-1 model on the target subject")
    accuracy: float = Field(..., ge=0, le=1, description="Adapted model on the target subject")
    confusion: list[list[int]]
    n_test: int
    n_rs: int
    n_calibrated: int
    n_flagged: int = 0
    selected_epoch: int
    checkpoint_hash: str
    adapt_loss_trace: list[float] = Field(default_factory=list)


class RunReport(BaseModel):
    """
    Per-subject accuracies with mean and population standard deviation, plus
    optional sweep / ablation tables and the resolved configuration.
    """

    seed: int
    subjects: list[SubjectResult] = Field(default_factory=list)
    mean_accuracy: float = 0.0
    std_accuracy: float = 0.0
    mean_baseline: float = 0.0
    std_baseline: float = 0.0
    sweep: dict[str, list[SweepRow]] = Field(default_factory=dict)
    ablation: dict[str, list[AblationRow]] = Field(default_factory=dict)
    config: dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def from_results(cls, results: Sequence[SubjectResult], seed: int, config: dict[str, Any]) -> "RunReport":
        accuracies = np.array([r.accuracy for r in results], dtype=np.float64)
        baselines = np.array([r.baseline_accuracy for r in results], dtype=np.float64)
        return cls(
            seed=seed,
            subjects=list(results),
            mean_accuracy=float(accuracies.mean()) if len(results) else 0.0,
            std_accuracy=float(accuracies.std()) if len(results) else 0.0,
            mean_baseline=float(baselines.mean()) if len(results) else 0.0,
            std_baseline=float(baselines.std()) if len(results) else 0.0,
            config=config,
        )
