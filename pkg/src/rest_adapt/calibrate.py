"""
Stage 2: turning target-subject resting signals into class-conditioned signals.

For every resting epoch `z` and class `k` the input itself is optimized with
Adam against a frozen model.  Three objectives are available:

- ``restl``: cross-entropy towards `k` + gamma1 × prototype task loss with
  prototype P_k + gamma2 × distance between the subject embedding of the
  iterate and that of the original `z` (computed once);
- ``deepdream``: cross-entropy + total-variation and squared-norm priors;
- ``deepinversion``: the DeepDream terms + matching of the batch statistics
  seen by every normalization layer against its running statistics.

The start is either the resting signal or standard Gaussian noise.  Pairs are
independent (fresh optimizer, per-pair noise seed), so `calibrate_all` gives
the same set regardless of worker count.

Key classes: `Calibrator`, `CalibratedTrial`, `CalibratedSet`
Key functions: `calibrate_signal`, `calibrate_all`, `baseline_deepdream`,
    `baseline_deepinversion`, `restl_objective`, `norm_stats_penalty`,
    `save_calibrated_set`
"""

import json
import logging
import zlib
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from rest_adapt.config import CalibConfig
from rest_adapt.eegpack.atomic_io import atomic_write_text
from rest_adapt.eegpack.models import DatasetManifest, Trial
from rest_adapt.eegpack.pack import write_pack
from rest_adapt.errors import DataError
from rest_adapt.kinds import CalibInit, CalibMethod, TrialKind
from rest_adapt.losses import PrototypeBank, ce_loss, euclidean, task_loss
from rest_adapt.nncore.gradients import Objective
from rest_adapt.nncore.model import DisentangledEEGNet, ForwardOut

log = logging.getLogger("rest_adapt.calibrate")

PROVENANCE_NAME = "provenance.json"


@dataclass
class CalibratedTrial:
    """
    One calibrated signal with its provenance.
    """

    data: np.ndarray
    source_id: str
    subject: str
    session: str
    fs: float
    target_class: int
    method: CalibMethod
    init: CalibInit
    initial_objective: float
    final_objective: float
    trace: list[float] = field(default_factory=list)
    flagged: bool = False
    reason: str | None = None

    @property
    def id(self) -> str:
        return f"{self.source_id}-c{self.target_class}"

    def to_trial(self) -> Trial:
        return Trial(id=self.id, subject=self.subject, session=self.session, kind=TrialKind.TS, label=self.target_class, fs=self.fs,
                     data=self.data)


@dataclass
class CalibratedSet:
    """
    Calibrated signals in (source trial, class) order, plus the pairs that were excluded.
    """

    trials: list[CalibratedTrial]
    n_classes: int
    flagged: list[CalibratedTrial] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trials)

    def class_counts(self) -> list[int]:
        counts = [0] * self.n_classes
        for trial in self.trials:
            counts[trial.target_class] += 1
        return counts

    def to_trials(self) -> list[Trial]:
        return [t.to_trial() for t in self.trials]


def _pair_seed(seed: int, trial_id: str, k: int) -> list[int]:
    return [seed, zlib.crc32(trial_id.encode("utf-8")), k]


def total_variation(z: torch.Tensor) -> torch.Tensor:
    return (z[..., 1:] - z[..., :-1]).abs().sum()


def norm_stats_penalty(taps: Sequence[tuple[nn.BatchNorm2d, torch.Tensor]]) -> torch.Tensor:
    """
    Sum over normalization layers of ``||mean - running_mean||^2 + ||var - running_var||^2``.

    Batch statistics are taken over batch and spatial positions per feature map,
    with the population variance.
    """
    total = taps[0][1].new_zeros(())
    for layer, h in taps:
        mean = h.mean(dim=(0, 2, 3))
        var = h.var(dim=(0, 2, 3), unbiased=False)
        total = total + ((mean - layer.running_mean)**2).sum() + ((var - layer.running_var)**2).sum()
    return total


def restl_objective(bank: PrototypeBank, k: int, g_ref: torch.Tensor, config: CalibConfig) -> Objective:
    """
    Calibration objective towards class `k` keeping the subject embedding near `g_ref`.
    """

    def objective(out: ForwardOut, z: torch.Tensor) -> torch.Tensor:
        labels = torch.full((out.logits.shape[0],), k, dtype=torch.long)
        value = ce_loss(out.logits, labels)
        if config.gamma1:
            value = value + config.gamma1 * task_loss(out.f, labels, bank.prototypes.to(out.f.dtype), config.margin)
        if config.gamma2:
            value = value + config.gamma2 * euclidean(out.g, g_ref.to(out.g.dtype)).mean()
        return value

    return objective


def dream_objective(k: int, config: CalibConfig) -> Objective:
    """
    Cross-entropy towards class `k` with total-variation and squared-norm priors.
    """

    def objective(out: ForwardOut, z: torch.Tensor) -> torch.Tensor:
        value = ce_loss(out.logits, torch.full((out.logits.shape[0],), k, dtype=torch.long))
        if config.tv_weight:
            value = value + config.tv_weight * total_variation(z)
        if config.l2_weight:
            value = value + config.l2_weight * (z**2).sum()
        return value

    return objective


@contextmanager
def frozen(model: nn.Module) -> Iterator[nn.Module]:
    """
    Eval mode with parameter gradients disabled; flags and mode are restored on exit.
    """
    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
        model.train(was_training)


class Calibrator:
    """
    Optimizes inputs of a frozen `model` with the objective selected by `config.method`.

    Call through `calibrate_all` or inside `frozen(model)`; `calibrate_pair`
    itself never changes the model.
    """

    def __init__(self, model: DisentangledEEGNet, bank: PrototypeBank, config: CalibConfig) -> None:
        self.log = logging.getLogger("Calibrator")
        self.model = model
        self.bank = bank
        self.config = config

    def _evaluate(self, z: torch.Tensor, k: int, g_ref: torch.Tensor) -> torch.Tensor:
        method = self.config.method
        if method == CalibMethod.RESTL:
            return restl_objective(self.bank, k, g_ref, self.config)(self.model(z), z)
        if method == CalibMethod.DEEPINVERSION and self.config.stats_weight:
            out, taps = self.model.forward_with_norm_inputs(z)
            return dream_objective(k, self.config)(out, z) + self.config.stats_weight * norm_stats_penalty(taps)
        return dream_objective(k, self.config)(self.model(z), z)

    def _start(self, source: Trial, k: int) -> torch.Tensor:
        if self.config.init == CalibInit.NOISE:
            rng = np.random.default_rng(_pair_seed(int(self.config.seed or 0), source.id, k))
            return torch.from_numpy(rng.standard_normal(source.data.shape).astype(np.float32))
        return torch.from_numpy(np.array(source.data, dtype=np.float32, copy=True))

    def calibrate_pair(self, source: Trial, k: int) -> CalibratedTrial:
        """
        Run `config.steps` Adam updates on the input for target class `k`.

        A non-finite objective stops the run, keeps the last finite iterate
        and flags the result.
        """
        if not 0 <= k < self.model.n_classes:
            raise IndexError(f"target class {k} outside [0, {self.model.n_classes})")
        original = torch.from_numpy(np.array(source.data, dtype=np.float32, copy=True))[None]
        with torch.no_grad():
            g_ref = self.model(original).g.detach()

        z = self._start(source, k)[None].requires_grad_(True)
        optimizer = torch.optim.Adam([z], lr=self.config.lr)
        trace: list[float] = []
        last_finite = z.detach().clone()
        flagged, reason = False, None
        for step in range(self.config.steps + 1):
            value = self._evaluate(z, k, g_ref)
            current = float(value.detach())
            if not np.isfinite(current):
                flagged, reason = True, f"non-finite objective at step {step}"
                with torch.no_grad():
                    z.copy_(last_finite)
                break
            trace.append(current)
            last_finite = z.detach().clone()
            if step == self.config.steps:
                break
            optimizer.zero_grad()
            value.backward()
            optimizer.step()

        return CalibratedTrial(data=last_finite[0].numpy(), source_id=source.id, subject=source.subject, session=source.session,
                               fs=source.fs, target_class=k, method=self.config.method, init=self.config.init,
                               initial_objective=trace[0] if trace else float("nan"),
                               final_objective=trace[-1] if trace else float("nan"), trace=trace, flagged=flagged, reason=reason)


def calibrate_signal(model: DisentangledEEGNet, bank: PrototypeBank, z: Trial, k: int, config: CalibConfig) -> CalibratedTrial:
    """
    Calibrate one resting trial towards class `k`; the model is left untouched.
    """
    with frozen(model):
        return Calibrator(model, bank, config).calibrate_pair(z, k)


def baseline_deepdream(model: DisentangledEEGNet, z: Trial, k: int, config: CalibConfig) -> CalibratedTrial:
    """
    DeepDream synthesis for class `k`, started from `z` or from noise per `config.init`.
    """
    config = config.model_copy(update={"method": CalibMethod.DEEPDREAM})
    bank = PrototypeBank(prototypes=torch.zeros((model.n_classes, model.feature_dim)))
    return calibrate_signal(model, bank, z, k, config)


def baseline_deepinversion(model: DisentangledEEGNet, z: Trial, k: int, config: CalibConfig) -> CalibratedTrial:
    """
    DeepInversion synthesis for class `k`: DeepDream priors plus normalization-statistics matching.
    """
    config = config.model_copy(update={"method": CalibMethod.DEEPINVERSION})
    bank = PrototypeBank(prototypes=torch.zeros((model.n_classes, model.feature_dim)))
    return calibrate_signal(model, bank, z, k, config)


def calibrate_all(model: DisentangledEEGNet, bank: PrototypeBank, rs_trials: Sequence[Trial], config: CalibConfig,
                  workers: int = 1) -> CalibratedSet:
    """
    Calibrate every resting trial towards every class.

    Output order is (trial, class); flagged pairs are logged and excluded.
    """
    if not rs_trials:
        raise DataError("No resting-state trials to calibrate")
    pairs = [(trial, k) for trial in rs_trials for k in range(model.n_classes)]
    with frozen(model):
        calibrator = Calibrator(model, bank, config)
        if workers <= 1:
            results = [calibrator.calibrate_pair(t, k) for t, k in pairs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda pair: calibrator.calibrate_pair(*pair), pairs))

    kept = [r for r in results if not r.flagged]
    flagged = [r for r in results if r.flagged]
    for r in flagged:
        log.warning("Calibration of %s towards class %d flagged: %s", r.source_id, r.target_class, r.reason)
    log.info("Calibrated %d resting trials into %d signals (%s/%s, %d flagged)", len(rs_trials), len(kept), config.method.value,
             config.init.value, len(flagged))
    return CalibratedSet(trials=kept, n_classes=model.n_classes, flagged=flagged)


def save_calibrated_set(calibrated: CalibratedSet, directory: str | Path, name: str = "calibrated") -> DatasetManifest:
    """
    Write the set as an eegpack (kind TS, label = target class) plus `provenance.json`.
    """
    manifest = write_pack(calibrated.to_trials(), directory, name=name, n_classes=calibrated.n_classes)
    provenance = {
        "trials": {
            t.id: {
                "source": t.source_id,
                "class": t.target_class,
                "method": t.method.value,
                "init": t.init.value,
                "initial_objective": t.initial_objective,
                "final_objective": t.final_objective,
            } for t in calibrated.trials
        },
        "flagged": [{
            "source": t.source_id,
            "class": t.target_class,
            "reason": t.reason
        } for t in calibrated.flagged],
    }
    atomic_write_text(Path(directory) / PROVENANCE_NAME, json.dumps(provenance, indent=2) + "\n")
    return manifest
