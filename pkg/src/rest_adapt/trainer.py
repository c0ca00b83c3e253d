"""
Stage 1: disentangled classifier training on the non-target subjects.

Each optimization step draws a subject-stratified batch of labeled epochs,
appends resting epochs of the batch subjects for the subject term, samples
triplets, applies one Adam step on the weighted objective and one
moving-average prototype update.  After every epoch the model is validated in
eval mode; the epoch with the lowest validation total is returned.

All randomness (batch order, dropout, triplets) derives from
`TrainConfig.seed`; the global torch RNG state is restored afterwards.

Key classes: `Stage1Trainer`, `TrainResult`, `TrainHistory`, `EpochRecord`, `TripletPlan`
Key functions: `train_stage1`, `sample_triplets`, `subject_batches`, `lr_at`
"""

import copy
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel

from rest_adapt.config import ModelConfig, TrainConfig
from rest_adapt.eegpack.atomic_io import atomic_write_text
from rest_adapt.eegpack.store import TrialStore
from rest_adapt.errors import DataError, DivergenceError, TripletError
from rest_adapt.kinds import TrialKind
from rest_adapt.losses import LossComponents, PrototypeBank, Triplets, euclidean, init_prototypes, total_loss, update_prototypes
from rest_adapt.nncore.model import DisentangledEEGNet, init_model, trials_to_tensor

# Offset separating the validation triplet stream from the training one.
VAL_SEED_OFFSET = 7919


def lr_at(epoch: int, config: TrainConfig) -> float:
    """
    Learning rate of `epoch` (0-based): multiplied by `decay` every `decay_every` epochs.
    """
    return config.lr * config.decay**(epoch // config.decay_every)


@dataclass
class TripletPlan:
    """
    Triplets over the rows of one batch.

    Rows ``0 .. len(batch) - 1`` are the batch trials; `rs_ids` are appended
    after them.  `anchor`, `positive` and `negative` index those rows.
    """

    rs_ids: list[str]
    anchor: list[int]
    positive: list[int]
    negative: list[int]

    def as_triplets(self) -> Triplets:
        return Triplets(anchor=torch.tensor(self.anchor, dtype=torch.long), positive=torch.tensor(self.positive, dtype=torch.long),
                        negative=torch.tensor(self.negative, dtype=torch.long))


def sample_triplets(batch_subjects: Sequence[str], rs_pool: Mapping[str, Sequence[str]], seed: int, rs_per_subject: int = 2) -> TripletPlan:
    """
    Draw resting epochs for the batch subjects and one triplet per row.

    Every row (labeled or resting) is an anchor.  Its positive is another row
    of the same subject regardless of class or kind, its negative a row of a
    different subject.  Deterministic in the arguments.
    """
    rng = np.random.default_rng(seed)
    subjects_in_batch = list(dict.fromkeys(batch_subjects))
    if len(subjects_in_batch) < 2:
        raise TripletError(f"Triplets need at least 2 subjects per batch, got {subjects_in_batch}")

    rs_ids: list[str] = []
    row_subjects = list(batch_subjects)
    for subject in subjects_in_batch:
        pool = list(rs_pool.get(subject, ()))
        take = min(rs_per_subject, len(pool))
        if take:
            for i in sorted(rng.choice(len(pool), size=take, replace=False).tolist()):
                rs_ids.append(pool[i])
                row_subjects.append(subject)

    rows_by_subject: dict[str, list[int]] = {}
    for row, subject in enumerate(row_subjects):
        rows_by_subject.setdefault(subject, []).append(row)

    anchor, positive, negative = [], [], []
    for row, subject in enumerate(row_subjects):
        same = [r for r in rows_by_subject[subject] if r != row] or [row]
        others = [r for s, rows in rows_by_subject.items() if s != subject for r in rows]
        anchor.append(row)
        positive.append(same[int(rng.integers(len(same)))])
        negative.append(others[int(rng.integers(len(others)))])
    return TripletPlan(rs_ids=rs_ids, anchor=anchor, positive=positive, negative=negative)


def subject_batches(ids: Sequence[str], subjects: Sequence[str], batch_size: int, rng: np.random.Generator) -> list[list[str]]:
    """
    Shuffle `ids` into batches that each span at least two subjects whenever the input does.

    Trials are dealt round-robin over the batches, largest subject first, so a
    subject with at least as many trials as there are batches appears in every
    batch and the remaining subjects cover the rest.  The batch count is
    ``ceil(len(ids) / batch_size)``, lowered when the trials outside the largest
    subject are too few to reach every batch; batches then grow beyond
    `batch_size`.
    """
    by_subject: dict[str, list[str]] = {}
    for tid, subject in zip(ids, subjects):
        by_subject.setdefault(subject, []).append(tid)
    if not by_subject:
        return []
    total = len(ids)
    tie_break = {s: float(r) for s, r in zip(sorted(by_subject), rng.random(len(by_subject)))}
    order = sorted(by_subject, key=lambda s: (-len(by_subject[s]), tie_break[s]))

    n_batches = -(-total // batch_size)
    if len(order) > 1:
        rest = total - len(by_subject[order[0]])
        n_batches = max(1, min(n_batches, rest, total // 2))

    batches: list[list[str]] = [[] for _ in range(n_batches)]
    cursor = int(rng.integers(n_batches))
    for subject in order:
        members = by_subject[subject]
        for i in rng.permutation(len(members)):
            batches[cursor % n_batches].append(members[int(i)])
            cursor += 1
    for batch in batches:
        rng.shuffle(batch)
    return [batches[int(i)] for i in rng.permutation(n_batches)]


class EpochRecord(BaseModel):
    """
    One line of the training history.
    """

    epoch: int
    lr: float
    train: dict[str, float]
    val: dict[str, float]
    val_accuracy: float
    val_proto_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = -1

    @property
    def lr_trace(self) -> list[float]:
        return [r.lr for r in self.records]

    def write_ndjson(self, path: str | Path) -> Path:
        """
        Write one JSON object per epoch; the selected epoch is flagged.
        """
        lines = []
        for record in self.records:
            row = record.model_dump()
            row["selected"] = record.epoch == self.selected_epoch
            lines.append(json.dumps(row, sort_keys=True))
        path = Path(path)
        atomic_write_text(path, "\n".join(lines) + "\n")
        return path


@dataclass
class TrainResult:
    model: DisentangledEEGNet
    bank: PrototypeBank
    history: TrainHistory

    @property
    def selected_epoch(self) -> int:
        return self.history.selected_epoch


class Stage1Trainer:
    """
    Trains a `DisentangledEEGNet` on trials served by `store`.

    `n_classes` is the class count of the dataset; input shape is taken from
    the first training trial.
    """

    def __init__(self, store: TrialStore, config: TrainConfig, model_config: ModelConfig, n_classes: int) -> None:
        self.log = logging.getLogger("Stage1Trainer")
        self.store = store
        self.config = config
        self.model_config = model_config
        self.n_classes = n_classes

    def _partition(self, ids: Sequence[str]) -> tuple[list[str], dict[str, list[str]]]:
        labeled = [t for t in ids if self.store.kind_of(t) == TrialKind.TS]
        rs_pool: dict[str, list[str]] = {}
        for t in ids:
            if self.store.kind_of(t) == TrialKind.RS:
                rs_pool.setdefault(self.store.subject_of(t), []).append(t)
        return labeled, rs_pool

    def _rows(self, batch: list[str], plan: TripletPlan | None) -> tuple[torch.Tensor, torch.Tensor]:
        ids = batch + (plan.rs_ids if plan else [])
        trials = self.store.get_many(ids)
        labels = torch.tensor([-1 if t.label is None else t.label for t in trials], dtype=torch.long)
        return trials_to_tensor(trials), labels

    def _plan(self, batch: list[str], rs_pool: Mapping[str, Sequence[str]], seed: int, strict: bool) -> TripletPlan | None:
        if self.config.weights.lambda2 == 0:
            return None
        try:
            return sample_triplets([self.store.subject_of(t) for t in batch], rs_pool, seed, self.config.rs_per_subject)
        except TripletError:
            if strict:
                raise
            return None

    def _step(self, model: DisentangledEEGNet, optimizer: torch.optim.Optimizer, bank: PrototypeBank, batch: list[str],
              plan: TripletPlan | None) -> tuple[LossComponents, PrototypeBank]:
        x, labels = self._rows(batch, plan)
        out = model(x)
        comps = total_loss(out, labels, plan.as_triplets() if plan else None, bank, self.config.weights)
        if not bool(torch.isfinite(comps.total)):
            raise FloatingPointError(f"non-finite loss {comps.as_floats()}")
        optimizer.zero_grad()
        comps.total.backward()
        optimizer.step()
        labeled = labels >= 0
        return comps, update_prototypes(bank, out.f[labeled], labels[labeled])

    @torch.no_grad()
    def _initial_bank(self, model: DisentangledEEGNet, labeled: list[str]) -> PrototypeBank:
        """
        Prototypes at the class means of the untrained model's task features.

        The means are taken once, before the first optimizer step, over every
        labeled training trial with the model in eval mode (running
        normalization statistics, no dropout).  They are not re-estimated
        over the first epoch; from then on only the moving-average update
        moves them.  The model is handed back in train mode.
        """
        model.eval()
        features, labels = [], []
        for start in range(0, len(labeled), self.config.batch_size):
            x, y = self._rows(labeled[start:start + self.config.batch_size], None)
            features.append(model(x).f)
            labels.append(y)
        model.train()
        return init_prototypes(torch.cat(features), torch.cat(labels), self.n_classes, self.config.proto_eps)

    @torch.no_grad()
    def validate(self, model: DisentangledEEGNet, bank: PrototypeBank, val_ids: Sequence[str]) -> tuple[dict[str, float], float, float]:
        """
        Mean loss components, classifier accuracy and nearest-prototype accuracy on `val_ids`.
        """
        was_training = model.training
        model.eval()
        labeled, rs_pool = self._partition(val_ids)
        rng = np.random.default_rng(int(self.config.seed or 0) + VAL_SEED_OFFSET)
        batches = subject_batches(labeled, [self.store.subject_of(t) for t in labeled], self.config.batch_size, rng)
        sums: dict[str, float] = {}
        correct = proto_correct = count = 0
        for i, batch in enumerate(batches):
            plan = self._plan(batch, rs_pool, int(self.config.seed or 0) + VAL_SEED_OFFSET + i, strict=False)
            x, labels = self._rows(batch, plan)
            out = model(x)
            comps = total_loss(out, labels, plan.as_triplets() if plan else None, bank, self.config.weights)
            n = len(batch)
            for name, value in comps.as_floats().items():
                sums[name] = sums.get(name, 0.0) + value * n
            y = labels[:n]
            correct += int((out.logits[:n].argmax(dim=1) == y).sum())
            nearest = euclidean(out.f[:n, None, :], bank.prototypes[None, :, :].to(out.f.dtype)).argmin(dim=1)
            proto_correct += int((nearest == y).sum())
            count += n
        model.train(was_training)
        return {k: v / count for k, v in sums.items()}, correct / count, proto_correct / count

    def fit(self, train_ids: Sequence[str], val_ids: Sequence[str]) -> TrainResult:
        """
        Train for `config.epochs` epochs and return the minimum-validation-loss checkpoint.
        """
        labeled, rs_pool = self._partition(train_ids)
        val_labeled, _ = self._partition(val_ids)
        if not labeled:
            raise DataError("Stage-1 training set has no labeled trials")
        if not val_labeled:
            raise DataError("Stage-1 validation set has no labeled trials")
        first = self.store.get(labeled[0])
        seed = int(self.config.seed or 0)
        history = TrainHistory()

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = init_model(first.n_channels, first.n_samples, self.n_classes, self.model_config)
            bank = self._initial_bank(model, labeled)
            optimizer = torch.optim.Adam(model.parameters(), lr=self.config.lr, betas=self.config.betas, eps=self.config.adam_eps)
            rng = np.random.default_rng(seed)
            best_state = copy.deepcopy(model.state_dict())
            best_bank = bank.clone()
            best_loss = float("inf")

            for epoch in range(self.config.epochs):
                lr = lr_at(epoch, self.config)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                model.train()
                batches = subject_batches(labeled, [self.store.subject_of(t) for t in labeled], self.config.batch_size, rng)
                sums: dict[str, float] = {}
                seen = 0
                for batch in batches:
                    plan = self._plan(batch, rs_pool, int(rng.integers(2**31)), strict=True)
                    try:
                        comps, bank = self._step(model, optimizer, bank, batch, plan)
                    except FloatingPointError as exc:
                        model.load_state_dict(best_state)
                        result = TrainResult(model=model.eval(), bank=best_bank, history=history)
                        raise DivergenceError(f"Stage-1 training diverged in epoch {epoch}: {exc}", result=result) from exc
                    for name, value in comps.as_floats().items():
                        sums[name] = sums.get(name, 0.0) + value * len(batch)
                    seen += len(batch)

                val, val_acc, val_proto = self.validate(model, bank, val_ids)
                if not np.isfinite(val["total"]):
                    model.load_state_dict(best_state)
                    result = TrainResult(model=model.eval(), bank=best_bank, history=history)
                    raise DivergenceError(f"Validation loss is not finite in epoch {epoch}", result=result)
                record = EpochRecord(epoch=epoch, lr=lr, train={k: v / seen for k, v in sums.items()}, val=val, val_accuracy=val_acc,
                                     val_proto_accuracy=val_proto)
                history.records.append(record)
                self.log.info("Epoch %d/%d lr=%.3g train=%.4f val=%.4f val_acc=%.3f", epoch + 1, self.config.epochs, lr,
                              record.train["total"], val["total"], val_acc)
                if val["total"] < best_loss:
                    best_loss = val["total"]
                    best_state = copy.deepcopy(model.state_dict())
                    best_bank = bank.clone()
                    history.selected_epoch = epoch

        model.load_state_dict(best_state)
        model.eval()
        self.log.info("Selected epoch %d (val total %.4f)", history.selected_epoch, best_loss)
        return TrainResult(model=model, bank=best_bank, history=history)


def train_stage1(store: TrialStore, train_ids: Sequence[str], val_ids: Sequence[str], config: TrainConfig, model_config: ModelConfig,
                 n_classes: int) -> TrainResult:
    """
    Functional entry point; see `Stage1Trainer.fit`.
    """
    return Stage1Trainer(store, config, model_config, n_classes).fit(train_ids, val_ids)
