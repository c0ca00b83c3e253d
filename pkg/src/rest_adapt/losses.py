"""
Objectives of the disentanglement stage and their shared pieces.

- cross-entropy on class logits;
- prototype task loss: distance of each task feature to its class prototype
  plus a margin hinge against every other prototype;
- subject triplet loss on subject embeddings;
- the weighted total and the moving-average prototype update.

Distances are Euclidean with the squared norm clamped at 1e-16 before the
square root, so the gradient at zero distance is zero instead of NaN.

Key classes: `PrototypeBank`, `LossComponents`
Key functions: `ce_loss`, `task_loss`, `subject_loss`, `total_loss`,
    `update_prototypes`, `init_prototypes`
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple

import torch
import torch.nn.functional as F

from rest_adapt.config import LossWeights
from rest_adapt.errors import LossInputError

if TYPE_CHECKING:
    from rest_adapt.nncore.model import ForwardOut

log = logging.getLogger("rest_adapt.losses")

SQ_DIST_FLOOR = 1e-16


@dataclass
class PrototypeBank:
    """
    One task-feature prototype per class ([K × D] tensor), the moving-average
    rate `eps`, and a tag recording how the bank was initialized.
    """

    prototypes: torch.Tensor
    eps: float = 1e-5
    init: str = "class-mean"

    @property
    def n_classes(self) -> int:
        return int(self.prototypes.shape[0])

    def clone(self) -> PrototypeBank:
        return dataclasses.replace(self, prototypes=self.prototypes.detach().clone())

    def to(self, dtype: torch.dtype) -> PrototypeBank:
        return dataclasses.replace(self, prototypes=self.prototypes.detach().to(dtype))


class LossComponents(NamedTuple):
    total: torch.Tensor
    ce: torch.Tensor
    task: torch.Tensor
    subject: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {name: float(value.detach()) for name, value in self._asdict().items()}


class Triplets(NamedTuple):
    """
    Row indices (into one forward batch) of anchors, positives and negatives.
    """

    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor


def euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Row-wise Euclidean distance, broadcasting over leading dimensions.
    """
    return torch.sqrt(torch.clamp(((a - b)**2).sum(dim=-1), min=SQ_DIST_FLOOR))


def _check_labels(labels: torch.Tensor, n_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise LossInputError(f"Labels must lie in [0, {n_classes}), got range [{int(labels.min())}, {int(labels.max())}]")


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Mean negative log-softmax probability of the true class.
    """
    if logits.shape[0] != labels.shape[0]:
        raise LossInputError(f"{logits.shape[0]} logit rows for {labels.shape[0]} labels")
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels.long())


def task_loss(f: torch.Tensor, labels: torch.Tensor, prototypes: torch.Tensor, margin: float) -> torch.Tensor:
    """
    ``mean_i [ d(f_i, P_yi) + sum_{j != yi} max(0, d(f_i, P_yi) - d(f_i, P_j) + m) ]``.
    """
    if f.shape[-1] != prototypes.shape[-1]:
        raise LossInputError(f"Feature dim {f.shape[-1]} does not match prototype dim {prototypes.shape[-1]}")
    if f.shape[0] != labels.shape[0]:
        raise LossInputError(f"{f.shape[0]} features for {labels.shape[0]} labels")
    _check_labels(labels, prototypes.shape[0])
    labels = labels.long()
    dist = euclidean(f[:, None, :], prototypes[None, :, :])
    own = dist.gather(1, labels[:, None])
    hinge = F.relu(own - dist + margin)
    others = torch.ones_like(dist).scatter_(1, labels[:, None], 0.0)
    return (own[:, 0] + (hinge * others).sum(dim=1)).mean()


def subject_loss(anchors: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, margin: float) -> torch.Tensor:
    """
    Triplet hinge ``mean max(0, d(a, p) - d(a, n) + m)``; zero for an empty triplet list.
    """
    if not anchors.shape[0] == positives.shape[0] == negatives.shape[0]:
        raise LossInputError(f"Triplet lists differ in length: {anchors.shape[0]}, {positives.shape[0]}, {negatives.shape[0]}")
    if anchors.shape[0] == 0:
        return anchors.new_zeros(())
    return F.relu(euclidean(anchors, positives) - euclidean(anchors, negatives) + margin).mean()


def combine_losses(ce: torch.Tensor, task: torch.Tensor, subject: torch.Tensor, weights: LossWeights) -> LossComponents:
    total = ce + weights.lambda1 * task + weights.lambda2 * subject
    return LossComponents(total=total, ce=ce, task=task, subject=subject)


def total_loss(out: ForwardOut, labels: torch.Tensor, triplets: Triplets | None, bank: PrototypeBank,
               weights: LossWeights) -> LossComponents:
    """
    Weighted stage-1 objective over one forward batch.

    `labels` holds -1 for resting rows; those rows only enter the subject
    term through `triplets`.
    """
    labeled = labels >= 0
    if not bool(labeled.any()):
        raise LossInputError("Batch contains no labeled rows")
    y = labels[labeled]
    ce = ce_loss(out.logits[labeled], y)
    task = task_loss(out.f[labeled], y, bank.prototypes.to(out.f.dtype), weights.margin)
    if triplets is None:
        subject = out.g.new_zeros(())
    else:
        subject = subject_loss(out.g[triplets.anchor], out.g[triplets.positive], out.g[triplets.negative], weights.margin)
    return combine_losses(ce, task, subject, weights)


def update_prototypes(bank: PrototypeBank, f: torch.Tensor, labels: torch.Tensor) -> PrototypeBank:
    """
    Moving-average step ``P_y <- P_y - (eps / N_y) * sum_{i: y_i = y} (P_y - f_i)``.

    Classes absent from the batch keep their prototype.  Returns a new bank.
    """
    _check_labels(labels, bank.n_classes)
    prototypes = bank.prototypes.detach().clone()
    f = f.detach().to(prototypes.dtype)
    labels = labels.long()
    if bank.eps == 0:
        return dataclasses.replace(bank, prototypes=prototypes)
    for y in torch.unique(labels).tolist():
        members = f[labels == y]
        residual = (prototypes[y] - members).sum(dim=0)
        prototypes[y] = prototypes[y] - (bank.eps / members.shape[0]) * residual
    return dataclasses.replace(bank, prototypes=prototypes)


def init_prototypes(f: torch.Tensor, labels: torch.Tensor, n_classes: int, eps: float) -> PrototypeBank:
    """
    Bank initialized at the class-wise mean of `f`.  Classes without samples start at the origin.
    """
    _check_labels(labels, n_classes)
    f = f.detach()
    prototypes = torch.zeros((n_classes, f.shape[1]), dtype=f.dtype)
    for y in range(n_classes):
        members = f[labels == y]
        if members.shape[0] == 0:
            log.warning("No samples of class %d for prototype initialization; starting at the origin", y)
            continue
        prototypes[y] = members.mean(dim=0)
    return PrototypeBank(prototypes=prototypes, eps=eps, init="class-mean")
