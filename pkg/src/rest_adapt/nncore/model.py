"""
Disentangled compact-convolution EEG encoder.

A shared stem (temporal convolution + depthwise spatial convolution) feeds
two branches of identical separable-convolution shape: the task encoder,
whose time-averaged output is the task feature `f`, and the subject encoder,
which adds a final linear layer to give the subject embedding `g`.  The
classifier maps `f` to class logits.

Input batches are [N × C × T] tensors of preprocessed epochs.

Key classes: `DisentangledEEGNet`, `ForwardOut`
Key functions: `init_model`, `forward_trials`, `trials_to_tensor`
"""

from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from rest_adapt.config import ModelConfig
from rest_adapt.eegpack.models import Trial
from rest_adapt.errors import ConfigError, DimensionError


class ForwardOut(NamedTuple):
    """
    Per-trial outputs of one forward pass: task features, subject embeddings, logits.
    """

    f: torch.Tensor
    g: torch.Tensor
    logits: torch.Tensor


def _separable_block(in_maps: int, config: ModelConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_maps, in_maps, (1, config.separable_length), padding="same", groups=in_maps, bias=False),
        nn.Conv2d(in_maps, config.f2, (1, 1), bias=False),
        nn.BatchNorm2d(config.f2, eps=config.norm_eps, momentum=config.norm_momentum),
        nn.ELU(),
        nn.AvgPool2d((1, 8)),
        nn.Dropout(config.dropout),
    )


class DisentangledEEGNet(nn.Module):
    """
    Stem / task encoder / subject encoder / classifier.

    `n_channels`, `n_samples` and `n_classes` fix the input and output shapes;
    `config` holds the layer sizes and is stored with checkpoints.
    """

    def __init__(self, n_channels: int, n_samples: int, n_classes: int, config: ModelConfig) -> None:
        super().__init__()
        if n_channels < 1:
            raise ConfigError(f"Model needs at least one channel, got {n_channels}")
        if n_samples < config.kern_length:
            raise ConfigError(f"Epochs of {n_samples} samples are shorter than the temporal kernel ({config.kern_length})")
        if n_samples // 32 < 1:
            raise ConfigError(f"Epochs of {n_samples} samples vanish after pooling (need at least 32)")
        if n_classes < 2:
            raise ConfigError(f"Need at least 2 classes, got {n_classes}")
        self.n_channels = n_channels
        self.n_samples = n_samples
        self.n_classes = n_classes
        self.config = config

        maps = config.f1 * config.depth
        self.stem = nn.Sequential(
            nn.Conv2d(1, config.f1, (1, config.kern_length), padding="same", bias=False),
            nn.BatchNorm2d(config.f1, eps=config.norm_eps, momentum=config.norm_momentum),
            nn.Conv2d(config.f1, maps, (n_channels, 1), groups=config.f1, bias=False),
            nn.BatchNorm2d(maps, eps=config.norm_eps, momentum=config.norm_momentum),
            nn.ELU(),
            nn.AvgPool2d((1, 4)),
            nn.Dropout(config.dropout),
        )
        self.task_encoder = _separable_block(maps, config)
        self.subject_encoder = _separable_block(maps, config)
        self.subject_head = nn.Linear(config.f2, config.f2)
        self.classifier = nn.Linear(config.f2, n_classes)

    @property
    def feature_dim(self) -> int:
        return self.config.f2

    def architecture(self) -> dict:
        """
        Everything needed to rebuild an identical, untrained module.
        """
        return {
            "channels": self.n_channels,
            "samples": self.n_samples,
            "classes": self.n_classes,
            "model": self.config.model_dump(mode="json"),
        }

    def norm_layers(self) -> list[nn.BatchNorm2d]:
        """
        Normalization layers in forward order.
        """
        return [m for m in self.modules() if isinstance(m, nn.BatchNorm2d)]

    def _forward(self, x: torch.Tensor, taps: list[tuple[nn.BatchNorm2d, torch.Tensor]] | None) -> ForwardOut:
        if x.dim() != 3 or x.shape[1] != self.n_channels or x.shape[2] != self.n_samples:
            raise DimensionError(f"Expected input [N x {self.n_channels} x {self.n_samples}], got {list(x.shape)}")

        def run(block: nn.Sequential, h: torch.Tensor) -> torch.Tensor:
            for layer in block:
                if taps is not None and isinstance(layer, nn.BatchNorm2d):
                    taps.append((layer, h))
                h = layer(h)
            return h

        h = run(self.stem, x.unsqueeze(1))
        f = run(self.task_encoder, h).mean(dim=(2, 3))
        g = self.subject_head(run(self.subject_encoder, h).mean(dim=(2, 3)))
        return ForwardOut(f=f, g=g, logits=self.classifier(f))

    def forward(self, x: torch.Tensor) -> ForwardOut:
        return self._forward(x, None)

    def forward_with_norm_inputs(self, x: torch.Tensor) -> tuple[ForwardOut, list[tuple[nn.BatchNorm2d, torch.Tensor]]]:
        """
        Forward pass that also returns the input of every normalization layer.

        Used by statistics-matching objectives; unlike forward hooks it is
        safe to call from several threads on one model.
        """
        taps: list[tuple[nn.BatchNorm2d, torch.Tensor]] = []
        return self._forward(x, taps), taps


def init_model(n_channels: int, n_samples: int, n_classes: int, config: ModelConfig) -> DisentangledEEGNet:
    """
    Build a model with parameters drawn from `config.seed`; returned in train mode.

    The global torch RNG state is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(config.seed or 0))
        model = DisentangledEEGNet(n_channels, n_samples, n_classes, config)
    model.train()
    return model


def trials_to_tensor(trials: Sequence[Trial], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    Stack trial matrices into an [N × C × T] tensor.
    """
    if not trials:
        raise DimensionError("Cannot stack an empty trial list")
    shapes = {t.data.shape for t in trials}
    if len(shapes) != 1:
        raise DimensionError(f"Trials have differing shapes: {sorted(shapes)}")
    return torch.from_numpy(np.stack([np.asarray(t.data) for t in trials])).to(dtype)


def forward_trials(model: DisentangledEEGNet, batch: Sequence[Trial] | torch.Tensor) -> ForwardOut:
    """
    Forward a batch of trials (or an already stacked tensor) in the model's current mode.
    """
    x = batch if isinstance(batch, torch.Tensor) else trials_to_tensor(batch)
    param = next(model.parameters())
    return model(x.to(dtype=param.dtype))
