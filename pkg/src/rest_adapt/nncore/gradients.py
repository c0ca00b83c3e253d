"""
Gradient contract of the encoder.

`grad_params` and `grad_input` return exact (autograd) gradients of a scalar
objective built from one forward pass.  `check_param_gradients` and
`check_input_gradients` compare them against central finite differences; run
them on a double-precision model in eval mode.

An objective is a callable ``(ForwardOut, input_batch) -> scalar tensor`` so
input priors (total variation, norms) can be expressed next to feature terms.

Key classes: `GradCheckReport`
Key functions: `grad_params`, `grad_input`, `check_param_gradients`, `check_input_gradients`
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch

from rest_adapt.errors import GradientError
from rest_adapt.nncore.model import DisentangledEEGNet, ForwardOut

log = logging.getLogger("rest_adapt.nncore.gradients")

Objective = Callable[[ForwardOut, torch.Tensor], torch.Tensor]

FD_STEP = 1e-5
REL_ERROR_FLOOR = 1e-6


def _scalar(objective: Objective, model: DisentangledEEGNet, x: torch.Tensor) -> torch.Tensor:
    value = objective(model(x), x)
    if value.numel() != 1:
        raise GradientError(f"Objective must be a scalar, got shape {list(value.shape)}")
    if not bool(torch.isfinite(value)):
        raise GradientError(f"Objective is not finite ({float(value)}); gradients are undefined")
    return value.reshape(())


def grad_params(model: DisentangledEEGNet, objective: Objective, batch: torch.Tensor) -> dict[str, torch.Tensor]:
    """
    Gradient of the objective with respect to every trainable parameter.

    Parameters the objective does not depend on get zero gradients.
    """
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    value = _scalar(objective, model, batch)
    if not value.requires_grad:
        return {name: torch.zeros_like(p) for name, p in named}
    grads = torch.autograd.grad(value, [p for _, p in named], allow_unused=True)
    return {name: torch.zeros_like(p) if g is None else g.detach() for (name, p), g in zip(named, grads)}


def grad_input(model: DisentangledEEGNet, objective: Objective, z: torch.Tensor) -> torch.Tensor:
    """
    Gradient of the objective with respect to the input signal; same shape as `z`.

    `z` is one [C × T] trial or an [N × C × T] batch.  The model must be in
    eval mode; its parameters are treated as constants.
    """
    if model.training:
        raise GradientError("grad_input requires the model in eval mode")
    single = z.dim() == 2
    x = (z[None] if single else z).detach().clone().requires_grad_(True)
    value = _scalar(objective, model, x)
    if not value.requires_grad:
        grad = torch.zeros_like(x)
    else:
        (grad,) = torch.autograd.grad(value, [x], allow_unused=True)
        grad = torch.zeros_like(x) if grad is None else grad.detach()
    return grad[0] if single else grad


@dataclass
class GradCheckReport:
    """
    Outcome of a finite-difference comparison over `n_coords` sampled coordinates.
    """

    target: str
    n_coords: int
    max_rel_error: float
    max_abs_error: float
    worst: str

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERROR_FLOOR)


def _central_difference(flat: torch.Tensor, index: int, evaluate: Callable[[], float], h: float) -> float:
    original = flat[index].item()
    flat[index] = original + h
    plus = evaluate()
    flat[index] = original - h
    minus = evaluate()
    flat[index] = original
    return (plus - minus) / (2 * h)


def check_param_gradients(model: DisentangledEEGNet, objective: Objective, batch: torch.Tensor, n_coords: int = 200, seed: int = 0,
                          h: float = FD_STEP) -> GradCheckReport:
    """
    Compare `grad_params` with central differences on `n_coords` random parameter coordinates.
    """
    was_training = model.training
    model.eval()
    try:
        analytic = grad_params(model, objective, batch)
        named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
        sizes = np.array([p.numel() for _, p in named])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        rng = np.random.default_rng(seed)
        picks = rng.choice(int(offsets[-1]), size=min(n_coords, int(offsets[-1])), replace=False)

        def evaluate() -> float:
            return float(_scalar(objective, model, batch))

        worst, max_rel, max_abs = "", 0.0, 0.0
        with torch.no_grad():
            for pick in sorted(picks.tolist()):
                slot = int(np.searchsorted(offsets, pick, side="right") - 1)
                name, param = named[slot]
                local = pick - int(offsets[slot])
                numeric = _central_difference(param.data.view(-1), local, evaluate, h)
                exact = float(analytic[name].reshape(-1)[local])
                rel = _rel_error(exact, numeric)
                max_abs = max(max_abs, abs(exact - numeric))
                if rel >= max_rel:
                    max_rel, worst = rel, f"{name}[{local}]"
    finally:
        model.train(was_training)
    log.debug("Parameter gradient check: %d coords, max rel error %.3g at %s", len(picks), max_rel, worst)
    return GradCheckReport(target="parameters", n_coords=len(picks), max_rel_error=max_rel, max_abs_error=max_abs, worst=worst)


def check_input_gradients(model: DisentangledEEGNet, objective: Objective, z: torch.Tensor, n_coords: int = 100, seed: int = 0,
                          h: float = FD_STEP) -> GradCheckReport:
    """
    Compare `grad_input` with central differences on `n_coords` random input coordinates.
    """
    was_training = model.training
    model.eval()
    try:
        x = z.detach().clone()
        analytic = grad_input(model, objective, x).reshape(-1)
        batch = x[None] if x.dim() == 2 else x
        flat = batch.view(-1)
        rng = np.random.default_rng(seed)
        picks = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)

        def evaluate() -> float:
            return float(_scalar(objective, model, batch))

        worst, max_rel, max_abs = "", 0.0, 0.0
        with torch.no_grad():
            for pick in sorted(picks.tolist()):
                numeric = _central_difference(flat, pick, evaluate, h)
                exact = float(analytic[pick])
                rel = _rel_error(exact, numeric)
                max_abs = max(max_abs, abs(exact - numeric))
                if rel >= max_rel:
                    max_rel, worst = rel, f"input[{pick}]"
    finally:
        model.train(was_training)
    log.debug("Input gradient check: %d coords, max rel error %.3g at %s", len(picks), max_rel, worst)
    return GradCheckReport(target="input", n_coords=len(picks), max_rel_error=max_rel, max_abs_error=max_abs, worst=worst)
