"""
Reference encoder, gradient contract and checkpoint format.

Key classes: `DisentangledEEGNet`, `ForwardOut`, `GradCheckReport`
Key functions: `init_model`, `forward_trials`, `grad_params`, `grad_input`,
    `save_checkpoint`, `load_checkpoint`
"""

from rest_adapt.nncore.checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from rest_adapt.nncore.gradients import (GradCheckReport, check_input_gradients, check_param_gradients, grad_input, grad_params)
from rest_adapt.nncore.model import DisentangledEEGNet, ForwardOut, forward_trials, init_model, trials_to_tensor

__all__ = [
    "DisentangledEEGNet", "ForwardOut", "GradCheckReport",
    "init_model", "forward_trials", "trials_to_tensor",
    "grad_params", "grad_input", "check_param_gradients", "check_input_gradients",
    "save_checkpoint", "load_checkpoint", "checkpoint_hash",
]
