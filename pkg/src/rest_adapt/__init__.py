"""
rest-adapt - subject-adaptive transfer learning for cross-subject EEG motor imagery.

Trains a feature-disentangling encoder on source subjects, calibrates a new
subject's resting-state recordings into class-conditioned signals through the
frozen encoder, and fine-tunes on them without any labeled target data.
"""

__version__ = "0.1.0"

from rest_adapt.config import ConfigManager, RunConfig  # noqa: E402
from rest_adapt.pipeline import TransferPipeline  # noqa: E402

__all__ = ["ConfigManager", "RunConfig", "TransferPipeline", "__version__"]
