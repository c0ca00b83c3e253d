"""
Enumerations shared across the pipeline.

Key classes: `TrialKind`, `CalibMethod`, `CalibInit`
"""

from enum import Enum


class TrialKind(str, Enum):
    """
    Kind of an EEG epoch.

    RS: resting-state signal; carries subject identity, never a class label.
    TS: task-specific (motor imagery) signal; always carries a class label.
    """

    RS = "RS"
    TS = "TS"


class CalibMethod(str, Enum):
    """
    Input-synthesis method used to turn resting-state signals into class-conditioned signals.

    RESTL: cross-entropy + prototype task loss + subject-embedding preservation.
    DEEPDREAM: cross-entropy with total-variation and L2 image priors.
    DEEPINVERSION: DeepDream priors plus matching of normalization-layer statistics.
    """

    RESTL = "restl"
    DEEPDREAM = "deepdream"
    DEEPINVERSION = "deepinversion"


class CalibInit(str, Enum):
    """
    Starting point of the synthesis: the resting-state signal itself or standard Gaussian noise.
    """

    RS = "rs"
    NOISE = "noise"
