"""Pseudo-label sampling, weak-label probability math and an exact EM oracle."""
from .errors import DegeneratePosteriorError, FormatError, GenerationError, ValidationError
from .geometry import Box, area, iou
from .model import (
    BACKGROUND,
    Dataset,
    Detection,
    ImageRecord,
    Instance,
    WeakLabels,
    class_view,
    validate_record,
)
from .pseudolabel import (
    PseudoLabel,
    PseudoLabelSet,
    RpsConfig,
    hard_threshold,
    rps_sample,
    rps_samples,
    top1_per_label,
)
from .suppression import nms, nms_group

__version__ = "0.1.0"
