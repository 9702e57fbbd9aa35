"""Semi-supervised 3D object detection sandbox.

Exact oriented-box geometry, differentiable grid-pooled IoU estimation,
confidence-filtered pseudo-labeling with keep-half suppression, an EMA
teacher-student training loop over synthetic point-cloud scenes, and a
mAP/coverage evaluation stack.
"""

from .geometry import OrientedBox3D, Transform3D, iou3d, iou3d_monte_carlo
from .pseudo_label import Detection, PseudoLabel, ThresholdConfig
from .synth_data import DatasetSplit, GeneratorConfig, SceneSample

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "DatasetSplit",
    "GeneratorConfig",
    "OrientedBox3D",
    "PseudoLabel",
    "SceneSample",
    "ThresholdConfig",
    "Transform3D",
    "iou3d",
    "iou3d_monte_carlo",
    "__version__",
]
