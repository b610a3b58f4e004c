"""CPU splatting and reconstruction of deformable surfel scenes."""

__version__ = "0.1.0"

from .camera import CameraModel, load_cameras, save_cameras
from .deform import DeformationNetwork, EncodingConfig, load_sgsw, save_sgsw
from .losses import LossWeights
from .optim import SceneNormalizer, TrainConfig, load_checkpoint, train
from .pimi import FrameBundle
from .raster import RenderOutput, render, render_backward
from .surfel import (
    DeformationDelta,
    SurfelCloud,
    apply_deformation,
    load_sgsc,
    save_sgsc,
)

__all__ = [
    "CameraModel",
    "DeformationDelta",
    "DeformationNetwork",
    "EncodingConfig",
    "FrameBundle",
    "LossWeights",
    "RenderOutput",
    "SceneNormalizer",
    "SurfelCloud",
    "TrainConfig",
    "apply_deformation",
    "load_cameras",
    "load_checkpoint",
    "load_sgsc",
    "load_sgsw",
    "render",
    "render_backward",
    "save_cameras",
    "save_sgsc",
    "save_sgsw",
    "train",
    "__version__",
]
