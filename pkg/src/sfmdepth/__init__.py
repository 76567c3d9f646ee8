"""Self-supervised dense depth estimation from sparse multi-view
reconstructions.

The pipeline turns a posed video sequence plus a sparse point
reconstruction into dense per-frame depth: sparse annotations become
confidence-weighted supervision rasters, a scale-invariant log-depth
loss anchors each prediction, and differentiable scaling plus
cross-view warping enforce consistency between overlapping frames.
"""

from .autodiff import (
    Tape,
    Tensor,
    WarpResult,
    depth_scaling_layer,
    depth_warping_layer,
)
from .errors import SfmDepthError
from .geometry import CameraIntrinsics, Pixel, RigidTransform
from .losses import consistency_loss, pair_loss, scale_invariant_loss
from .model import DepthNet, DepthNetConfig, PixelLogDepthModel, build_model
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DepthNet",
    "DepthNetConfig",
    "Pixel",
    "PixelLogDepthModel",
    "RigidTransform",
    "SfmDepthError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "WarpResult",
    "build_model",
    "consistency_loss",
    "depth_scaling_layer",
    "depth_warping_layer",
    "pair_loss",
    "scale_invariant_loss",
    "train",
    "__version__",
]
