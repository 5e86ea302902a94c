"""Attention-based interpolation of sparse landmark depth into dense depth maps."""

from .block import BlockConfig, sparseformer_forward
from .estimator import SparseFormerRegressor
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, forward, init_params, multiscale_loss
from .scenes import LandmarkSet, Scene, SceneConfig, generate_scene, sample_landmarks
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "BlockConfig", "sparseformer_forward", "SparseFormerRegressor", "MetricsReport",
    "compute_metrics", "ModelConfig", "forward", "init_params", "multiscale_loss",
    "LandmarkSet", "Scene", "SceneConfig", "generate_scene", "sample_landmarks",
    "Tape", "Tensor",
]
