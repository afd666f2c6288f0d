"""Explainable and uncertainty-aware U-Net segmentation on a small numpy autodiff core."""

from .data_io import SyntheticConfig, generate_synthetic, load_checkpoint, save_checkpoint
from .estimators import DeepEnsembleSegmenter, EUNetSegmenter
from .exceptions import ContractViolation, DivergenceError, FormatError, NonFiniteError
from .explain import composite_cam, equivalent_kernel, grad_cam, mhex_cam, stage_cams
from .harness import TrainConfig, cross_validate, train
from .models import ModelConfig, build_model, forward, param_count, predict
from .pixelmap import PixelMap
from .uncertainty import UncertaintyConfig, agreement_metrics, collaboration_map, ensemble_stats

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "DeepEnsembleSegmenter",
    "DivergenceError",
    "EUNetSegmenter",
    "FormatError",
    "ModelConfig",
    "NonFiniteError",
    "PixelMap",
    "SyntheticConfig",
    "TrainConfig",
    "UncertaintyConfig",
    "agreement_metrics",
    "build_model",
    "collaboration_map",
    "composite_cam",
    "cross_validate",
    "ensemble_stats",
    "equivalent_kernel",
    "forward",
    "generate_synthetic",
    "grad_cam",
    "load_checkpoint",
    "mhex_cam",
    "param_count",
    "predict",
    "save_checkpoint",
    "stage_cams",
    "train",
]
