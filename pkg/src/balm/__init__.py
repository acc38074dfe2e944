"""Missing-modality multimodal training lab on a small reverse-mode autodiff core."""

from .autograd import Tensor, backward, gradcheck
from .data import DatasetSpec, generate_synthetic, load_features, write_features
from .masking import MaskSet, delta_imr, generate_masks, imr_distribution, smr_distribution
from .metrics import accuracy, weighted_f1
from .trainer import Ablations, RunRecord, TrainConfig, evaluate, train

__all__ = [
    "Tensor", "backward", "gradcheck",
    "DatasetSpec", "generate_synthetic", "load_features", "write_features",
    "MaskSet", "delta_imr", "generate_masks", "imr_distribution", "smr_distribution",
    "accuracy", "weighted_f1",
    "Ablations", "RunRecord", "TrainConfig", "evaluate", "train",
]
