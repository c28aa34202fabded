"""Brain-age estimation from synthetic volumetric phantoms.

A small numpy package: tape-based autodiff, a 3-D ConvNeXt/conformer
regression model, a differentiable soft-rank operator, the hybrid ranking
loss, and the experiment harness behind the ``sfcnext`` command.
"""

from .data import DatasetManifest, SplitSpec, generate_synthetic, load_manifest, split
from .losses import LossBreakdown, LossWeights, hybrid_loss, total_loss
from .metrics import MetricsReport, evaluate, mae, pcc, srcc
from .model import ModelConfig, forward, init_params, param_count, tiny_config
from .optim import OptimizerState, init_optimizer, optimizer_step
from .softrank import (SoftRankConfig, SoftRankResult, hard_rank,
                       isotonic_regression, pairwise_rank_approx,
                       project_permutahedron, soft_rank, soft_rank_vjp)
from .tensor import NumericsError, ShapeError, Tape, Tensor, backward
from .train import TrainConfig, cross_validate, mean_predictor_baseline

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "SplitSpec", "generate_synthetic", "load_manifest", "split",
    "LossBreakdown", "LossWeights", "hybrid_loss", "total_loss",
    "MetricsReport", "evaluate", "mae", "pcc", "srcc",
    "ModelConfig", "forward", "init_params", "param_count", "tiny_config",
    "OptimizerState", "init_optimizer", "optimizer_step",
    "SoftRankConfig", "SoftRankResult", "hard_rank", "isotonic_regression",
    "pairwise_rank_approx", "project_permutahedron", "soft_rank", "soft_rank_vjp",
    "NumericsError", "ShapeError", "Tape", "Tensor", "backward",
    "TrainConfig", "cross_validate", "mean_predictor_baseline",
]
