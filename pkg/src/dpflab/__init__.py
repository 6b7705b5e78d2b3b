"""Sparse training with dynamic pruning and error feedback.

Library layout:
  nets        minimal feed-forward engine (exact backprop, float64)
  pruning     masks, sparsity schedules, saliency criteria, compressors
  training    the step engine and the pruning methodologies
  convexlab   synthetic objectives and convergence-rate harnesses
  metrics     mask-dynamics instrumentation and record emission
  data        synthetic datasets and the IDX reader
  checkpoint  binary run artifacts
  estimator   scikit-learn style classifier front end
  cli         experiment runner (`dpflab train | convexlab | report | ...`)
"""

from .data import Dataset, make_blobs, make_spirals
from .estimator import SparseMLPClassifier
from .metrics import MaskHistory, StepRecord, emit, flip_ratio, last_change_curve, mask_iou
from .nets import Batch, LayerSpec, MLPModel, NumericalFailure, init_model, make_mlp_specs
from .pruning import (
    Mask,
    SparsitySchedule,
    apply_mask,
    delta_of,
    magnitude_mask,
    row_group_l2,
    snip_mask,
    sparsity_at,
)
from .training import (
    ConstantLR,
    InverseTimeLR,
    SqrtHorizonLR,
    StepDecayLR,
    Strategy,
    TrainConfig,
    TrainResult,
    TrainState,
    dpf_step,
    finetune,
    lottery_retrain,
    make_state,
    masked_step,
    maybe_update_mask,
    run_training,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConstantLR",
    "Dataset",
    "InverseTimeLR",
    "LayerSpec",
    "MLPModel",
    "Mask",
    "MaskHistory",
    "NumericalFailure",
    "SparseMLPClassifier",
    "SparsitySchedule",
    "SqrtHorizonLR",
    "StepDecayLR",
    "StepRecord",
    "Strategy",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "apply_mask",
    "delta_of",
    "dpf_step",
    "emit",
    "finetune",
    "flip_ratio",
    "init_model",
    "last_change_curve",
    "lottery_retrain",
    "magnitude_mask",
    "make_blobs",
    "make_mlp_specs",
    "make_spirals",
    "make_state",
    "mask_iou",
    "masked_step",
    "maybe_update_mask",
    "row_group_l2",
    "run_training",
    "snip_mask",
    "sparsity_at",
]
