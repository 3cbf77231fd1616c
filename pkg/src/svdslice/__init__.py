"""Sliced-SVD low-rank adapters, spectral forgetting analysis, and a
two-task continual-learning sweep harness."""

from .adapter import (
    AdapterState,
    SliceSpec,
    adapter_forward,
    init_slice_adapter,
    load_adapter,
    merge,
    milora_init,
    pissa_init,
    save_adapter,
)
from .datagen import TaskPairConfig, load_idx, make_task_pair, save_labeled_dataset
from .linalg import (
    SvdFactorization,
    frobenius_norm,
    matmul,
    reconstruct,
    row_l2_norms,
    svd,
    transpose,
)
from .matio import read_matrix, write_matrix
from .nn import Model, ModelSpec, init_model
from .spectral import (
    ImportanceProfile,
    SpectralDelta,
    component_importance,
    feature_space_delta,
    param_space_delta,
    weighted_summary,
)
from .sweep import (
    SweepConfig,
    SweepRow,
    analyze_checkpoints,
    run_sweep,
    sweep_config_from_dict,
    ushape_report,
)
from .training import (
    LabeledDataset,
    TrainConfig,
    attach_and_finetune,
    evaluate,
    forgetting_abs,
    forgetting_soft_ce,
    load_model,
    pretrain,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterState",
    "SliceSpec",
    "adapter_forward",
    "init_slice_adapter",
    "load_adapter",
    "merge",
    "milora_init",
    "pissa_init",
    "save_adapter",
    "TaskPairConfig",
    "load_idx",
    "make_task_pair",
    "save_labeled_dataset",
    "SvdFactorization",
    "frobenius_norm",
    "matmul",
    "reconstruct",
    "row_l2_norms",
    "svd",
    "transpose",
    "read_matrix",
    "write_matrix",
    "Model",
    "ModelSpec",
    "init_model",
    "ImportanceProfile",
    "SpectralDelta",
    "component_importance",
    "feature_space_delta",
    "param_space_delta",
    "weighted_summary",
    "SweepConfig",
    "SweepRow",
    "analyze_checkpoints",
    "run_sweep",
    "sweep_config_from_dict",
    "ushape_report",
    "LabeledDataset",
    "TrainConfig",
    "attach_and_finetune",
    "evaluate",
    "forgetting_abs",
    "forgetting_soft_ce",
    "load_model",
    "pretrain",
    "save_model",
]
