from .blocks import BlockSpec, build_residual_block
from .network import (
    ArchitectureConfig,
    SfTNet,
    WeightInitSpec,
    build_model,
    load_checkpoint,
    parameter_summary,
    predict_maps,
    save_checkpoint,
)

__all__ = [
    "ArchitectureConfig",
    "BlockSpec",
    "SfTNet",
    "WeightInitSpec",
    "build_model",
    "build_residual_block",
    "load_checkpoint",
    "parameter_summary",
    "predict_maps",
    "save_checkpoint",
]
