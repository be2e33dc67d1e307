"""Attribute-conditioned apparent/real age regression on a small numpy autodiff core."""
from .architecture import ModelVariant, Scale, build, build_spec, count_trainable_params, forward, freeze_mask
from .dataset import AGE_MAX, AnnotationRecord, SyntheticSpec, encode_attributes, generate_synthetic
from .training import TrainConfig, run_case, train_stage

__version__ = "0.1.0"

__all__ = [
    "AGE_MAX",
    "AnnotationRecord",
    "ModelVariant",
    "Scale",
    "SyntheticSpec",
    "TrainConfig",
    "build",
    "build_spec",
    "count_trainable_params",
    "encode_attributes",
    "forward",
    "freeze_mask",
    "generate_synthetic",
    "run_case",
    "train_stage",
]
