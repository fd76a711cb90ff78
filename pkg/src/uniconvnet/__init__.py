"""Verification kit for a receptive-field-aggregating convnet.

A small reverse-mode autodiff core drives the operators, the Receptive Field
Aggregator, a configurable backbone, and the analysis tools (parameter and
MAC accounting, gradient-support boxes, effective receptive fields).
"""
from .analysis import compute_erf, count_flops, count_params, agd_metrics
from .model import Model, ModelConfig, a_like_config, build_model, model_forward, tiny_config
from .rfa import ConfigError, RfaConfig, kernel_schedule, rfa_forward, theoretical_rf
from .tensor import Rng, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Model", "ModelConfig", "RfaConfig", "Rng", "Tape", "Tensor",
    "a_like_config", "agd_metrics", "backward", "build_model", "compute_erf", "count_flops",
    "count_params", "kernel_schedule", "model_forward", "rfa_forward", "theoretical_rf", "tiny_config",
]
