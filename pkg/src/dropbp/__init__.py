"""Residual transformer training with stochastic backward-pass layer dropping."""
from .cost import LayerCost, activation_budget, expected_flops, layer_costs, offblock_cost, reduction_ratio
from .mechanism import DropDecisions, DropRates, WarmupSchedule, sample_decisions, uniform_rates
from .model import ActivationCache, Gradients, Model, ModelConfig, backward, forward, forward_backward, loss
from .sensitivity import FlopsProfile, SensitivityVector, allocate, compute_sensitivities
from .tensor import FlopsMeter, Rng

__version__ = "0.1.0"

__all__ = [
    "ActivationCache",
    "DropDecisions",
    "DropRates",
    "FlopsMeter",
    "FlopsProfile",
    "Gradients",
    "LayerCost",
    "Model",
    "ModelConfig",
    "Rng",
    "SensitivityVector",
    "WarmupSchedule",
    "activation_budget",
    "allocate",
    "backward",
    "compute_sensitivities",
    "expected_flops",
    "forward",
    "forward_backward",
    "layer_costs",
    "loss",
    "offblock_cost",
    "reduction_ratio",
    "sample_decisions",
    "uniform_rates",
]
