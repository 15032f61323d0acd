"""Adversarial activation-sparsity attacks, defenses, and hardware cost modeling."""

__version__ = "0.1.0"

from . import blackbox, data, defenses, hwcost, nn, objective, whitebox
from .blackbox import BlackBoxConfig, InProcessOracle, QueryOracle, run_blackbox
from .data import Dataset, load_idx, load_model, make_digits_dataset, save_model, synth_model, train
from .defenses import ThresholdProfile, apply_thresholds, compress_input, quantize_input
from .errors import ConfigurationError, FormatError, SparseAtkError, TrainingError
from .hwcost import CostModelConfig, estimate_cost, layer_macs, sparsity_sweep
from .nn import ActivationTrace, Cotangents, Model, backward_input, backward_weights, forward
from .objective import (
    LayerWeighting,
    SparsityReport,
    SurrogateConfig,
    composite_loss,
    measure_sparsity,
    sparsity_loss,
    targeted_ce_loss,
)
from .whitebox import AttackConfig, AttackResult, batch_attack, clip_project, run_attack

__all__ = [
    "__version__",
    "ActivationTrace", "AttackConfig", "AttackResult", "BlackBoxConfig",
    "ConfigurationError", "CostModelConfig", "Cotangents", "Dataset", "FormatError",
    "InProcessOracle", "LayerWeighting", "Model", "QueryOracle", "SparseAtkError",
    "SparsityReport", "SurrogateConfig", "ThresholdProfile", "TrainingError",
    "apply_thresholds", "backward_input", "backward_weights", "batch_attack",
    "blackbox", "clip_project", "composite_loss", "compress_input", "data", "defenses",
    "estimate_cost", "forward", "hwcost", "layer_macs", "load_idx", "load_model",
    "make_digits_dataset", "measure_sparsity", "nn", "objective", "quantize_input",
    "run_attack", "run_blackbox", "save_model", "sparsity_loss", "sparsity_sweep",
    "synth_model", "targeted_ce_loss", "train", "whitebox",
]
