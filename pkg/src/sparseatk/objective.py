"""Scalar objectives over activation traces.

The attack needs a differentiable stand-in for "count the nonzero
activations". A sharp tanh or sigmoid applied to each counted activation
approximates the 0/1 indicator; summing those over the network, weighting per
layer, and normalizing by the total counted neuron count k gives the sparsity
term. The label-preservation term is a targeted softmax cross-entropy against
the label the network assigns to the clean input. The composite objective is
sparsity_term + c * ce_term and its input gradient is assembled in a single
backward pass by injecting cotangents at every counted layer input and at the
logits simultaneously.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError

SURROGATE_KINDS = ("tanh", "sigmoid")


@dataclass(frozen=True)
class SurrogateConfig:
    """Smooth step surrogate: tanh(beta * act) or logistic(beta * act)."""

    kind: str = "tanh"
    beta: float = 100.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ConfigurationError(f"surrogate kind must be one of {SURROGATE_KINDS}")
        if not self.beta > 0:
            raise ConfigurationError("surrogate beta must be > 0")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def surrogate_eval(config: SurrogateConfig, act):
    """Evaluate the step surrogate elementwise. Saturates, never overflows."""
    z = np.asarray(act, dtype=np.result_type(act, np.float32)) * config.beta
    if config.kind == "tanh":
        return np.tanh(z)
    return _stable_sigmoid(z)


def surrogate_grad(config: SurrogateConfig, act):
    """d/d(act) of the surrogate: beta*(1-tanh^2) or beta*sig*(1-sig)."""
    z = np.asarray(act, dtype=np.result_type(act, np.float32)) * config.beta
    if config.kind == "tanh":
        t = np.tanh(z)
        return config.beta * (1.0 - t * t)
    s = _stable_sigmoid(z)
    return config.beta * s * (1.0 - s)


@dataclass(frozen=True)
class LayerWeighting:
    """Non-negative weight per counted layer; all-ones means plain counting."""

    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.weights) == 0:
            raise ConfigurationError("layer weighting must not be empty")
        if any(w < 0 for w in self.weights):
            raise ConfigurationError("layer weights must be >= 0")
        if not any(w > 0 for w in self.weights):
            raise ConfigurationError("at least one layer weight must be > 0")

    @staticmethod
    def uniform(n: int) -> "LayerWeighting":
        return LayerWeighting(tuple(1.0 for _ in range(n)))

    @staticmethod
    def normalized(values) -> "LayerWeighting":
        v = np.asarray(values, dtype=np.float64)
        total = v.sum()
        if total <= 0:
            raise ConfigurationError("cannot normalize all-zero layer weights")
        return LayerWeighting(tuple(float(x) for x in v / total))


@dataclass
class SparsityReport:
    """Measured zero fractions over the counted activations of one trace."""

    per_layer: list[float]
    per_layer_counts: list[int]
    positions: tuple[int, ...]
    total: float
    neuron_count: int
    surrogate_loss: float | None = None


def _check_weighting(weighting: LayerWeighting | None, n: int) -> tuple[float, ...]:
    if weighting is None:
        return tuple(1.0 for _ in range(n))
    if len(weighting.weights) != n:
        raise ConfigurationError(
            f"weighting has {len(weighting.weights)} entries, trace counts {n} layers"
        )
    return weighting.weights


def measure_sparsity(trace: nn.ActivationTrace, surrogate: SurrogateConfig | None = None,
                     weighting: LayerWeighting | None = None) -> SparsityReport:
    """Exact zero fractions (act == 0.0) per counted layer and in total.

    Post-ReLU zeros are exact, so equality against 0.0 is the right test. The
    total is zeros/k with k the full counted element count, i.e. the
    element-count-weighted mean of the per-layer fractions.
    """
    counted = trace.counted_inputs()
    per_layer = []
    counts = []
    zeros = 0
    for a in counted:
        nz = int(np.count_nonzero(a == 0.0))
        per_layer.append(nz / a.size)
        counts.append(a.size)
        zeros += nz
    k = int(sum(counts))
    report = SparsityReport(
        per_layer=per_layer,
        per_layer_counts=counts,
        positions=trace.counted_positions,
        total=zeros / k if k else 0.0,
        neuron_count=k,
    )
    if surrogate is not None:
        report.surrogate_loss = sparsity_loss(trace, surrogate, weighting)
    return report


def sparsity_loss(trace: nn.ActivationTrace, config: SurrogateConfig,
                  weighting: LayerWeighting | None = None) -> float:
    """-(sum_l W_l sum_n F(act)) / k over the counted activations."""
    counted = trace.counted_inputs()
    w = _check_weighting(weighting, len(counted))
    k = sum(a.size for a in counted)
    total = 0.0
    for wl, a in zip(w, counted):
        if wl == 0.0:
            continue
        total += wl * float(surrogate_eval(config, a).sum())
    return -total / k


def sparsity_loss_cotangents(trace: nn.ActivationTrace, config: SurrogateConfig,
                             weighting: LayerWeighting | None = None) -> list[np.ndarray | None]:
    """Per-layer-input cotangents of sparsity_loss: -W_l * F'(act) / k.

    Returns a list aligned with the trace's layer inputs, None at uncounted
    positions, ready to hand to backward_input.
    """
    counted = trace.counted_inputs()
    w = _check_weighting(weighting, len(counted))
    k = sum(a.size for a in counted)
    cots: list[np.ndarray | None] = [None] * len(trace.layer_inputs)
    for wl, pos, a in zip(w, trace.counted_positions, counted):
        cots[pos] = (-wl / k) * surrogate_grad(config, a)
    return cots


def targeted_ce_loss(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy against a target class, with its logit cotangent.

    Stable log-sum-exp; the cotangent is softmax(logits) - onehot(target).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[-1]:
        raise ConfigurationError(f"target {target} out of range for {logits.shape[-1]} classes")
    z = logits - logits.max()
    lse = float(np.log(np.exp(z).sum()))
    loss = lse - float(z[target])
    cot = np.exp(z - lse)
    cot[target] -= 1.0
    return loss, cot


def composite_loss(
    model: nn.Model,
    x: np.ndarray,
    c: float,
    target: int,
    surrogate: SurrogateConfig,
    weighting: LayerWeighting | None = None,
) -> tuple[float, np.ndarray]:
    """Sparsity term plus c times the targeted CE term, with its input gradient."""
    loss, grad, _ = composite_loss_with_trace(model, x, c, target, surrogate, weighting)
    return loss, grad


def composite_loss_with_trace(
    model: nn.Model,
    x: np.ndarray,
    c: float,
    target: int,
    surrogate: SurrogateConfig,
    weighting: LayerWeighting | None = None,
) -> tuple[float, np.ndarray, nn.ActivationTrace]:
    if c < 0:
        raise ConfigurationError("trade-off constant c must be >= 0")
    trace = nn.forward(model, x)
    l_sp = sparsity_loss(trace, surrogate, weighting)
    l_ce, cot_ce = targeted_ce_loss(trace.logits, target)
    loss = l_sp + c * l_ce
    cots = nn.Cotangents(
        logits=(c * cot_ce).astype(model.dtype) if c != 0.0 else None,
        layer_inputs=sparsity_loss_cotangents(trace, surrogate, weighting),
    )
    grad = nn.backward_input(model, trace, cots)
    return loss, grad, trace
