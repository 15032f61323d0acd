"""White-box sparsity attack: momentum gradient descent on the composite
objective inside a binary search on the trade-off constant c.

The inner loop starts from the clean input with a zero momentum buffer,
accumulates raw gradients into the buffer, steps by a fixed L2 budget along
the normalized buffer, and projects back into the L2 ball around the clean
input intersected with the [0, 1] box. The outer loop re-runs the inner loop
from scratch, raising c when the candidate's label diverges from the clean
prediction and lowering it when it matches.

Success means the candidate keeps the clean prediction, stays feasible, and
does not increase sparsity. By default the best such candidate over all outer
iterations is returned; when none qualifies the clean input is returned with
success=False.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, objective
from .data import Dataset
from .errors import ConfigurationError


@dataclass(frozen=True)
class AttackConfig:
    """All attack hyperparameters.

    ``epsilon=None`` selects unconstrained mode: no L2 bound, only the [0, 1]
    box. ``epsilon_iter=None`` resolves to epsilon/20 in constrained mode and
    0.5 in unconstrained mode.
    """

    epsilon: float | None = None
    epsilon_iter: float | None = None
    i_max: int = 100
    o_max: int = 1
    c_in: float = 0.5
    c_min: float = 0.0
    c_max: float = 1.0
    mu: float = 0.9
    surrogate: objective.SurrogateConfig = field(default_factory=objective.SurrogateConfig)
    weighting: objective.LayerWeighting | None = None

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigurationError("epsilon: must be > 0 (or None for unconstrained)")
        if self.epsilon_iter is not None and not self.epsilon_iter > 0:
            raise ConfigurationError("epsilon_iter: must be > 0")
        if self.i_max < 1:
            raise ConfigurationError("i_max: must be >= 1")
        if self.o_max < 1:
            raise ConfigurationError("o_max: must be >= 1")
        if not (0 <= self.c_min <= self.c_in <= self.c_max):
            raise ConfigurationError("c bounds: need 0 <= c_min <= c_in <= c_max")
        if not (0 <= self.mu < 1):
            raise ConfigurationError("mu: must be in [0, 1)")

    @property
    def resolved_epsilon_iter(self) -> float:
        if self.epsilon_iter is not None:
            return self.epsilon_iter
        return self.epsilon / 20.0 if self.epsilon is not None else 0.5

    def describe(self) -> dict:
        return {
            "epsilon": "inf" if self.epsilon is None else self.epsilon,
            "epsilon_iter": self.resolved_epsilon_iter,
            "i_max": self.i_max,
            "o_max": self.o_max,
            "c_in": self.c_in,
            "c_min": self.c_min,
            "c_max": self.c_max,
            "mu": self.mu,
            "surrogate": self.surrogate.kind,
            "beta": self.surrogate.beta,
            "weighting": "uniform" if self.weighting is None else list(self.weighting.weights),
        }


@dataclass
class TrajectoryPoint:
    iteration: int
    sparsity: float
    label_preserved: bool
    distortion: float


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    label_clean: int
    label_adv: int
    clean_sparsity: float
    adv_sparsity: float
    sparsity_ratio: float
    l2_distortion: float
    final_c: float
    iterations: int
    trajectory: list[TrajectoryPoint] | None = None


def clip_project(x: np.ndarray, x_clean: np.ndarray, epsilon: float | None) -> np.ndarray:
    """Project x into the L2 ball of radius epsilon around x_clean, then clamp
    to [0, 1]. Clamping toward a point already inside the box never increases
    any coordinate deviation, so both constraints hold on return."""
    if x.shape != x_clean.shape:
        raise ConfigurationError(f"shape mismatch {x.shape} vs {x_clean.shape}")
    delta = x - x_clean
    if epsilon is not None:
        norm = float(np.linalg.norm(delta))
        if norm > epsilon:
            delta = delta * (epsilon / norm)
    return np.clip(x_clean + delta, 0.0, 1.0)


def _loss_and_grad(model, x, c, target, config: AttackConfig):
    # separated out so tests can substitute a synthetic gradient field
    return objective.composite_loss_with_trace(
        model, x, c, target, config.surrogate, config.weighting
    )


def attack_inner(
    model: nn.Model,
    x_clean: np.ndarray,
    c: float,
    config: AttackConfig,
    target: int | None = None,
    record: list[TrajectoryPoint] | None = None,
    iteration_base: int = 0,
) -> np.ndarray:
    """One full inner loop: exactly i_max momentum steps from the clean input.

    A zero-norm momentum buffer skips the step for that iteration rather than
    dividing by zero. Every iterate is feasible by construction.
    """
    x_clean = np.asarray(x_clean, dtype=model.dtype)
    if target is None:
        target = nn.forward(model, x_clean).label
    x = x_clean.copy()
    g = np.zeros_like(x_clean)
    step = config.resolved_epsilon_iter
    for i in range(config.i_max):
        _, grad, trace = _loss_and_grad(model, x, c, target, config)
        if record is not None:
            record.append(TrajectoryPoint(
                iteration=iteration_base + i,
                sparsity=objective.measure_sparsity(trace).total,
                label_preserved=trace.label == target,
                distortion=float(np.linalg.norm(x - x_clean)),
            ))
        g = config.mu * g + grad
        norm = float(np.linalg.norm(g))
        if norm > 0.0:
            x = x - step * (g / norm)
        x = clip_project(x, x_clean, config.epsilon)
    return x


def run_attack(
    model: nn.Model,
    x_clean: np.ndarray,
    config: AttackConfig,
    keep_best: bool = True,
    record_trajectory: bool = False,
) -> AttackResult:
    """Full attack: o_max outer iterations, binary search on c.

    With ``keep_best`` (default) returns the label-preserving candidate with
    the lowest measured sparsity across all outer iterations, falling back to
    the clean input (success=False) if none qualifies. With
    ``keep_best=False`` returns the last inner-loop candidate regardless of
    label, which transfer-based pipelines need.
    """
    x_clean = np.asarray(x_clean, dtype=model.dtype)
    clean_trace = nn.forward(model, x_clean)
    label_clean = clean_trace.label
    clean_sparsity = objective.measure_sparsity(clean_trace).total

    trajectory: list[TrajectoryPoint] | None = [] if record_trajectory else None
    c = config.c_in
    best: tuple[float, np.ndarray, int] | None = None  # (sparsity, x, label)
    last: tuple[float, np.ndarray, int] | None = None
    for o in range(config.o_max):
        x_cand = attack_inner(
            model, x_clean, c, config, target=label_clean,
            record=trajectory, iteration_base=o * config.i_max,
        )
        cand_trace = nn.forward(model, x_cand)
        cand_sparsity = objective.measure_sparsity(cand_trace).total
        preserved = cand_trace.label == label_clean
        last = (cand_sparsity, x_cand, cand_trace.label)
        if preserved and cand_sparsity <= clean_sparsity:
            if best is None or cand_sparsity < best[0]:
                best = (cand_sparsity, x_cand, cand_trace.label)
        if not preserved:
            c = (c + config.c_max) / 2.0
        else:
            c = (c + config.c_min) / 2.0

    if keep_best:
        if best is not None:
            adv_sparsity, x_adv, label_adv = best
            success = True
        else:
            adv_sparsity, x_adv, label_adv = clean_sparsity, x_clean.copy(), label_clean
            success = False
    else:
        adv_sparsity, x_adv, label_adv = last
        success = label_adv == label_clean and adv_sparsity <= clean_sparsity

    if adv_sparsity > 0:
        ratio = clean_sparsity / adv_sparsity
    else:
        ratio = math.inf if clean_sparsity > 0 else 1.0
    return AttackResult(
        x_adv=x_adv,
        success=success,
        label_clean=label_clean,
        label_adv=label_adv,
        clean_sparsity=clean_sparsity,
        adv_sparsity=adv_sparsity,
        sparsity_ratio=ratio,
        l2_distortion=float(np.linalg.norm(x_adv - x_clean)),
        final_c=c,
        iterations=config.o_max * config.i_max,
        trajectory=trajectory,
    )


@dataclass
class AttackAggregate:
    count: int
    success_rate: float
    label_preservation_rate: float
    mean_ratio: float
    min_ratio: float
    max_ratio: float
    mean_clean_sparsity: float
    mean_adv_sparsity: float
    worst_clean_sparsity: float
    worst_adv_sparsity: float
    mean_distortion: float
    max_distortion: float
    clean_histogram: list[int]
    adv_histogram: list[int]
    histogram_edges: list[float]


def _histogram(values, edges):
    hist, _ = np.histogram(values, bins=edges)
    return [int(v) for v in hist]


def aggregate_results(results: list[AttackResult], bins: int = 20) -> AttackAggregate:
    edges = np.linspace(0.0, 1.0, bins + 1)
    if not results:
        return AttackAggregate(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                               [0] * bins, [0] * bins, [float(e) for e in edges])
    ratios = np.array([r.sparsity_ratio for r in results])
    clean = np.array([r.clean_sparsity for r in results])
    adv = np.array([r.adv_sparsity for r in results])
    dist = np.array([r.l2_distortion for r in results])
    preserved = np.array([r.label_adv == r.label_clean for r in results])
    return AttackAggregate(
        count=len(results),
        success_rate=float(np.mean([r.success for r in results])),
        label_preservation_rate=float(preserved.mean()),
        mean_ratio=float(ratios.mean()),
        min_ratio=float(ratios.min()),
        max_ratio=float(ratios.max()),
        mean_clean_sparsity=float(clean.mean()),
        mean_adv_sparsity=float(adv.mean()),
        worst_clean_sparsity=float(clean.min()),
        worst_adv_sparsity=float(adv.min()),
        mean_distortion=float(dist.mean()),
        max_distortion=float(dist.max()),
        clean_histogram=_histogram(clean, edges),
        adv_histogram=_histogram(adv, edges),
        histogram_edges=[float(e) for e in edges],
    )


def batch_attack(
    model: nn.Model,
    dataset: Dataset | list[np.ndarray],
    config: AttackConfig,
    keep_best: bool = True,
) -> tuple[list[AttackResult], AttackAggregate]:
    """Attack every image independently and aggregate the outcomes."""
    images = dataset.images if isinstance(dataset, Dataset) else dataset
    results = [run_attack(model, np.asarray(x), config, keep_best=keep_best) for x in images]
    return results, aggregate_results(results)
