"""Two-stage black-box sparsity attack.

Stage 1 runs the white-box attack on an attacker-owned substitute model with
the trade-off constant pinned to zero (pure sparsity objective) under the
stage-1 share of the distortion budget, and transfers the perturbed input to
the victim. Stage 2 runs only when the victim's label on the transferred
input differs from its label on the clean input: a query-based targeted
attack estimates the cross-entropy gradient from the victim's confidence
scores by symmetric finite differences over random coordinate batches and
descends until the original label is restored or the query budget runs out.

The victim is reachable only through :class:`QueryOracle`: confidence scores
and a label per query, nothing else. The attack never sees victim weights or
activations. Victim-side sparsity numbers in results come from an optional
instrumented probe supplied by the evaluation harness; the attack logic takes
no decisions from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Protocol

import numpy as np

from . import nn, objective, whitebox
from .errors import ConfigurationError


class OracleResponse(NamedTuple):
    scores: np.ndarray | None  # confidence scores (softmax), None if unavailable
    label: int


class QueryOracle(Protocol):
    """The only interface the attack has to the victim.

    Implementations must expose exactly this surface. A remote victim (HTTP
    endpoint, subprocess) drops in by implementing query() over the wire; the
    attack code does not change.
    """

    def query(self, x: np.ndarray) -> OracleResponse: ...

    @property
    def query_count(self) -> int: ...


class InProcessOracle:
    """Query oracle over an in-process model. The model is held privately;
    the public surface is query() and query_count only."""

    def __init__(self, model: nn.Model, scores: bool = True):
        self.__model = model
        self.__scores = scores
        self.__count = 0

    def query(self, x: np.ndarray) -> OracleResponse:
        self.__count += 1
        trace = nn.forward(self.__model, np.asarray(x, dtype=self.__model.dtype))
        if not self.__scores:
            return OracleResponse(None, trace.label)
        z = trace.logits.astype(np.float64)
        z = z - z.max()
        e = np.exp(z)
        return OracleResponse(e / e.sum(), trace.label)

    @property
    def query_count(self) -> int:
        return self.__count


def make_instrumented_victim(model: nn.Model) -> tuple[InProcessOracle, Callable[[np.ndarray], float]]:
    """(oracle, sparsity probe) pair for a victim model.

    The probe measures the victim's true total activation sparsity for an
    input. It exists for evaluation harnesses; attack logic must not branch
    on it.
    """
    oracle = InProcessOracle(model)

    def probe(x: np.ndarray) -> float:
        return objective.measure_sparsity(nn.forward(model, np.asarray(x, dtype=model.dtype))).total

    return oracle, probe


@dataclass(frozen=True)
class BlackBoxConfig:
    """Budget split and stage-2 estimator parameters.

    The total L2 budget epsilon is split as eps1 = alpha * epsilon for stage 1
    and eps2 = (1 - alpha) * epsilon for stage 2; epsilon=None lifts both
    bounds. Stage 1 reuses the white-box config with all c bounds forced to 0.
    """

    epsilon: float | None = None
    alpha: float = 0.8
    fd_step: float = 1e-4
    coord_batch: int = 128
    max_queries: int = 200_000
    step_size: float = 0.1
    zoo_momentum: float = 0.9
    seed: int = 0
    inner: whitebox.AttackConfig = field(default_factory=whitebox.AttackConfig)

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise ConfigurationError("alpha: must be strictly between 0 and 1")
        if not self.fd_step > 0:
            raise ConfigurationError("fd_step: must be > 0")
        if self.max_queries < 1:
            raise ConfigurationError("max_queries: must be >= 1")
        if self.coord_batch < 1:
            raise ConfigurationError("coord_batch: must be >= 1")
        if not self.step_size > 0:
            raise ConfigurationError("step_size: must be > 0")
        if not (0 <= self.zoo_momentum < 1):
            raise ConfigurationError("zoo_momentum: must be in [0, 1)")

    @property
    def epsilon1(self) -> float | None:
        return None if self.epsilon is None else self.alpha * self.epsilon

    @property
    def epsilon2(self) -> float | None:
        return None if self.epsilon is None else (1.0 - self.alpha) * self.epsilon

    def stage1_attack_config(self) -> whitebox.AttackConfig:
        return replace(self.inner, epsilon=self.epsilon1, c_in=0.0, c_min=0.0, c_max=0.0)

    def describe(self) -> dict:
        return {
            "epsilon": "inf" if self.epsilon is None else self.epsilon,
            "alpha": self.alpha,
            "epsilon1": "inf" if self.epsilon1 is None else self.epsilon1,
            "epsilon2": "inf" if self.epsilon2 is None else self.epsilon2,
            "fd_step": self.fd_step,
            "coord_batch": self.coord_batch,
            "max_queries": self.max_queries,
            "step_size": self.step_size,
            "zoo_momentum": self.zoo_momentum,
            "seed": self.seed,
            "stage1": self.stage1_attack_config().describe(),
        }


@dataclass
class BlackBoxResult:
    x_adv: np.ndarray
    success: bool
    label_clean: int
    label_stage1: int
    label_final: int
    stage2_ran: bool
    queries: int
    stage1_distortion: float
    stage2_distortion: float
    total_distortion: float
    substitute_clean_sparsity: float
    substitute_adv_sparsity: float
    failure_reason: str | None = None
    # filled by the instrumented probe when available; never read by the attack
    victim_sparsity_clean: float | None = None
    victim_sparsity_stage1: float | None = None
    victim_sparsity_final: float | None = None


def transfer_stage(substitute: nn.Model, x_clean: np.ndarray, config: BlackBoxConfig) -> np.ndarray:
    """Stage 1: white-box attack on the substitute with c = 0 under eps1.

    Label preservation is not required here; the last candidate is returned
    even when the substitute's label flips (stage 2 repairs the victim label).
    """
    result = whitebox.run_attack(
        substitute, x_clean, config.stage1_attack_config(), keep_best=False
    )
    return result.x_adv


def _score_loss(scores: np.ndarray, target: int) -> float:
    return -math.log(max(float(scores[target]), 1e-12))


def estimate_ce_gradient(query_loss, x: np.ndarray, coords: np.ndarray, h: float) -> np.ndarray:
    """Symmetric finite differences of a query-only loss on chosen coordinates.

    Returns a dense gradient estimate, zero outside the coordinate batch.
    Exact (up to float error) for quadratic losses.
    """
    g = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for j in coords:
        e = np.zeros_like(flat)
        e[j] = h
        up = query_loss((flat + e).reshape(x.shape))
        dn = query_loss((flat - e).reshape(x.shape))
        g[j] = (up - dn) / (2.0 * h)
    return g.reshape(x.shape)


@dataclass
class ZooOutcome:
    x: np.ndarray
    success: bool
    label: int
    failure_reason: str | None = None


def zoo_stage(
    oracle: QueryOracle,
    x_stage1: np.ndarray,
    x_clean: np.ndarray,
    target: int,
    config: BlackBoxConfig,
    initial: OracleResponse | None = None,
) -> ZooOutcome:
    """Stage 2: restore the victim's clean-input label by query-only descent.

    Iterates projected momentum descent on the targeted CE loss rebuilt from
    queried confidence scores, keeping every iterate within eps2 of the
    stage-1 input and inside [0, 1]. Stops as soon as the oracle's label
    equals the target, or when the query budget is exhausted, in which case
    the best iterate seen (lowest loss) is returned with success=False.
    """
    rng = np.random.default_rng(config.seed)
    x = np.asarray(x_stage1, dtype=np.float64).copy()

    resp = initial if initial is not None else oracle.query(x)
    if resp.label == target:
        return ZooOutcome(np.asarray(x_stage1).copy(), True, resp.label)
    if resp.scores is None:
        return ZooOutcome(
            np.asarray(x_stage1).copy(), False, resp.label,
            failure_reason="oracle returns labels only; stage 2 needs confidence scores",
        )

    def query_loss(xq):
        r = oracle.query(xq)
        return _score_loss(r.scores, target)

    n_coords = x.size
    batch = min(config.coord_batch, n_coords)
    cost_per_iter = 2 * batch + 1
    g = np.zeros_like(x)
    best_x = x.copy()
    best_loss = _score_loss(resp.scores, target)
    best_label = resp.label
    eps2 = config.epsilon2
    while oracle.query_count + cost_per_iter <= config.max_queries:
        coords = rng.choice(n_coords, size=batch, replace=False)
        ghat = estimate_ce_gradient(query_loss, x, coords, config.fd_step)
        g = config.zoo_momentum * g + ghat
        norm = float(np.linalg.norm(g))
        if norm > 0.0:
            x = x - config.step_size * (g / norm)
        x = whitebox.clip_project(x, np.asarray(x_stage1, dtype=np.float64), eps2)
        resp = oracle.query(x)
        if resp.label == target:
            return ZooOutcome(x, True, resp.label)
        loss = _score_loss(resp.scores, target)
        if loss < best_loss:
            best_loss = loss
            best_x = x.copy()
            best_label = resp.label
    return ZooOutcome(best_x, False, best_label,
                      failure_reason="query budget exhausted before label restoration")


def run_blackbox(
    oracle: QueryOracle,
    substitute: nn.Model,
    x_clean: np.ndarray,
    config: BlackBoxConfig,
    sparsity_probe: Callable[[np.ndarray], float] | None = None,
) -> BlackBoxResult:
    """Full pipeline: transfer stage always, query stage only on label flips.

    Per-stage distortions are checked against their budget shares on every run
    (the total follows by the triangle inequality). The optional probe fills
    victim-sparsity fields on the result for evaluation purposes only.
    """
    x_clean = np.asarray(x_clean, dtype=np.float64)
    label_clean = oracle.query(x_clean).label

    sub_clean = nn.forward(substitute, x_clean.astype(substitute.dtype))
    sub_clean_sparsity = objective.measure_sparsity(sub_clean).total

    x_stage1 = np.asarray(transfer_stage(substitute, x_clean, config), dtype=np.float64)
    d1 = float(np.linalg.norm(x_stage1 - x_clean))
    eps1, eps2 = config.epsilon1, config.epsilon2
    if eps1 is not None and d1 > eps1 + 1e-6:
        raise ConfigurationError(f"stage-1 distortion {d1} exceeds budget {eps1}")

    sub_adv = nn.forward(substitute, x_stage1.astype(substitute.dtype))
    sub_adv_sparsity = objective.measure_sparsity(sub_adv).total

    resp1 = oracle.query(x_stage1)
    label_stage1 = resp1.label

    if label_stage1 == label_clean:
        x_final = x_stage1
        label_final = label_stage1
        stage2_ran = False
        success = True
        failure_reason = None
    else:
        stage2_ran = True
        outcome = zoo_stage(oracle, x_stage1, x_clean, label_clean, config, initial=resp1)
        x_final = np.asarray(outcome.x, dtype=np.float64)
        label_final = outcome.label
        success = outcome.success
        failure_reason = outcome.failure_reason

    d2 = float(np.linalg.norm(x_final - x_stage1))
    if eps2 is not None and d2 > eps2 + 1e-6:
        raise ConfigurationError(f"stage-2 distortion {d2} exceeds budget {eps2}")
    total = float(np.linalg.norm(x_final - x_clean))

    result = BlackBoxResult(
        x_adv=x_final,
        success=success and label_final == label_clean,
        label_clean=label_clean,
        label_stage1=label_stage1,
        label_final=label_final,
        stage2_ran=stage2_ran,
        queries=oracle.query_count,
        stage1_distortion=d1,
        stage2_distortion=d2,
        total_distortion=total,
        substitute_clean_sparsity=sub_clean_sparsity,
        substitute_adv_sparsity=sub_adv_sparsity,
        failure_reason=failure_reason,
    )
    if sparsity_probe is not None:
        result.victim_sparsity_clean = float(sparsity_probe(x_clean))
        result.victim_sparsity_stage1 = float(sparsity_probe(x_stage1))
        result.victim_sparsity_final = float(sparsity_probe(x_final))
    return result
