"""Analytical latency/energy/EDP model for sparsity-exploiting hardware.

Two presets share one occupancy model. The zero-skip accelerator elides every
multiply-accumulate whose input activation is zero, so a layer's performed
MACs are its dense MACs times the nonzero fraction of its input. The
sparsity-aware CPU saves only a fraction rho of each skipped MAC's cost
(pointer chasing and control flow eat the rest), so its effective MAC count
is dense * (nu + (1 - nu) * (1 - rho)). Cycles are effective MACs over lane
throughput plus a fixed per-layer overhead; relu/pool/flatten are treated as
fused, zero-cost stages. Energy is per-MAC energy times performed MACs plus a
per-element activation access energy. EDP is energy times latency at both
per-layer and total granularity; the other totals are per-layer sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn, objective
from .errors import ConfigurationError

PRESET_ACCELERATOR = "zero_skip_accelerator"
PRESET_CPU = "sparsity_aware_cpu"
PRESETS = (PRESET_ACCELERATOR, PRESET_CPU)


@dataclass(frozen=True)
class CostModelConfig:
    preset: str = PRESET_ACCELERATOR
    lanes: int = 256
    mac_energy_pj: float = 1.0
    mem_energy_pj: float = 0.5
    overhead_cycles: int = 1000
    cpu_skip_efficiency: float = 0.4  # rho: fraction of a skipped MAC's cost saved
    clock_ns: float = 1.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"preset must be one of {PRESETS}")
        if self.lanes < 1:
            raise ConfigurationError("lanes must be >= 1")
        if self.mac_energy_pj < 0 or self.mem_energy_pj < 0:
            raise ConfigurationError("energies must be >= 0")
        if not (0 <= self.cpu_skip_efficiency <= 1):
            raise ConfigurationError("cpu_skip_efficiency must be in [0, 1]")
        if self.clock_ns <= 0:
            raise ConfigurationError("clock period must be > 0")

    @staticmethod
    def accelerator(**overrides) -> "CostModelConfig":
        return replace(CostModelConfig(preset=PRESET_ACCELERATOR), **overrides)

    @staticmethod
    def cpu(**overrides) -> "CostModelConfig":
        return replace(CostModelConfig(preset=PRESET_CPU), **overrides)

    def describe(self) -> dict:
        return {
            "preset": self.preset,
            "lanes": self.lanes,
            "mac_energy_pj": self.mac_energy_pj,
            "mem_energy_pj": self.mem_energy_pj,
            "overhead_cycles": self.overhead_cycles,
            "cpu_skip_efficiency": self.cpu_skip_efficiency,
            "clock_ns": self.clock_ns,
        }


@dataclass
class LayerCost:
    layer: int
    kind: str
    dense_macs: int
    nonzero_fraction: float
    performed_macs: float
    cycles: int
    latency_ns: float
    energy_pj: float
    edp: float

    def to_row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CostReport:
    per_layer: list[LayerCost]
    total_cycles: int
    total_latency_ns: float
    total_energy_pj: float
    total_edp: float
    total_dense_macs: int
    total_performed_macs: float
    config: dict

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "per_layer": [c.to_row() for c in self.per_layer],
            "totals": {
                "cycles": self.total_cycles,
                "latency_ns": self.total_latency_ns,
                "energy_pj": self.total_energy_pj,
                "edp": self.total_edp,
                "dense_macs": self.total_dense_macs,
                "performed_macs": self.total_performed_macs,
            },
        }


def layer_macs(model: nn.Model) -> list[int]:
    """Dense multiply-accumulate count per layer (zero for non-MAC layers)."""
    out = []
    shapes = model.layer_input_shapes()
    for spec, in_shape in zip(model.layers, shapes):
        if spec.kind == nn.CONV2D:
            _, oh, ow = nn.layer_output_shape(spec, in_shape)
            kh, kw = spec.kernel
            out.append(oh * ow * spec.out_channels * spec.in_channels * kh * kw)
        elif spec.kind == nn.DENSE:
            out.append(spec.in_features * spec.out_features)
        else:
            out.append(0)
    return out


def estimate_cost(model: nn.Model, trace: nn.ActivationTrace, config: CostModelConfig) -> CostReport:
    """Model one inference given the trace's input-activation zero patterns."""
    if len(trace.layer_inputs) != len(model.layers):
        raise ConfigurationError("trace layer count does not match model layer count")
    macs = layer_macs(model)
    rho = config.cpu_skip_efficiency
    rows: list[LayerCost] = []
    for i, spec in enumerate(model.layers):
        if macs[i] == 0:
            continue
        act = trace.layer_inputs[i]
        if act.size == 0:
            raise ConfigurationError(f"layer {i} trace entry is empty")
        nu = float(np.count_nonzero(act) / act.size)
        if config.preset == PRESET_ACCELERATOR:
            performed = macs[i] * nu
        else:
            performed = macs[i] * (nu + (1.0 - nu) * (1.0 - rho))
        cycles = math.ceil(performed / config.lanes) + config.overhead_cycles
        latency = cycles * config.clock_ns
        energy = config.mac_energy_pj * performed + config.mem_energy_pj * act.size
        rows.append(LayerCost(
            layer=i, kind=spec.kind, dense_macs=macs[i], nonzero_fraction=nu,
            performed_macs=performed, cycles=cycles, latency_ns=latency,
            energy_pj=energy, edp=energy * latency,
        ))
    total_cycles = sum(r.cycles for r in rows)
    total_latency = sum(r.latency_ns for r in rows)
    total_energy = sum(r.energy_pj for r in rows)
    return CostReport(
        per_layer=rows,
        total_cycles=total_cycles,
        total_latency_ns=total_latency,
        total_energy_pj=total_energy,
        total_edp=total_energy * total_latency,
        total_dense_macs=sum(r.dense_macs for r in rows),
        total_performed_macs=sum(r.performed_macs for r in rows),
        config=config.describe(),
    )


def layer_weights(
    model: nn.Model,
    calibration_traces: list[nn.ActivationTrace],
    config: CostModelConfig,
    basis: str = "latency",
) -> objective.LayerWeighting:
    """Per-counted-layer weights from mean relative cost, normalized to sum 1.

    A counted position maps to the MAC layer it feeds (the position itself
    when that layer is conv/dense, otherwise the next MAC layer downstream).
    """
    if basis not in ("latency", "energy"):
        raise ConfigurationError("basis must be 'latency' or 'energy'")
    if not calibration_traces:
        raise ConfigurationError("need at least one calibration trace")
    reports = [estimate_cost(model, t, config) for t in calibration_traces]
    by_layer: dict[int, list[float]] = {}
    for rep in reports:
        for row in rep.per_layer:
            val = row.latency_ns if basis == "latency" else row.energy_pj
            by_layer.setdefault(row.layer, []).append(val)
    mean_cost = {i: float(np.mean(v)) for i, v in by_layer.items()}
    mac_layers = sorted(mean_cost)

    values = []
    for pos in model.counted_positions():
        downstream = [i for i in mac_layers if i >= pos]
        if not downstream:
            raise ConfigurationError(f"counted position {pos} feeds no MAC layer")
        values.append(mean_cost[downstream[0]])
    return objective.LayerWeighting.normalized(values)


def masked_trace(trace: nn.ActivationTrace, level: float) -> nn.ActivationTrace:
    """Copy of a trace whose counted activations hit a target zero fraction.

    Zeros the smallest-magnitude counted values first; a level at or below the
    natural zero fraction leaves the trace unchanged.
    """
    if not 0.0 <= level <= 1.0:
        raise ConfigurationError("sparsity level must be in [0, 1]")
    counted = trace.counted_inputs()
    flat = np.concatenate([a.reshape(-1) for a in counted])
    k = flat.size
    n_zero = int(round(level * k))
    order = np.argsort(np.abs(flat), kind="stable")
    mask = np.ones(k, dtype=bool)
    mask[order[:n_zero]] = False
    masked = flat * mask

    new_inputs = list(trace.layer_inputs)
    offset = 0
    for pos, a in zip(trace.counted_positions, counted):
        new_inputs[pos] = masked[offset : offset + a.size].reshape(a.shape).astype(a.dtype)
        offset += a.size
    return nn.ActivationTrace(
        layer_inputs=new_inputs,
        logits=trace.logits,
        label=trace.label,
        counted_positions=trace.counted_positions,
    )


@dataclass
class SweepPoint:
    level: float
    achieved_sparsity: float
    cycles: int
    latency_ns: float
    energy_pj: float
    edp: float


def sparsity_sweep(
    model: nn.Model,
    x: np.ndarray,
    config: CostModelConfig,
    levels,
) -> list[SweepPoint]:
    """Latency curve against synthetically injected activation sparsity."""
    trace = nn.forward(model, np.asarray(x, dtype=model.dtype))
    points = []
    for level in levels:
        mt = masked_trace(trace, float(level))
        achieved = objective.measure_sparsity(mt).total
        rep = estimate_cost(model, mt, config)
        points.append(SweepPoint(
            level=float(level), achieved_sparsity=achieved, cycles=rep.total_cycles,
            latency_ns=rep.total_latency_ns, energy_pj=rep.total_energy_pj,
            edp=rep.total_edp,
        ))
    return points
