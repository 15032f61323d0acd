import math

import numpy as np
import pytest

from sparseatk import hwcost, nn, objective, whitebox
from sparseatk.errors import ConfigurationError
from sparseatk.hwcost import CostModelConfig

from oracles import layer_macs_ref


class TestLayerMacs:
    def test_dense(self):
        m = nn.Model((10,), [nn.dense(10, 4)],
                     [nn.LayerParams(np.zeros((4, 10), np.float32), np.zeros(4, np.float32))], 4)
        assert hwcost.layer_macs(m) == [40]

    def test_one_by_one_conv(self):
        m = nn.Model((8, 4, 4),
                     [nn.conv2d(8, 8, 1), nn.flatten()],
                     [nn.LayerParams(np.zeros((8, 8, 1, 1), np.float32), np.zeros(8, np.float32)),
                      None], 128)
        assert hwcost.layer_macs(m) == [1024, 0]  # 16 positions * 8 * 8

    def test_matches_hand_count_on_presets(self, victim_model):
        assert hwcost.layer_macs(victim_model) == layer_macs_ref(victim_model)


def _fake_trace(model, fill=1.0):
    shapes = model.layer_input_shapes()
    inputs = [np.full(s, fill, dtype=np.float32) for s in shapes]
    return nn.ActivationTrace(inputs, np.zeros(model.num_classes), 0,
                              model.counted_positions())


class TestEstimateCost:
    def test_accelerator_cycle_example(self):
        # 1024 dense MACs at half-nonzero input, 16 lanes, no overhead
        m = nn.Model((8, 4, 4), [nn.conv2d(8, 8, 1), nn.flatten()],
                     [nn.LayerParams(np.zeros((8, 8, 1, 1), np.float32),
                                     np.zeros(8, np.float32)), None], 128)
        trace = _fake_trace(m)
        half = trace.layer_inputs[0].copy()
        half.reshape(-1)[: half.size // 2] = 0.0
        trace.layer_inputs[0] = half
        cfg = CostModelConfig.accelerator(lanes=16, overhead_cycles=0)
        rep = hwcost.estimate_cost(m, trace, cfg)
        assert rep.per_layer[0].cycles == 32  # ceil(512 / 16)

    def test_fully_dense_presets_agree_on_cycles(self, victim_model, digits):
        _, test_set = digits
        trace = _fake_trace(victim_model, fill=0.7)  # nu = 1 everywhere
        acc = hwcost.estimate_cost(victim_model, trace,
                                   CostModelConfig.accelerator(lanes=32, overhead_cycles=10))
        cpu = hwcost.estimate_cost(victim_model, trace,
                                   CostModelConfig.cpu(lanes=32, overhead_cycles=10))
        assert acc.total_cycles == cpu.total_cycles

    def test_all_zero_input_costs_overhead_only(self, victim_model):
        trace = _fake_trace(victim_model, fill=0.0)
        cfg = CostModelConfig.accelerator(lanes=32, overhead_cycles=7)
        rep = hwcost.estimate_cost(victim_model, trace, cfg)
        assert all(row.cycles == 7 for row in rep.per_layer)

    def test_totals_are_sums_and_edp_is_product(self, victim_model, digits):
        _, test_set = digits
        trace = nn.forward(victim_model, test_set.image(0))
        rep = hwcost.estimate_cost(victim_model, trace, CostModelConfig.accelerator())
        assert rep.total_cycles == sum(r.cycles for r in rep.per_layer)
        assert rep.total_energy_pj == pytest.approx(sum(r.energy_pj for r in rep.per_layer))
        assert rep.total_edp == pytest.approx(rep.total_energy_pj * rep.total_latency_ns)
        for r in rep.per_layer:
            assert r.edp == pytest.approx(r.energy_pj * r.latency_ns)

    def test_matches_naive_recomputation(self, victim_model, digits, rng):
        _, test_set = digits
        trace = nn.forward(victim_model, test_set.image(2))
        cfg = CostModelConfig.cpu(lanes=48, overhead_cycles=11,
                                  mac_energy_pj=1.5, mem_energy_pj=0.25,
                                  cpu_skip_efficiency=0.4, clock_ns=2.0)
        rep = hwcost.estimate_cost(victim_model, trace, cfg)
        macs = layer_macs_ref(victim_model)
        cycles = 0
        energy = 0.0
        for i, spec in enumerate(victim_model.layers):
            if macs[i] == 0:
                continue
            a = trace.layer_inputs[i]
            nu = float(np.count_nonzero(a)) / a.size
            eff = macs[i] * (nu + (1 - nu) * (1 - 0.4))
            cycles += math.ceil(eff / 48) + 11
            energy += 1.5 * eff + 0.25 * a.size
        assert rep.total_cycles == cycles
        assert rep.total_energy_pj == pytest.approx(energy, rel=1e-9)
        assert rep.total_latency_ns == pytest.approx(cycles * 2.0)

    def test_monotone_in_zero_fraction(self, victim_model, digits, rng):
        _, test_set = digits
        trace = nn.forward(victim_model, test_set.image(1))
        cfg = CostModelConfig.accelerator(lanes=32, overhead_cycles=100)
        base = hwcost.estimate_cost(victim_model, trace, cfg)
        sparser = hwcost.masked_trace(
            trace, min(1.0, objective.measure_sparsity(trace).total + 0.2))
        rep = hwcost.estimate_cost(victim_model, sparser, cfg)
        assert rep.total_latency_ns <= base.total_latency_ns
        assert rep.total_energy_pj <= base.total_energy_pj

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            CostModelConfig(preset="tpu")
        with pytest.raises(ConfigurationError):
            CostModelConfig(lanes=0)
        with pytest.raises(ConfigurationError):
            CostModelConfig(cpu_skip_efficiency=1.5)


class TestLayerWeights:
    def test_single_layer_weight_is_one(self):
        m = nn.Model((10,), [nn.dense(10, 4)],
                     [nn.LayerParams(np.ones((4, 10), np.float32), np.zeros(4, np.float32))], 4)
        trace = nn.forward(m, np.ones(10, np.float32))
        w = hwcost.layer_weights(m, [trace], CostModelConfig.accelerator())
        assert w.weights == (1.0,)

    def test_equal_cost_layers_split_evenly(self):
        # two identical dense layers with identical activation counts
        p = nn.LayerParams(np.full((10, 10), 0.3, np.float32), np.ones(10, np.float32))
        m = nn.Model((10,), [nn.dense(10, 10), nn.dense(10, 10)], [p, p], 10)
        trace = nn.forward(m, np.ones(10, np.float32))
        w = hwcost.layer_weights(m, [trace], CostModelConfig.accelerator(), basis="energy")
        assert w.weights[0] == pytest.approx(0.5)
        assert w.weights[1] == pytest.approx(0.5)

    def test_matches_cost_report_recomputation(self, victim_model, digits):
        _, test_set = digits
        traces = [nn.forward(victim_model, test_set.image(i)) for i in range(3)]
        cfg = CostModelConfig.accelerator(lanes=32, overhead_cycles=100)
        w = hwcost.layer_weights(victim_model, traces, cfg, basis="latency")
        reports = [hwcost.estimate_cost(victim_model, t, cfg) for t in traces]
        by_layer = {}
        for rep in reports:
            for row in rep.per_layer:
                by_layer.setdefault(row.layer, []).append(row.latency_ns)
        means = np.array([np.mean(by_layer[i]) for i in sorted(by_layer)])
        np.testing.assert_allclose(np.array(w.weights), means / means.sum(), rtol=1e-9)
        assert sum(w.weights) == pytest.approx(1.0)

    def test_requires_calibration_trace(self, victim_model):
        with pytest.raises(ConfigurationError):
            hwcost.layer_weights(victim_model, [], CostModelConfig.accelerator())


class TestSparsitySweep:
    def test_curve_non_increasing(self, victim_model, digits):
        _, test_set = digits
        cfg = CostModelConfig.accelerator(lanes=32, overhead_cycles=100)
        points = hwcost.sparsity_sweep(victim_model, test_set.image(0), cfg,
                                       np.linspace(0, 1, 11))
        lat = [p.latency_ns for p in points]
        assert all(b <= a for a, b in zip(lat, lat[1:]))

    def test_natural_level_no_cheaper_than_zero_level(self, victim_model, digits):
        _, test_set = digits
        x = test_set.image(0)
        natural = objective.measure_sparsity(nn.forward(victim_model, x)).total
        cfg = CostModelConfig.accelerator(lanes=32, overhead_cycles=100)
        points = hwcost.sparsity_sweep(victim_model, x, cfg, [0.0, natural])
        assert points[1].latency_ns <= points[0].latency_ns

    def test_masking_hits_requested_fraction(self, victim_model, digits):
        _, test_set = digits
        x = test_set.image(0)
        trace = nn.forward(victim_model, x)
        natural = objective.measure_sparsity(trace).total
        for level in (natural + 0.1, natural + 0.3, 0.95):
            masked = hwcost.masked_trace(trace, level)
            got = objective.measure_sparsity(masked).total
            assert abs(got - level) <= 1.0 / masked.neuron_count() + 1e-9

    def test_level_below_natural_is_identity(self, victim_model, digits):
        _, test_set = digits
        x = test_set.image(0)
        trace = nn.forward(victim_model, x)
        natural = objective.measure_sparsity(trace).total
        masked = hwcost.masked_trace(trace, natural / 2)
        assert objective.measure_sparsity(masked).total == pytest.approx(natural)

    def test_sensitivity_ordering_accel_vs_cpu(self, victim_model, digits):
        # for the same clean/attacked pair the accelerator's latency ratio
        # dominates the CPU's whenever skipping is imperfect there
        _, test_set = digits
        x = test_set.image(0)
        r = whitebox.run_attack(victim_model, x, whitebox.AttackConfig(i_max=30))
        tc = nn.forward(victim_model, x)
        ta = nn.forward(victim_model, r.x_adv)
        acc = CostModelConfig.accelerator(lanes=32, overhead_cycles=100)
        cpu = CostModelConfig.cpu(lanes=32, overhead_cycles=100)
        ratio_acc = (hwcost.estimate_cost(victim_model, ta, acc).total_latency_ns
                     / hwcost.estimate_cost(victim_model, tc, acc).total_latency_ns)
        ratio_cpu = (hwcost.estimate_cost(victim_model, ta, cpu).total_latency_ns
                     / hwcost.estimate_cost(victim_model, tc, cpu).total_latency_ns)
        assert ratio_acc >= ratio_cpu
