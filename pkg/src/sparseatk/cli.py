"""Command-line driver.

Subcommands: train, attack-wb, attack-bb, defend, cost, sweep. Flags mirror
the module config fields 1:1; a flat JSON config file may supply any of them
(explicit command-line flags win). Every run writes its fully resolved
effective configuration alongside the results, and every output file embeds
that config plus the artifact version: JSON reports carry it inline, CSV
files as a leading comment line.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, blackbox, data, defenses, hwcost, nn, objective, whitebox
from .errors import ConfigurationError, FormatError, SparseAtkError

ENV_OUTDIR = "SPARSEATK_OUTDIR"


def _default_out() -> str:
    return os.environ.get(ENV_OUTDIR, "runs")


def _sanitize(obj):
    """Make a structure JSON-safe: numpy scalars/arrays, inf and nan."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
    return obj


def _write_json(path: Path, payload: dict, config: dict):
    payload = dict(payload)
    payload["artifact_version"] = __version__
    payload["effective_config"] = config
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(_sanitize(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict], config: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(_sanitize({"artifact_version": __version__,
                                             "effective_config": config}), sort_keys=True) + "\n")
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _sanitize(row.get(k)) for k in fieldnames})


def _effective_config(args, keys: list[str]) -> dict:
    cfg = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    return _sanitize(cfg)


def _load_dataset(images, labels, name="dataset", split="test") -> data.Dataset:
    for p in (images, labels):
        if not Path(p).exists():
            raise FileNotFoundError(f"dataset path does not exist: {p}")
    return data.load_idx(images, labels, name=name, split=split)


def _load_model(path) -> nn.Model:
    if not Path(path).exists():
        raise FileNotFoundError(f"model path does not exist: {path}")
    return data.load_model(path)


def _attack_config_from_args(args) -> whitebox.AttackConfig:
    epsilon = None if args.mode == "unconstrained" else args.epsilon
    return whitebox.AttackConfig(
        epsilon=epsilon,
        epsilon_iter=args.epsilon_iter,
        i_max=args.i_max,
        o_max=args.o_max,
        c_in=args.c_in,
        c_min=args.c_min,
        c_max=args.c_max,
        mu=args.mu,
        surrogate=objective.SurrogateConfig(kind=args.surrogate, beta=args.beta),
        weighting=None,  # resolved below when a hardware basis is requested
    )


def _resolve_weighting(args, model, dataset, config: whitebox.AttackConfig) -> whitebox.AttackConfig:
    if args.weighting == "uniform":
        return config
    cost_cfg = _cost_config_from_args(args, preset=hwcost.PRESET_ACCELERATOR)
    n_cal = min(8, len(dataset))
    traces = [nn.forward(model, dataset.image(i).astype(model.dtype)) for i in range(n_cal)]
    weighting = hwcost.layer_weights(model, traces, cost_cfg, basis=args.weighting)
    return replace(config, weighting=weighting)


def _cost_config_from_args(args, preset) -> hwcost.CostModelConfig:
    return hwcost.CostModelConfig(
        preset=preset,
        lanes=args.lanes,
        mac_energy_pj=args.mac_energy_pj,
        mem_energy_pj=args.mem_energy_pj,
        overhead_cycles=args.overhead_cycles,
        cpu_skip_efficiency=args.cpu_skip_efficiency,
        clock_ns=args.clock_ns,
    )


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic is not None:
        train_set, test_set = data.make_digits_dataset(args.seed, args.synthetic,
                                                       max(args.synthetic // 6, 200))
        data.save_idx(train_set, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
        data.save_idx(test_set, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte")
        # reload through the IDX path so training consumes exactly what was written
        train_set = data.load_idx(out / "train-images-idx3-ubyte",
                                  out / "train-labels-idx1-ubyte", split="train")
        test_set = data.load_idx(out / "t10k-images-idx3-ubyte",
                                 out / "t10k-labels-idx1-ubyte", split="test")
    else:
        if not args.images or not args.labels:
            raise ConfigurationError("either --synthetic or --images/--labels is required")
        train_set = _load_dataset(args.images, args.labels, split="train")
        test_set = None
        if args.test_images and args.test_labels:
            test_set = _load_dataset(args.test_images, args.test_labels, split="test")

    model = data.synth_model(args.seed, preset=args.arch)
    result = data.train(
        model, train_set, epochs=args.epochs, learning_rate=args.lr,
        momentum=args.momentum, batch_size=args.batch, seed=args.seed, verbose=True,
    )
    test_accuracy = data.evaluate_accuracy(result.model, test_set) if test_set else None

    config_keys = ["arch", "epochs", "lr", "momentum", "batch", "seed", "synthetic",
                   "images", "labels", "test_images", "test_labels", "out"]
    config = _effective_config(args, config_keys)
    data.save_model(result.model, out / "model.bin")
    _write_json(out / "train_log.json", {
        "history": result.history,
        "test_accuracy": test_accuracy,
        "model_file": str(out / "model.bin"),
    }, config)
    _write_json(out / "effective_config.json", {"command": "train"}, config)
    if test_accuracy is not None:
        print(f"test accuracy: {test_accuracy:.4f}")
    print(f"model written to {out / 'model.bin'}")
    return 0


# ---------------------------------------------------------------------------
# attack-wb

def _select_images(dataset: data.Dataset, count: int | None, offset: int) -> data.Dataset:
    end = len(dataset) if count is None else min(offset + count, len(dataset))
    return dataset.subset(range(offset, end))


def cmd_attack_wb(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    dataset = _select_images(_load_dataset(args.images, args.labels), args.count, args.offset)
    config = _attack_config_from_args(args)
    config = _resolve_weighting(args, model, dataset, config)

    results, agg = whitebox.batch_attack(model, dataset, config)

    config_keys = ["model", "images", "labels", "count", "offset", "mode", "weighting",
                   "seed", "out"]
    effective = _effective_config(args, config_keys)
    effective["attack"] = config.describe()

    rows = []
    for i, r in enumerate(results):
        rows.append({
            "index": args.offset + i,
            "label_clean": r.label_clean,
            "label_adv": r.label_adv,
            "label_preserved": int(r.label_adv == r.label_clean),
            "success": int(r.success),
            "clean_sparsity": r.clean_sparsity,
            "adv_sparsity": r.adv_sparsity,
            "sparsity_ratio": r.sparsity_ratio,
            "l2_distortion": r.l2_distortion,
            "final_c": r.final_c,
            "iterations": r.iterations,
        })
    _write_csv(out / "per_image.csv", list(rows[0].keys()) if rows else
               ["index"], rows, effective)
    _write_json(out / "results.json", {"aggregate": agg.__dict__}, effective)
    np.savez(out / "adv_inputs.npz",
             x_adv=np.stack([r.x_adv for r in results]) if results else np.zeros((0,)),
             indices=np.arange(args.offset, args.offset + len(results)),
             labels_clean=np.array([r.label_clean for r in results], dtype=np.int64))
    _write_json(out / "effective_config.json", {"command": "attack-wb"}, effective)
    print(f"attacked {agg.count} images: mean ratio {agg.mean_ratio:.3f}, "
          f"label preservation {agg.label_preservation_rate:.3f}")
    return 0


# ---------------------------------------------------------------------------
# attack-bb

def cmd_attack_bb(args) -> int:
    out = Path(args.out)
    victim = _load_model(args.model)
    substitute = _load_model(args.substitute)
    dataset = _select_images(_load_dataset(args.images, args.labels), args.count, args.offset)

    inner = _attack_config_from_args(args)
    bb_config = blackbox.BlackBoxConfig(
        epsilon=None if args.mode == "unconstrained" else args.epsilon,
        alpha=args.alpha,
        fd_step=args.fd_step,
        coord_batch=args.coord_batch,
        max_queries=args.max_queries,
        step_size=args.step_size,
        zoo_momentum=args.zoo_momentum,
        seed=args.seed,
        inner=inner,
    )

    rows = []
    adv = []
    for i in range(len(dataset)):
        oracle, probe = blackbox.make_instrumented_victim(victim)
        r = blackbox.run_blackbox(oracle, substitute, dataset.image(i), bb_config,
                                  sparsity_probe=probe)
        adv.append(r.x_adv)
        ratio = (r.victim_sparsity_clean / r.victim_sparsity_final
                 if r.victim_sparsity_final else math.inf)
        rows.append({
            "index": args.offset + i,
            "label_clean": r.label_clean,
            "label_stage1": r.label_stage1,
            "label_final": r.label_final,
            "stage1_flipped": int(r.label_stage1 != r.label_clean),
            "stage2_ran": int(r.stage2_ran),
            "success": int(r.success),
            "queries": r.queries,
            "stage1_distortion": r.stage1_distortion,
            "stage2_distortion": r.stage2_distortion,
            "total_distortion": r.total_distortion,
            "victim_sparsity_clean": r.victim_sparsity_clean,
            "victim_sparsity_stage1": r.victim_sparsity_stage1,
            "victim_sparsity_final": r.victim_sparsity_final,
            "victim_sparsity_ratio": ratio,
            "substitute_clean_sparsity": r.substitute_clean_sparsity,
            "substitute_adv_sparsity": r.substitute_adv_sparsity,
        })

    config_keys = ["model", "substitute", "images", "labels", "count", "offset", "mode", "seed", "out"]
    effective = _effective_config(args, config_keys)
    effective["blackbox"] = bb_config.describe()

    ratios = [row["victim_sparsity_ratio"] for row in rows]
    aggregate = {
        "count": len(rows),
        "mean_victim_ratio": float(np.mean(ratios)) if rows else 0.0,
        "success_rate": float(np.mean([row["success"] for row in rows])) if rows else 0.0,
        "stage1_flip_rate": float(np.mean([row["stage1_flipped"] for row in rows])) if rows else 0.0,
        "mean_queries": float(np.mean([row["queries"] for row in rows])) if rows else 0.0,
        "max_total_distortion": float(np.max([row["total_distortion"] for row in rows])) if rows else 0.0,
    }
    _write_csv(out / "per_image.csv", list(rows[0].keys()) if rows else ["index"], rows, effective)
    _write_json(out / "results.json", {"aggregate": aggregate}, effective)
    np.savez(out / "adv_inputs.npz",
             x_adv=np.stack(adv).astype(np.float32) if adv else np.zeros((0,)),
             indices=np.arange(args.offset, args.offset + len(adv)),
             labels_clean=np.array([row["label_clean"] for row in rows], dtype=np.int64))
    _write_json(out / "effective_config.json", {"command": "attack-bb"}, effective)
    print(f"attacked {aggregate['count']} images: mean victim ratio "
          f"{aggregate['mean_victim_ratio']:.3f}, success {aggregate['success_rate']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# defend

def _parse_grid(grid: str, as_type):
    try:
        return [as_type(tok) for tok in grid.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigurationError(f"grid: cannot parse {grid!r}") from None


def _load_adv_inputs(path) -> tuple[np.ndarray, np.ndarray]:
    if not Path(path).exists():
        raise FileNotFoundError(f"adversarial input file does not exist: {path}")
    with np.load(path) as z:
        return z["x_adv"], z["indices"]


def cmd_defend(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    clean = _load_dataset(args.images, args.labels)
    x_adv, indices = _load_adv_inputs(args.adv)
    clean_subset = clean.subset(indices)
    if args.count is not None:
        clean_subset = clean_subset.subset(range(min(args.count, len(clean_subset))))
        x_adv = x_adv[: len(clean_subset)]
    adv_images = [x.astype(model.dtype) for x in x_adv]

    config_keys = ["model", "images", "labels", "adv", "defense", "grid", "count", "seed", "out"]
    effective = _effective_config(args, config_keys)

    reports = []
    if args.defense == "threshold":
        for budget in _parse_grid(args.grid, float):
            profile = defenses.search_thresholds(model, adv_images, clean_subset, budget)
            defended = defenses.apply_thresholds(model, profile)
            rep = defenses.evaluate_defense(model, defended, adv_images, clean_subset,
                                            name="threshold",
                                            parameter={"max_accuracy_loss": budget,
                                                       "profile": profile.to_json()})
            reports.append(rep)
    elif args.defense == "quantize":
        for bits in _parse_grid(args.grid, int):
            rep = defenses.evaluate_defense(
                model, lambda x, b=bits: defenses.quantize_input(x, b),
                adv_images, clean_subset, name="quantize", parameter={"bits": bits})
            reports.append(rep)
    elif args.defense == "compress":
        for quality in _parse_grid(args.grid, int):
            rep = defenses.evaluate_defense(
                model, lambda x, q=quality: defenses.compress_input(x, q),
                adv_images, clean_subset, name="compress", parameter={"quality": quality})
            reports.append(rep)
    elif args.defense == "advtrain":
        if not args.train_images or not args.train_labels:
            raise ConfigurationError("advtrain: --train-images/--train-labels are required")
        train_set = _load_dataset(args.train_images, args.train_labels, split="train")
        if args.train_count is not None:
            train_set = train_set.subset(range(min(args.train_count, len(train_set))))
        attack_cfg = whitebox.AttackConfig(
            i_max=args.attack_iters,
            surrogate=objective.SurrogateConfig(kind=args.surrogate, beta=args.beta),
        )
        for epochs in _parse_grid(args.grid, int):
            _, rep = defenses.adversarial_train_defense(
                model, train_set, attack_cfg, epochs,
                eval_clean=clean_subset, eval_adversarial=adv_images,
                learning_rate=args.lr, seed=args.seed)
            reports.append(rep)
    else:
        raise ConfigurationError(f"defense: unknown defense {args.defense!r}")

    rows = [r.to_json() for r in reports]
    _write_json(out / "defense_report.json", {"rows": rows}, effective)
    _write_csv(out / "defense_report.csv",
               list(rows[0].keys()) if rows else ["defense"],
               [{k: (json.dumps(_sanitize(v)) if isinstance(v, dict) else v)
                 for k, v in row.items()} for row in rows],
               effective)
    _write_json(out / "effective_config.json", {"command": "defend"}, effective)
    for r in reports:
        print(f"{r.defense} {r.parameter}: accuracy delta {r.accuracy_delta:+.4f}, "
              f"recovery {r.recovery_fraction:.3f}")
    return 0


# ---------------------------------------------------------------------------
# cost

def _mean_cost(model, images, cfg) -> dict:
    reports = [hwcost.estimate_cost(model, nn.forward(model, x.astype(model.dtype)), cfg)
               for x in images]
    sparsities = [objective.measure_sparsity(nn.forward(model, x.astype(model.dtype))).total
                  for x in images]
    return {
        "latency_ns": float(np.mean([r.total_latency_ns for r in reports])),
        "energy_pj": float(np.mean([r.total_energy_pj for r in reports])),
        "edp": float(np.mean([r.total_edp for r in reports])),
        "sparsity": float(np.mean(sparsities)),
        "reports": reports,
    }


def cmd_cost(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    clean = _load_dataset(args.images, args.labels)

    if args.adv:
        x_adv, indices = _load_adv_inputs(args.adv)
        clean_subset = clean.subset(indices)
        adv_images = list(x_adv)
    else:
        clean_subset = _select_images(clean, args.count, 0)
        adv_images = list(clean_subset.images)  # clean vs clean: all ratios 1.0
    if args.count is not None:
        clean_subset = clean_subset.subset(range(min(args.count, len(clean_subset))))
        adv_images = adv_images[: len(clean_subset)]

    presets = ([hwcost.PRESET_ACCELERATOR, hwcost.PRESET_CPU] if args.preset == "both"
               else [args.preset])
    config_keys = ["model", "images", "labels", "adv", "preset", "count",
                   "lanes", "overhead_cycles", "mac_energy_pj", "mem_energy_pj",
                   "cpu_skip_efficiency", "clock_ns", "out"]
    effective = _effective_config(args, config_keys)

    summary = {}
    csv_rows = []
    for preset in presets:
        cfg = _cost_config_from_args(args, preset)
        clean_cost = _mean_cost(model, list(clean_subset.images), cfg)
        adv_cost = _mean_cost(model, adv_images, cfg)
        summary[preset] = {
            "config": cfg.describe(),
            "clean": {k: v for k, v in clean_cost.items() if k != "reports"},
            "attacked": {k: v for k, v in adv_cost.items() if k != "reports"},
            "latency_ratio": adv_cost["latency_ns"] / clean_cost["latency_ns"],
            "energy_ratio": adv_cost["energy_pj"] / clean_cost["energy_pj"],
            "edp_ratio": adv_cost["edp"] / clean_cost["edp"],
        }
        for tag, cost in (("clean", clean_cost), ("attacked", adv_cost)):
            rep = cost["reports"][0]
            for row in rep.per_layer:
                csv_rows.append({"preset": preset, "set": tag, **row.to_row()})
            csv_rows.append({
                "preset": preset, "set": tag, "layer": "total", "kind": "",
                "dense_macs": rep.total_dense_macs, "nonzero_fraction": "",
                "performed_macs": rep.total_performed_macs, "cycles": rep.total_cycles,
                "latency_ns": rep.total_latency_ns, "energy_pj": rep.total_energy_pj,
                "edp": rep.total_edp,
            })

    _write_json(out / "cost_report.json", {"presets": summary}, effective)
    _write_csv(out / "per_layer.csv",
               ["preset", "set", "layer", "kind", "dense_macs", "nonzero_fraction",
                "performed_macs", "cycles", "latency_ns", "energy_pj", "edp"],
               csv_rows, effective)
    _write_json(out / "effective_config.json", {"command": "cost"}, effective)
    for preset, s in summary.items():
        print(f"{preset}: latency x{s['latency_ratio']:.3f}, energy x{s['energy_ratio']:.3f}, "
              f"EDP x{s['edp_ratio']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# sweep

def cmd_sweep(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    clean = _load_dataset(args.images, args.labels)
    if not 0 <= args.index < len(clean):
        raise ConfigurationError(f"index: {args.index} out of range for {len(clean)} images")
    levels = _parse_grid(args.levels, float)
    cfg = _cost_config_from_args(args, args.preset)
    points = hwcost.sparsity_sweep(model, clean.image(args.index), cfg, levels)

    config_keys = ["model", "images", "labels", "index", "levels", "preset",
                   "lanes", "overhead_cycles", "mac_energy_pj", "mem_energy_pj",
                   "cpu_skip_efficiency", "clock_ns", "out"]
    effective = _effective_config(args, config_keys)
    rows = [p.__dict__ for p in points]
    _write_csv(out / "sweep.csv",
               ["level", "achieved_sparsity", "cycles", "latency_ns", "energy_pj", "edp"],
               rows, effective)
    _write_json(out / "effective_config.json", {"command": "sweep"}, effective)
    print(f"swept {len(points)} sparsity levels -> {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser

# flag names mirror the AttackConfig / CostModelConfig fields 1:1
def _add_attack_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=["constrained", "unconstrained"], default="unconstrained")
    p.add_argument("--epsilon", type=float, default=1.5, help="L2 bound (constrained mode)")
    p.add_argument("--epsilon-iter", dest="epsilon_iter", type=float, default=None)
    p.add_argument("--i-max", dest="i_max", type=int, default=100)
    p.add_argument("--o-max", dest="o_max", type=int, default=1)
    p.add_argument("--c-in", dest="c_in", type=float, default=0.5)
    p.add_argument("--c-min", dest="c_min", type=float, default=0.0)
    p.add_argument("--c-max", dest="c_max", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=0.9)
    p.add_argument("--surrogate", choices=["tanh", "sigmoid"], default="tanh")
    p.add_argument("--beta", type=float, default=100.0)


def _add_cost_flags(p: argparse.ArgumentParser):
    p.add_argument("--lanes", type=int, default=256)
    p.add_argument("--overhead-cycles", dest="overhead_cycles", type=int, default=1000)
    p.add_argument("--mac-energy-pj", dest="mac_energy_pj", type=float, default=1.0)
    p.add_argument("--mem-energy-pj", dest="mem_energy_pj", type=float, default=0.5)
    p.add_argument("--cpu-skip-efficiency", dest="cpu_skip_efficiency", type=float, default=0.4)
    p.add_argument("--clock-ns", dest="clock_ns", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseatk",
                                     description="Activation-sparsity attacks, defenses, "
                                                 "and hardware cost modeling")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="flat JSON file of flag defaults")

    p = sub.add_parser("train", help="train a victim model")
    common(p)
    p.add_argument("--images", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--test-images", dest="test_images", default=None)
    p.add_argument("--test-labels", dest="test_labels", default=None)
    p.add_argument("--synthetic", type=int, default=None,
                   help="train on N procedurally generated digit images")
    p.add_argument("--arch", default="mnist_conv", choices=sorted(data.ARCH_PRESETS))
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=64)
    p.set_defaults(func=cmd_train, default_out="train")

    p = sub.add_parser("attack-wb", help="white-box sparsity attack campaign")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--weighting", choices=["uniform", "latency", "energy"], default="uniform")
    _add_attack_flags(p)
    _add_cost_flags(p)
    p.set_defaults(func=cmd_attack_wb, default_out="attack-wb")

    p = sub.add_parser("attack-bb", help="two-stage black-box sparsity attack campaign")
    common(p)
    p.add_argument("--model", required=True, help="victim model (oracle access only)")
    p.add_argument("--substitute", required=True, help="attacker-owned substitute model")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--fd-step", dest="fd_step", type=float, default=1e-4)
    p.add_argument("--coord-batch", dest="coord_batch", type=int, default=128)
    p.add_argument("--max-queries", dest="max_queries", type=int, default=200_000)
    p.add_argument("--step-size", dest="step_size", type=float, default=0.1)
    p.add_argument("--zoo-momentum", dest="zoo_momentum", type=float, default=0.9)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack_bb, default_out="attack-bb")

    p = sub.add_parser("defend", help="evaluate a defense over a parameter grid")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--adv", required=True, help="adv_inputs.npz from an attack run")
    p.add_argument("--defense", required=True,
                   choices=["threshold", "quantize", "compress", "advtrain"])
    p.add_argument("--grid", required=True,
                   help="comma list: accuracy budgets / bits / qualities / epochs")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--train-images", dest="train_images", default=None)
    p.add_argument("--train-labels", dest="train_labels", default=None)
    p.add_argument("--train-count", dest="train_count", type=int, default=None)
    p.add_argument("--attack-iters", dest="attack_iters", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--surrogate", choices=["tanh", "sigmoid"], default="tanh")
    p.add_argument("--beta", type=float, default=100.0)
    p.set_defaults(func=cmd_defend, default_out="defend")

    p = sub.add_parser("cost", help="hardware cost of clean vs attacked inputs")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--adv", default=None, help="adv_inputs.npz; omit for clean-only ratios")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--preset", choices=[*hwcost.PRESETS, "both"], default="both")
    _add_cost_flags(p)
    p.set_defaults(func=cmd_cost, default_out="cost")

    p = sub.add_parser("sweep", help="latency vs injected sparsity curve")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--levels", default="0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--preset", choices=list(hwcost.PRESETS), default=hwcost.PRESET_ACCELERATOR)
    _add_cost_flags(p)
    p.set_defaults(func=cmd_sweep, default_out="sweep")

    return parser


def _apply_config_file(args, argv) -> None:
    if not args.config:
        return
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file does not exist: {path}")
    with open(path) as f:
        overrides = json.load(f)
    if not isinstance(overrides, dict):
        raise ConfigurationError("config file must hold a flat JSON object")
    given = set()
    for tok in argv:
        if tok.startswith("--"):
            given.add(tok.split("=", 1)[0][2:].replace("-", "_"))
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigurationError(f"config file: unknown field {key!r}")
        if attr in given:
            continue  # explicit flags win
        setattr(args, attr, value)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, argv)
        if args.out is None:
            args.out = str(Path(_default_out()) / args.default_out)
        return args.func(args)
    except (ConfigurationError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SparseAtkError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
