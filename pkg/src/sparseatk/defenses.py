"""Defenses that try to restore activation sparsity, and their evaluation.

Four techniques: per-layer activation thresholding (zero every counted
activation strictly below a cutoff), input quantization to k bits, input
compression via 8x8 block-DCT coefficient quantization, and adversarial
training (retraining with attacked copies of each minibatch). Evaluation is
against a non-adaptive attacker: the adversarial set is generated against the
undefended model and then replayed through the defense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn, whitebox
from .data import Dataset, TrainResult, evaluate_accuracy, train
from .errors import ConfigurationError


@dataclass(frozen=True)
class ThresholdProfile:
    """One non-negative cutoff per counted layer position."""

    positions: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.positions) != len(self.values):
            raise ConfigurationError("threshold positions and values must align")
        if any(v < 0 for v in self.values):
            raise ConfigurationError("thresholds must be >= 0")

    def as_dict(self) -> dict[int, float]:
        return {p: v for p, v in zip(self.positions, self.values) if v > 0}

    def to_json(self) -> dict:
        return {"positions": list(self.positions), "values": list(self.values)}

    @staticmethod
    def from_json(d: dict) -> "ThresholdProfile":
        return ThresholdProfile(tuple(d["positions"]), tuple(d["values"]))


@dataclass
class DefenseReport:
    """Accuracy-vs-sparsity-recovery outcome of one defense configuration.

    recovery_fraction = (defended_adv - adv) / (clean - adv); reported as-is,
    including negative values (a defense that makes things worse).
    """

    defense: str
    parameter: dict
    clean_accuracy_base: float
    clean_accuracy_defended: float
    accuracy_delta: float
    clean_sparsity: float
    adv_sparsity_before: float
    adv_sparsity_after: float
    recovery_fraction: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def apply_thresholds(model: nn.Model, profile: ThresholdProfile) -> nn.Model:
    """Defended copy of the model: counted activations strictly below their
    layer's cutoff are zeroed before the consuming layer sees them."""
    counted = set(model.counted_positions())
    if not set(profile.positions) <= counted:
        raise ConfigurationError(
            f"profile positions {profile.positions} must be counted layers {sorted(counted)}"
        )
    return model.with_thresholds(profile.as_dict() or None)


def _mean_sparsity(model: nn.Model, images, chunk: int = 2048) -> float:
    """Mean total zero fraction over a set, via batched forward passes."""
    n = len(images)
    if n == 0:
        return 0.0
    zeros = 0
    k = 0
    for start in range(0, n, chunk):
        xb = np.stack([np.asarray(x, dtype=model.dtype) for x in images[start : start + chunk]])
        inputs, _ = nn._forward_batch(model, xb)
        k = sum(inputs[p][0].size for p in model.counted_positions())
        zeros += sum(int(np.count_nonzero(inputs[p] == 0.0)) for p in model.counted_positions())
    return zeros / (k * n)


def _mean_layer_activations(model: nn.Model, images) -> dict[int, float]:
    """Mean activation value per counted position across a set of images."""
    sums = {p: 0.0 for p in model.counted_positions()}
    counts = {p: 0 for p in model.counted_positions()}
    for x in images:
        trace = nn.forward(model, np.asarray(x, dtype=model.dtype))
        for p in trace.counted_positions:
            a = trace.layer_inputs[p]
            sums[p] += float(a.sum())
            counts[p] += a.size
    return {p: (sums[p] / counts[p] if counts[p] else 0.0) for p in sums}


def _predictions(model: nn.Model, images: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = []
    for start in range(0, len(images), chunk):
        _, logits = nn._forward_batch(model, images[start : start + chunk].astype(model.dtype))
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _accuracy_drop_within(defended: nn.Model, clean_set: Dataset,
                          base_correct: np.ndarray, max_loss: float,
                          chunk: int = 2048) -> bool:
    """Early-exit check that the defended accuracy drop stays within budget.

    Aborts as soon as the flipped-image deficit can no longer be offset by the
    remaining originally-wrong images.
    """
    n = len(clean_set)
    allowed = max_loss * n + 1e-9
    net_wrong = 0.0
    remaining_gain = int((~base_correct).sum())
    for start in range(0, n, chunk):
        xb = clean_set.images[start : start + chunk].astype(defended.dtype)
        _, logits = nn._forward_batch(defended, xb)
        pred_ok = logits.argmax(axis=1) == clean_set.labels[start : start + chunk]
        base_ok = base_correct[start : start + chunk]
        net_wrong += int((base_ok & ~pred_ok).sum()) - int((~base_ok & pred_ok).sum())
        remaining_gain -= int((~base_ok).sum())
        if net_wrong - remaining_gain > allowed:
            return False
    return net_wrong <= allowed


def search_thresholds(
    model: nn.Model,
    adversarial_set,
    clean_set: Dataset,
    max_accuracy_loss: float,
    ladder_steps: int = 10,
) -> ThresholdProfile:
    """Greedy per-layer threshold search under a clean-accuracy budget.

    Each layer's cutoff starts at that layer's mean activation over the
    adversarial set; candidates form a multiplicative ladder (x2 / x0.5 around
    the start, 10 rungs per layer). Layers are fixed in forward order at the
    feasible candidate maximizing adversarial-set sparsity; a layer falls back
    to 0 when no candidate fits the budget.
    """
    if len(adversarial_set) == 0 or len(clean_set) == 0:
        raise ConfigurationError("threshold search needs non-empty adversarial and clean sets")
    positions = model.counted_positions()
    base_correct = _predictions(model, clean_set.images) == clean_set.labels
    means = _mean_layer_activations(model, adversarial_set)

    chosen: dict[int, float] = {}

    def defended_with(values: dict[int, float]) -> nn.Model:
        return model.with_thresholds({p: v for p, v in values.items() if v > 0} or None)

    for p in positions:
        init = means[p]
        candidates = [init * 2.0 ** e for e in range(-(ladder_steps // 2), ladder_steps - ladder_steps // 2)]
        best_t = 0.0
        best_sparsity = _mean_sparsity(defended_with(chosen), adversarial_set)
        for t in candidates:
            if t <= 0:
                continue
            trial = dict(chosen)
            trial[p] = t
            defended = defended_with(trial)
            sparsity = _mean_sparsity(defended, adversarial_set)
            if sparsity <= best_sparsity:
                continue
            if _accuracy_drop_within(defended, clean_set, base_correct, max_accuracy_loss):
                best_sparsity = sparsity
                best_t = t
        if best_t > 0:
            chosen[p] = best_t

    values = tuple(chosen.get(p, 0.0) for p in positions)
    return ThresholdProfile(positions, values)


def quantize_input(x: np.ndarray, bits: int) -> np.ndarray:
    """Quantize to a 2^-k grid: round(2^k * x) / 2^k, half away from zero.

    Computed in float64 and cast back; exact grid points are fixed points, so
    the operation is idempotent and |x_q - x| <= 2^-(k+1) elementwise.
    """
    if bits < 1:
        raise ConfigurationError("quantization bits must be >= 1")
    x = np.asarray(x)
    scale = float(2**bits)
    # inputs are within [0, 1]; floor(v + 0.5) is round-half-away-from-zero there
    q = np.floor(x.astype(np.float64) * scale + 0.5) / scale
    return q.astype(x.dtype)


# 8x8 orthonormal DCT-II matrix and the standard luminance quantization table.
def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * m + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d


_DCT8 = _dct_matrix(8)

_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def quality_scaled_table(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ConfigurationError("compression quality must be in 1..100")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def compress_input(x: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT compression: 8x8 DCT per channel, AC coefficients quantized
    by the quality-scaled luminance table, inverse DCT, clamp to [0, 1].

    The DC coefficient passes through unquantized, so constant regions are
    reproduced up to float error. Edge blocks are zero-padded and cropped
    back. Deterministic; not bit-compatible with any codec.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        return _compress_channel(x, quality).astype(x.dtype)
    if x.ndim == 3:
        return np.stack([_compress_channel(ch, quality) for ch in x]).astype(x.dtype)
    raise ConfigurationError(f"compress_input expects a 2-D or 3-D image, got shape {x.shape}")


def _compress_channel(ch: np.ndarray, quality: int) -> np.ndarray:
    table = quality_scaled_table(quality)
    h, w = ch.shape
    hp = (h + 7) // 8 * 8
    wp = (w + 7) // 8 * 8
    padded = np.zeros((hp, wp), dtype=np.float64)
    padded[:h, :w] = ch
    v = padded * 255.0 - 128.0
    blocks = v.reshape(hp // 8, 8, wp // 8, 8).transpose(0, 2, 1, 3)
    coeff = np.einsum("ij,bcjk,lk->bcil", _DCT8, blocks, _DCT8)
    quant = np.round(coeff / table) * table
    quant[:, :, 0, 0] = coeff[:, :, 0, 0]
    rec = np.einsum("ji,bcjk,kl->bcil", _DCT8, quant, _DCT8)
    out = (rec.transpose(0, 2, 1, 3).reshape(hp, wp) + 128.0) / 255.0
    return np.clip(out[:h, :w], 0.0, 1.0)


def adversarial_train_defense(
    model: nn.Model,
    train_set: Dataset,
    attack_config: whitebox.AttackConfig,
    epochs: int,
    eval_clean: Dataset | None = None,
    eval_adversarial=None,
    learning_rate: float = 0.01,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[nn.Model, DefenseReport]:
    """Retrain with each minibatch augmented by attacked copies of itself.

    The report compares clean accuracy and the sparsity of a fixed
    (non-adaptive) adversarial evaluation set before and after retraining.
    When no evaluation sets are given, held-out slices of the training set are
    used and the adversarial set is generated against the original model.
    """

    def augmenter(current_model, batch):
        return [whitebox.run_attack(current_model, x, attack_config).x_adv for x in batch]

    if eval_clean is None:
        n_eval = min(64, len(train_set))
        eval_clean = train_set.subset(range(len(train_set) - n_eval, len(train_set)), split="eval")
    if eval_adversarial is None:
        eval_adversarial = [whitebox.run_attack(model, x, attack_config).x_adv
                            for x in eval_clean.images]

    base_accuracy = evaluate_accuracy(model, eval_clean)
    clean_sparsity = _mean_sparsity(model, eval_clean.images)
    adv_before = _mean_sparsity(model, eval_adversarial)

    if epochs > 0:
        result: TrainResult = train(
            model, train_set, epochs=epochs, learning_rate=learning_rate,
            batch_size=batch_size, seed=seed, adversarial_augmenter=augmenter,
        )
        defended = result.model
    else:
        defended = model

    defended_accuracy = evaluate_accuracy(defended, eval_clean)
    adv_after = _mean_sparsity(defended, eval_adversarial)
    denom = clean_sparsity - adv_before
    recovery = (adv_after - adv_before) / denom if abs(denom) > 1e-12 else 0.0
    report = DefenseReport(
        defense="adversarial_training",
        parameter={"epochs": epochs, "learning_rate": learning_rate,
                   "attack": attack_config.describe()},
        clean_accuracy_base=base_accuracy,
        clean_accuracy_defended=defended_accuracy,
        accuracy_delta=defended_accuracy - base_accuracy,
        clean_sparsity=clean_sparsity,
        adv_sparsity_before=adv_before,
        adv_sparsity_after=adv_after,
        recovery_fraction=recovery,
    )
    return defended, report


def evaluate_defense(
    model: nn.Model,
    defense,
    adversarial_set,
    clean_set: Dataset,
    name: str = "defense",
    parameter: dict | None = None,
) -> DefenseReport:
    """Measure one defense's accuracy/sparsity trade-off.

    ``defense`` is either a defended Model (thresholding, adversarial
    training) or a callable input transform applied to both sets before
    evaluation on the undefended model. None means the identity defense.
    Neither the inputs nor the base model are mutated.
    """
    base_accuracy = evaluate_accuracy(model, clean_set)
    clean_sparsity = _mean_sparsity(model, clean_set.images)
    adv_before = _mean_sparsity(model, adversarial_set)

    if defense is None:
        defended_accuracy = base_accuracy
        adv_after = adv_before
        kind = "identity"
    elif isinstance(defense, nn.Model):
        defended_accuracy = evaluate_accuracy(defense, clean_set)
        adv_after = _mean_sparsity(defense, adversarial_set)
        kind = "model"
    elif callable(defense):
        defended_accuracy = evaluate_accuracy(model, clean_set, transform=defense)
        adv_after = _mean_sparsity(model, [defense(np.asarray(x)) for x in adversarial_set])
        kind = "transform"
    else:
        raise ConfigurationError("defense must be a Model, a callable transform, or None")

    denom = clean_sparsity - adv_before
    recovery = (adv_after - adv_before) / denom if abs(denom) > 1e-12 else 0.0
    return DefenseReport(
        defense=name if name != "defense" else kind,
        parameter=parameter or {},
        clean_accuracy_base=base_accuracy,
        clean_accuracy_defended=defended_accuracy,
        accuracy_delta=defended_accuracy - base_accuracy,
        clean_sparsity=clean_sparsity,
        adv_sparsity_before=adv_before,
        adv_sparsity_after=adv_after,
        recovery_fraction=recovery,
    )
