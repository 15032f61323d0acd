"""Dataset ingestion, model files, victim training, and synthetic fixtures.

File formats:

* IDX (big-endian dimension header, ubyte payload) for image/label pairs,
  the standard MNIST container. A writer is included so the bundled
  procedural digit corpus can be materialized in the same format.
* CIFAR-10 binary (3073-byte records: label byte + 3x32x32 pixel planes).
* Model files: 4-byte magic ``SAMF``, little-endian uint32 manifest length,
  UTF-8 JSON manifest, then all weights as one little-endian float32 blob in
  declared layer order (weight then bias per parameterized layer).

The procedural digit corpus renders the ten digit classes from stroke
templates with randomized affine deformation, stroke thickness and intensity.
Images are 28x28, values in [0, 1], background exactly zero. It stands in for
MNIST wherever real IDX files are unavailable; every loader and command works
identically on real MNIST files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, FormatError, TrainingError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
MODEL_MAGIC = b"SAMF"
MODEL_FORMAT_VERSION = 1


class Dataset:
    """Images (N, C, H, W) float32 in [0, 1] with integer class labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, name: str = "dataset",
                 split: str = "train", num_classes: int | None = None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ConfigurationError(f"images must be (N, C, H, W), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ConfigurationError("labels must be one integer per image")
        images = np.clip(images, 0.0, 1.0)
        if labels.size and labels.min() < 0:
            raise ConfigurationError("labels must be non-negative")
        if num_classes is not None and labels.size and labels.max() >= num_classes:
            raise ConfigurationError(f"label {labels.max()} out of range for {num_classes} classes")
        self.images = images
        self.labels = labels
        self.name = name
        self.split = split

    def __len__(self):
        return self.images.shape[0]

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], name=self.name,
                       split=split or self.split)


# ---------------------------------------------------------------------------
# IDX and CIFAR-10 ingestion

def read_idx(path) -> np.ndarray:
    """Read one IDX file; images return uint8 (N, H, W), labels uint8 (N,)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}",
            offset=header_len,
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> Dataset:
    """Load an IDX image/label pair. Pixels are scaled to [0, 1] by /255."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an image file (3 dims)", offset=0)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a label file (1 dim)", offset=0)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}", offset=4
        )
    pixels = images.astype(np.float32) / 255.0
    return Dataset(pixels[:, None, :, :], labels.astype(np.int64), name=name, split=split)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX image/label pair (single-channel images)."""
    if dataset.images.shape[1] != 1:
        raise ConfigurationError("IDX export supports single-channel images only")
    imgs = np.round(dataset.images[:, 0] * 255.0).astype(np.uint8)
    n, h, w = imgs.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, h, w))
        f.write(imgs.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_MAGIC_LABELS, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10(paths, name: str = "cifar10", split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batch files (3073-byte records)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    all_images, all_labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % 3073 != 0:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of 3073-byte records",
                offset=len(raw) - (len(raw) % 3073),
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        all_labels.append(rec[:, 0].astype(np.int64))
        all_images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(all_images), np.concatenate(all_labels),
                   name=name, split=split, num_classes=10)


# ---------------------------------------------------------------------------
# model files

def save_model(model: nn.Model, path) -> None:
    entries = []
    blobs = []
    for i, p in enumerate(model.params):
        if p is None:
            continue
        for tag, arr in (("w", p.w), ("b", p.b)):
            entries.append({"layer": i, "name": tag, "shape": list(arr.shape),
                            "count": int(arr.size)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {
        "format": "sparseatk-model",
        "version": MODEL_FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": [s.to_manifest() for s in model.layers],
        "provenance": model.provenance,
        "weights": entries,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for b in blobs:
            f.write(b)


def load_model(path) -> nn.Model:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a sparseatk model file", offset=0)
    (mlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + mlen:
        raise FormatError(f"{path}: truncated manifest", offset=len(raw))
    try:
        manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable manifest: {e}", offset=8) from None

    layers = [nn.LayerSpec.from_manifest(e) for e in manifest["layers"]]
    entries = manifest["weights"]
    blob = raw[8 + mlen :]
    declared = sum(e["count"] for e in entries)
    if len(blob) != declared * 4:
        raise FormatError(
            f"{path}: weight blob holds {len(blob)} bytes, manifest declares {declared * 4}",
            offset=8 + mlen,
        )
    params: list[nn.LayerParams | None] = [None] * len(layers)
    pos = 0
    pending: dict[int, dict[str, np.ndarray]] = {}
    for e in entries:
        arr = np.frombuffer(blob, dtype="<f4", count=e["count"], offset=pos * 4)
        pos += e["count"]
        pending.setdefault(e["layer"], {})[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    for i, d in pending.items():
        params[i] = nn.LayerParams(d["w"], d["b"])
    return nn.Model(
        tuple(manifest["input_shape"]),
        layers,
        params,
        manifest["num_classes"],
        provenance=manifest.get("provenance", {}),
    )


# ---------------------------------------------------------------------------
# architecture presets

def _arch_mnist_conv():
    return (1, 28, 28), [
        nn.conv2d(1, 8, 3, padding=1),
        nn.relu(),
        nn.maxpool(2),
        nn.conv2d(8, 16, 3),
        nn.relu(),
        nn.maxpool(2),
        nn.flatten(),
        nn.dense(16 * 6 * 6, 10),
    ], 10


def _arch_mnist_conv_alt():
    return (1, 28, 28), [
        nn.conv2d(1, 6, 5, padding=2),
        nn.relu(),
        nn.maxpool(2),
        nn.conv2d(6, 12, 5),
        nn.relu(),
        nn.maxpool(2),
        nn.flatten(),
        nn.dense(12 * 5 * 5, 10),
    ], 10


def _arch_cifar_conv():
    return (3, 32, 32), [
        nn.conv2d(3, 16, 3, padding=1),
        nn.relu(),
        nn.maxpool(2),
        nn.conv2d(16, 32, 3, padding=1),
        nn.relu(),
        nn.maxpool(2),
        nn.flatten(),
        nn.dense(32 * 8 * 8, 10),
    ], 10


def _arch_tiny():
    return (1, 8, 8), [
        nn.conv2d(1, 3, 3),
        nn.relu(),
        nn.maxpool(2),
        nn.flatten(),
        nn.dense(3 * 3 * 3, 4),
    ], 4


ARCH_PRESETS = {
    "mnist_conv": _arch_mnist_conv,
    "mnist_conv_alt": _arch_mnist_conv_alt,
    "cifar_conv": _arch_cifar_conv,
    "tiny": _arch_tiny,
}


def synth_model(seed: int, preset: str = "mnist_conv", dtype=np.float32) -> nn.Model:
    """Deterministically initialized model for the named architecture preset."""
    if preset not in ARCH_PRESETS:
        raise ConfigurationError(
            f"unknown architecture preset {preset!r}; choose from {sorted(ARCH_PRESETS)}"
        )
    input_shape, layers, num_classes = ARCH_PRESETS[preset]()
    rng = np.random.default_rng(seed)
    params: list[nn.LayerParams | None] = []
    for spec in layers:
        shapes = nn.weight_shapes(spec)
        if shapes is None:
            params.append(None)
            continue
        wshape, bshape = shapes
        fan_in = int(np.prod(wshape[1:]))
        w = rng.standard_normal(wshape) * math.sqrt(2.0 / fan_in)
        params.append(nn.LayerParams(w.astype(dtype), np.zeros(bshape, dtype=dtype)))
    return nn.Model(input_shape, layers, params, num_classes,
                    provenance={"preset": preset, "seed": seed, "trained": False})


def synth_dataset(seed: int, n: int, shape=(1, 28, 28), num_classes: int = 10,
                  name: str = "synth", split: str = "test") -> Dataset:
    """Random smooth-blob images with exact-zero regions; labels are random.

    A property-test fixture, not a learnable task.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    imgs = rng.random((n, c, h, w)).astype(np.float32)
    # smooth with a small box filter to get spatial structure
    for _ in range(2):
        imgs = (imgs + np.roll(imgs, 1, axis=2) + np.roll(imgs, 1, axis=3)
                + np.roll(imgs, -1, axis=2) + np.roll(imgs, -1, axis=3)) / 5.0
    imgs = np.clip(1.8 * (imgs - 0.45), 0.0, 1.0)  # pushes a chunk of pixels to exact 0
    labels = rng.integers(0, num_classes, size=n)
    return Dataset(imgs, labels, name=name, split=split, num_classes=num_classes)


# ---------------------------------------------------------------------------
# procedural digit corpus

def _arc(cx, cy, rx, ry, deg0, deg1):
    return ("arc", cx, cy, rx, ry, math.radians(deg0), math.radians(deg1))


def _line(p0, p1):
    return ("line", p0, p1)


def _poly(*pts):
    return ("poly", pts)


# Stroke templates in unit coordinates, y pointing down.
_GLYPHS = {
    0: [_arc(0.50, 0.50, 0.24, 0.35, 0, 360)],
    1: [_line((0.38, 0.28), (0.54, 0.13)), _line((0.54, 0.13), (0.54, 0.87))],
    2: [_arc(0.50, 0.32, 0.22, 0.19, 180, 350),
        _poly((0.71, 0.38), (0.55, 0.58), (0.30, 0.85)),
        _line((0.30, 0.85), (0.74, 0.85))],
    3: [_arc(0.47, 0.30, 0.21, 0.18, 160, 395),
        _arc(0.47, 0.66, 0.23, 0.21, 325, 560)],
    4: [_poly((0.62, 0.13), (0.30, 0.55), (0.27, 0.60)),
        _line((0.27, 0.60), (0.78, 0.60)),
        _line((0.62, 0.13), (0.62, 0.87))],
    5: [_line((0.70, 0.14), (0.34, 0.14)),
        _poly((0.34, 0.14), (0.32, 0.32), (0.31, 0.45)),
        _arc(0.49, 0.64, 0.22, 0.23, 200, 480)],
    6: [_poly((0.66, 0.13), (0.50, 0.28), (0.38, 0.47), (0.32, 0.62)),
        _arc(0.49, 0.67, 0.19, 0.19, 0, 360)],
    7: [_line((0.28, 0.14), (0.75, 0.14)),
        _poly((0.75, 0.14), (0.58, 0.5), (0.44, 0.87))],
    8: [_arc(0.50, 0.31, 0.18, 0.17, 0, 360),
        _arc(0.50, 0.67, 0.21, 0.20, 0, 360)],
    9: [_arc(0.51, 0.33, 0.19, 0.19, 0, 360),
        _poly((0.70, 0.36), (0.67, 0.6), (0.58, 0.87))],
}


def _stroke_points(stroke, step: float):
    kind = stroke[0]
    if kind == "arc":
        _, cx, cy, rx, ry, t0, t1 = stroke
        length = abs(t1 - t0) * max(rx, ry)
        n = max(int(length / step), 8)
        t = np.linspace(t0, t1, n)
        return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)
    if kind == "line":
        _, p0, p1 = stroke
        p0, p1 = np.asarray(p0), np.asarray(p1)
        n = max(int(np.linalg.norm(p1 - p0) / step), 4)
        t = np.linspace(0.0, 1.0, n)[:, None]
        return p0 + t * (p1 - p0)
    if kind == "poly":
        _, pts = stroke
        segs = [_stroke_points(("line", pts[i], pts[i + 1]), step) for i in range(len(pts) - 1)]
        return np.concatenate(segs)
    raise ValueError(kind)


def render_digit(rng: np.random.Generator, digit: int, size: int = 28) -> np.ndarray:
    """Render one deformed digit glyph onto a size x size canvas in [0, 1].

    Deformation covers affine jitter, smooth stroke wobble, stroke thickness
    and intensity variation along the stroke, faint background speckles, and
    occasional gaps, so the classes carry realistic intra-class variation and
    trained classifiers keep finite margins.
    """
    angle = rng.normal(0.0, 0.21)
    shear = rng.normal(0.0, 0.18)
    sx, sy = rng.uniform(0.72, 1.14, size=2)
    tx, ty = rng.uniform(-2.6, 2.6, size=2)
    sigma = float(np.clip(rng.normal(1.1, 0.2), 0.65, 1.65))
    ca, sa = math.cos(angle), math.sin(angle)
    affine = np.array([[ca * sx, (-sa + shear) * sy], [sa * sx, ca * sy]])

    pts = []
    weights = []
    for stroke in _GLYPHS[int(digit)]:
        p = _stroke_points(stroke, step=0.02)
        t = np.linspace(0.0, 1.0, len(p))
        phase = rng.uniform(0, 2 * math.pi, size=2)
        amp = rng.uniform(0.0, 0.035, size=2)
        wobble = np.stack([amp[0] * np.sin(2 * math.pi * t * rng.uniform(0.5, 2.0) + phase[0]),
                           amp[1] * np.sin(2 * math.pi * t * rng.uniform(0.5, 2.0) + phase[1])],
                          axis=1)
        pts.append(p + wobble)
        base = rng.uniform(0.5, 1.0)
        mod = base * (1.0 - rng.uniform(0.0, 0.45) * np.sin(math.pi * t + rng.uniform(0, math.pi)) ** 2)
        weights.append(mod)
    pts = np.concatenate(pts)
    weights = np.concatenate(weights)
    pts = (pts - 0.5) @ affine.T * size + size / 2 + np.array([tx, ty])

    if rng.random() < 0.3:  # broken stroke: drop points near a random gap center
        gap = pts[rng.integers(len(pts))]
        keep = np.linalg.norm(pts - gap, axis=1) > rng.uniform(1.0, 2.6)
        if keep.sum() > len(pts) // 2:
            pts, weights = pts[keep], weights[keep]

    canvas = np.zeros((size, size), dtype=np.float64)
    flat = canvas.ravel()
    r = 3
    cx = np.clip(np.round(pts[:, 0]).astype(int), 0, size - 1)
    cy = np.clip(np.round(pts[:, 1]).astype(int), 0, size - 1)
    fx = pts[:, 0] - cx
    fy = pts[:, 1] - cy
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for dy in range(-r, r + 1):
        yy = cy + dy
        ok_y = (yy >= 0) & (yy < size)
        for dx in range(-r, r + 1):
            xx = cx + dx
            ok = ok_y & (xx >= 0) & (xx < size)
            if not ok.any():
                continue
            d2 = (dx - fx[ok]) ** 2 + (dy - fy[ok]) ** 2
            np.maximum.at(flat, yy[ok] * size + xx[ok], weights[ok] * np.exp(-d2 * inv2s2))
    # per-image exposure: faint digits are common in scanned data and keep
    # small activations decision-relevant
    exposure = rng.uniform(0.22, 1.0)
    canvas = np.clip(canvas * 1.5 * exposure, 0.0, 1.0)

    # faint soft speckles, mostly off-stroke
    for _ in range(rng.poisson(2.0)):
        px, py = rng.uniform(2, size - 2, size=2)
        amp = rng.uniform(0.05, 0.2) * exposure
        ssig = rng.uniform(0.5, 1.0)
        y0, x0 = int(py), int(px)
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < size and 0 <= xx < size:
                    d2 = (xx - px) ** 2 + (yy - py) ** 2
                    canvas[yy, xx] = max(canvas[yy, xx], amp * math.exp(-d2 / (2 * ssig * ssig)))

    canvas[canvas < 0.05] = 0.0  # keep the background exactly sparse
    return canvas.astype(np.float32)


def make_digits_dataset(seed: int, n_train: int, n_test: int,
                        name: str = "synthdigits") -> tuple[Dataset, Dataset]:
    """Deterministic MNIST-format digit corpus: (train split, test split)."""
    rng = np.random.default_rng(seed)
    total = n_train + n_test
    labels = rng.integers(0, 10, size=total)
    images = np.zeros((total, 1, 28, 28), dtype=np.float32)
    for i in range(total):
        images[i, 0] = render_digit(rng, int(labels[i]))
    train = Dataset(images[:n_train], labels[:n_train], name=name, split="train", num_classes=10)
    test = Dataset(images[n_train:], labels[n_train:], name=name, split="test", num_classes=10)
    return train, test


# ---------------------------------------------------------------------------
# training

def _ce_loss_and_grad(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -np.log(np.maximum(p[np.arange(n), labels], 1e-12))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return float(nll.mean()), g / n


def evaluate_accuracy(model: nn.Model, dataset: Dataset, transform=None,
                      chunk: int = 2048) -> float:
    """Fraction of dataset images whose predicted label matches the true label."""
    if len(dataset) == 0:
        return 0.0
    images = dataset.images
    if transform is not None:
        images = np.stack([transform(x) for x in images])
    correct = 0
    for start in range(0, len(images), chunk):
        xb = images[start : start + chunk].astype(model.dtype)
        _, logits = nn._forward_batch(model, xb)
        correct += int((logits.argmax(axis=1) == dataset.labels[start : start + chunk]).sum())
    return correct / len(images)


@dataclass
class TrainResult:
    model: nn.Model
    history: list[dict]


def train(
    model: nn.Model,
    dataset: Dataset,
    epochs: int,
    learning_rate: float,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
    adversarial_augmenter=None,
    verbose: bool = False,
) -> TrainResult:
    """Minibatch SGD with momentum over softmax cross-entropy.

    When ``adversarial_augmenter`` is given it is called per minibatch as
    ``augmenter(current_model, batch_images)`` and its outputs are appended to
    the batch (labels duplicated) before the weight update, so the training
    set seen per epoch never shrinks.

    Raises :class:`TrainingError` naming the epoch if the loss goes non-finite.
    """
    if len(dataset) == 0:
        raise ConfigurationError("training dataset is empty")
    rng = np.random.default_rng(seed)
    weights = [None if p is None else [p.w.astype(model.dtype), p.b.astype(model.dtype)]
               for p in model.params]
    velocity = [None if p is None else [np.zeros_like(p.w), np.zeros_like(p.b)]
                for p in model.params]
    history: list[dict] = []
    cur = model

    def build(provenance=None):
        params = [None if w is None else nn.LayerParams(w[0], w[1]) for w in weights]
        return cur.with_params(params, provenance=provenance)

    n = len(dataset)
    for epoch in range(int(epochs)):
        order = rng.permutation(n)
        losses = []
        correct = 0
        seen = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = dataset.images[idx].astype(model.dtype)
            yb = dataset.labels[idx]
            cur = build()
            if adversarial_augmenter is not None:
                extra = np.stack([np.asarray(a, dtype=model.dtype)
                                  for a in adversarial_augmenter(cur, xb)])
                xb = np.concatenate([xb, extra])
                yb = np.concatenate([yb, yb])
            inputs, logits = nn._forward_batch(cur, xb)
            loss, glogits = _ce_loss_and_grad(logits, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss} at epoch {epoch}")
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(yb)
            _, wgrads = nn._backward_batch(cur, inputs, glogits, None,
                                           need_input=False, need_weights=True)
            if learning_rate != 0.0:
                for li, g in enumerate(wgrads):
                    if g is None:
                        continue
                    for k in (0, 1):
                        velocity[li][k] = momentum * velocity[li][k] + g[k]
                        weights[li][k] = weights[li][k] - learning_rate * velocity[li][k]
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": correct / seen}
        history.append(row)
        if verbose:
            print(f"epoch {epoch}: loss={row['loss']:.4f} accuracy={row['accuracy']:.4f}")

    provenance = dict(model.provenance)
    provenance.update(
        trained=True, epochs=int(epochs), learning_rate=learning_rate,
        momentum=momentum, batch_size=batch_size, seed=seed, dataset=dataset.name,
        adversarially_augmented=adversarial_augmenter is not None,
    )
    return TrainResult(build(provenance=provenance), history)
