"""Dense tensor inference for small convolutional networks.

Provides the layered network description (:class:`Model`), forward evaluation
producing an :class:`ActivationTrace`, and exact reverse-mode gradients with
respect to the network input and the weights. Gradients are driven by
cotangent injection: callers may attach a cotangent at the logits, at any
recorded layer input, or both, and receive the assembled gradient.

Layers operate on channels-first arrays. Internally everything runs with a
leading batch dimension; the public per-input API wraps a batch of one, so a
given (model, input) pair always takes the same code path and produces
bit-identical traces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigurationError

CONV2D = "conv2d"
RELU = "relu"
MAXPOOL = "maxpool"
FLATTEN = "flatten"
DENSE = "dense"
SOFTMAX = "softmax"

LAYER_KINDS = (CONV2D, RELU, MAXPOOL, FLATTEN, DENSE, SOFTMAX)

# Layers that consume their input via multiply-accumulate work. Their inputs
# (plus the network input itself) are the activations counted for sparsity.
MAC_KINDS = (CONV2D, DENSE)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network. Use the constructor helpers below."""

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    size: tuple[int, int] | None = None
    in_features: int | None = None
    out_features: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in MAC_KINDS

    def to_manifest(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == CONV2D:
            out.update(
                in_channels=self.in_channels,
                out_channels=self.out_channels,
                kernel=list(self.kernel),
                stride=list(self.stride),
                padding=list(self.padding),
            )
        elif self.kind == MAXPOOL:
            out.update(size=list(self.size), stride=list(self.stride))
        elif self.kind == DENSE:
            out.update(in_features=self.in_features, out_features=self.out_features)
        return out

    @staticmethod
    def from_manifest(entry: dict) -> "LayerSpec":
        kind = entry.get("kind")
        if kind == CONV2D:
            return conv2d(
                entry["in_channels"],
                entry["out_channels"],
                tuple(entry["kernel"]),
                stride=tuple(entry["stride"]),
                padding=tuple(entry["padding"]),
            )
        if kind == MAXPOOL:
            return maxpool(tuple(entry["size"]), stride=tuple(entry["stride"]))
        if kind == DENSE:
            return dense(entry["in_features"], entry["out_features"])
        if kind == RELU:
            return relu()
        if kind == FLATTEN:
            return flatten()
        if kind == SOFTMAX:
            return softmax()
        raise ConfigurationError(f"unknown layer kind {kind!r}")


def conv2d(in_channels: int, out_channels: int, kernel, stride=1, padding=0) -> LayerSpec:
    return LayerSpec(
        CONV2D,
        in_channels=int(in_channels),
        out_channels=int(out_channels),
        kernel=_pair(kernel),
        stride=_pair(stride),
        padding=_pair(padding),
    )


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def maxpool(size, stride=None) -> LayerSpec:
    size = _pair(size)
    return LayerSpec(MAXPOOL, size=size, stride=_pair(stride) if stride is not None else size)


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec(DENSE, in_features=int(in_features), out_features=int(out_features))


def softmax() -> LayerSpec:
    return LayerSpec(SOFTMAX)


def layer_output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape of one layer, validating that the input composes with it."""
    if spec.kind == CONV2D:
        if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
            raise ConfigurationError(
                f"conv2d expects (C={spec.in_channels}, H, W) input, got {in_shape}"
            )
        _, h, w = in_shape
        kh, kw = spec.kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"conv2d kernel {spec.kernel} does not fit input {in_shape}")
        return (spec.out_channels, oh, ow)
    if spec.kind == MAXPOOL:
        if len(in_shape) != 3:
            raise ConfigurationError(f"maxpool expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = spec.size
        sh, sw = spec.stride
        oh = (h - kh) // sh + 1
        ow = (w - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"maxpool window {spec.size} does not fit input {in_shape}")
        return (c, oh, ow)
    if spec.kind == FLATTEN:
        return (int(np.prod(in_shape)),)
    if spec.kind == DENSE:
        if len(in_shape) != 1 or in_shape[0] != spec.in_features:
            raise ConfigurationError(
                f"dense expects ({spec.in_features},) input, got {in_shape}"
            )
        return (spec.out_features,)
    if spec.kind in (RELU,):
        return in_shape
    if spec.kind == SOFTMAX:
        if len(in_shape) != 1:
            raise ConfigurationError(f"softmax expects a 1-D input, got {in_shape}")
        return in_shape
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


def weight_shapes(spec: LayerSpec) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    """(weight, bias) shapes for a parameterized layer, else None."""
    if spec.kind == CONV2D:
        kh, kw = spec.kernel
        return (spec.out_channels, spec.in_channels, kh, kw), (spec.out_channels,)
    if spec.kind == DENSE:
        return (spec.out_features, spec.in_features), (spec.out_features,)
    return None


@dataclass(frozen=True)
class LayerParams:
    w: np.ndarray
    b: np.ndarray


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Model:
    """A layered network with weights.

    Immutable after construction: weights are stored read-only and all
    evaluation functions are pure, so models are safe to share across threads.

    ``thresholds`` maps counted-activation positions to a cutoff value; the
    forward pass zeroes counted activations strictly below the cutoff before
    the consuming layer sees them (the activation-thresholding defense).
    """

    def __init__(
        self,
        input_shape: tuple[int, ...],
        layers: Iterable[LayerSpec],
        params: Iterable[LayerParams | None],
        num_classes: int,
        provenance: dict | None = None,
        thresholds: dict[int, float] | None = None,
    ):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.params = list(params)
        self.num_classes = int(num_classes)
        self.provenance = dict(provenance or {})
        self.thresholds = dict(thresholds) if thresholds else None

        if len(self.layers) != len(self.params):
            raise ConfigurationError("params list must align with layers list")

        # validate layer composition and weight shapes
        shapes = [self.input_shape]
        for i, spec in enumerate(self.layers):
            try:
                shapes.append(layer_output_shape(spec, shapes[-1]))
            except ConfigurationError as e:
                raise ConfigurationError(f"layer {i}: {e}") from None
            expected = weight_shapes(spec)
            got = self.params[i]
            if expected is None:
                if got is not None:
                    raise ConfigurationError(f"layer {i} ({spec.kind}) takes no weights")
            else:
                if got is None:
                    raise ConfigurationError(f"layer {i} ({spec.kind}) is missing weights")
                if tuple(got.w.shape) != expected[0] or tuple(got.b.shape) != expected[1]:
                    raise ConfigurationError(
                        f"layer {i} ({spec.kind}) weight shapes {got.w.shape}/{got.b.shape} "
                        f"do not match spec {expected[0]}/{expected[1]}"
                    )
        self._layer_input_shapes = shapes[:-1]
        self.output_shape = shapes[-1]

        logits_shape = shapes[-2] if (self.layers and self.layers[-1].kind == SOFTMAX) else shapes[-1]
        if logits_shape != (self.num_classes,):
            raise ConfigurationError(
                f"final layer output {logits_shape} does not match num_classes={self.num_classes}"
            )

        dtypes = {p.w.dtype for p in self.params if p is not None}
        if len(dtypes) > 1:
            raise ConfigurationError(f"mixed weight dtypes: {sorted(map(str, dtypes))}")
        self.dtype = dtypes.pop() if dtypes else np.dtype(np.float32)

        self.params = [
            None if p is None else LayerParams(_freeze(p.w.astype(self.dtype)), _freeze(p.b.astype(self.dtype)))
            for p in self.params
        ]

        if self.thresholds is not None:
            counted = set(self.counted_positions())
            for pos, t in self.thresholds.items():
                if pos not in counted:
                    raise ConfigurationError(f"threshold position {pos} is not a counted layer")
                if t < 0:
                    raise ConfigurationError(f"threshold at position {pos} must be >= 0")

    def layer_input_shapes(self) -> list[tuple[int, ...]]:
        return list(self._layer_input_shapes)

    def counted_positions(self) -> tuple[int, ...]:
        """Positions whose input activations are counted for sparsity.

        The network input itself plus the input to every conv/dense layer;
        position i refers to the tensor flowing into layer i, so when layer 0
        is conv/dense the network input is counted once.
        """
        counted = {0}
        counted.update(i for i, s in enumerate(self.layers) if s.kind in MAC_KINDS)
        return tuple(sorted(counted))

    def with_thresholds(self, thresholds: dict[int, float] | None) -> "Model":
        return Model(
            self.input_shape,
            self.layers,
            self.params,
            self.num_classes,
            provenance=self.provenance,
            thresholds=thresholds,
        )

    def with_params(self, params: list[LayerParams | None], provenance: dict | None = None) -> "Model":
        return Model(
            self.input_shape,
            self.layers,
            params,
            self.num_classes,
            provenance=self.provenance if provenance is None else provenance,
            thresholds=self.thresholds,
        )

    def astype(self, dtype) -> "Model":
        params = [
            None if p is None else LayerParams(p.w.astype(dtype), p.b.astype(dtype))
            for p in self.params
        ]
        return Model(
            self.input_shape, self.layers, params, self.num_classes,
            provenance=self.provenance, thresholds=self.thresholds,
        )

    def __repr__(self):
        kinds = "/".join(s.kind for s in self.layers)
        return f"Model({self.input_shape} -> {kinds} -> {self.output_shape}, dtype={self.dtype})"


@dataclass
class ActivationTrace:
    """Record of one forward pass: the tensor flowing into each layer, the
    pre-softmax logits, and the predicted label."""

    layer_inputs: list[np.ndarray]
    logits: np.ndarray
    label: int
    counted_positions: tuple[int, ...]

    def counted_inputs(self) -> list[np.ndarray]:
        return [self.layer_inputs[p] for p in self.counted_positions]

    def neuron_count(self) -> int:
        return int(sum(a.size for a in self.counted_inputs()))


@dataclass
class Cotangents:
    """Cotangent injections for the backward pass.

    ``logits`` attaches at the pre-softmax logits; ``layer_inputs`` aligns
    with the trace's layer inputs (None entries are skipped). Both may be
    supplied simultaneously.
    """

    logits: np.ndarray | None = None
    layer_inputs: list[np.ndarray | None] | None = None


# ---------------------------------------------------------------------------
# batched layer primitives (leading batch dimension)

def _gather_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """(n, c, H, W) -> (n, c, oh, ow, kh, kw) window view copies."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, oh, ow, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols


def _conv_forward(spec: LayerSpec, p: LayerParams, x: np.ndarray, keep_cols: bool = False):
    n = x.shape[0]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    oc = spec.out_channels
    _, oh, ow = layer_output_shape(spec, x.shape[1:])
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = _gather_windows(xp, kh, kw, sh, sw, oh, ow)
    cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, -1)
    wmat = p.w.reshape(oc, -1)
    out = cols2 @ wmat.T + p.b
    out = out.transpose(0, 2, 1).reshape(n, oc, oh, ow)
    return (out, cols2) if keep_cols else (out, None)


def _conv_backward(spec: LayerSpec, p: LayerParams, x: np.ndarray, g: np.ndarray,
                   need_input: bool, need_weights: bool):
    n = x.shape[0]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    oc = spec.out_channels
    _, h, w = x.shape[1:]
    _, oh, ow = layer_output_shape(spec, x.shape[1:])
    g2 = g.reshape(n, oc, oh * ow).transpose(0, 2, 1)  # (n, L, oc)
    wmat = p.w.reshape(oc, -1)

    gw = gb = None
    if need_weights:
        _, cols2 = _conv_forward(spec, p, x, keep_cols=True)
        gw = np.einsum("nlo,nlk->ok", g2, cols2).reshape(p.w.shape)
        gb = g2.sum(axis=(0, 1))

    gx = None
    if need_input:
        gcols2 = g2 @ wmat  # (n, L, c*kh*kw)
        gcols = gcols2.reshape(n, oh, ow, spec.in_channels, kh, kw)
        gxp = np.zeros((n, spec.in_channels, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
    return gx, gw, gb


def _maxpool_forward(spec: LayerSpec, x: np.ndarray):
    kh, kw = spec.size
    sh, sw = spec.stride
    c, oh, ow = layer_output_shape(spec, x.shape[1:])
    win = _gather_windows(x, kh, kw, sh, sw, oh, ow)
    flat = win.reshape(*win.shape[:4], kh * kw)
    arg = flat.argmax(axis=-1)  # first maximal element on ties (row-major window order)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(spec: LayerSpec, x: np.ndarray, g: np.ndarray, arg: np.ndarray) -> np.ndarray:
    kh, kw = spec.size
    sh, sw = spec.stride
    _, oh, ow = layer_output_shape(spec, x.shape[1:])
    gx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            mask = arg == (i * kw + j)
            gx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += g * mask
    return gx


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(spec: LayerSpec, p: LayerParams | None, x: np.ndarray) -> np.ndarray:
    if spec.kind == CONV2D:
        return _conv_forward(spec, p, x)[0]
    if spec.kind == RELU:
        return np.maximum(x, 0)
    if spec.kind == MAXPOOL:
        return _maxpool_forward(spec, x)[0]
    if spec.kind == FLATTEN:
        return x.reshape(x.shape[0], -1)
    if spec.kind == DENSE:
        return x @ p.w.T + p.b
    if spec.kind == SOFTMAX:
        return _softmax(x)
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


def _layer_backward(spec: LayerSpec, p: LayerParams | None, x: np.ndarray, g: np.ndarray,
                    need_input: bool, need_weights: bool):
    """Returns (gx, gw, gb) for one layer given the recorded input x and the
    cotangent g at the layer output."""
    if spec.kind == CONV2D:
        return _conv_backward(spec, p, x, g, need_input, need_weights)
    if spec.kind == RELU:
        return (g * (x > 0) if need_input else None), None, None
    if spec.kind == MAXPOOL:
        if not need_input:
            return None, None, None
        _, arg = _maxpool_forward(spec, x)
        return _maxpool_backward(spec, x, g, arg), None, None
    if spec.kind == FLATTEN:
        return (g.reshape(x.shape) if need_input else None), None, None
    if spec.kind == DENSE:
        gx = g @ p.w if need_input else None
        gw = g.T @ x if need_weights else None
        gb = g.sum(axis=0) if need_weights else None
        return gx, gw, gb
    if spec.kind == SOFTMAX:
        if not need_input:
            return None, None, None
        s = _softmax(x)
        return s * (g - (g * s).sum(axis=-1, keepdims=True)), None, None
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


def _forward_batch(model: Model, xb: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Run a batch through the model. Returns (per-layer batched inputs, logits)."""
    if xb.shape[1:] != model.input_shape:
        raise ConfigurationError(
            f"input shape {xb.shape[1:]} does not match model input {model.input_shape}"
        )
    cur = np.ascontiguousarray(xb, dtype=model.dtype)
    thresholds = model.thresholds or {}
    inputs: list[np.ndarray] = []
    logits = None
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        t = thresholds.get(i, 0.0)
        if t > 0:
            cur = np.where(cur < t, np.zeros((), dtype=cur.dtype), cur)
        inputs.append(cur)
        if spec.kind == SOFTMAX and i == len(model.layers) - 1:
            logits = cur
        cur = _layer_forward(spec, p, cur)
    if logits is None:
        logits = cur
    return inputs, logits


def _backward_batch(
    model: Model,
    layer_inputs: list[np.ndarray],
    cot_logits: np.ndarray | None,
    cot_layers: list[np.ndarray | None] | None,
    need_input: bool = True,
    need_weights: bool = False,
):
    """Reverse pass over recorded layer inputs with cotangent injection.

    Returns (grad wrt network input or None, list of (gw, gb) or None per layer).
    """
    n_layers = len(model.layers)
    thresholds = model.thresholds or {}
    last_is_softmax = n_layers > 0 and model.layers[-1].kind == SOFTMAX
    dtype = model.dtype

    out_shape = (layer_inputs[0].shape[0],) + model.output_shape
    if not last_is_softmax and cot_logits is not None:
        g = np.array(cot_logits, dtype=dtype, copy=True)
        if g.shape != out_shape:
            raise ConfigurationError(f"logit cotangent shape {g.shape} != {out_shape}")
    else:
        g = np.zeros(out_shape, dtype=dtype)

    weight_grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        spec, p, x = model.layers[i], model.params[i], layer_inputs[i]
        want_x = need_input or i > 0 or (cot_layers is not None)
        gx, gw, gb = _layer_backward(spec, p, x, g, want_x, need_weights and spec.has_params)
        if need_weights and spec.has_params:
            weight_grads[i] = (gw, gb)
        g = gx if gx is not None else np.zeros_like(x)
        if last_is_softmax and i == n_layers - 1 and cot_logits is not None:
            c = np.asarray(cot_logits, dtype=dtype)
            if c.shape != g.shape:
                raise ConfigurationError(f"logit cotangent shape {c.shape} != {g.shape}")
            g = g + c
        if cot_layers is not None and cot_layers[i] is not None:
            c = np.asarray(cot_layers[i], dtype=dtype)
            if c.shape != x.shape:
                raise ConfigurationError(
                    f"layer {i} cotangent shape {c.shape} does not match trace entry {x.shape}"
                )
            g = g + c
        t = thresholds.get(i, 0.0)
        if t > 0:
            g = g * (x >= t)
    return (g if need_input else None), weight_grads


# ---------------------------------------------------------------------------
# public per-input API

def forward(model: Model, x: np.ndarray) -> ActivationTrace:
    """Evaluate the model on one input, recording every layer's input tensor.

    The trace holds the tensors flowing into each layer, the pre-softmax
    logits (the final output when the model has no softmax layer), and the
    predicted label argmax(logits).
    """
    x = np.asarray(x)
    if x.shape != model.input_shape:
        raise ConfigurationError(
            f"input shape {x.shape} does not match model input {model.input_shape}"
        )
    inputs, logits = _forward_batch(model, x[None])
    logits1 = logits[0]
    if not np.all(np.isfinite(logits1)):
        raise ConfigurationError("forward pass produced non-finite logits")
    return ActivationTrace(
        layer_inputs=[a[0] for a in inputs],
        logits=logits1,
        label=int(np.argmax(logits1)),
        counted_positions=model.counted_positions(),
    )


def _batchify_cots(cots: Cotangents, n_layers: int):
    cl = cots.logits[None] if cots.logits is not None else None
    if cots.layer_inputs is None:
        return cl, None
    if len(cots.layer_inputs) != n_layers:
        raise ConfigurationError(
            f"layer cotangent list length {len(cots.layer_inputs)} != layer count {n_layers}"
        )
    return cl, [None if c is None else np.asarray(c)[None] for c in cots.layer_inputs]


def backward_input(model: Model, trace: ActivationTrace, cotangents: Cotangents) -> np.ndarray:
    """Gradient of any scalar with respect to the network input.

    The scalar is defined implicitly by its partials: a cotangent at the
    logits, plus optional cotangents at each recorded layer input, injected
    simultaneously.
    """
    if len(trace.layer_inputs) != len(model.layers):
        raise ConfigurationError("trace layer count does not match model layer count")
    cl, cls = _batchify_cots(cotangents, len(model.layers))
    batched = [a[None] for a in trace.layer_inputs]
    gx, _ = _backward_batch(model, batched, cl, cls, need_input=True, need_weights=False)
    return gx[0]


def backward_weights(model: Model, trace: ActivationTrace, cotangents: Cotangents):
    """Per-layer weight gradients; list aligned with model.layers, None for
    layers without parameters. Entries are (grad_w, grad_b) pairs."""
    if len(trace.layer_inputs) != len(model.layers):
        raise ConfigurationError("trace layer count does not match model layer count")
    cl, cls = _batchify_cots(cotangents, len(model.layers))
    batched = [a[None] for a in trace.layer_inputs]
    _, wg = _backward_batch(model, batched, cl, cls, need_input=False, need_weights=True)
    return wg
