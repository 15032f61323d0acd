"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested scalar loops, direct formula
transcription) and written against the public contracts, not the library
internals, so agreement is meaningful.
"""

import math

import numpy as np

from sparseatk import nn


def conv2d_ref(x, w, b, stride, padding):
    """Nested-loop 2-D convolution (cross-correlation) over (C, H, W)."""
    oc, ic, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, ph : ph + h, pw : pw + wd] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((oc, oh, ow), dtype=np.float64)
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for ci in range(ic):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ci, i * sh + u, j * sw + v] * w[o, ci, u, v]
                out[o, i, j] = acc + b[o]
    return out


def maxpool_ref(x, size, stride):
    kh, kw = size
    sh, sw = stride
    c, h, wd = x.shape
    oh = (h - kh) // sh + 1
    ow = (wd - kw) // sw + 1
    out = np.zeros((c, oh, ow), dtype=np.float64)
    for ci in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ci, i, j] = x[ci, i * sh : i * sh + kh, j * sw : j * sw + kw].max()
    return out


def forward_ref(model, x):
    """Naive forward pass returning the pre-softmax logits."""
    cur = np.asarray(x, dtype=np.float64)
    logits = None
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        if spec.kind == nn.CONV2D:
            cur = conv2d_ref(cur, p.w.astype(np.float64), p.b.astype(np.float64),
                             spec.stride, spec.padding)
        elif spec.kind == nn.RELU:
            cur = np.maximum(cur, 0.0)
        elif spec.kind == nn.MAXPOOL:
            cur = maxpool_ref(cur, spec.size, spec.stride)
        elif spec.kind == nn.FLATTEN:
            cur = cur.reshape(-1)
        elif spec.kind == nn.DENSE:
            out = np.zeros(spec.out_features, dtype=np.float64)
            for o in range(spec.out_features):
                acc = 0.0
                for k in range(spec.in_features):
                    acc += float(p.w[o, k]) * cur[k]
                out[o] = acc + float(p.b[o])
            cur = out
        elif spec.kind == nn.SOFTMAX:
            logits = cur
            z = cur - cur.max()
            e = np.exp(z)
            cur = e / e.sum()
        else:
            raise AssertionError(spec.kind)
    return cur if logits is None else logits


def sparsity_loss_ref(trace, kind, beta, weights=None):
    """Scalar-loop transcription of the weighted surrogate sparsity objective."""
    counted = trace.counted_inputs()
    if weights is None:
        weights = [1.0] * len(counted)
    k = sum(a.size for a in counted)
    total = 0.0
    for wl, a in zip(weights, counted):
        for v in a.reshape(-1):
            z = beta * float(v)
            if kind == "tanh":
                total += wl * math.tanh(z)
            else:
                total += wl * (1.0 / (1.0 + math.exp(-z)) if z >= 0
                               else math.exp(z) / (1.0 + math.exp(z)))
    return -total / k


def targeted_ce_ref(logits, target):
    """Direct formula: -log(e^{z_y} / sum_l e^{z_l}), shifted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    denom = sum(math.exp(v - m) for v in z)
    return -math.log(math.exp(float(z[target]) - m) / denom)


def layer_macs_ref(model):
    """Hand-derived MAC counts from the layer geometry."""
    out = []
    shape = model.input_shape
    for spec in model.layers:
        if spec.kind == nn.CONV2D:
            _, h, w = shape
            kh, kw = spec.kernel
            sh, sw = spec.stride
            ph, pw = spec.padding
            oh = (h + 2 * ph - kh) // sh + 1
            ow = (w + 2 * pw - kw) // sw + 1
            out.append(oh * ow * spec.out_channels * spec.in_channels * kh * kw)
        elif spec.kind == nn.DENSE:
            out.append(spec.in_features * spec.out_features)
        else:
            out.append(0)
        shape = nn.layer_output_shape(spec, shape)
    return out


def numeric_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def random_tiny_model(rng, dtype=np.float64):
    """Small random architecture drawn from composable templates."""
    arch = rng.integers(0, 3)
    if arch == 0:
        input_shape = (1, 6, 6)
        layers = [nn.conv2d(1, 2, 3), nn.relu(), nn.flatten(), nn.dense(2 * 4 * 4, 3)]
        num_classes = 3
    elif arch == 1:
        input_shape = (2, 6, 6)
        layers = [nn.conv2d(2, 3, 3, padding=1), nn.relu(), nn.maxpool(2),
                  nn.flatten(), nn.dense(3 * 3 * 3, 4)]
        num_classes = 4
    else:
        input_shape = (1, 5, 5)
        layers = [nn.conv2d(1, 2, 2, stride=2), nn.relu(), nn.flatten(),
                  nn.dense(2 * 2 * 2, 3), nn.relu(), nn.dense(3, 3)]
        num_classes = 3
    params = []
    for spec in layers:
        shapes = nn.weight_shapes(spec)
        if shapes is None:
            params.append(None)
            continue
        w = rng.standard_normal(shapes[0]) * 0.5
        b = rng.standard_normal(shapes[1]) * 0.1
        params.append(nn.LayerParams(w.astype(dtype), b.astype(dtype)))
    return nn.Model(input_shape, layers, params, num_classes)
