"""From-scratch dense-tensor math for small CNN classifiers.

Forward ops, exact reverse-mode gradients (w.r.t. input and parameters),
cross-entropy loss, plain SGD, and a byte-exact weight file format.
Image tensors are (H, W, C) arrays stored as float32; probabilities and
losses are always accumulated in float64. All ops follow the dtype of
their input, so a float64 input yields a float64 pipeline (used by the
finite-difference tests).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConsistencyError,
    DimensionError,
    FormatError,
    NumericError,
    TrainingError,
)

# floor applied to probabilities before taking log
PROB_FLOOR = 1e-12

WEIGHTS_MAGIC = b"ADVW"
WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# elementary forward ops


def conv2d_forward(x, kernel, bias, stride=1):
    """Valid-padding 2D convolution of an (H, W, Cin) tensor.

    kernel is (kh, kw, Cin, Cout), bias is (Cout,). The output has extent
    floor((H - kh) / stride) + 1 along each spatial axis.
    """
    x, kernel, bias = np.asarray(x), np.asarray(kernel), np.asarray(bias)
    if x.ndim != 3:
        raise DimensionError(f"conv input must be (H, W, C), got {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv kernel must be (kh, kw, Cin, Cout), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    h, w, c = x.shape
    if c != cin:
        raise DimensionError(f"input channel axis {c} != kernel Cin {cin}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias must be ({cout},), got {bias.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((oh, ow, cout), dtype=np.result_type(x, kernel))
    # accumulate one matmul per kernel offset; cheaper than materializing
    # the full sliding-window tensor
    for i in range(kh):
        for j in range(kw):
            out += x[i : i + stride * oh : stride, j : j + stride * ow : stride, :] @ kernel[i, j]
    return out + bias


def _pool_view(x, window):
    h, w, c = x.shape
    v = x.reshape(h // window, window, w // window, window, c)
    return v.transpose(0, 2, 4, 1, 3).reshape(h // window, w // window, c, window * window)


def maxpool2d(x, window):
    """Non-overlapping max pooling; window must divide both spatial extents."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"pool input must be (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if window < 1 or h % window or w % window:
        raise DimensionError(f"pool window {window} does not divide input {h}x{w}")
    # reduce on a reshape view; cheaper than the argmax layout of _pool_view
    return x.reshape(h // window, window, w // window, window, c).max(axis=(1, 3))


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x), 0)


def dense_forward(x, weight, bias):
    """Affine map of a flat vector: x @ weight + bias."""
    x, weight, bias = np.asarray(x), np.asarray(weight), np.asarray(bias)
    if x.ndim != 1 or weight.ndim != 2:
        raise DimensionError(f"dense expects vector and matrix, got {x.shape} and {weight.shape}")
    n, m = weight.shape
    if x.shape[0] != n or bias.shape != (m,):
        raise DimensionError(
            f"dense shapes inconsistent: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def softmax(logits):
    """Stable softmax over a logit vector; returns a float64 ProbVector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise DimensionError(f"softmax needs a vector of at least 2 logits, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite logits")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cross_entropy(probs, label):
    """Negative log-likelihood of the true label, in nats.

    Probabilities are floored at 1e-12 before the log so confident
    mistakes stay finite.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    v = min(max(float(p[label]), PROB_FLOOR), 1.0)
    return -float(np.log(v))


# ---------------------------------------------------------------------------
# layer-graph runtime
#
# An architecture is any object with .name, .input_side, .channels,
# .num_classes and .layers, where .layers is a sequence of dicts:
#   {"kind": "conv", "filters": F, "size": K, "stride": S}
#   {"kind": "relu"} {"kind": "maxpool", "window": W}
#   {"kind": "dropout", "rate": R} {"kind": "flatten"}
#   {"kind": "dense", "units": U}
# Dropout is active only in training mode; inference and gradient
# evaluation treat it as identity.


@dataclass(eq=False)
class ModelWeights:
    """Ordered parameter arrays (kernels/matrices and biases) plus the
    architecture tag they belong to."""

    arch_tag: str
    arrays: list

    def copy(self):
        return ModelWeights(self.arch_tag, [a.copy() for a in self.arrays])


def param_shapes(arch):
    """Parameter-array shapes implied by an architecture, in network order.

    Also validates the layer arithmetic (pool divisibility, kernel fit,
    final dense width == num_classes).
    """
    h = w = arch.input_side
    c = arch.channels
    flat = None
    shapes = []
    for i, spec in enumerate(arch.layers):
        kind = spec["kind"]
        if kind == "conv":
            k, f = spec["size"], spec["filters"]
            s = spec.get("stride", 1)
            if flat is not None:
                raise ConsistencyError(f"layer {i}: conv after flatten")
            if k > h or k > w:
                raise ConsistencyError(f"layer {i}: kernel {k} larger than feature map {h}x{w}")
            shapes.append((k, k, c, f))
            shapes.append((f,))
            h = (h - k) // s + 1
            w = (w - k) // s + 1
            c = f
        elif kind == "maxpool":
            wnd = spec["window"]
            if flat is not None or h % wnd or w % wnd:
                raise ConsistencyError(f"layer {i}: pool window {wnd} invalid for {h}x{w}")
            h //= wnd
            w //= wnd
        elif kind == "relu" or kind == "dropout":
            pass
        elif kind == "flatten":
            flat = h * w * c
        elif kind == "dense":
            if flat is None:
                raise ConsistencyError(f"layer {i}: dense requires a preceding flatten")
            shapes.append((flat, spec["units"]))
            shapes.append((spec["units"],))
            flat = spec["units"]
        else:
            raise ConsistencyError(f"layer {i}: unknown layer kind {kind!r}")
    if not arch.layers or arch.layers[-1]["kind"] != "dense" or flat != arch.num_classes:
        raise ConsistencyError(
            f"architecture {arch.name!r} must end in a dense layer of {arch.num_classes} units"
        )
    return shapes


def validate_weights(weights, arch):
    """Raise ConsistencyError unless weights match the architecture."""
    if weights.arch_tag != arch.name:
        raise ConsistencyError(f"weights tagged {weights.arch_tag!r}, architecture is {arch.name!r}")
    expected = param_shapes(arch)
    if len(weights.arrays) != len(expected):
        raise ConsistencyError(
            f"{arch.name!r} needs {len(expected)} parameter arrays, got {len(weights.arrays)}"
        )
    for i, (a, shape) in enumerate(zip(weights.arrays, expected)):
        if tuple(a.shape) != shape:
            raise ConsistencyError(f"parameter array {i}: expected shape {shape}, got {a.shape}")


def init_weights(arch, seed):
    """He-initialized float32 weights for an architecture, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for shape in param_shapes(arch):
        if len(shape) == 1:
            arrays.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            arrays.append((rng.standard_normal(shape) * std).astype(np.float32))
    return ModelWeights(arch.name, arrays)


def _check_input_shape(arch, x):
    want = (arch.input_side, arch.input_side, arch.channels)
    if tuple(x.shape) != want:
        raise DimensionError(f"input shape {x.shape} does not match architecture input {want}")


def _forward(weights, arch, x, train=False, rng=None):
    """Run the network; returns (logits, caches) for the backward walk."""
    validate_weights(weights, arch)
    x = np.asarray(x)
    _check_input_shape(arch, x)
    h = x
    ai = 0
    caches = []
    for spec in arch.layers:
        kind = spec["kind"]
        if kind == "conv":
            k, b = weights.arrays[ai], weights.arrays[ai + 1]
            ai += 2
            caches.append(("conv", h, k, spec.get("stride", 1)))
            h = conv2d_forward(h, k, b, spec.get("stride", 1))
        elif kind == "relu":
            caches.append(("relu", h))
            h = relu(h)
        elif kind == "maxpool":
            caches.append(("maxpool", h, spec["window"]))
            h = maxpool2d(h, spec["window"])
        elif kind == "dropout":
            if train:
                rate = spec["rate"]
                mask = (rng.random(h.shape) >= rate).astype(h.dtype) / (1.0 - rate)
                caches.append(("dropout", mask))
                h = h * mask
            else:
                caches.append(("dropout", None))
        elif kind == "flatten":
            caches.append(("flatten", h.shape))
            h = h.reshape(-1)
        elif kind == "dense":
            wgt, b = weights.arrays[ai], weights.arrays[ai + 1]
            ai += 2
            caches.append(("dense", h, wgt))
            h = dense_forward(h, wgt, b)
    return h, caches


def _conv_backward(grad_out, x, kernel, stride):
    kh, kw, cin, cout = kernel.shape
    oh, ow, _ = grad_out.shape
    grad_b = grad_out.sum(axis=(0, 1))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(0, 1))[::stride, ::stride]
    # (Cin, kh, kw, Cout) -> (kh, kw, Cin, Cout)
    grad_k = np.tensordot(win, grad_out, axes=([0, 1], [0, 1])).transpose(1, 2, 0, 3)
    grad_x = np.zeros(x.shape, dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_x[i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (
                grad_out @ kernel[i, j].T
            )
    return grad_x, grad_k, grad_b


def _maxpool_backward(grad_out, x, window):
    oh, ow, c = grad_out.shape
    v = _pool_view(x, window)
    idx = v.argmax(axis=3)
    g = np.zeros(v.shape, dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=3)
    g = g.reshape(oh, ow, c, window, window).transpose(0, 3, 1, 4, 2)
    return g.reshape(x.shape)


def _backward(caches, grad_logits, want_param_grads):
    """Reverse walk over forward caches. Returns (grad_input, param_grads)."""
    g = grad_logits
    pgrads_rev = []
    for entry in reversed(caches):
        kind = entry[0]
        if kind == "conv":
            _, x, kernel, stride = entry
            g, gk, gb = _conv_backward(g, x, kernel, stride)
            if want_param_grads:
                pgrads_rev.extend((gb, gk))
        elif kind == "relu":
            g = g * (entry[1] > 0)
        elif kind == "maxpool":
            g = _maxpool_backward(g, entry[1], entry[2])
        elif kind == "dropout":
            if entry[1] is not None:
                g = g * entry[1]
        elif kind == "flatten":
            g = g.reshape(entry[1])
        elif kind == "dense":
            _, x, wgt = entry
            if want_param_grads:
                pgrads_rev.extend((g.copy(), np.outer(x, g)))
            g = wgt @ g
    return g, list(reversed(pgrads_rev)) if want_param_grads else None


def forward_probs(weights, arch, x):
    """Class probabilities for one input (inference mode, dropout off)."""
    logits, _ = _forward(weights, arch, x)
    return softmax(logits)


def backward_input_gradient(weights, arch, x, y):
    """Exact gradient of cross_entropy(softmax(net(x)), y) w.r.t. x.

    Dropout is disabled; the returned tensor has the shape and dtype of x.
    """
    x = np.asarray(x)
    logits, caches = _forward(weights, arch, x)
    p = softmax(logits)
    if not 0 <= y < p.shape[0]:
        raise IndexError(f"label {y} out of range for {p.shape[0]} classes")
    d = p.copy()
    d[y] -= 1.0
    g, _ = _backward(caches, d, want_param_grads=False)
    return g.astype(x.dtype, copy=False)


def evaluate_accuracy(weights, arch, dataset):
    """Fraction of samples whose argmax logit matches the label."""
    samples = list(dataset)
    if not samples:
        raise TrainingError("cannot evaluate accuracy on an empty dataset")
    correct = 0
    for s in samples:
        logits, _ = _forward(weights, arch, s.image)
        if int(np.argmax(logits)) == s.label:
            correct += 1
    return correct / len(samples)


def sgd_train(weights, arch, dataset, epochs, lr, seed):
    """Plain single-sample SGD with constant learning rate.

    Deterministic given the seed (shuffling and dropout masks both draw
    from one generator). Returns new weights plus the per-epoch training
    accuracy history; the input weights are not mutated.
    """
    samples = list(dataset)
    if not samples:
        raise TrainingError("training dataset is empty")
    for s in samples:
        if not 0 <= s.label < arch.num_classes:
            raise TrainingError(f"label {s.label} out of range for {arch.num_classes} classes")
    validate_weights(weights, arch)
    rng = np.random.default_rng(seed)
    w = weights.copy()
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        correct = 0
        for i in order:
            s = samples[i]
            logits, caches = _forward(w, arch, s.image, train=True, rng=rng)
            p = softmax(logits)
            loss = cross_entropy(p, s.label)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            if int(np.argmax(logits)) == s.label:
                correct += 1
            d = p
            d[s.label] -= 1.0
            _, pgrads = _backward(caches, d, want_param_grads=True)
            for a, g in zip(w.arrays, pgrads):
                a -= (lr * g).astype(a.dtype)
        history.append(correct / len(samples))
    return w, history


# ---------------------------------------------------------------------------
# weight file format (documented byte-exactly in the README)


def save_weights(weights, path):
    """Write weights to the ADVW binary format (little-endian float32)."""
    tag = weights.arch_tag.encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<H", WEIGHTS_VERSION))
        f.write(struct.pack("<H", len(tag)))
        f.write(tag)
        f.write(struct.pack("<I", len(weights.arrays)))
        for a in weights.arrays:
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_weights(path):
    """Read an ADVW weight file; bit-exact inverse of save_weights."""
    with open(path, "rb") as f:
        blob = f.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"truncated weight file while reading {what}")
        piece = blob[off : off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != WEIGHTS_MAGIC:
        raise FormatError("bad magic bytes, not an ADVW weight file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight format version {version}")
    (tag_len,) = struct.unpack("<H", take(2, "tag length"))
    tag = take(tag_len, "tag").decode("utf-8")
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays = []
    for i in range(count):
        (rank,) = struct.unpack("<I", take(4, f"rank of array {i}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"shape of array {i}"))
        size = int(np.prod(shape)) if rank else 1
        raw = take(4 * size, f"payload of array {i}")
        a = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(a)):
            raise FormatError(f"array {i} contains non-finite values")
        arrays.append(a)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last array")
    return ModelWeights(tag, arrays)
