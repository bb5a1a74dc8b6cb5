########################################################################
# Reverse-mode automatic differentiation over float64 numpy arrays
#
# Usage:
#   with GradientTape() as tape:
#       y = ad.mean(ad.relu(ad.linear(x, w, b)))
#   grads = ad.backward(tape, y)     # {node_id: Tensor}
########################################################################
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


class AutodiffError(ValueError):
    pass


class NonFiniteError(AutodiffError):
    """Raised when a forward op produces NaN or Inf"""
    pass


class TapeError(AutodiffError):
    pass


class NonDeterministicError(AutodiffError):
    pass


_node_ids = itertools.count(1)
_local = threading.local()


def _active_tapes():
    """
    Tape stack of the calling thread
    """
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tensor:
    """
    Dense float64 array with a graph handle.

    Tensors are immutable once recorded on a tape; optimizers update the
    data of trainable leaves in place between tapes.
    """

    def __init__(self, data, trainable=False, name=""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)

        self.data = arr
        self.grad = None
        self.trainable = trainable
        self.name = name
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.trainable = False
        t.name = ""
        t.node_id = next(_node_ids)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, node_id={self.node_id}, trainable={self.trainable})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class TapeRecord:
    name: str
    inputs: list
    output: Tensor
    vjp: object


class GradientTape:
    """
    Ordered record of primitive ops. Recording order is a topological
    order of the graph by construction.
    """

    def __init__(self):
        self.records = []
        self._produced = set()

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def watches(self, t):
        return t.trainable or t.node_id in self._produced

    def contains(self, t):
        return t.node_id in self._produced

    def record(self, name, inputs, output, vjp):
        self.records.append(TapeRecord(name, inputs, output, vjp))
        self._produced.add(output.node_id)


@contextmanager
def no_tape():
    """
    Temporarily detach the calling thread's tapes (forward-only evaluation)
    """
    tapes = _active_tapes()
    saved = list(tapes)
    tapes.clear()
    try:
        yield
    finally:
        tapes.extend(saved)


def record_op(name, inputs, data, vjp):
    """
    Wrap a forward result and record it on every active tape that
    watches one of the inputs.

    @param vjp callable(g) -> tuple of input gradients (None allowed)
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {name}")

    out = Tensor._wrap(data)
    for tape in _active_tapes():
        if any(tape.watches(t) for t in inputs):
            tape.record(name, inputs, out, vjp)

    return out


def backward(tape, scalar_output):
    """
    Replay the tape in reverse and return {node_id: Tensor} gradients of
    scalar_output for every trainable leaf reached. Also stores them on
    the leaves' .grad (overwriting, never accumulating across replays).
    """
    if scalar_output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {list(scalar_output.shape)}")

    if not tape.contains(scalar_output):
        raise TapeError(f"tensor not on tape: {scalar_output!r}")

    grads = {scalar_output.node_id: np.ones_like(scalar_output.data)}
    leaves = {}

    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue

        input_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None or not tape.watches(t):
                continue

            if gi.shape != t.data.shape:
                raise TapeError(f"{rec.name}: gradient shape {gi.shape} != input shape {t.data.shape}")

            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi

            if t.trainable and not tape.contains(t):
                leaves[t.node_id] = t

    result = {}
    for node_id, t in leaves.items():
        g = np.array(grads[node_id], dtype=np.float64)
        t.grad = g
        result[node_id] = Tensor._wrap(g)

    return result


def grads_by_name(grads, params):
    """
    Map a backward() result onto {name: ndarray} for a named param dict;
    params not reached get zeros.
    """
    out = {}
    for name, t in params.items():
        g = grads.get(t.node_id)
        out[name] = g.data if g is not None else np.zeros_like(t.data)
    return out


########################################################################
# Primitives
########################################################################
def _unbroadcast(g, shape):
    if g.shape == shape:
        return g

    while g.ndim > len(shape):
        g = g.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)

    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", [a, b], a.data + b.data, vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op("sub", [a, b], a.data - b.data, vjp)


def multiply(a, b):
    """Elementwise product with numpy broadcasting"""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op("multiply", [a, b], a.data * b.data, vjp)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return record_op("scale", [a], a.data * c, vjp)


def matmul(a, b):
    """
    Matrix product; leading (batch) dims broadcast like np.matmul
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise AutodiffError("matmul needs operands with at least 2 dims")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op("matmul", [a, b], np.matmul(a.data, b.data), vjp)


def linear(x, w, b=None):
    """
    Fully-connected affine map: x (N×in) @ w (in×out) + b (out)
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise AutodiffError(f"linear: incompatible shapes {list(x.shape)} and {list(w.shape)}")

    out = x.data @ w.data
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs.append(b)

    def vjp(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return record_op("linear", inputs, out, vjp)


def _windows(xp, k, stride, out_h, out_w):
    n, c = xp.shape[:2]
    s = xp.strides
    return as_strided(
        xp,
        shape=(n, c, out_h, out_w, k, k),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )


def conv2d(x, w, b=None, stride=1, pad=0):
    """
    2-D cross-correlation, NCHW layout, square kernels.
    im2col through a strided view, then one matmul.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise AutodiffError("conv2d expects x N×C×H×W and w O×C×k×k")

    n, c, h, wd = x.shape
    o, wc, k, k2 = w.shape
    if wc != c or k != k2:
        raise AutodiffError(f"conv2d: weight {list(w.shape)} does not match input channels {c}")
    if stride < 1 or pad < 0:
        raise AutodiffError(f"conv2d: invalid stride {stride} / pad {pad}")

    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (wd + 2 * pad - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise AutodiffError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, k, stride, out_h, out_w).transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)
    w2 = w.data.reshape(o, -1)

    out = cols @ w2.T
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs.append(b)
    out = out.reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ w2).reshape(n, out_h, out_w, c, k, k)

        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)

        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return record_op("conv2d", inputs, np.ascontiguousarray(out), vjp)


def conv1x1(x, w, b=None):
    """
    1×1 convolution: x N×C×H×W, w O×C, b O
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 2 or w.shape[1] != x.shape[1]:
        raise AutodiffError(f"conv1x1: weight {list(w.shape)} does not match input {list(x.shape)}")

    out = np.einsum("oc,nchw->nohw", w.data, x.data, optimize=True)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def vjp(g):
        grads = [
            np.einsum("oc,nohw->nchw", w.data, g, optimize=True),
            np.einsum("nohw,nchw->oc", g, x.data, optimize=True),
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record_op("conv1x1", inputs, out, vjp)


def relu(x):
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return record_op("relu", [x], np.where(mask, x.data, 0.0), vjp)


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return record_op("tanh", [x], y, vjp)


def sigmoid(x):
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return record_op("sigmoid", [x], y, vjp)


def _check_axis(x, axis):
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise AutodiffError(f"axis {axis} out of range for shape {list(x.shape)}")
    return axis % ndim


def softmax(x, axis=-1):
    """
    Max-subtracted softmax along axis
    """
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    if x.shape[axis] == 0:
        raise AutodiffError("softmax over an empty axis")

    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", [x], y, vjp)


def l2_normalize(x, axis=-1, eps=1e-12):
    """
    y = x / max(||x||_2 along axis, eps)
    """
    if eps <= 0:
        raise AutodiffError(f"l2_normalize needs eps > 0, got {eps}")

    x = as_tensor(x)
    axis = _check_axis(x, axis)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    live = norm >= eps

    def vjp(g):
        radial = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - y * radial) / denom, g / denom),)

    return record_op("l2_normalize", [x], y, vjp)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(tensors[0], axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis)
            for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record_op("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), vjp)


def _slice(x, lo, hi, axis):
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(lo, hi)
    index = tuple(index)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record_op("slice", [x], x.data[index].copy(), vjp)


def split(x, sections, axis=1):
    """
    Split along axis into `sections` equal parts (int) or parts of the
    given sizes (list). Order is preserved.
    """
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    total = x.shape[axis]

    if isinstance(sections, int):
        if sections < 1 or total % sections:
            raise AutodiffError(f"cannot split axis of size {total} into {sections} equal parts")
        sizes = [total // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != total:
            raise AutodiffError(f"split sizes {sizes} do not sum to {total}")

    parts = []
    lo = 0
    for size in sizes:
        parts.append(_slice(x, lo, lo + size, axis))
        lo += size
    return parts


def take(x, index, axis=1):
    """
    Select one position along axis (the axis is dropped)
    """
    x = as_tensor(x)
    axis = _check_axis(x, axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return record_op("take", [x], np.take(x.data, index, axis=axis).copy(), vjp)


def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape

    def vjp(g):
        return (g.reshape(original),)

    return record_op("reshape", [x], x.data.reshape(shape), vjp)


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return record_op("transpose", [x], x.data.transpose(axes), vjp)


def embedding(table, indices):
    """
    Row gather: table V×E, integer indices of any shape -> indices.shape + (E,)
    """
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise AutodiffError(f"embedding index out of range [0, {table.shape[0]})")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record_op("embedding", [table], table.data[indices], vjp)


def expand_spatial(x, height, width):
    """
    Broadcast N×C to N×C×H×W by copying to every location
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise AutodiffError("expand_spatial expects N×C input")

    out = np.broadcast_to(x.data[:, :, None, None], x.shape + (height, width)).copy()

    def vjp(g):
        return (g.sum(axis=(2, 3)),)

    return record_op("expand_spatial", [x], out, vjp)


def global_avg_pool(x):
    """
    N×C×H×W -> N×C
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise AutodiffError("global_avg_pool expects N×C×H×W input")

    n, c, h, w = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return record_op("global_avg_pool", [x], x.data.mean(axis=(2, 3)), vjp)


def mean(x):
    x = as_tensor(x)
    n = x.size

    def vjp(g):
        return (np.full(x.shape, g.reshape(-1)[0] / n),)

    return record_op("mean", [x], np.array([x.data.mean()]), vjp)


def weighted_mean(x, weights):
    """
    sum_i w_i * x_i / n for a 1-D x and constant weights
    """
    x = as_tensor(x)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise AutodiffError(f"weighted_mean: weights {w.shape} do not match {x.shape}")

    n = x.size

    def vjp(g):
        return (w * (g.reshape(-1)[0] / n),)

    return record_op("weighted_mean", [x], np.array([float(np.dot(w, x.data)) / n]), vjp)


def cross_entropy(logits, labels):
    """
    Per-sample -log softmax(logits)[label]; logits N×K, labels N ints.
    Returns N losses.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise AutodiffError("cross_entropy expects logits N×K and N labels")

    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise AutodiffError(f"label out of range [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    losses = log_norm - z[rows, labels]

    def vjp(g):
        p = np.exp(z - log_norm[:, None])
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return record_op("cross_entropy", [logits], losses, vjp)


########################################################################
# Gradient check
########################################################################
@dataclass
class GradCheckReport:
    tolerance: float
    max_errors: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    kinks: dict = field(default_factory=dict)
    negligible: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.max_errors.values())

    def worst(self):
        if not self.max_errors:
            return "", 0.0
        name = max(self.max_errors, key=self.max_errors.get)
        return name, self.max_errors[name]


def _evaluate(loss_fn):
    with no_tape():
        return as_tensor(loss_fn()).item()


def finite_diff_check(
    loss_fn,
    params,
    step=1e-5,
    tolerance=1e-4,
    negligible=1e-6,
    max_elements=None,
    seed=0,
):
    """
    Compare analytic gradients against central differences
    (f(p+h) - f(p-h)) / 2h, elementwise, per parameter block.

    @param loss_fn zero-arg callable returning a scalar Tensor built from params
    @param params {name: trainable Tensor}
    @param max_elements check at most this many (seeded) elements per block
    @return GradCheckReport with the max relative error per block, where
            rel err = |a - n| / max(|a|, |n|, 1e-8). Kinks (one-sided
            differences disagree) and negligible elements (both below
            `negligible`) are excluded and counted.
    """
    if not 1e-7 <= step <= 1e-3:
        raise AutodiffError(f"finite difference step must be in [1e-7, 1e-3], got {step}")

    f0 = _evaluate(loss_fn)
    if _evaluate(loss_fn) != f0:
        raise NonDeterministicError("loss_fn returned different values for identical inputs")

    with GradientTape() as tape:
        y = loss_fn()
    analytic = grads_by_name(backward(tape, y), params)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    for name, t in params.items():
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))

        worst = 0.0
        kinks = 0
        tiny = 0
        a_flat = analytic[name].reshape(-1)

        for i in indices:
            orig = flat[i]

            flat[i] = orig + step
            fp = _evaluate(loss_fn)
            flat[i] = orig - step
            fm = _evaluate(loss_fn)
            flat[i] = orig + 2 * step
            fpp = _evaluate(loss_fn)
            flat[i] = orig - 2 * step
            fmm = _evaluate(loss_fn)
            flat[i] = orig

            numeric = (fp - fm) / (2 * step)
            wide = (fpp - fmm) / (4 * step)
            forward = (fp - f0) / step
            backward_ = (f0 - fm) / step
            a = a_flat[i]

            if abs(forward - backward_) > 1e-2 * max(abs(forward), abs(backward_), 1.0) or \
                    abs(numeric - wide) > tolerance * max(abs(numeric), abs(wide), negligible):
                kinks += 1
                continue

            if max(abs(a), abs(numeric)) < negligible:
                tiny += 1
                continue

            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)

        report.max_errors[name] = worst
        report.checked[name] = len(indices) - kinks - tiny
        report.kinks[name] = kinks
        report.negligible[name] = tiny

        if kinks:
            print(f"[WARN] finite_diff_check: {name}: {kinks} element(s) at non-differentiable points excluded")

    return report


def check_primitive(fn, inputs, step=1e-5, tolerance=1e-4):
    """
    Convenience wrapper: gradient-check sum(w * fn(*inputs)) with a fixed
    random projection w, treating every input as trainable.
    """
    params = {f"x{i}": Tensor(x, trainable=True) for i, x in enumerate(inputs)}
    with no_tape():
        shape = as_tensor(fn(*params.values())).shape
    proj = np.random.default_rng(1234).normal(size=int(np.prod(shape)))

    def loss_fn():
        out = as_tensor(fn(*params.values()))
        return weighted_mean(reshape(out, (out.size,)), proj * out.size)

    return finite_diff_check(loss_fn, params, step=step, tolerance=tolerance)
