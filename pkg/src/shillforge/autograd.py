"""Dense-tensor kernel with tape-based reverse-mode gradient propagation.

Every primitive operates on :class:`Tensor` values (float64 numpy arrays
underneath) and, while a :class:`Tape` is active and some input requires
gradients, records itself so that :func:`backward` can replay the local
derivative rules in reverse. Tensors are dense; the kernel is built for
desk-scale graphs where correctness and testability beat throughput.

Gradients accumulate additively across fan-out within a single backward
pass and are re-initialized on every call; there is no cross-call state.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractViolation, DomainError

_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def active_tape():
    """The innermost active tape of the current thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array with an optional gradient slot.

    values are always float64; grad, when set by :func:`backward`, is a
    numpy array of the same shape.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self):
        return Tensor(self.values.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs, output, backward_rule):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class Tape:
    """Ordered record of primitive operations for one reverse sweep.

    Use as a context manager; operations executed in the block are
    recorded in topological order (inputs always precede their use).
    Tapes are thread-local: concurrent tapes on different threads do not
    interact.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, inputs, output, backward_rule):
        self.nodes.append(_Node(inputs, output, backward_rule))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name, inputs, out_values, backward_rule):
    """Wrap op output, propagating requires_grad and recording on the tape."""
    out = Tensor(out_values, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, backward_rule)
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    for _ in range(extra):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{name}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# binary primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.values + b.values, rule)


def subtract(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("subtract", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("subtract", (a, b), a.values - b.values, rule)


def multiply(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("multiply", a, b)

    def rule(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _emit("multiply", (a, b), a.values * b.values, rule)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def rule(g):
        return g @ b.values.T, a.values.T @ g

    return _emit("matmul", (a, b), a.values @ b.values, rule)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)

    def rule(g):
        return (g * c,)

    return _emit("scale", (x,), x.values * c, rule)


# ---------------------------------------------------------------------------
# elementwise primitives


def sigmoid(x):
    x = _as_tensor(x)
    # evaluate in the numerically stable half-plane per sign
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, rule)


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.values, 0.0)

    def rule(g):
        return (g * (x.values > 0.0),)

    return _emit("relu", (x,), out, rule)


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.values)

    def rule(g):
        return (g * out,)

    return _emit("exp", (x,), out, rule)


def log(x):
    """Natural log. Inputs must be strictly positive; callers clamp."""
    x = _as_tensor(x)
    if np.any(x.values <= 0.0):
        raise DomainError(f"log: non-positive input (min {x.values.min():g})")

    def rule(g):
        return (g / x.values,)

    return _emit("log", (x,), np.log(x.values), rule)


def absolute(x):
    x = _as_tensor(x)

    def rule(g):
        return (g * np.sign(x.values),)

    return _emit("absolute", (x,), np.abs(x.values), rule)


def clamp_min(x, floor):
    """max(x, floor) elementwise; gradient passes only where x > floor."""
    x = _as_tensor(x)
    floor = float(floor)

    def rule(g):
        return (g * (x.values > floor),)

    return _emit("clamp_min", (x,), np.maximum(x.values, floor), rule)


# ---------------------------------------------------------------------------
# reductions and reindexing


def reduce_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(np.float64, copy=True),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).astype(np.float64, copy=True),)

    return _emit("reduce_sum", (x,), out, rule)


def gather(x, index, axis=0):
    """Select rows (axis 0) or columns (axis 1) by integer index."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if axis not in (0, 1):
        raise ContractViolation(f"gather: axis {axis} not in (0, 1)")
    if axis == 1 and x.values.ndim != 2:
        raise ContractViolation(f"gather: axis 1 needs a matrix, got shape {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ContractViolation(f"gather: index out of range for shape {x.shape} axis {axis}")
    out = np.take(x.values, index, axis=axis)

    def rule(g):
        gx = np.zeros_like(x.values)
        if axis == 0:
            np.add.at(gx, index, g)
        else:
            np.add.at(gx.T, index, np.asarray(g).T)
        return (gx,)

    return _emit("gather", (x,), out, rule)


def scatter_rows(x, index, n_rows):
    """Place the rows of x into a zero matrix of n_rows at `index`."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.values.ndim != 2 or index.shape != (x.shape[0],):
        raise ContractViolation(f"scatter_rows: shape {x.shape} vs {index.shape} indices")
    out = np.zeros((int(n_rows), x.shape[1]))
    np.add.at(out, index, x.values)

    def rule(g):
        return (g[index],)

    return _emit("scatter_rows", (x,), out, rule)


def segment_sum(x, segment_ids, n_segments):
    """Sum a vector into n_segments buckets. Empty buckets are 0."""
    x = _as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if x.values.ndim != 1 or seg.shape != x.shape:
        raise ContractViolation(f"segment_sum: shape {x.shape} vs {seg.shape} ids")
    out = np.zeros(int(n_segments))
    np.add.at(out, seg, x.values)

    def rule(g):
        return (g[seg],)

    return _emit("segment_sum", (x,), out, rule)


def segment_max(x, segment_ids, n_segments):
    """Max of a vector per bucket; empty buckets are 0 and get no gradient.

    Ties route the gradient to the first maximal element of the bucket.
    """
    x = _as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if x.values.ndim != 1 or seg.shape != x.shape:
        raise ContractViolation(f"segment_max: shape {x.shape} vs {seg.shape} ids")
    n = int(n_segments)
    out = np.full(n, -np.inf)
    np.maximum.at(out, seg, x.values)
    empty = np.isinf(out)
    out[empty] = 0.0

    def rule(g):
        gx = np.zeros_like(x.values)
        if x.values.size:
            hit = x.values == out[seg]
            first = np.full(n, x.values.size, dtype=np.int64)
            np.minimum.at(first, seg[hit], np.nonzero(hit)[0])
            valid = first < x.values.size
            gx[first[valid]] = g[np.nonzero(valid)[0]]
        return (gx,)

    return _emit("segment_max", (x,), out, rule)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ContractViolation(f"concat: shapes {shapes} do not conform on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tuple(tensors), out, rule)


def softmax(x, temperature=1.0):
    """Soft-max over the last axis of logits divided by `temperature`."""
    x = _as_tensor(x)
    t = float(temperature)
    if t <= 0.0:
        raise ContractViolation(f"softmax: temperature {t} must be positive")
    z = x.values / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / t,)

    return _emit("softmax", (x,), out, rule)


def slice_last(x, index):
    """x[..., index] for one integer index along the last axis."""
    x = _as_tensor(x)
    index = int(index)
    if not 0 <= index < x.shape[-1]:
        raise ContractViolation(f"slice_last: index {index} out of range for shape {x.shape}")
    out = x.values[..., index]

    def rule(g):
        gx = np.zeros_like(x.values)
        gx[..., index] = g
        return (gx,)

    return _emit("slice_last", (x,), out, rule)


def transpose2d(x):
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ContractViolation(f"transpose2d: needs a matrix, got shape {x.shape}")

    def rule(g):
        return (g.T,)

    return _emit("transpose2d", (x,), x.values.T.copy(), rule)


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {x.shape} as {shape}")

    def rule(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out.copy(), rule)


def mean(x, axis=None):
    """Arithmetic mean, expressed through sum and scale."""
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape, output):
    """Propagate d(output)/d(node) through the tape in reverse.

    output must be a scalar tensor produced under `tape`. Returns a dict
    mapping every requires_grad tensor touched by the tape (leaves and
    intermediates) to its gradient array; the same arrays are stored on
    each tensor's .grad slot, replacing whatever a previous call left.
    """
    if output.values.size != 1:
        raise ContractViolation(f"backward: output has shape {output.shape}, expected scalar")
    grads = {id(output): np.ones_like(output.values)}
    tensors = {id(output): output}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        in_grads = node.backward_rule(g_out)
        for t, g in zip(node.inputs, in_grads):
            if not t.requires_grad or g is None:
                continue
            key = id(t)
            tensors[key] = t
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=np.float64)
    result = {}
    for key, t in tensors.items():
        if t.requires_grad:
            g = np.broadcast_to(grads[key], t.shape).astype(np.float64, copy=True)
            t.grad = g
            result[t] = g
    return result


def finite_difference_gradient(f, x, eps=1e-5):
    """Central-difference gradient estimate of a scalar function.

    f maps a numpy array of x's shape to a float; eps must be positive.
    This is the reference oracle the gradient tests compare against and
    is deliberately independent of the tape machinery.
    """
    if eps <= 0:
        raise ContractViolation(f"finite_difference_gradient: eps {eps} must be positive")
    x = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
