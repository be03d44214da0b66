"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op appends a record ``(inputs, output, backward)`` to the
active :class:`Tape`.  Gradients are produced by replaying the records in
reverse order.  Backward rules are themselves written with tensor ops, so a
replay with ``create_graph=True`` records a differentiable graph of the
gradient; that is what Hessian-vector products use.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import InputError, ShapeError


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered list of recorded operations."""

    def __init__(self):
        self.records: list[Node] = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


class _State:
    grad_enabled = True
    tape = Tape()


def get_tape() -> Tape:
    return _State.tape


def is_grad_enabled() -> bool:
    return _State.grad_enabled


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = _State.grad_enabled
    _State.grad_enabled = enabled
    try:
        yield
    finally:
        _State.grad_enabled = prev


def no_grad():
    return grad_mode(False)


@contextlib.contextmanager
def use_tape(tape: Tape):
    """Record into (and replay from) ``tape`` for the duration of the block."""
    prev = _State.tape
    _State.tape = tape
    try:
        yield tape
    finally:
        _State.tape = prev


def fresh_tape():
    """Run a block against a private tape, restoring the previous one after."""
    return use_tape(Tape())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.is_leaf = True
        self.name = name

    @classmethod
    def _wrap(cls, data) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.is_leaf = True
        t.name = None
        return t

    # -- convenience -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad=None):
        backward(self, grad)

    # -- operators -------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor._wrap(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _record(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _State.grad_enabled:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                out.is_leaf = False
                _State.tape.records.append(Node(tuple(inputs), out, backward))
                break
    return out


def custom_op(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Public hook for ops defined outside this module (e.g. the quantizer)."""
    return _record(data, inputs, backward)


# -- gradient replay ------------------------------------------------------


def _replay(outputs, seeds, keep: set[int], create_graph: bool, tape: Tape):
    grads: dict[int, Tensor] = {}
    for o, s in zip(outputs, seeds):
        k = id(o)
        grads[k] = grads[k] + s if k in grads else s
    leaves: dict[int, Tensor] = {}
    records = list(tape.records)
    with grad_mode(create_graph):
        for node in reversed(records):
            k = id(node.output)
            g = grads.get(k) if k in keep else grads.pop(k, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                ki = id(inp)
                if inp.is_leaf:
                    leaves[ki] = inp
                prev = grads.get(ki)
                grads[ki] = gi if prev is None else prev + gi
    return grads, leaves


def backward(loss: Tensor, grad=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` (numpy) for every leaf on the path."""
    if not loss.requires_grad:
        raise InputError("backward() called on a tensor that does not require grad")
    seed = Tensor._wrap(np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype))
    grads, leaves = _replay([loss], [seed], set(), False, _State.tape)
    for k, leaf in leaves.items():
        g = grads[k].data
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False) -> list[Tensor]:
    """Return d(outputs)/d(inputs) weighted by ``grad_outputs`` without touching ``.grad``.

    The tape is left intact, so repeated calls (as in power iteration) reuse it.
    Inputs not reachable from the outputs get an all-zero gradient.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    if grad_outputs is None:
        grad_outputs = [None] * len(outputs)
    seeds = []
    for o, g in zip(outputs, grad_outputs):
        if g is None:
            seeds.append(Tensor._wrap(np.ones_like(o.data)))
        else:
            seeds.append(as_tensor(g, like=o))
    keep = {id(t) for t in inputs}
    grads, _ = _replay(list(outputs), seeds, keep, create_graph, _State.tape)
    res = []
    for t in inputs:
        g = grads.get(id(t))
        res.append(Tensor._wrap(np.zeros_like(t.data)) if g is None else g)
    return res


# -- broadcasting helpers --------------------------------------------------


def sum_to(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and g.shape[lead + i] != 1:
            axes.append(lead + i)
    r = sum_(g, tuple(axes), keepdims=True) if axes else g
    return reshape(r, shape)


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return sum_to(g, sa), sum_to(g, sb)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return sum_to(g, sa), sum_to(neg(g), sb)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _record(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (neg(g),))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _record(a.data ** a.dtype.type(p), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    holder = {}

    def bw(g):
        return (mul(g, holder["out"]),)

    out = _record(out_data, (a,), bw)
    holder["out"] = out
    return out


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (div(g, a),))


def relu(a: Tensor) -> Tensor:
    mask = Tensor._wrap((a.data > 0).astype(a.dtype))
    return _record(a.data * mask.data, (a,), lambda g: (mul(g, mask),))


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient to the mask)."""
    m = Tensor._wrap(np.asarray(mask, dtype=a.dtype))
    return mul(a, m)


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    data = np.broadcast_to(a.data, shape)
    return _record(data, (a,), lambda g: (sum_to(g, src),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kshape = tuple(1 if i in axes else s for i, s in enumerate(src))

    def bw(g):
        if not keepdims:
            g = reshape(g, kshape)
        return (broadcast_to(g, src),)

    return _record(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw)


def im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    shape = x.shape
    cols = _kernels.im2col(x.data, kh, kw, stride, pad)
    return _record(cols, (x,), lambda g: (col2im(g, shape, kh, kw, stride, pad),))


def col2im(cols: Tensor, x_shape, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    data = _kernels.col2im(cols.data, x_shape, kh, kw, stride, pad)
    return _record(data, (cols,), lambda g: (im2col(g, kh, kw, stride, pad),))


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and FCkk weight, via im2col + matmul."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    try:
        ho = _kernels.out_extent(h, kh, stride, padding)
        wo = _kernels.out_extent(w, kw, stride, padding)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    cols = im2col(x, kh, kw, stride, padding)
    out = matmul(reshape(weight, (f, c * kh * kw)), cols)
    return transpose(reshape(out, (f, n, ho, wo)), (1, 0, 2, 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Fused training-mode batch norm over all axes but 1.

    Returns ``(out, batch_mean, batch_var)`` with the biased variance.  The
    backward rule is first-order only: the Hessian code paths evaluate batch
    norm with frozen running statistics instead.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        if _State.grad_enabled:
            raise NotImplementedError("training-mode batch norm has no second-order rule")
        gy = g.data
        dbeta = gy.sum(axis=axes)
        dgamma = (gy * xhat).sum(axis=axes)
        dx = (gd * inv / count) * (count * gy - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape))
        return Tensor._wrap(dx), Tensor._wrap(dgamma), Tensor._wrap(dbeta)

    out_t = _record(out, (x, gamma, beta), bw)
    return out_t, mu.reshape(-1), var.reshape(-1)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# -- losses ----------------------------------------------------------------


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    return labels


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    shift = Tensor._wrap(np.max(logits.data, axis=axis, keepdims=True))
    z = sub(logits, shift)
    lse = log(sum_(exp(z), axis=axis, keepdims=True))
    return sub(z, lse)


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, k)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    picked = sum_(mask_mul(log_softmax(logits), onehot))
    return mul(picked, -1.0 / n)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    tot = 0.0
    for p in params:
        if p.grad is not None:
            tot += float(np.sum(p.grad.astype(np.float64) ** 2))
    return tot ** 0.5
