"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when any input
requires a gradient, appends a record to the active :class:`Tape`.  Calling
:func:`backward` on a scalar walks the tape in reverse and accumulates
``d(loss)/d(leaf)`` into ``leaf.grad``.

Slices copy, reductions run in a fixed order, and nothing mutates a tensor's
values after creation, so forward passes are bitwise reproducible.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Input shapes do not conform to a primitive's rule."""

    def __init__(self, op_kind: str, *shapes):
        self.op_kind = op_kind
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op_kind}: incompatible shapes {desc}")


class ContractError(ValueError):
    pass


class Tensor:
    """An immutable float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64, order="C")
        out.requires_grad = requires_grad
        out.grad = None
        out.is_leaf = not requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Record:
    inputs: tuple
    outputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered log of primitive applications that need gradients."""

    records: list = field(default_factory=list)
    enabled: bool = True

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    """Disable recording; results never require gradients."""
    tape = active_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*inputs: Tensor) -> bool:
    return active_tape().enabled and any(t.requires_grad for t in inputs)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    track = _needs_grad(*inputs)
    out = Tensor._result(data, track)
    if track:
        active_tape().records.append(_Record(tuple(inputs), (out,), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op_kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op_kind, a.shape, b.shape) from None


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise_mul", a, b)
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.data, b.data
    out = av / bv
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Tensor:
    """numpy ``matmul`` semantics, including broadcast batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None
    av, bv = a.data, b.data

    def backward(g):
        if bv.ndim == 2:
            # fold batch dims into rows: one gemm instead of a stack of them
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _emit(av @ bv, (a, b), backward)


# elementwise unary ops

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    xv = x.data
    neg = alpha * np.expm1(np.minimum(xv, 0.0))
    out = np.where(xv > 0, xv, neg)
    return _emit(out, (x,), lambda g: (g * np.where(xv > 0, 1.0, neg + alpha),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.data
    return _emit(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (g * 0.5 / out,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    xv = x.data
    return _emit(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


# normalizations

def softmax(x) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries receive exactly zero mass."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit(out, (x,), backward)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit population variance."""
    x = as_tensor(x)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gx = np.mean(g * xhat, axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit(xhat, (x,), backward)


# shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", src, tuple(shape)) from None
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError("concat_lastdim", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError("stack", *(x.shape for x in xs)) from None
    n = len(xs)
    return _emit(out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def split(x, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into equal pieces; one tape record covers every piece."""
    x = as_tensor(x)
    if x.shape[axis] % sections:
        raise DimensionError("split", x.shape, (sections,))
    pieces = [np.asarray(p, order="C") for p in np.split(x.data, sections, axis=axis)]
    track = _needs_grad(x)
    outs = tuple(Tensor._result(p, track) for p in pieces)
    if track:
        def backward(gs):
            filled = [g if g is not None else np.zeros_like(p) for g, p in zip(gs, pieces)]
            return (np.concatenate(filled, axis=axis),)
        active_tape().records.append(_Record((x,), outs, backward))
    return list(outs)


def unstack(x, axis: int = 0) -> list[Tensor]:
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    pieces = [np.asarray(np.take(x.data, i, axis=axis), order="C") for i in range(n)]
    track = _needs_grad(x)
    outs = tuple(Tensor._result(p, track) for p in pieces)
    if track:
        def backward(gs):
            filled = [g if g is not None else np.zeros_like(p) for g, p in zip(gs, pieces)]
            return (np.stack(filled, axis=axis),)
        active_tape().records.append(_Record((x,), outs, backward))
    return list(outs)


def slice_(x, key) -> Tensor:
    """Copying slice (basic or integer-array indexing)."""
    x = as_tensor(x)
    try:
        out = np.array(x.data[key], dtype=np.float64, copy=True)
    except IndexError:
        raise DimensionError("slice", x.shape, (str(key),)) from None
    shape = x.shape
    fancy = isinstance(key, (list, np.ndarray)) or (
        isinstance(key, tuple) and any(isinstance(k, (list, np.ndarray)) for k in key))

    def backward(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _emit(out, (x,), backward)


def where_mask(x, mask: np.ndarray, fill: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    x = as_tensor(x)
    mask = np.broadcast_to(mask, x.shape)
    out = np.where(mask, fill, x.data)
    return _emit(out, (x,), lambda g: (np.where(mask, 0.0, g),))


# stochastic / lookup

def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(table, indices) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise DimensionError("embedding_lookup", table.shape, idx.shape)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(table.data[idx], (table,), backward)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "elu": elu,
    "softmax_lastdim": softmax,
    "layer_norm_lastdim": layer_norm,
    "concat_lastdim": lambda *xs: concat(xs, axis=-1),
    "slice": slice_,
    "dropout": dropout,
    "embedding_lookup": embedding,
}


def forward_primitive(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply a primitive by name, e.g. ``forward_primitive("tanh", [x])``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown op_kind {op_kind!r}") from None
    if op_kind == "slice":
        return fn(inputs[0], kwargs["key"])
    if op_kind == "dropout":
        return fn(inputs[0], kwargs.get("rate", 0.1), kwargs.get("rng"), kwargs.get("train", True))
    if op_kind == "embedding_lookup":
        return fn(inputs[0], inputs[1])
    return fn(*inputs, **kwargs)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf, consuming the tape."""
    tape = tape or active_tape()
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        tape.clear()
        return
    if not tape.records:
        raise ContractError("backward called on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for rec in reversed(tape.records):
        outs = [grads.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in outs):
            continue
        in_grads = rec.backward(outs if len(rec.outputs) > 1 else outs[0])
        for inp, g in zip(rec.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
    tape.clear()


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_leaf: int | None
    worst_index: tuple | None
    analytic: float
    numeric: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max rel err {self.max_rel_error:.3e} at leaf {self.worst_leaf} "
                f"index {self.worst_index} (analytic {self.analytic:.6e}, numeric {self.numeric:.6e})")


def grad_check(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], tolerance: float,
               h: float = 1e-5, floor: float = 1e-6,
               max_coords: int | None = None, seed: int = 0, order: int = 2) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    The relative error at a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true gradient is ~0 from dividing noise
    by noise.  ``max_coords`` checks a seeded subset of coordinates per leaf.
    ``order=4`` uses the five-point stencil, whose smaller truncation error
    allows a larger ``h`` and so less cancellation noise on tiny gradients.
    """
    if order not in (2, 4):
        raise ContractError(f"finite-difference order must be 2 or 4, got {order}")
    for leaf in leaves:
        leaf.grad = None
    active_tape().clear()
    loss = loss_fn()
    backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]
    rng = np.random.default_rng(seed)

    worst = (0.0, None, None, 0.0, 0.0)
    with no_grad():
        for li, leaf in enumerate(leaves):
            flat = leaf.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for c in coords:
                orig = flat[c]

                def at(offset):
                    flat[c] = orig + offset
                    return loss_fn().item()

                if order == 2:
                    num = (at(h) - at(-h)) / (2.0 * h)
                else:
                    num = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
                flat[c] = orig
                ana = analytic[li].reshape(-1)[c]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                if err > worst[0] or worst[1] is None:
                    worst = (err, li, np.unravel_index(c, leaf.shape), ana, num)
    err, li, idx, ana, num = worst
    return GradCheckReport(err < tolerance, float(err), li,
                           tuple(int(i) for i in idx) if idx is not None else None,
                           float(ana), float(num))
