"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a node on the active :class:`Tape`.
Backward rules are themselves written with tensor operations, so running
:func:`grad` with ``create_graph=True`` records a differentiable graph of
the gradient (needed for the critic's gradient penalty). Primitives whose
rule drops out to raw numpy are flagged ``higher_order=False`` and refuse a
second differentiation pass.

Nothing is recorded unless a tape is active::

    with Tape():
        w = Tensor([3.0], requires_grad=True)
        loss = (w * w).sum()
        backward(loss)
    w.grad  # array([6.])
"""
from __future__ import annotations

import builtins
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "Node", "ShapeError", "NonFiniteError",
    "as_tensor", "no_grad", "active_tape",
    "add", "sub", "mul", "div", "neg", "scale", "relu", "leaky_relu", "tanh",
    "abs", "sqrt", "elementwise", "broadcast_to", "sum_to", "reduce", "sum", "mean",
    "reshape", "transpose", "getitem", "concat", "matmul", "linear", "conv2d",
    "avg_pool2d", "upsample_nearest2d", "backward", "grad", "grad_check",
    "check_finite", "make_op",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = _grad_enabled()
    _local.grad_enabled = enabled
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    """Context manager that suspends recording on any active tape."""
    return _grad_mode(False)


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("index", "op", "inputs", "output", "backward_fn", "tape", "higher_order")

    def __init__(self, index, op, inputs, output, backward_fn, tape, higher_order):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape
        self.higher_order = higher_order

    def __repr__(self):
        return f"Node({self.index}, {self.op!r}, out={self.output.shape})"


class Tape:
    """Append-only record of primitive operations.

    Use as a context manager; tapes nest, and the innermost one records.
    ``backward_calls`` counts how many backward rules have been invoked.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.backward_calls = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn, higher_order=True) -> Node:
        node = Node(len(self.nodes), op, tuple(inputs), output, backward_fn, self, higher_order)
        self.nodes.append(node)
        return node

    def first_nonfinite(self) -> Node | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None

    def leaves(self) -> list["Tensor"]:
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.node is None and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


class Tensor:
    """n-d float64 array with an optional handle into the tape that made it."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable and arr.base is None:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
            higher_order: bool = True) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op`` and record it if needed.

    ``backward_fn(g, out)`` receives the output gradient as a Tensor and
    returns one Tensor (or None) per input.
    """
    out = Tensor._wrap(data)
    if _grad_enabled():
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = tape.record(op, inputs, out, backward_fn, higher_order)
    return out


# -- broadcasting ------------------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    data = np.broadcast_to(a.data, shape)
    return make_op("broadcast_to", data, (a,), lambda g, out: (sum_to(g, a.shape),))


def _sum_to_data(x: np.ndarray, shape: tuple) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return make_op("sum_to", _sum_to_data(a.data, shape), (a,),
                   lambda g, out: (broadcast_to(g, a.shape),))


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return make_op("add", a.data + b.data, (a, b),
                   lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def bw(g, out):
        gb = neg(div(mul(g, out), b))
        return sum_to(div(g, b), a.shape), sum_to(gb, b.shape)

    return make_op("div", a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g, out: (neg(g),))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_op("scale", a.data * c, (a,), lambda g, out: (scale(g, c),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return make_op("relu", a.data * mask, (a,), lambda g, out: (mul(g, Tensor._wrap(mask)),))


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)
    return make_op("leaky_relu", a.data * slope, (a,),
                   lambda g, out: (mul(g, Tensor._wrap(slope)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return make_op("tanh", np.tanh(a.data), (a,),
                   lambda g, out: (mul(g, sub(1.0, mul(out, out))),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_op("abs", np.abs(a.data), (a,), lambda g, out: (mul(g, Tensor._wrap(sign)),))


def sqrt(a) -> Tensor:
    # zero-safe: the derivative at 0 is taken as 0
    a = as_tensor(a)
    y = np.sqrt(a.data)
    coef = np.divide(0.5, y, out=np.zeros_like(y), where=y > 0)
    return make_op("sqrt", y, (a,), lambda g, out: (mul(g, Tensor._wrap(coef)),),
                   higher_order=False)


_UNARY = {"relu": relu, "tanh": tanh, "abs": abs, "neg": neg, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None, *, alpha: float = 0.2, c: float = 1.0) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu, tanh, leaky_relu, abs, neg, sqrt, scale."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "leaky_relu":
        return leaky_relu(a, alpha)
    if op == "scale":
        return scale(a, c)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- shape -------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return make_op("reshape", data, (a,), lambda g, out: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", a.data.transpose(axes), (a,),
                   lambda g, out: (transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    if not _is_basic_index(idx):
        raise TypeError("only basic slicing is differentiable")
    return make_op("getitem", a.data[idx], (a,), lambda g, out: (_scatter(g, a.shape, idx),))


def _scatter(g: Tensor, shape: tuple, idx) -> Tensor:
    data = np.zeros(shape)
    data[idx] = g.data
    return make_op("scatter", data, (g,), lambda gg, out: (getitem(gg, idx),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g, out):
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = (slice(None),) * axis + (slice(int(lo), int(hi)),)
            res.append(getitem(g, idx))
        return tuple(res)

    return make_op("concat", data, ts, bw)


# -- reductions --------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    if not axes:
        return tuple(range(ndim))
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for a tensor of rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, x, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes``. ``None`` or an empty list reduces everything."""
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    if op == "sum":
        data = x.data.sum(axis=axes, keepdims=keepdims)
        return make_op("sum", data, (x,),
                       lambda g, out: (broadcast_to(reshape(g, kept), x.shape),))
    if op == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        return scale(reduce("sum", x, axes, keepdims), 1.0 / count)
    raise ValueError(f"unknown reduction {op!r}")


def sum(x, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axes, keepdims)


def mean(x, axes=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    return make_op("matmul", a.data @ b.data, (a, b),
                   lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def linear(x, w, bias=None) -> Tensor:
    """``x @ w + bias`` for ``x`` of shape N×F and ``w`` of shape F×G."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = matmul(x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {w.shape}")
        y = add(y, bias)
    return y


# -- convolution -------------------------------------------------------------
# conv, its input-gradient and its weight-gradient are the three faces of
# one trilinear form <conv(x, w), y>, so each one's backward is built from
# the other two and the family is closed under differentiation.

def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_data(x, w, stride, pad):
    k = w.shape[2]
    win = _windows(x, k, stride, pad)  # N C Ho Wo K K
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N Ho Wo O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_grad_input_data(gy, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    k = w.shape[2]
    if stride == 1:
        # full correlation with the flipped, transposed kernel
        flipped = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return _conv_data(gy, flipped, 1, k - 1 - pad)
    ho, wo = gy.shape[2], gy.shape[3]
    cols = np.tensordot(gy, w, axes=([1], [0]))  # N Ho Wo C K K
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride] += cols[..., ki, kj].transpose(0, 3, 1, 2)
    return gxp[:, :, pad:pad + h, pad:pad + wd]


def _conv_grad_weight_data(x, gy, w_shape, stride, pad):
    o, c, k, _ = w_shape
    n, _, ho, wo = gy.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, ho, wo))
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = x[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                                kj:kj + stride * (wo - 1) + 1:stride].transpose(1, 0, 2, 3)
    g = gy.transpose(1, 0, 2, 3).reshape(o, -1)
    return (g @ cols.reshape(c * k * k, -1).T).reshape(o, c, k, k)


def _conv(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    return make_op(
        "conv2d", _conv_data(x.data, w.data, stride, pad), (x, w),
        lambda g, out: (_conv_gi(g, w, x.shape, stride, pad),
                        _conv_gw(x, g, w.shape, stride, pad)))


def _conv_gi(gy: Tensor, w: Tensor, x_shape, stride, pad) -> Tensor:
    return make_op(
        "conv2d_grad_input", _conv_grad_input_data(gy.data, w.data, x_shape, stride, pad), (gy, w),
        lambda a, out: (_conv(a, w, stride, pad), _conv_gw(a, gy, w.shape, stride, pad)))


def _conv_gw(x: Tensor, gy: Tensor, w_shape, stride, pad) -> Tensor:
    return make_op(
        "conv2d_grad_weight", _conv_grad_weight_data(x.data, gy.data, w_shape, stride, pad), (x, gy),
        lambda b, out: (_conv_gi(gy, b, x.shape, stride, pad), _conv(x, b, stride, pad)))


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK kernel, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIKK weight, got {x.shape} and {w.shape}")
    o, i, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if x.shape[1] != i:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {i}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    ho = _conv_out_size(x.shape[2], k, stride, pad)
    wo = _conv_out_size(x.shape[3], k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}")
    y = _conv(x, w, stride, pad)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return y


def avg_pool2d(x, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: {h}x{w} is not divisible by {factor}")
    r = reshape(x, (n, c, h // factor, factor, w // factor, factor))
    return reduce("mean", r, (3, 5))


def upsample_nearest2d(x, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    r = broadcast_to(reshape(x, (n, c, h, 1, w, 1)), (n, c, h, factor, w, factor))
    return reshape(r, (n, c, h * factor, w * factor))


# -- differentiation ---------------------------------------------------------

@contextmanager
def _recording_on(tape):
    if tape is None:
        yield
        return
    with tape:
        yield


def _accumulate(store: dict, key, tensor: Tensor, value: Tensor):
    if key in store:
        store[key] = (tensor, add(store[key][1], value))
    else:
        store[key] = (tensor, value)


def _run_backward(loss: Tensor, create_graph: bool) -> dict:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = Tensor._wrap(np.ones(loss.shape))
    if loss.node is None:
        if loss.requires_grad:
            return {id(loss): (loss, seed)}
        raise ValueError("loss was not produced under an active tape")
    tape = loss.node.tape
    pending = {id(loss.node): seed}
    leaves: dict = {}
    with _grad_mode(create_graph), _recording_on(tape if create_graph else None):
        for node in reversed(tape.nodes[:loss.node.index + 1]):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if create_graph and not node.higher_order:
                raise NotImplementedError(f"{node.op} does not support second-order gradients")
            tape.backward_calls += 1
            in_grads = node.backward_fn(g, node.output)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is not None:
                    key = id(inp.node)
                    pending[key] = add(pending[key], gi) if key in pending else gi
                else:
                    _accumulate(leaves, id(inp), inp, gi)
    return leaves


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves recorded on the tape but not reached get a zero gradient.
    """
    leaves = _run_backward(loss, create_graph)
    for leaf, g in leaves.values():
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data
    if loss.node is not None:
        for leaf in loss.node.tape.leaves():
            if leaf.grad is None:
                leaf.grad = np.zeros(leaf.shape)


def grad(loss: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``loss`` with respect to ``inputs`` without touching ``.grad``."""
    leaves = _run_backward(loss, create_graph)
    out = []
    for t in inputs:
        if id(t) in leaves:
            out.append(leaves[id(t)][1])
        else:
            out.append(Tensor._wrap(np.zeros(t.shape)))
    return out


def check_finite(loss: Tensor, what: str = "loss") -> None:
    """Raise :class:`NonFiniteError` naming the first op that produced NaN/Inf."""
    if np.all(np.isfinite(loss.data)):
        return
    culprit = loss.node.tape.first_nonfinite() if loss.node is not None else None
    where = f"; first offending op: {culprit.op} (node {culprit.index})" if culprit else ""
    raise NonFiniteError(f"non-finite {what}{where}")


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Compare tape gradients of scalar ``f`` at ``x`` against central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    with Tape():
        leaf = Tensor(x0, requires_grad=True)
        out = f(leaf)
        check_finite(out, "function value")
        (analytic,) = grad(out, [leaf])
    analytic = analytic.data.reshape(-1)
    numeric = np.empty(x0.size)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = xp.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        numeric[i] = (fp - fm) / (2 * h)
    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng=None) -> float:
    """Finite-difference check of ``loss_fn`` w.r.t. parameter tensors in place.

    ``max_coords`` limits the number of sampled coordinates per parameter.
    """
    params = list(params)
    with Tape():
        loss = loss_fn()
        check_finite(loss)
        analytic = grad(loss, params)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for p, g in zip(params, analytic):
        base = p.data
        n = base.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else \
            rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            vals = []
            for d in (h, -h):
                pert = base.copy().reshape(-1)
                pert[i] += d
                p.data = pert.reshape(base.shape)
                with Tape():  # a throwaway tape lets losses that differentiate internally run
                    vals.append(loss_fn().item())
            p.data = base
            num = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, builtins.abs(g.data.reshape(-1)[i] - num) / max(1.0, builtins.abs(num)))
    return worst
