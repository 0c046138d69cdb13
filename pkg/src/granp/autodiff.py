"""Reverse-mode automatic differentiation over dense numpy arrays.

A dynamic tape records primitive applications during the forward pass;
``backward`` replays it in reverse to accumulate gradients. The precision
(float32 for training, float64 for gradient checks) is a global run
configuration, not a per-tensor property.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, NumericError, ShapeError, UnknownOpError

# ---------------------------------------------------------------------------
# Precision configuration

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = "f32"


def set_precision(name: str) -> None:
    """Set the global floating-point precision ("f32" or "f64")."""
    global _precision
    if name not in _DTYPES:
        raise DataError(f"unknown precision {name!r}; expected 'f32' or 'f64'")
    _precision = name


def get_precision() -> str:
    return _precision


def dtype() -> np.dtype:
    """Numpy dtype for the current global precision."""
    return np.dtype(_DTYPES[_precision])


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision."""
    prev = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


# ---------------------------------------------------------------------------
# Tensor / Tape / Parameter

class Tensor:
    """Dense multi-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, astensor(other))

    def __radd__(self, other):
        return add(astensor(other), self)

    def __sub__(self, other):
        return sub(self, astensor(other))

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __mul__(self, other):
        return mul(self, astensor(other))

    def __rmul__(self, other):
        return mul(astensor(other), self)

    def __truediv__(self, other):
        return div(self, astensor(other))

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __matmul__(self, other):
        return matmul(self, astensor(other))

    def __neg__(self):
        return mul(self, astensor(-1.0))

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def astensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype()))


def constant(x) -> Tensor:
    """Non-trainable tensor in the current precision."""
    return Tensor(np.asarray(x, dtype=dtype()))


class Parameter:
    """Named trainable tensor with an accumulated-gradient slot."""

    __slots__ = ("name", "tensor", "grad")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=dtype()), requires_grad=True)
        self.grad = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.tensor.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in execution order, which is a valid topological
    order; ``backward`` walks the list once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: [a,b] x [b,c] -> [a,c]; leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    try:
        out = Tensor(a.data @ b.data)
    except ValueError:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """1-D convolution, zero same-padding, stride 1.

    x: [batch, in_channels, T]; w: [out_channels, in_channels, k].
    Output: [batch, out_channels, T] (length preserved exactly).
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch between x {x.shape} and w {w.shape}")
    k = w.shape[2]
    t = x.shape[2]
    pad_l = (k - 1) // 2
    pad_r = k - 1 - pad_l
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_l, pad_r)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # [B, C, T, k]
    out = Tensor(np.einsum("bctk,ock->bot", win, w.data, optimize=True))

    def bwd(g):
        gw = np.einsum("bot,bctk->ock", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for dk in range(k):
            gxp[:, :, dk:dk + t] += np.einsum("bot,oc->bct", g, w.data[:, :, dk], optimize=True)
        gx = gxp[:, :, pad_l:pad_l + t]
        return gx, gw

    return _record(out, (x, w), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back."""
    out = Tensor(x.data[key])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return _record(out, (x,), lambda g: (g * out.data,))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(1.0 / (1.0 + np.exp(-x.data)))
    return _record(out, (x,), lambda g: (g * out.data * (1.0 - out.data),))


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    return _record(out, (x,), lambda g: (g * (1.0 - out.data * out.data),))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    return _record(out, (x,), lambda g: (g * (x.data > 0),))


LEAKY_SLOPE = 0.2  # canonical negative slope for graph-attention scoring


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))
    return _record(out, (x,), lambda g: (g * np.where(x.data > 0, 1.0, slope),))


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data))
    return _record(out, (x,), lambda g: (g / (1.0 + np.exp(-x.data)),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis; each row sums to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def bwd(g):
        s = out.data
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Generic dispatch

_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul, "conv1d": conv1d}
_UNARY = {
    "exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh, "relu": relu,
    "softplus": softplus, "softmax_rows": softmax_rows,
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply a primitive by name; records on the active tape."""
    attrs = attrs or {}
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ShapeError(f"{kind}: expected 2 inputs, got {len(inputs)}")
        return _BINARY[kind](inputs[0], inputs[1])
    if kind in _UNARY:
        if len(inputs) != 1:
            raise ShapeError(f"{kind}: expected 1 input, got {len(inputs)}")
        return _UNARY[kind](inputs[0])
    if kind == "leaky_relu":
        if len(inputs) != 1:
            raise ShapeError("leaky_relu: expected 1 input")
        return leaky_relu(inputs[0], attrs.get("slope", LEAKY_SLOPE))
    if kind == "concat":
        return concat(inputs, axis=attrs.get("axis", 0))
    if kind == "slice":
        return slice_(inputs[0], attrs["key"])
    if kind == "reshape":
        return reshape(inputs[0], attrs["shape"])
    if kind == "transpose":
        return transpose(inputs[0], attrs.get("axes"))
    if kind == "sum":
        return reduce_sum(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if kind == "mean":
        return reduce_mean(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    raise UnknownOpError(f"unknown primitive kind {kind!r}")


# ---------------------------------------------------------------------------
# Backward pass and gradient checking

def backward(tape: Tape, root: Tensor,
             params: Optional[Iterable[Parameter]] = None) -> dict[str, np.ndarray]:
    """Accumulate gradients of a scalar root through the tape.

    Returns a map of Parameter name to gradient; Parameters unreachable
    from the root receive zeros. Every visited tensor also gets its
    ``.grad`` field set.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for t, ig in zip(node.inputs, node.bwd(g)):
            if not t.requires_grad or ig is None:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = ig if acc is None else acc + ig
        if node.out is not root:
            del grads[id(node.out)]  # intermediate; free once consumed

    out: dict[str, np.ndarray] = {}
    if params is not None:
        for p in params:
            g = grads.get(id(p.tensor))
            p.grad = p.grad + g if g is not None else p.grad
            out[p.name] = np.zeros_like(p.tensor.data) if g is None else g
    # expose .grad on leaf tensors touched by the traversal (tests, debugging)
    seen_out = {id(n.out) for n in tape.nodes}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in seen_out and id(t) in grads:
                t.grad = grads[id(t)]
    return out


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter],
               perturbation: float = 1e-5) -> dict[str, float]:
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` must evaluate a scalar objective from the current values of
    ``params``. Requires the global precision to be f64. Returns, per
    Parameter, max over entries of |g_ad - g_fd| / max(|g_fd|, 1e-8).
    """
    if get_precision() != "f64":
        raise DataError("grad_check requires the global precision to be f64")
    for p in params:
        if p.tensor.data.dtype != np.float64:
            raise DataError(f"grad_check: parameter {p.name!r} is not float64")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        value = fn()
    if not np.isfinite(value.data).all():
        raise NumericError("grad_check: objective is not finite")
    analytic = backward(tape, value, params)

    h = perturbation
    errors: dict[str, float] = {}
    for p in params:
        flat = p.tensor.data.reshape(-1)
        g_ad = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"grad_check: non-finite objective perturbing {p.name!r}")
            g_fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(g_ad[i] - g_fd) / max(abs(g_fd), 1e-8)
            worst = max(worst, rel)
        errors[p.name] = worst
    return errors
