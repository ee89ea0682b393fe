"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op creates its output through :func:`_record`, which
attaches a :class:`Node` holding the inputs and a backward rule.  Calling
:func:`backward` on a scalar walks the reachable nodes in reverse creation
order and accumulates gradients into the leaf tensors.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "Tape", "ShapeError", "RankError",
    "tensor_new", "elementwise", "add", "sub", "mul", "relu", "sigmoid",
    "tanh", "log", "clip", "scale", "matmul", "linear", "total", "mean",
    "row", "stack", "reshape", "backward", "no_grad", "precision",
    "get_dtype", "finite_difference_grad", "gradient_check",
]


class ShapeError(ValueError):
    pass


class RankError(ValueError):
    pass


class _State:
    dtype = np.float32
    grad_enabled = True


_state = _State()
_counter = itertools.count()


def get_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    The gradient oracles run under ``precision(np.float64)`` so that central
    differences are not swamped by 32-bit rounding.
    """
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("id", "inputs", "output", "rule", "name")

    def __init__(self, inputs, rule, name):
        self.id = next(_counter)
        self.inputs = inputs
        self.rule = rule
        self.name = name
        self.output = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=_state.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError("tensors must have at least one element")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value))


def _record(out_data, inputs: Sequence[Tensor], rule, name) -> Tensor:
    """Wrap ``out_data`` and register a node if any input needs gradients.

    ``rule(g)`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(tuple(inputs), rule, name)
        node.output = out
        out.node = node
    return out


class Tape:
    """Recorded operations reachable from one output, in creation order."""

    def __init__(self, nodes: Iterable[Node] = ()):
        self.nodes = sorted(nodes, key=lambda n: n.id)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = {}
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for t in node.inputs:
                if t.node is not None and t.node.id not in seen:
                    stack.append(t.node)
        return cls(seen.values())

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` below ``loss``.

    Gradients are added to any existing ``.grad`` so repeated calls accumulate.
    Intermediate (non-leaf) gradients are discarded once consumed.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return Tape()
    if loss.node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return Tape()
    if tape is None:
        tape = Tape.from_output(loss)
    grads = {loss.node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        in_grads = node.rule(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate(t, gi)
            else:
                key = t.node.id
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    return tape


def _accumulate(t: Tensor, g):
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# construction

def tensor_new(shape, init="zeros", *, value=0.0, lo=0.0, hi=1.0, mu=0.0,
               sigma=1.0, seed=None, requires_grad=False, name=None) -> Tensor:
    """Create a tensor of ``shape`` filled by ``init``.

    ``init`` is one of ``zeros``, ``ones``, ``constant``, ``uniform``, ``normal``.
    Random fills draw from ``numpy.random.default_rng(seed)``.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {list(shape)}")
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "constant":
        data = np.full(shape, value)
    elif init == "uniform":
        if not lo < hi:
            raise ValueError(f"uniform init needs lo < hi, got {lo}, {hi}")
        data = np.random.default_rng(seed).uniform(lo, hi, size=shape)
    elif init == "normal":
        if sigma < 0:
            raise ValueError("normal init needs sigma >= 0")
        data = np.random.default_rng(seed).normal(mu, sigma, size=shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows, unlike 1 / (1 + exp(-x)) for large negative x
    half = a.data.dtype.type(0.5)
    s = half * (np.tanh(a.data * half) + 1)
    return _record(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record(np.clip(x, lo, hi).astype(x.dtype), (a,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op in _ELEMENTWISE:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape[1]} and {b.shape[0]} differ")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [in] or [n, in]."""
    xd, wd = x.data, weight.data
    if wd.ndim != 2 or xd.ndim not in (1, 2) or xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear: input {list(x.shape)} does not fit weight {list(weight.shape)}")
    if bias is not None and bias.shape != (wd.shape[0],):
        raise ShapeError(f"linear: bias {list(bias.shape)} does not fit weight {list(weight.shape)}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def rule(g):
        gx = g @ wd
        if xd.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, rule, "linear")


def total(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _record(a.data.sum().reshape(1), (a,),
                   lambda g: (np.broadcast_to(g.reshape(()), shape),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.data.shape, a.data.size
    return _record((a.data.sum() / n).reshape(1).astype(a.data.dtype), (a,),
                   lambda g: (np.broadcast_to(g.reshape(()) / n, shape),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def row(a: Tensor, i: int) -> Tensor:
    """Row ``i`` of a rank-2 tensor as a rank-1 tensor."""
    shape = a.data.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _record(a.data[i], (a,), rule, "row")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("stack of nothing")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError("stack: shapes differ")
    out = np.stack([t.data for t in tensors])
    return _record(out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


# ---------------------------------------------------------------------------
# oracles

def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``; ``x.data`` is restored.

    The probe points are formed on a float64 copy of ``x`` so that ``x +- eps``
    is exact; ops downstream of ``x`` then upcast.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = x.data
    x.data = saved.astype(np.float64)
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    try:
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
                flat[i] = orig
                out[i] = (fp - fm) / (2 * eps)
    finally:
        x.data = saved
    return Tensor(out.reshape(x.shape))


def gradient_check(f: Callable[[], Tensor], params: dict, eps: float = 1e-6,
                   floor: float = 1e-4) -> dict:
    """Compare autodiff and central differences for every tensor in ``params``.

    ``f`` recomputes the scalar loss from the current parameter values.
    Returns ``{name: max relative error}`` over coordinates with |grad| > floor.
    """
    for p in params.values():
        p.grad = None
    backward(f())
    report = {}
    for name, p in params.items():
        auto = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        numeric = finite_difference_grad(lambda _x: f(), p, eps).data.astype(np.float64)
        mask = (np.abs(auto) > floor) | (np.abs(numeric) > floor)
        if not mask.any():
            report[name] = 0.0
            continue
        denom = np.maximum(np.abs(auto[mask]), np.abs(numeric[mask]))
        report[name] = float(np.max(np.abs(auto[mask] - numeric[mask]) / denom))
    return report
