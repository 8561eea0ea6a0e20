"""Dense tensors with a reverse-mode tape and finite-difference Hessian-vector products.

Every tracked tensor records one node on a :class:`Tape`.  Nodes are appended
in evaluation order, so a single reverse sweep over node ids visits each node
once, after all of its consumers.

    >>> tape = Tape()
    >>> w = tape.watch([3.0, 4.0])
    >>> loss = scale(sum_(mul(w, w)), 0.5)
    >>> backward(tape, loss)[w.node]
    array([3., 4.])
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "NumericOverflowError",
    "Tensor",
    "Tape",
    "ParamVector",
    "checked",
    "is_checked",
    "forward_op",
    "backward",
    "value_and_grad",
    "hvp",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "relu",
    "exp",
    "log",
    "sum_",
    "mean",
    "log_softmax",
    "softmax",
    "pick",
    "clamp_min",
    "reshape",
    "transpose",
    "cast",
]


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class NumericOverflowError(ArithmeticError):
    """A non-finite value appeared while checked mode was on."""


_CHECKED = True


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(flag: bool = True) -> Iterator[None]:
    """Temporarily switch finite-value assertions on or off."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = flag
    try:
        yield
    finally:
        _CHECKED = previous


def _assert_finite(data: np.ndarray, what: str) -> None:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NumericOverflowError(f"non-finite value produced by {what}")


@dataclass
class _Node:
    kind: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of tracked operations."""

    nodes: list[_Node] = field(default_factory=list)

    def _append(self, kind, parents, vjp, shape) -> int:
        assert all(p < len(self.nodes) for p in parents)
        self.nodes.append(_Node(kind, tuple(parents), vjp, tuple(shape)))
        return len(self.nodes) - 1

    def watch(self, data, name: str = "leaf") -> "Tensor":
        """Register ``data`` as a tracked leaf and return it as a tensor."""
        arr = np.array(data, dtype=np.float64)
        t = Tensor(arr)
        t.tape = self
        t.node = self._append(f"leaf:{name}", (), None, arr.shape)
        return t

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if not n.parents and n.vjp is None]


class Tensor:
    """A float array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        _assert_finite(arr, "tensor construction")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor({self.data!r}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tapes = {id(t.tape): t.tape for t in inputs if t.tracked}
    if len(tapes) > 1:
        raise ContractViolation("inputs are recorded on different tapes")
    return next(iter(tapes.values()), None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0)


def _check_elementwise(kind: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa[1:] == sb or sb[1:] == sa:
        return
    raise ContractViolation(f"{kind}: shapes {sa} and {sb} do not conform")


# Each forward rule returns (value, vjp) where vjp maps the output cotangent to
# one cotangent per input.

def _f_add(a, b):
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape
    return a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))


def _f_sub(a, b):
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))


def _f_mul(a, b):
    _check_elementwise("mul", a, b)
    x, y = a.data, b.data
    return x * y, lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))


def _f_neg(a):
    return -a.data, lambda g: (-g,)


def _f_scale(a, *, c: float):
    return a.data * c, lambda g: (g * c,)


def _f_matmul(a, b):
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ContractViolation(f"matmul: shapes {x.shape} and {y.shape} do not conform")
    return x @ y, lambda g: (g @ y.T, x.T @ g)


def _f_relu(a):
    mask = a.data > 0
    return np.where(mask, a.data, 0.0), lambda g: (g * mask,)


def _f_exp(a):
    with np.errstate(over="ignore"):  # overflow is reported by checked mode
        out = np.exp(a.data)
    return out, lambda g: (g * out,)


def _f_log(a):
    x = a.data
    if np.any(x <= 0):
        raise ContractViolation("log: argument must be strictly positive")
    return np.log(x), lambda g: (g / x,)


def _f_sum(a, *, axis=None):
    shape = a.shape
    if axis is None:
        return np.sum(a.data), lambda g: (np.broadcast_to(g, shape).copy(),)
    out = np.sum(a.data, axis=axis)
    return out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def _f_log_softmax(a):
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return out, lambda g: (g - probs * g.sum(axis=-1, keepdims=True),)


def _f_softmax(a):
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _f_pick(a, *, index):
    x = a.data
    if x.ndim != 2 or len(index) != x.shape[0]:
        raise ContractViolation(f"pick: need (batch, C) input and batch indices, got {x.shape}")
    rows = np.arange(x.shape[0])
    idx = np.asarray(index, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(x)
        out[rows, idx] = g
        return (out,)

    return x[rows, idx], vjp


def _f_clamp_min(a, *, floor: float):
    keep = a.data >= floor
    return np.where(keep, a.data, floor), lambda g: (g * keep,)


def _f_reshape(a, *, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return out, lambda g: (g.reshape(old),)


def _f_transpose(a):
    if a.data.ndim != 2:
        raise ContractViolation(f"transpose needs a 2-D input, got {a.shape}")
    return a.data.T, lambda g: (g.T,)


def _f_cast(a, *, fn):
    # Value rounding with a straight-through gradient.
    return fn(a.data), lambda g: (g,)


_RULES: dict[str, Callable] = {
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "neg": _f_neg,
    "scale": _f_scale,
    "matmul": _f_matmul,
    "relu": _f_relu,
    "exp": _f_exp,
    "log": _f_log,
    "sum": _f_sum,
    "log_softmax": _f_log_softmax,
    "softmax": _f_softmax,
    "pick": _f_pick,
    "clamp_min": _f_clamp_min,
    "reshape": _f_reshape,
    "transpose": _f_transpose,
    "cast": _f_cast,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate one primitive and, if any input is tracked, record it on the tape."""
    try:
        rule = _RULES[kind]
    except KeyError:
        raise ContractViolation(f"unknown op kind {kind!r}") from None
    ts = [_as_tensor(x) for x in inputs]
    value, vjp = rule(*ts, **attrs)
    value = np.asarray(value, dtype=np.float64)
    _assert_finite(value, kind)
    tape = _tape_of(ts)
    out = Tensor.__new__(Tensor)
    out.data, out.tape, out.node = value, None, None
    if tape is None:
        return out
    tracked = [i for i, t in enumerate(ts) if t.tracked]

    def tracked_vjp(g, _vjp=vjp, _idx=tracked):
        grads = _vjp(g)
        return tuple(grads[i] for i in _idx)

    out.tape = tape
    out.node = tape._append(kind, [ts[i].node for i in tracked], tracked_vjp, value.shape)
    return out


def add(a, b):
    return forward_op("add", [a, b])


def sub(a, b):
    return forward_op("sub", [a, b])


def mul(a, b):
    return forward_op("mul", [a, b])


def neg(a):
    return forward_op("neg", [a])


def scale(a, c: float):
    return forward_op("scale", [a], c=float(c))


def matmul(a, b):
    return forward_op("matmul", [a, b])


def relu(a):
    return forward_op("relu", [a])


def exp(a):
    return forward_op("exp", [a])


def log(a):
    return forward_op("log", [a])


def sum_(a, axis: int | None = None):
    return forward_op("sum", [a], axis=axis)


def mean(a):
    a = _as_tensor(a)
    return scale(sum_(a), 1.0 / a.data.size)


def log_softmax(a):
    return forward_op("log_softmax", [a])


def softmax(a):
    return forward_op("softmax", [a])


def pick(a, index):
    return forward_op("pick", [a], index=np.asarray(index))


def clamp_min(a, floor: float):
    return forward_op("clamp_min", [a], floor=float(floor))


def reshape(a, shape):
    return forward_op("reshape", [a], shape=tuple(shape))


def transpose(a):
    return forward_op("transpose", [a])


def cast(a, fn: Callable[[np.ndarray], np.ndarray]):
    return forward_op("cast", [a], fn=fn)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar root with respect to every leaf on ``tape``.

    Leaves the root does not depend on map to zero arrays.
    """
    if not root.tracked or root.tape is not tape:
        raise ContractViolation("root is not recorded on this tape")
    if root.shape != ():
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.node: np.ones(())}
    for k in range(root.node, -1, -1):
        g = grads.get(k)
        node = tape.nodes[k]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return {
        k: grads.get(k, np.zeros(tape.nodes[k].shape))
        for k in tape.leaves()
    }


class ParamVector:
    """Ordered named arrays that can be viewed as one flat vector."""

    def __init__(self, segments: Mapping[str, np.ndarray]):
        self.segments: dict[str, np.ndarray] = {
            k: np.asarray(v, dtype=np.float64) for k, v in segments.items()
        }

    @property
    def names(self) -> list[str]:
        return list(self.segments)

    @property
    def total_len(self) -> int:
        return sum(v.size for v in self.segments.values())

    def flatten(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.segments.values()])

    def unflatten(self, flat) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_len,):
            raise ContractViolation(
                f"flat vector has shape {flat.shape}, expected ({self.total_len},)"
            )
        out, offset = {}, 0
        for k, v in self.segments.items():
            out[k] = flat[offset:offset + v.size].reshape(v.shape).copy()
            offset += v.size
        return ParamVector(out)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def copy(self) -> "ParamVector":
        return ParamVector({k: v.copy() for k, v in self.segments.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.segments[name]

    def __len__(self) -> int:
        return len(self.segments)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self.segments.items())
        return f"ParamVector({shapes})"


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def value_and_grad(loss_fn: LossFn, theta: ParamVector) -> tuple[float, ParamVector]:
    """Evaluate ``loss_fn`` on tracked copies of ``theta`` and differentiate it."""
    tape = Tape()
    tracked = {k: tape.watch(v, k) for k, v in theta.segments.items()}
    root = loss_fn(tracked)
    grads = backward(tape, root)
    return root.item(), ParamVector({k: grads[t.node] for k, t in tracked.items()})


def hvp(loss_fn: LossFn, theta: ParamVector, v: ParamVector) -> ParamVector:
    """Hessian-vector product by central differences of autodiff gradients.

    The step is ``sqrt(eps) * (1 + |theta|) / |v|`` rounded to a power of two,
    so that scaling ``v`` by it introduces no rounding.
    """
    vflat = v.flatten()
    vnorm = float(np.linalg.norm(vflat))
    if vnorm == 0.0:
        return v.unflatten(np.zeros_like(vflat))
    tflat = theta.flatten()
    h = math.sqrt(np.finfo(np.float64).eps) * (1.0 + float(np.linalg.norm(tflat))) / vnorm
    h = 2.0 ** round(math.log2(h))
    _, gp = value_and_grad(loss_fn, theta.unflatten(tflat + h * vflat))
    _, gm = value_and_grad(loss_fn, theta.unflatten(tflat - h * vflat))
    return theta.unflatten((gp.flatten() - gm.flatten()) / (2.0 * h))
