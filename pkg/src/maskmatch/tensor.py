from __future__ import annotations

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import ContractError, DimensionError, DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
Axis = Union[None, int, Tuple[int, ...]]

# Monotonic execution stamp shared by every recorded op; next() on a count is atomic.
_SEQ = itertools.count()
# Recording switch, per thread so evaluation workers never share it.
_GRAD = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_GRAD, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Ops run inside the block record no tape, whatever their inputs require."""
    prev = is_grad_enabled()
    _GRAD.enabled = False
    try:
        yield
    finally:
        _GRAD.enabled = prev


@dataclass(eq=False)
class Node:
    seq: int
    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense float64 array that records the ops producing it.

    Leaves created with ``requires_grad=True`` get a zero gradient buffer at
    construction. Results of ops carry a ``Node`` pointing at their inputs and
    receive a gradient buffer the first time a backward pass reaches them.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise DomainError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: Optional[Node]) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = node is not None
        t.grad = None
        t.name = None
        t._node = node
        return t

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> "Graph":
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms --------------------------------------------------------
    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def min(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("min", self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionError(f".T expects a 2-D tensor, got shape {self.shape}")
        return transpose(self, (1, 0))

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def clamp(self, lo: Optional[float] = None, hi: Optional[float] = None) -> "Tensor":
        return clamp(self, lo, hi)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(out).all():
        raise DomainError(f"{op}: non-finite result")
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        return Tensor._wrap(out, Node(next(_SEQ), op, tuple(inputs), backward_fn))
    return Tensor._wrap(out, None)


# ---------------------------------------------------------------------------
# broadcasting
# ---------------------------------------------------------------------------
def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    try:
        out = tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible") from None
    # only one operand may be expanded, so the result always has one operand's shape
    if out != tuple(a) and out != tuple(b):
        raise DimensionError(f"{op}: broadcasting {a} with {b} would expand both operands")
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError("div: division by zero")
    return _make(
        "div",
        ad / bd,
        (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(x.data)

    def _bw(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g / (2.0 * safe), 0.0),)

    return _make("sqrt", out, (x,), _bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    live = x.data > 0.0
    return _make("relu", np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


def clamp(x, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.clip(xd, -np.inf if lo is None else lo, np.inf if hi is None else hi)
    inside = np.ones_like(xd, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return _make("clamp", out, (x,), lambda g: (g * inside,))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "relu": relu,
    "clamp": clamp,
    "scale": scale,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise DimensionError(f"unknown elementwise op: {op}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: expected equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(
        "matmul",
        np.matmul(ad, bd),
        (a, b),
        lambda g: (np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)),
    )


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make("softmax", out, (x,), _bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axis(axis: int, ndim: int, op: str) -> int:
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < max(ndim, 1):
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return ax


def _norm_axes(axis: Axis, ndim: int, op: str) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim, op),)
    axes = tuple(sorted(_norm_axis(a, ndim, op) for a in axis))
    if len(set(axes)) != len(axes):
        raise DimensionError(f"{op}: repeated axis in {axis}")
    return axes


def reduce(op: str, x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim, op)
    if any(x.shape[a] == 0 for a in axes) or x.size == 0:
        raise DimensionError(f"{op}: cannot reduce over an empty axis (shape {x.shape})")
    in_shape = x.shape
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def _expand(g):
        return np.broadcast_to(g.reshape(kept_shape), in_shape)

    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _make("sum", np.asarray(out), (x,), lambda g: (np.array(_expand(g)),))
    if op == "mean":
        count = int(np.prod([in_shape[a] for a in axes])) if axes else 1
        out = x.data.mean(axis=axes, keepdims=keepdims)
        return _make("mean", np.asarray(out), (x,), lambda g: (np.array(_expand(g)) / count,))
    if op in ("max", "min"):
        return _extremum(op, x, axis, keepdims)
    raise DimensionError(f"unknown reduction: {op}")


def _extremum(op: str, x: Tensor, axis: Optional[int], keepdims: bool) -> Tensor:
    pick = np.argmax if op == "max" else np.argmin
    xd = x.data
    if axis is None:
        flat = int(pick(xd.reshape(-1)))  # first occurrence = lowest linear index
        out = np.asarray(xd.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * xd.ndim)

        def _bw_all(g):
            gz = np.zeros(xd.size)
            gz[flat] = float(np.asarray(g).reshape(-1)[0])
            return (gz.reshape(xd.shape),)

        return _make(op, out, (x,), _bw_all)

    if not isinstance(axis, int):
        raise DimensionError(f"{op}: only a single axis is supported, got {axis}")
    ax = _norm_axis(axis, xd.ndim, op)
    idx = np.expand_dims(pick(xd, axis=ax), ax)
    out = np.take_along_axis(xd, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def _bw(g):
        gz = np.zeros_like(xd)
        np.put_along_axis(gz, idx, g.reshape(idx.shape), axis=ax)
        return (gz,)

    return _make(op, out, (x,), _bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------
def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    in_shape = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(perm) != list(range(x.ndim)):
        raise DimensionError(f"transpose: invalid permutation {perm} for rank {x.ndim}")
    inv = tuple(int(i) for i in np.argsort(perm))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(perm)), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.array(x.data[index])
    except IndexError as e:
        raise DimensionError(f"getitem: {e}") from None
    in_shape = x.shape

    def _bw(g):
        gz = np.zeros(in_shape)
        np.add.at(gz, index, g)
        return (gz,)

    return _make("getitem", out, (x,), _bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: nothing to concatenate")
    ax = _norm_axis(axis, ts[0].ndim, "concat")
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack: nothing to stack")
    if any(t.shape != ts[0].shape for t in ts):
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")
    ax = _norm_axis(axis, ts[0].ndim + 1, "stack")
    out = np.stack([t.data for t in ts], axis=ax)
    n = len(ts)
    return _make("stack", out, ts, lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


# ---------------------------------------------------------------------------
# spatial helpers (compositions of the ops above)
# ---------------------------------------------------------------------------
def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling of a [c, h, w] map."""
    x = as_tensor(x)
    if k == 1:
        return x
    c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres (align_corners=False), edge-clamped
    m = np.zeros((n_out, n_in))
    scale_ = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def resize_bilinear(x, size: Tuple[int, int]) -> Tensor:
    """Bilinear resize of a 2-D map, expressed as R_h @ x @ R_w^T."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"resize_bilinear expects a 2-D map, got {x.shape}")
    h, w = x.shape
    oh, ow = size
    if (oh, ow) == (h, w):
        return x
    return Tensor(interp_matrix(h, oh)) @ x @ Tensor(interp_matrix(w, ow).T)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------
class Graph:
    """Recorded ops reachable from a root tensor, in execution order."""

    def __init__(self, root: Tensor):
        self.root = root
        found: dict[int, Node] = {}
        outputs: dict[int, Tensor] = {}
        stack_: list[Tensor] = [root]
        while stack_:
            t = stack_.pop()
            node = t._node
            if node is None or id(node) in found:
                continue
            found[id(node)] = node
            outputs[id(node)] = t
            stack_.extend(node.inputs)
        self.nodes: list[Node] = sorted(found.values(), key=lambda n: n.seq)
        self._outputs = outputs
        self.visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(self.root): seed}
        holders: dict[int, Tensor] = {id(self.root): self.root}
        for node in reversed(self.nodes):
            out = self._outputs[id(node)]
            g = pending.pop(id(out), None)
            self.visits += 1
            if g is None:
                continue
            _accumulate(out, g)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else np.array(gi, dtype=np.float64)
                holders[key] = inp
        for key, g in pending.items():
            _accumulate(holders[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> Graph:
    """Accumulate dLoss/dT into ``T.grad`` for every requires-grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that does not require grad")
    graph = Graph(loss)
    graph.run(np.ones(loss.shape))
    return graph


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Largest norm-wise relative error between analytic and central-difference gradients."""
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("check_gradients: every input must require grad")
        t.zero_grad()
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
