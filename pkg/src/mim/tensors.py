"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` holding a
reference to its parents and a closure that pushes the output gradient back
to them. Nodes carry a monotonically increasing creation id, so sorting the
reachable nodes by id (descending) gives an exact reverse topological order.

Only scalar broadcasting is implicit. Anything else goes through
:func:`expand`, so shape bugs raise instead of silently broadcasting.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from collections.abc import Callable, Iterable, Iterator, Mapping
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "ParamSet",
    "tensor",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "tanh",
    "gelu",
    "relu",
    "clamp",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "expand",
    "gather",
    "where",
    "softmax",
    "logsumexp",
    "layer_norm",
    "l2_norm",
    "normalize",
    "cosine",
    "dropout",
    "stop_gradient",
    "adam_step",
    "clip_gradients",
    "finite_diff_check",
    "gradient_errors",
    "save_checkpoint",
    "load_checkpoint",
]

_ids = itertools.count()
_DEFAULT_DTYPE = [np.dtype(np.float32)]
_GRAD_ENABLED = [True]


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[0]


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (float64 for grad checks)."""
    prev = _DEFAULT_DTYPE[0]
    _DEFAULT_DTYPE[0] = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; outputs are plain constants."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``data`` holds the values, ``grad`` the accumulated gradient (same shape).
    Leaves created with ``requires_grad=True`` start with a zero gradient;
    intermediate nodes get theirs allocated during :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result_dtype(*ts: Tensor) -> np.dtype:
    return np.result_type(*(t.dtype for t in ts))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t._backward is None:
        # leaves own their buffer
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g
    elif t.grad is None:
        # may alias another node's gradient, so never mutate it in place
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------


class Graph:
    """The recorded nodes reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            found.append(node)
            stack.extend(node._parents)
        found.sort(key=lambda n: n._id)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)

    def reverse(self) -> Iterator[Tensor]:
        return reversed(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf that requires it.

    Intermediate gradients are reset per call; leaf gradients accumulate until
    the caller zeroes them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_output(loss)
    for node in graph.nodes:
        if node._backward is not None:
            node.grad = None
    _accum(loss, np.ones_like(loss.data))
    for node in graph.reverse():
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (scalar-only broadcasting)
# ---------------------------------------------------------------------------


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand() to broadcast)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "add")

    def _bw(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _make(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "sub")

    def _bw(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(-g, b.shape))

    return _make(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "mul")

    def _bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "div")
    out = a.data / b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g * out / b.data, b.shape))

    return _make(out, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Batched operands must share leading dims exactly; a 2-D right operand is
    also accepted against a batched left operand (shared weights). 1-D
    operands are promoted as in numpy.
    """
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim == 0:
        raise ShapeError("matmul: scalar operands are not allowed")
    a_vec, b_vec = A.ndim == 1, B.ndim == 1
    A2 = A[None, :] if a_vec else A
    B2 = B[:, None] if b_vec else B
    if A2.shape[-1] != B2.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {A.shape} @ {B.shape}")
    shared = B2.ndim == 2
    if not shared and A2.shape[:-2] != B2.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {A.shape} @ {B.shape}")
    out2 = A2 @ B2
    out = out2
    if a_vec:
        out = out[..., 0, :]
    if b_vec:
        out = out[..., 0]

    def _bw(g):
        G = g
        if b_vec:
            G = G[..., None]
        if a_vec:
            G = G[..., None, :]
        if a.requires_grad:
            gA = G @ np.swapaxes(B2, -1, -2)
            _accum(a, gA.reshape(A.shape))
        if b.requires_grad:
            if shared:
                k, n = B2.shape
                gB = A2.reshape(-1, k).T @ G.reshape(-1, n)
            else:
                gB = np.swapaxes(A2, -1, -2) @ G
            _accum(b, gB.reshape(B.shape))

    return _make(out, (a, b), _bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is ``[in, out]``."""
    X, W = x.data, weight.data
    if W.ndim != 2 or X.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {X.shape} incompatible with weight {W.shape}")
    if bias is not None and bias.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {W.shape}")
    out = X @ W
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        if x.requires_grad:
            _accum(x, g @ W.T)
        g2 = g.reshape(-1, W.shape[1])
        if weight.requires_grad:
            _accum(weight, X.reshape(-1, W.shape[0]).T @ g2)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))

    return _make(out, parents, _bw)


# ---------------------------------------------------------------------------
# Unary functions
# ---------------------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * 0.5 / out))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * (1.0 - out * out)))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite-difference checks stay clean."""
    X = x.data
    X2 = X * X
    inner = _GELU_C * (X + 0.044715 * X2 * X)
    t = np.tanh(inner)
    out = 0.5 * X * (1.0 + t)

    def _bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * X2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * d_inner))

    return _make(out.astype(X.dtype, copy=False), (x,), _bw)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: _accum(x, g * keep))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    keep = out == x.data
    return _make(out, (x,), lambda g: _accum(x, g * keep))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def _expand_grad(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    return _make(out, (x,), lambda g: _accum(x, _expand_grad(g, x.shape, axis, keepdims)))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    out = (np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(x.dtype)
    return _make(out, (x,), lambda g: _accum(x, _expand_grad(g / n, x.shape, axis, keepdims)))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inverse)))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ContractError("concat of an empty list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def _bw(g):
        for t, part in zip(ts, np.split(g, bounds, axis=axis)):
            _accum(t, part)

    return _make(out, tuple(ts), _bw)


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    summed = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1
    )

    def _bw(g):
        gx = g.sum(axis=summed, keepdims=True) if summed else g
        _accum(x, gx.reshape(x.shape))

    return _make(out, (x,), _bw)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def _int_arrays(index) -> tuple[np.ndarray, ...] | None:
    """The index as a tuple of integer arrays over leading axes, if it is one."""
    parts = index if isinstance(index, tuple) else (index,)
    arrays = []
    for p in parts:
        if isinstance(p, (int, slice, type(None), type(Ellipsis), bool)):
            return None
        a = np.asarray(p)
        if a.dtype.kind not in "iu":
            return None
        arrays.append(a)
    return tuple(np.broadcast_arrays(*arrays))


def _scatter_rows(shape, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values[i]`` into row ``rows[i]`` of a zero array of ``shape``.

    Deterministic (sort + segment sums), and much faster than ``np.add.at``.
    """
    order = np.argsort(rows, kind="stable")
    sorted_rows = rows[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_rows[1:] != sorted_rows[:-1])))
    out = np.zeros(shape, dtype=values.dtype)
    if rows.size:
        out[sorted_rows[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def _index(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]
    basic = _is_basic(index)
    arrays = None if basic else _int_arrays(index)

    def _bw(g):
        if arrays is not None:
            k = len(arrays)
            lead, rest = x.shape[:k], x.shape[k:]
            flat = np.ravel_multi_index(tuple(a.ravel() for a in arrays), lead, mode="wrap")
            full = _scatter_rows((int(np.prod(lead)),) + rest, flat, g.reshape((-1,) + rest))
            _accum(x, full.reshape(x.shape))
            return
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        _accum(x, full)

    return _make(np.array(out, copy=basic), (x,), _bw)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows along axis 1 per batch element: ``x[b, idx[b, m]]``.

    With an unbatched ``x`` (``idx`` 1-D) this is plain row selection.
    """
    idx = np.asarray(idx)
    if idx.ndim == 1:
        return _index(x, idx)
    if idx.ndim != 2 or x.ndim < 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: index {idx.shape} incompatible with {x.shape}")
    rows = np.arange(idx.shape[0])[:, None]
    return _index(x, (rows, idx))


def where(cond: np.ndarray, a: Tensor, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b``; ``cond`` is constant."""
    b = _as_tensor(b, a)
    cond = np.asarray(cond, dtype=bool)
    _check_elementwise(a, b, "where")
    out = np.where(cond, a.data, b.data).astype(_result_dtype(a, b), copy=False)
    if out.shape != cond.shape and cond.size != 1:
        raise ShapeError(f"where: condition {cond.shape} does not match {out.shape}")

    def _bw(g):
        _accum(a, _reduce_to(np.where(cond, g, 0), a.shape))
        _accum(b, _reduce_to(np.where(cond, 0, g), b.shape))

    return _make(out, (a, b), _bw)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data.copy(), dtype=x.dtype)


# ---------------------------------------------------------------------------
# Normalising operations
# ---------------------------------------------------------------------------


def _acc_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` (kept) with a float64 accumulator, cast back to ``a``'s dtype."""
    if a.dtype == np.float64:
        return np.sum(a, axis=axis, keepdims=True)
    return np.sum(a, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)


def _check_mask(mask, shape, axis) -> np.ndarray:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not np.all(np.any(mask, axis=axis)):
        raise ContractError("every position along the normalised axis is masked for some slice")
    return mask


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax; ``mask`` (constant, True = keep) zeroes positions."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = _check_mask(mask, x.shape, axis)
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / _acc_sum(e, axis)

    def _bw(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        _accum(x, out * (g - inner))

    return _make(out, (x,), _bw)


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    z = x.data
    if mask is not None:
        mask = _check_mask(mask, x.shape, axis)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    s = _acc_sum(e, axis)
    out = np.log(s) + m
    probs = e / s

    def _bw(g):
        _accum(x, np.expand_dims(g, axis) * probs)

    return _make(np.squeeze(out, axis=axis), (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    if d == 1 and eps == 0:
        raise DomainError("layer_norm over a single feature with eps=0 divides by zero")
    X = x.data
    xc = X - _acc_sum(X, -1) / d
    var = _acc_sum(xc * xc, -1) / d + eps
    with np.errstate(divide="ignore"):
        rstd = np.where(var > 0, 1.0 / np.sqrt(var), 0.0).astype(X.dtype)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def _bw(g):
        lead = tuple(range(X.ndim - 1))
        if gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=lead))
        if bias.requires_grad:
            _accum(bias, np.sum(g, axis=lead))
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, gx)

    return _make(out, (x, gain, bias), _bw)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm; the gradient at the zero vector is taken as zero."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def _bw(g):
        safe = np.where(n > 0, n, 1)
        _accum(x, np.expand_dims(g, axis) * np.where(n > 0, x.data / safe, 0))

    return _make(np.squeeze(n, axis=axis), (x,), _bw)


def normalize(x: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)
    if np.any(n == 0):
        raise DegenerateInputError("cannot normalise a zero vector")
    y = x.data / n

    def _bw(g):
        _accum(x, (g - y * np.sum(g * y, axis=axis, keepdims=True)) / n)

    return _make(y, (x,), _bw)


def cosine(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; raises on zero vectors."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    return sum(mul(normalize(a, axis), normalize(b, axis)), axis=axis)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: _accum(x, g * keep))


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------


class ParamSet(Mapping[str, Tensor]):
    """Named trainable tensors plus per-parameter Adam state."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        if t.grad is None or t.grad.shape != t.shape:
            t.grad = np.zeros_like(t.data)
        self._tensors[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self._tensors.values()]))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in arrays.items():
            t = self._tensors[name]
            if tuple(arr.shape) != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)

    def astype(self, dtype) -> ParamSet:
        """Detached copy with every tensor cast to ``dtype`` (fresh Adam state)."""
        return ParamSet({k: Tensor(t.data.astype(dtype)) for k, t in self._tensors.items()})

    def copy(self) -> ParamSet:
        return ParamSet({k: Tensor(t.data.copy()) for k, t in self._tensors.items()})


def adam_step(
    params: ParamSet, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> None:
    """Bias-corrected Adam update in place. Gradients are left as they are."""
    for name, p in params.items():
        g = p.grad
        m = params.adam_m[name]
        v = params.adam_v[name]
        params.steps[name] += 1
        t = params.steps[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


def clip_gradients(params: ParamSet, lo: float = -1.0, hi: float = 1.0) -> None:
    """Clamp every gradient component into ``[lo, hi]`` in place."""
    if not lo < hi:
        raise ContractError(f"clip range needs lo < hi, got [{lo}, {hi}]")
    for p in params.values():
        np.clip(p.grad, lo, hi, out=p.grad)


def check_finite(params: ParamSet) -> None:
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"non-finite value in parameter {name}")
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name}")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def gradient_errors(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic vs central-difference gradients of scalar ``f`` at ``x``.

    Returns ``(flat_indices, analytic, numeric)``. ``x.data`` is restored.
    """
    if not x.requires_grad:
        x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    loss = f(x)
    backward(loss)
    analytic_full = x.grad.reshape(-1).astype(np.float64).copy()
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices), dtype=int)
    numeric = np.empty(idx.size, dtype=np.float64)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f(x).item()
            flat[i] = orig - epsilon
            down = f(x).item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * epsilon)
    return idx, analytic_full[idx], numeric


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> float:
    """Max over components of ``|analytic - numeric| / (|numeric| + 1e-8)``."""
    _, analytic, numeric = gradient_errors(f, x, epsilon, indices)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MIMCKPT1"


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write tensors as float32 in the MIMCKPT1 layout (little-endian)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ContractError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a MIMCKPT1 checkpoint")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise ContractError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(raw):
        raise ContractError(f"{path}: {len(raw) - pos} trailing bytes after last tensor")
    return out
