"""Minimal dense tensor with a reverse-mode tape.

Each :class:`Tensor` produced by an operation remembers its parents and a
closure mapping the output gradient to parent gradients, so a tensor doubles
as a tape node.  Only the operations needed by the Lipschitz layers are
provided.  Elementwise arithmetic requires equal shapes or a Python scalar;
any other broadcast must go through :func:`broadcast_to` explicitly.

Storage is a numpy array.  The release dtype is float32; tests switch to
float64 with :func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError

__all__ = [
    "Tensor",
    "TapeNode",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "reduce",
    "tsum",
    "mean",
    "tmax",
    "reshape",
    "transpose",
    "broadcast_to",
    "getitem",
    "pad",
    "concatenate",
    "exp",
    "log",
    "sqrt",
    "tabs",
    "maximum",
    "minimum",
    "clip",
    "logsumexp",
    "backward",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Immutable n-d float array that records how it was computed.

    ``requires_grad`` on a leaf marks it as a parameter whose gradient is
    accumulated into ``grad`` by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out.op = op
        return out

    # ---- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # ---- operator sugar -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axes=None, keepdims=False):
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return tmax(self, axes, keepdims)


TapeNode = Tensor


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


# ---- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def _bw(g):
        return g @ B.T, A.T @ g

    return Tensor._result(A @ B, (a, b), _bw, "matmul")


# ---- elementwise -------------------------------------------------------


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """Pointwise ``add``, ``sub``, ``mul`` or ``scale``.

    ``b`` must have the same shape as ``a`` or be a Python scalar.  ``scale``
    requires a scalar ``b``.
    """
    a = _as_tensor(a)
    if kind == "scale":
        if not _is_scalar(b):
            raise DimensionError("scale expects a scalar factor")
        return scale(a, b)
    if kind not in ("add", "sub", "mul"):
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if _is_scalar(b):
        c = float(b)
        if kind == "add":
            return Tensor._result(a.data + c, (a,), lambda g: (g,), "add_scalar")
        if kind == "sub":
            return Tensor._result(a.data - c, (a,), lambda g: (g,), "sub_scalar")
        return scale(a, c)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise DimensionError(f"{kind} shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    if kind == "add":
        return Tensor._result(A + B, (a, b), lambda g: (g, g), "add")
    if kind == "sub":
        return Tensor._result(A - B, (a, b), lambda g: (g, -g), "sub")
    return Tensor._result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def add(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    return elementwise(a, b, "add")


def sub(a, b) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    return elementwise(a, b, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def div(a, b) -> Tensor:
    """Pointwise quotient; ``b`` may be a scalar or a same-shape tensor."""
    a = _as_tensor(a)
    if _is_scalar(b):
        return scale(a, 1.0 / float(b))
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise DimensionError(f"div shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    Q = A / B

    def _bw(g):
        return g / B, -g * Q / B

    return Tensor._result(Q, (a, b), _bw, "div")


def exp(a: Tensor) -> Tensor:
    E = np.exp(a.data)
    return Tensor._result(E, (a,), lambda g: (g * E,), "exp")


def log(a: Tensor) -> Tensor:
    A = a.data
    return Tensor._result(np.log(A), (a,), lambda g: (g / A,), "log")


def sqrt(a: Tensor) -> Tensor:
    S = np.sqrt(a.data)
    return Tensor._result(S, (a,), lambda g: (g * 0.5 / S,), "sqrt")


def tabs(a: Tensor) -> Tensor:
    A = a.data
    return Tensor._result(np.abs(A), (a,), lambda g: (g * np.sign(A),), "abs")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise max; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"maximum shape mismatch: {a.shape} vs {b.shape}")
    pick_a = a.data >= b.data

    def _bw(g):
        return np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)

    return Tensor._result(np.where(pick_a, a.data, b.data), (a, b), _bw, "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise min; ties route the gradient to ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum shape mismatch: {a.shape} vs {b.shape}")
    pick_a = a.data < b.data

    def _bw(g):
        return np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)

    return Tensor._result(np.where(pick_a, a.data, b.data), (a, b), _bw, "minimum")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    A = a.data
    inside = (A >= lo) & (A <= hi)
    return Tensor._result(np.clip(A, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),), "clip")


# ---- reductions --------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for ax in axes:
        ax = int(ax)
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(a: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce ``a`` over ``axes`` with ``mean``, ``sum`` or ``max``.

    ``max`` sends the whole gradient to the first maximal element in
    row-major order of the reduced axes.
    """
    a = _as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    A = a.data
    kept_shape = tuple(1 if i in ax else n for i, n in enumerate(A.shape))
    if kind == "sum":
        out = A.sum(axis=ax, keepdims=keepdims)

        def _bw(g):
            return (np.broadcast_to(g.reshape(kept_shape), A.shape).copy(),)

    elif kind == "mean":
        count = math.prod(A.shape[i] for i in ax) if ax else 1
        out = A.mean(axis=ax, keepdims=keepdims) if ax else A.copy()

        def _bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, A.shape).copy(),)

    elif kind == "max":
        rest = [i for i in range(A.ndim) if i not in ax]
        moved = np.transpose(A, rest + list(ax))
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(kept_shape)

        def _bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            inverse = np.argsort(rest + list(ax))
            return (np.transpose(gflat.reshape(moved.shape), inverse),)

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return Tensor._result(np.asarray(out), (a,), _bw, f"reduce_{kind}")


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce(a, "sum", axes, keepdims)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce(a, "mean", axes, keepdims)


def tmax(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce(a, "max", axes, keepdims)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp along one axis (axis removed)."""
    A = a.data
    m = A.max(axis=axis, keepdims=True)
    E = np.exp(A - m)
    S = E.sum(axis=axis, keepdims=True)
    out = (np.log(S) + m).squeeze(axis)
    soft = E / S

    def _bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._result(out, (a,), _bw, "logsumexp")


# ---- shape manipulation ------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; backward sums over expanded axes."""
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {old} to {shape}") from exc
    lead = len(shape) - len(old)
    expanded = tuple(i for i in range(len(shape)) if i < lead or old[i - lead] == 1 and shape[i] != 1)

    def _bw(g):
        s = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (s.reshape(old),)

    return Tensor._result(out.copy(), (a,), _bw, "broadcast")


def getitem(a: Tensor, index) -> Tensor:
    A = a.data
    out = A[index]

    def _bw(g):
        full = np.zeros_like(A)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), _bw, "getitem")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one ``(before, after)`` pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != a.ndim:
        raise DimensionError(f"pad widths for rank {len(widths)} given to rank {a.ndim}")
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return Tensor._result(out, (a,), lambda g: (g[sl],), "pad")


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concatenate needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tensors, _bw, "concat")


# ---- reverse pass ------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Calling twice without resetting grads adds the gradients up.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
