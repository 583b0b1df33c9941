"""Dense float64 arrays, flat parameter vectors, and reverse-mode differentiation.

All training objectives in this package are written against the op functions
below (``matmul``, ``add``, ``relu``, ...). Each op accepts plain numpy arrays
or tape ``Node`` objects and returns the matching kind, so the same objective
code is evaluated directly (e.g. by the finite-difference oracle) or traced
for an exact reverse-mode gradient via :func:`grad`.

Everything is double precision and deterministic: the same inputs produce
bit-identical outputs across runs. A process-wide checked mode rejects
non-finite values as they are produced, naming the offending op.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple, Sequence

import numpy as np


class NumericsError(Exception):
    """Base class for numeric-engine failures."""


class NumericOverflowError(NumericsError):
    """A non-finite value appeared; carries the name of the producing op."""


class LayoutError(NumericsError):
    """Parameter layouts do not match."""


_checked = True


def set_checked(enabled: bool) -> None:
    """Enable/disable NaN/Inf rejection globally (on by default)."""
    global _checked
    _checked = bool(enabled)


def checked_enabled() -> bool:
    return _checked


@contextmanager
def checked(enabled: bool):
    """Temporarily switch checked mode, e.g. ``with checked(False): ...``."""
    global _checked
    prev = _checked
    _checked = bool(enabled)
    try:
        yield
    finally:
        _checked = prev


def _assert_finite(value: np.ndarray, op: str) -> None:
    if _checked and not np.all(np.isfinite(value)):
        raise NumericOverflowError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Immutable row-major float64 array with finiteness checked at construction."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        _assert_finite(arr, "tensor")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class LayoutEntry(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int


def build_layout(named_shapes: Sequence[tuple[str, tuple[int, ...]]]) -> tuple[LayoutEntry, ...]:
    """Pack (name, shape) pairs into contiguous non-overlapping segments."""
    entries = []
    offset = 0
    for name, shape in named_shapes:
        shape = tuple(int(s) for s in shape)
        entries.append(LayoutEntry(name, shape, offset))
        offset += int(np.prod(shape)) if shape else 1
    return tuple(entries)


def layout_size(layout: Sequence[LayoutEntry]) -> int:
    if not layout:
        return 0
    last = layout[-1]
    return last.offset + int(np.prod(last.shape))


class ParamVector:
    """Flat float64 parameter vector plus the layout mapping names to segments.

    Vectors with identical layout combine element-wise (+, -, scalar *).
    Instances are immutable; arithmetic returns new vectors.
    """

    __slots__ = ("data", "layout", "_index")

    def __init__(self, data, layout: Sequence[LayoutEntry]):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 1:
            raise LayoutError("ParamVector data must be 1-D")
        layout = tuple(layout)
        if arr.size != layout_size(layout):
            raise LayoutError(
                f"data length {arr.size} does not match layout size {layout_size(layout)}"
            )
        _assert_finite(arr, "param_vector")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "_index", {e.name: e for e in layout})

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    @classmethod
    def zeros(cls, layout: Sequence[LayoutEntry]) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        return self.data

    def tensor(self, name: str) -> np.ndarray:
        """Read-only view of the named segment, reshaped to its layout shape."""
        entry = self._index[name]
        size = int(np.prod(entry.shape)) if entry.shape else 1
        return self.data[entry.offset : entry.offset + size].reshape(entry.shape)

    def replace_data(self, data) -> "ParamVector":
        return ParamVector(data, self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def _require_layout(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector) or not self.same_layout(other):
            raise LayoutError("ParamVectors have different layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._require_layout(other)
        return ParamVector(self.data + other.data, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._require_layout(other)
        return ParamVector(self.data - other.data, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.data * float(scalar), self.layout)

    __rmul__ = __mul__

    def norm_sq(self) -> float:
        return float(self.data @ self.data)

    def __repr__(self) -> str:
        return f"ParamVector(size={self.size}, segments={len(self.layout)})"


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------


class Node:
    """Value on the differentiation tape. Internal to this module."""

    __slots__ = ("value", "parents", "op")

    def __init__(self, value: np.ndarray, parents=(), op: str = "leaf"):
        self.value = value
        self.parents = parents
        self.op = op


ArrayLike = "np.ndarray | Node | float"


def _value(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _is_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(op, out, parents):
    _assert_finite(out, op)
    if parents:
        return Node(out, tuple(parents), op)
    return out


def add(a, b):
    av, bv = _value(a), _value(b)
    out = av + bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return _make("add", out, parents)


def sub(a, b):
    av, bv = _value(a), _value(b)
    out = av - bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(-g, s)))
    return _make("sub", out, parents)


def mul(a, b):
    av, bv = _value(a), _value(b)
    out = av * bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s)))
    return _make("mul", out, parents)


def matmul(a, b):
    av, bv = _value(a), _value(b)
    out = av @ bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, o=bv: g @ o.T))
    if isinstance(b, Node):
        parents.append((b, lambda g, o=av: o.T @ g))
    return _make("matmul", out, parents)


def relu(x):
    xv = _value(x)
    out = np.maximum(xv, 0.0)
    parents = []
    if isinstance(x, Node):
        mask = (xv > 0.0).astype(np.float64)
        parents.append((x, lambda g, m=mask: g * m))
    return _make("relu", out, parents)


def square(x):
    return mul(x, x)


def sum_all(x):
    xv = _value(x)
    out = np.float64(xv.sum())
    parents = []
    if isinstance(x, Node):
        parents.append((x, lambda g, s=xv.shape: np.full(s, g, dtype=np.float64)))
    return _make("sum_all", out, parents)


def logsumexp_rows(x):
    """Row-wise log(sum(exp)), numerically stabilized. x: [m, k] -> [m]."""
    xv = _value(x)
    mx = xv.max(axis=1, keepdims=True)
    ex = np.exp(xv - mx)
    out = np.log(ex.sum(axis=1)) + mx[:, 0]
    parents = []
    if isinstance(x, Node):
        soft = ex / ex.sum(axis=1, keepdims=True)
        parents.append((x, lambda g, p=soft: g[:, None] * p))
    return _make("logsumexp_rows", out, parents)


def softmax_rows(x):
    """Row-wise softmax. x: [m, k] -> [m, k]."""
    xv = _value(x)
    ex = np.exp(xv - xv.max(axis=1, keepdims=True))
    out = ex / ex.sum(axis=1, keepdims=True)
    parents = []
    if isinstance(x, Node):
        def vjp(g, p=out):
            inner = (g * p).sum(axis=1, keepdims=True)
            return p * (g - inner)
        parents.append((x, vjp))
    return _make("softmax_rows", out, parents)


def gather_rows(x, indices):
    """Select x[i, indices[i]] for each row i. x: [m, k] -> [m]."""
    xv = _value(x)
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(xv.shape[0])
    out = xv[rows, idx]
    parents = []
    if isinstance(x, Node):
        def vjp(g, r=rows, c=idx, s=xv.shape):
            full = np.zeros(s, dtype=np.float64)
            full[r, c] = g
            return full
        parents.append((x, vjp))
    return _make("gather_rows", out, parents)


def _segment(leaf: Node, entry: LayoutEntry) -> Node:
    size = int(np.prod(entry.shape)) if entry.shape else 1
    val = leaf.value[entry.offset : entry.offset + size].reshape(entry.shape)

    def vjp(g, o=entry.offset, k=size, n=leaf.value.size):
        out = np.zeros(n, dtype=np.float64)
        out[o : o + k] = np.asarray(g, dtype=np.float64).ravel()
        return out

    return Node(val, ((leaf, vjp),), "segment")


class TracedParams:
    """ParamVector stand-in whose segments are tape nodes."""

    __slots__ = ("layout", "_leaf", "_index")

    def __init__(self, leaf: Node, layout: tuple[LayoutEntry, ...]):
        self.layout = layout
        self._leaf = leaf
        self._index = {e.name: e for e in layout}

    @property
    def flat(self) -> Node:
        return self._leaf

    @property
    def size(self) -> int:
        return self._leaf.value.size

    def tensor(self, name: str) -> Node:
        return _segment(self._leaf, self._index[name])


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def value_and_grad(objective: Callable, at: ParamVector) -> tuple[float, ParamVector]:
    """Objective value and exact reverse-mode gradient from one tape evaluation.

    The objective must be built from the ops in this module; it is called with
    a traced parameter object exposing the same ``tensor(name)`` / ``flat``
    interface as ParamVector. A constant objective yields the zero vector.
    """
    leaf = Node(at.data, (), "params")
    out = objective(TracedParams(leaf, at.layout))
    if not isinstance(out, Node):
        return float(out), ParamVector.zeros(at.layout)
    if np.asarray(out.value).size != 1:
        raise NumericsError("objective must be scalar-valued")
    val = float(out.value)
    grads: dict[int, np.ndarray] = {id(out): np.float64(1.0)}
    for node in reversed(_toposort(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node is leaf:
            grads[id(leaf)] = g
            break
        for parent, vjp in node.parents:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    total = grads.get(id(leaf))
    if total is None:
        return val, ParamVector.zeros(at.layout)
    return val, ParamVector(np.asarray(total, dtype=np.float64), at.layout)


def grad(objective: Callable, at: ParamVector) -> ParamVector:
    """Exact reverse-mode gradient of a scalar objective at `at`."""
    return value_and_grad(objective, at)[1]


def value(objective: Callable, at: ParamVector) -> float:
    """Evaluate an op-built objective at a plain parameter vector."""
    out = objective(at)
    return float(out.value if isinstance(out, Node) else out)


def finite_diff_grad(objective: Callable, at: ParamVector, h: float = 1e-5) -> ParamVector:
    """Central-difference gradient oracle: (f(p + h e_i) - f(p - h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    base = at.data
    out = np.empty_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        hi = value(objective, at.replace_data(bumped))
        bumped[i] = base[i] - h
        lo = value(objective, at.replace_data(bumped))
        out[i] = (hi - lo) / (2.0 * h)
    return ParamVector(out, at.layout)


def relative_grad_error(g: ParamVector, reference: ParamVector) -> float:
    """max-norm discrepancy scaled as |g - ref|_inf / (1 + |g|_inf)."""
    diff = float(np.max(np.abs(g.data - reference.data))) if g.size else 0.0
    scale = 1.0 + (float(np.max(np.abs(g.data))) if g.size else 0.0)
    return diff / scale
