"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of operations the model needs are provided, and there is
no general broadcasting: binary ops take equal shapes or a Python scalar,
plus one explicit row-vector add for biases.

Every differentiable op appends a node to the graph with a monotonically
increasing sequence number.  ``backward`` collects the nodes reachable from
the loss into a :class:`Tape` ordered by that number and replays it in
reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, FullyMaskedRowError, GradientError, NonFiniteError

NEG_INF = float("-inf")

_seq = itertools.count()
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MultiplyCounter:
    """Counts scalar multiplications performed by ``matmul``."""

    def __init__(self):
        self.count = 0


@contextmanager
def count_multiplies():
    counter = MultiplyCounter()
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _tally(n: int) -> None:
    for c in getattr(_local, "counters", ()):
        c.count += n


@dataclass(eq=False)
class Node:
    """One recorded op: how to push an output gradient onto the inputs."""

    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """Immutable float64 array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _node: Node | None = None, _check: bool = True):
        arr = np.array(data, dtype=np.float64) if _check else np.asarray(data, dtype=np.float64)
        if _check and not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
            raise NonFiniteError(f"non-finite value at flat index {bad}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    # construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad)

    @classmethod
    def eye(cls, n: int) -> "Tensor":
        return cls(np.eye(n))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators ------------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Wrap an op result, recording a node when any parent is differentiable."""
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(out, _check=False)
    return Tensor(out, requires_grad=True, _node=Node(op, parents, grad_fn), _check=False)


def record(op: str, out: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Public hook for ops defined in other modules (e.g. rotary embedding)."""
    return _make(op, np.ascontiguousarray(out, dtype=np.float64), tuple(parents), grad_fn)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make("add_scalar", a.data + s, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make("scale", a.data * s, (a,), lambda g: (g * s,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix (bias add)."""
    if a.data.ndim != 2 or v.shape != (a.shape[1],):
        raise DimensionError(f"add_rowvec: cannot add {v.shape} to rows of {a.shape}")
    return _make("add_rowvec", a.data + v.data, (a, v), lambda g: (g, g.sum(axis=0)))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make("gelu", out, (a,), grad_fn)


# reductions ----------------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make("mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _tally(m * k * n)
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _make("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


# structural ------------------------------------------------------------------

def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make("slice_rows", a.data[start:stop].copy(), (a,), grad_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make("slice_cols", np.ascontiguousarray(a.data[:, start:stop]), (a,), grad_fn)


def _concat(op: str, parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError(f"{op}: nothing to concatenate")
    if len(parts) == 1:
        return parts[0]
    other = 1 - axis
    widths = {p.shape[other] for p in parts}
    if len(widths) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"{op}: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def grad_fn(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(op, np.concatenate([p.data for p in parts], axis=axis), tuple(parts), grad_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat("concat_rows", parts, 0)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return _concat("concat_cols", parts, 1)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


# normalisation ---------------------------------------------------------------

def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of ``a + mask``.

    ``mask`` entries are 0 or ``NEG_INF``; masked logits get exactly zero
    weight.  A row with every entry masked raises FullyMaskedRowError.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {a.shape}")
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} does not match logits {x.shape}")
        x = x + mask
    row_max = x.max(axis=1, keepdims=True) if x.shape[1] else np.zeros((x.shape[0], 1))
    dead = np.flatnonzero(np.isneginf(row_max[:, 0]))
    if dead.size:
        raise FullyMaskedRowError(int(dead[0]))
    e = np.exp(x - row_max)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make("softmax_rows", p, (a,), grad_fn)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make("layer_norm", y, (a,), grad_fn)


# gradient machinery ------------------------------------------------------------

class Tape:
    """Nodes reachable from a loss, in the order they were executed."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, loss: Tensor, seed: np.ndarray) -> list[Node]:
        """Propagate adjoints in reverse; returns nodes in visit order."""
        grads: dict[int, np.ndarray] = {id(loss._node): seed}
        visited = []
        for node in reversed(self.nodes):
            visited.append(node)
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent._node)
                    grads[key] = pg if key not in grads else grads[key] + pg
        return visited


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every differentiable leaf reachable from ``loss``."""
    if loss.size != 1 or loss.data.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return Tape([])
        raise GradientError("loss is detached from the tape")
    tape = Tape.from_loss(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.data.astype(np.float64).ravel()
    out = np.empty_like(base)

    def evaluate(vec, i):
        with no_grad():
            try:
                val = f(Tensor(vec.reshape(x.shape)))
            except NonFiniteError as exc:
                raise NonFiniteError(f"f is not finite at coordinate {i}") from exc
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise NonFiniteError(f"f is not finite at coordinate {i}")
        return val

    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += h
        minus[i] -= h
        out[i] = (evaluate(plus, i) - evaluate(minus, i)) / (2.0 * h)
    return Tensor(out.reshape(x.shape))


# text format -----------------------------------------------------------------

def format_tensor(t: Tensor | np.ndarray) -> str:
    """Serialise as ``tensor v1`` text; values use shortest round-trip repr."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = " ".join(str(v) for v in (arr.ndim, *arr.shape))
    values = " ".join(repr(float(v)) for v in arr.ravel())
    return f"tensor v1\n{header}\n{values}\n" if values else f"tensor v1\n{header}\n"


def parse_tensor(text: str) -> Tensor:
    lines = text.split("\n", 2)
    if len(lines) < 2 or lines[0].strip() != "tensor v1":
        raise ValueError("not a 'tensor v1' file")
    dims = [int(v) for v in lines[1].split()]
    if not dims or dims[0] != len(dims) - 1:
        raise ValueError(f"bad rank/extent line: {lines[1]!r}")
    shape = tuple(dims[1:])
    values = np.array([float(v) for v in (lines[2].split() if len(lines) > 2 else [])])
    expected = int(np.prod(shape, dtype=np.int64))
    if values.size != expected:
        raise ValueError(f"expected {expected} values for shape {shape}, found {values.size}")
    return Tensor(values.reshape(shape))


def save_tensor(t: Tensor | np.ndarray, path: str | Path) -> None:
    Path(path).write_text(format_tensor(t), encoding="utf-8")


def load_tensor(path: str | Path) -> Tensor:
    return parse_tensor(Path(path).read_text(encoding="utf-8"))
