"""Dense float64 tensors with taped reverse-mode differentiation.

Tensors are immutable value holders (rank 0, 1, or 2).  While a ``Graph``
is recording, every operation appends a node holding the output, its
parents, and a pull-back closure; ``Graph.backward`` then walks the tape
once in reverse, accumulating gradients into the leaf parameters it saw.

Design constraints the rest of the package relies on:

* all arithmetic is float64, and any NaN/inf surfaces as ``NonFiniteError``
  at the operation that produced it;
* identical inputs give bit-identical outputs (fixed reduction orders, no
  hidden threading decisions at these sizes);
* a graph records once and backpropagates once; reuse raises.

``grad_check`` compares recorded gradients against central finite
differences entry by entry and is the reference oracle used throughout the
test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "GradCheckFailure",
    "GradCheckReport",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "concat",
    "stack",
    "select_rows",
    "gather_rows",
    "take_row",
    "exp",
    "log",
    "tanh",
    "clamp_min",
    "softmax_rows",
    "l2_normalize",
    "reduce_sum",
    "reduce_mean",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A tensor would contain NaN or an infinity."""


class GraphError(RuntimeError):
    """Gradient tape misuse: nesting, reuse, or a loss without a path."""


class Tensor:
    """Immutable float64 array with an optional gradient slot.

    ``grad`` is ``None`` until ``Graph.backward`` runs; afterwards leaf
    tensors that participated in the recorded computation hold an array of
    the same shape as ``values``.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, *, _copy: bool = True):
        if _copy:
            arr = np.array(values, dtype=np.float64, copy=True)
        else:
            arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most rank 2, got shape {arr.shape}")
        # Sum-based probe: any NaN or inf in the array makes the sum
        # non-finite, and desk-scale magnitudes cannot overflow a float64 sum.
        if arr.size and not math.isfinite(float(np.sum(arr))):
            raise NonFiniteError("tensor contains NaN or infinite values")
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Small amount of operator sugar; the module-level functions are the API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Build a tensor from array-like data (always copies)."""
    return Tensor(values, requires_grad=requires_grad)


def constant(values) -> Tensor:
    """Build a non-differentiable tensor from array-like data."""
    return Tensor(values, requires_grad=False)


_ACTIVE: "Graph | None" = None

_PullFn = Callable[[np.ndarray], tuple["np.ndarray | None", ...]]


class Graph:
    """One recording of a computation, consumed by a single backward pass.

    Graphs are single-owner: only one can record at a time and each records
    at most once.  Use as a context manager::

        with Graph() as g:
            loss = loss_fn(params)
        g.backward(loss)
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], _PullFn]] = []
        self._produced: set[int] = set()
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._consumed = False
        self._recorded = False

    def __enter__(self) -> "Graph":
        global _ACTIVE
        if _ACTIVE is not None:
            raise GraphError("another graph is already recording; graphs do not nest")
        if self._recorded:
            raise GraphError("graphs are single-use; create a fresh one to re-record")
        self._recorded = True
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _ACTIVE
        _ACTIVE = None
        return False

    @property
    def leaf_parameters(self) -> tuple[Tensor, ...]:
        """Leaf tensors with ``requires_grad`` that entered this recording."""
        return tuple(self._leaves)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], pull: _PullFn) -> None:
        self._nodes.append((out, parents, pull))
        self._produced.add(id(out))
        for p in parents:
            if p.requires_grad and id(p) not in self._produced and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self._leaves.append(p)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

        The tape is traversed exactly once in reverse recording order, which
        is a reverse topological order by construction.
        """
        if _ACTIVE is self:
            raise GraphError("backward inside the recording context is not allowed")
        if self._consumed:
            raise GraphError("backward was already run on this graph")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or id(loss) not in self._produced:
            raise GraphError("loss has no gradient path recorded on this graph")
        self._consumed = True

        acc: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, parents, pull in reversed(self._nodes):
            g = acc.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, pull(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = acc.get(id(parent))
                acc[id(parent)] = pg if prev is None else prev + pg
        for leaf in self._leaves:
            g = acc.get(id(leaf))
            if g is not None and not math.isfinite(float(np.sum(g))):
                raise NonFiniteError("gradient contains NaN or infinite values")
            leaf.grad = g


def _result(values: np.ndarray, parents: tuple[Tensor, ...], pull: _PullFn) -> Tensor:
    graph = _ACTIVE
    needs = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs, _copy=False)
    if needs:
        graph._record(out, parents, pull)
    return out


def _ew_check(a: Tensor, b: Tensor, op: str) -> None:
    # Allowed elementwise pairings: identical shapes, a rank-0 scalar on
    # either side, or matrix (m,n) with a row vector (n,).
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(np.sum(g))
    # (m,n) gradient reduced onto a row vector (n,)
    return np.sum(g, axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    _ew_check(a, b, "add")
    sa, sb = a.shape, b.shape

    def pull(g: np.ndarray):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.values + b.values, (a, b), pull)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _ew_check(a, b, "sub")
    sa, sb = a.shape, b.shape

    def pull(g: np.ndarray):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _result(a.values - b.values, (a, b), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; also covers scalar × tensor."""
    _ew_check(a, b, "mul")
    av, bv = a.values, b.values

    def pull(g: np.ndarray):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _result(av * bv, (a, b), pull)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a compile-time constant (no gradient flows to ``c``)."""
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError("scale factor must be finite")

    def pull(g: np.ndarray):
        return (g * c,)

    return _result(x.values * c, (x,), pull)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (k,)@(k,n) and (m,k)@(k,)."""
    av, bv = a.values, b.values
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")

        def pull(g: np.ndarray):
            return g @ bv.T, av.T @ g

    elif av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")

        def pull(g: np.ndarray):
            return bv @ g, np.outer(av, g)

    elif av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")

        def pull(g: np.ndarray):
            return np.outer(g, bv), av.T @ g

    else:
        raise ShapeError(f"matmul: unsupported ranks {av.shape} @ {bv.shape}")
    return _result(av @ bv, (a, b), pull)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got shape {x.shape}")

    def pull(g: np.ndarray):
        return (g.T,)

    return _result(x.values.T, (x,), pull)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors of equal rank along ``axis``."""
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    ndim = parts[0].ndim
    if ndim == 0:
        raise ShapeError("concat does not accept rank-0 tensors")
    if any(p.ndim != ndim for p in parts):
        raise ShapeError("concat operands must share their rank")
    if not (0 <= axis < ndim):
        raise ShapeError(f"concat axis {axis} out of range for rank {ndim}")
    other = [tuple(s for i, s in enumerate(p.shape) if i != axis) for p in parts]
    if any(o != other[0] for o in other):
        raise ShapeError("concat operands disagree on non-concatenated dims")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def pull(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), pull)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into the rows of a matrix."""
    if not parts:
        raise ShapeError("stack needs at least one tensor")
    if any(p.ndim != 1 for p in parts):
        raise ShapeError("stack operands must be rank 1")
    n = parts[0].shape[0]
    if any(p.shape[0] != n for p in parts):
        raise ShapeError("stack operands must share their length")

    def pull(g: np.ndarray):
        return tuple(g[i] for i in range(len(parts)))

    return _result(np.stack([p.values for p in parts], axis=0), tuple(parts), pull)


def select_rows(x: Tensor, keep: Sequence[int]) -> Tensor:
    """Keep the rows of a matrix flagged 1 in ``keep``, preserving order.

    Dropped rows receive exactly zero gradient, which is what makes
    downstream computations bit-independent of their contents.
    """
    if x.ndim != 2:
        raise ShapeError(f"select_rows needs a rank-2 tensor, got shape {x.shape}")
    bits = np.asarray(keep, dtype=np.int64)
    if bits.ndim != 1 or bits.shape[0] != x.shape[0]:
        raise ShapeError(f"mask length {bits.shape} does not match {x.shape[0]} rows")
    if not np.isin(bits, (0, 1)).all():
        raise ShapeError("mask entries must be 0 or 1")
    idx = np.flatnonzero(bits)
    if idx.size == 0:
        raise ShapeError("select_rows would keep no rows")
    xv = x.values

    def pull(g: np.ndarray):
        out = np.zeros_like(xv)
        out[idx] = g
        return (out,)

    return _result(xv[idx], (x,), pull)


def gather_rows(x: Tensor, order: Sequence[int]) -> Tensor:
    """Reindex the rows of a matrix; repeated indices accumulate gradient."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 tensor, got shape {x.shape}")
    idx = np.asarray(order, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows needs a non-empty index vector")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise ShapeError(f"gather_rows index out of range for {x.shape[0]} rows")
    xv = x.values

    def pull(g: np.ndarray):
        out = np.zeros_like(xv)
        np.add.at(out, idx, g)
        return (out,)

    return _result(xv[idx], (x,), pull)


def take_row(x: Tensor, i: int) -> Tensor:
    """Extract row ``i`` of a matrix as a rank-1 tensor."""
    if x.ndim != 2:
        raise ShapeError(f"take_row needs a rank-2 tensor, got shape {x.shape}")
    if not (0 <= i < x.shape[0]):
        raise ShapeError(f"row {i} out of range for {x.shape[0]} rows")
    xv = x.values

    def pull(g: np.ndarray):
        out = np.zeros_like(xv)
        out[i] = g
        return (out,)

    return _result(xv[i].copy(), (x,), pull)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        ev = np.exp(x.values)  # overflow surfaces as NonFiniteError below

    def pull(g: np.ndarray):
        return (g * ev,)

    return _result(ev, (x,), pull)


def log(x: Tensor) -> Tensor:
    xv = x.values
    if xv.size and float(np.min(xv)) <= 0.0:
        raise NonFiniteError("log needs strictly positive input")

    def pull(g: np.ndarray):
        return (g / xv,)

    return _result(np.log(xv), (x,), pull)


def tanh(x: Tensor) -> Tensor:
    tv = np.tanh(x.values)

    def pull(g: np.ndarray):
        return (g * (1.0 - tv * tv),)

    return _result(tv, (x,), pull)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    floor = float(floor)
    if not math.isfinite(floor):
        raise NonFiniteError("clamp floor must be finite")
    xv = x.values
    mask = xv > floor

    def pull(g: np.ndarray):
        return (g * mask,)

    return _result(np.maximum(xv, floor), (x,), pull)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax (a rank-1 tensor is treated as a single row).

    Numerically stabilized by subtracting the row max before
    exponentiating; each output row sums to 1 within 1e-12.
    """
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax_rows needs rank 1 or 2, got shape {x.shape}")
    xv = x.values
    m = np.max(xv, axis=-1, keepdims=True)
    e = np.exp(xv - m)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def pull(g: np.ndarray):
        inner = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _result(s, (x,), pull)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale to unit Euclidean norm (row-wise on matrices).

    The denominator is guarded at 1e-12, so a zero vector maps to the zero
    vector instead of raising; any input with a larger norm comes out unit
    length to machine precision.
    """
    if x.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize needs rank 1 or 2, got shape {x.shape}")
    xv = x.values
    n = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    d = np.maximum(n, 1e-12)
    live = n > 1e-12  # below the guard the map is x / const, so no norm term

    def pull(g: np.ndarray):
        inner = np.sum(g * xv, axis=-1, keepdims=True)
        return (g / d - xv * (live * inner / (d * d * d)),)

    return _result(xv / d, (x,), pull)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None and not (0 <= axis < x.ndim):
        raise ShapeError(f"sum axis {axis} out of range for shape {x.shape}")
    xv = x.values

    def pull(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _result(np.asarray(np.sum(xv, axis=axis)), (x,), pull)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None and not (0 <= axis < x.ndim):
        raise ShapeError(f"mean axis {axis} out of range for shape {x.shape}")
    xv = x.values
    if xv.size == 0:
        raise ShapeError("mean of an empty tensor")
    count = xv.size if axis is None else xv.shape[axis]

    def pull(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g / count, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), xv.shape).copy(),)

    return _result(np.asarray(np.mean(xv, axis=axis)), (x,), pull)


# --------------------------------------------------------------------------
# Finite-difference verification


@dataclass(frozen=True)
class GradCheckFailure:
    param: str
    index: tuple[int, ...]
    finite_diff: float
    recorded: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep over a parameter set."""

    step: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[GradCheckFailure] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.failures


def _params_of(state) -> dict[str, Tensor]:
    mapping = getattr(state, "params", state)
    if not isinstance(mapping, Mapping):
        raise TypeError("grad_check needs a ModelState or a name->Tensor mapping")
    return dict(mapping)


def _with_param(state, name: str, new: Tensor):
    swap = getattr(state, "with_param", None)
    if swap is not None:
        return swap(name, new)
    out = dict(state)
    out[name] = new
    return out


def grad_check(loss_fn, state, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare recorded gradients against central finite differences.

    ``loss_fn`` must be a deterministic scalar-valued function of ``state``
    (a ModelState or a plain name->Tensor mapping); any sampling it depends
    on must already be drawn and fixed.  Every entry of every parameter
    with ``requires_grad`` is perturbed by ``±step`` and
    ``(f(x+h) - f(x-h)) / 2h`` is compared to the recorded gradient under
    the relative error ``|fd - ad| / max(1e-6, |fd| + |ad|)``.  The 1e-6
    floor is calibrated to what the difference itself can resolve: with
    an order-one loss its cancellation noise is about ``eps / step``
    (~2e-11), so near-zero entries would otherwise fail on pure roundoff.

    Entries over tolerance are reported, not raised.
    """
    params = _params_of(state)

    # a parameter the loss never touches keeps whatever .grad an earlier
    # backward left on it, so start the measurement from a clean slate
    for p in params.values():
        if p.requires_grad:
            p.grad = None

    with Graph() as graph:
        loss = loss_fn(state)
    if loss.shape != ():
        raise ShapeError("grad_check needs a scalar-valued loss_fn")
    graph.backward(loss)

    report = GradCheckReport(step=step, tolerance=tolerance)
    for name in sorted(params):
        p = params[name]
        if not p.requires_grad:
            continue
        recorded = p.grad if p.grad is not None else np.zeros_like(p.values)
        worst = 0.0
        base = p.values
        for index in np.ndindex(base.shape):
            plus = base.copy()
            plus[index] += step
            minus = base.copy()
            minus[index] -= step
            f_plus = loss_fn(_with_param(state, name, Tensor(plus, p.requires_grad, _copy=False))).item()
            f_minus = loss_fn(_with_param(state, name, Tensor(minus, p.requires_grad, _copy=False))).item()
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = float(recorded[index])
            rel = abs(fd - ad) / max(1e-6, abs(fd) + abs(ad))
            if rel > worst:
                worst = rel
            if rel > tolerance:
                report.failures.append(GradCheckFailure(name, index, fd, ad, rel))
        report.per_param[name] = worst
    return report
