"""
Dense binary64 tensors with reverse-mode automatic differentiation.

This module is the numerical core of nitplab. It provides a small ``Tensor``
type, a per-thread recording ``Graph`` (a tape of node records in topological
order) and the differentiable operations the toy transformer and both
training objectives are written in:

- linear algebra: ``matmul``, ``transpose``, ``add``, ``sub``, ``mul``, ``scale``
- row plumbing: ``take_rows``, ``scatter_rows``, ``take_column``, ``mul_rows``,
  ``slice_columns``, ``concat_columns``
- reductions: ``tensor_sum``, ``mean``, ``row_sum``
- nonlinearities: ``silu``, ``softmax``, ``log_softmax``, ``huber``
- model blocks: ``rmsnorm``, ``swiglu``, ``cross_entropy``
- geometry: ``cosine_similarity``, ``rowwise_cosine``
- ``stop_gradient``

Broadcasting is limited to bias-add and row-wise scaling. Every other
operation requires explicitly matching shapes.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import reduce
from itertools import count
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

logger = logging.getLogger(__name__)

RMS_EPS = 1e-6


class AutogradError(Exception):
    """Base class for errors raised by the autodiff core."""
    pass


class DimensionError(AutogradError, ValueError):
    """Raised when operand shapes do not agree."""
    pass


class NumericError(AutogradError, ArithmeticError):
    """Raised on NaN or otherwise non-finite numerics."""
    pass


class DegenerateVectorError(AutogradError, ValueError):
    """Raised when a direction is requested from a zero-norm vector."""
    pass


class EmptyBatchError(AutogradError, ValueError):
    """Raised when a reduction has no unmasked position to average over."""
    pass


class GraphError(AutogradError, RuntimeError):
    """Raised on misuse of a recording graph (dead graph, non-scalar loss, ...)."""
    pass


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    """Whether operations executed on this thread are recorded."""
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run a block without recording any node (outputs are constants)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class Node:
    """One recorded operation."""
    node_id: int
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    vjp: VJP


class Graph:
    """
    Tape of node records for one forward pass.

    Nodes are appended in execution order, so the tape is topologically
    ordered by construction. A graph is live until ``backward`` consumes it
    (or ``close`` is called); afterwards its tensors behave as constants.
    """

    _ids = count(1)

    def __init__(self):
        self.graph_id = next(Graph._ids)
        self.nodes: List[Node] = []
        self.live = True

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", vjp: VJP) -> None:
        node_id = len(self.nodes)
        output.node_id = node_id
        output._graph = self
        self.nodes.append(Node(node_id, op, inputs, output, vjp))

    def close(self) -> None:
        """Mark the graph dead and drop its node records."""
        self.live = False
        self.nodes = []
        if getattr(_state, "graph", None) is self:
            _state.graph = None

    def __len__(self) -> int:
        return len(self.nodes)


def current_graph() -> Graph:
    """Return this thread's live graph, starting a new one if necessary."""
    graph = getattr(_state, "graph", None)
    if graph is None or not graph.live:
        graph = Graph()
        _state.graph = graph
        logger.debug(f"Started autodiff graph {graph.graph_id}")
    return graph


class Tensor:
    """
    n-dimensional binary64 value array with optional gradient.

    Attributes:
        values: Row-major float64 array
        requires_grad: Whether gradients are accumulated for this tensor
        grad: Same-shape gradient array, present after a backward pass reached it
        node_id: Position in the recording graph (None for leaves and constants)
    """

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if any(extent <= 0 for extent in arr.shape):
            raise DimensionError(f"Tensor extents must be positive, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._graph: Optional[Graph] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if any(extent <= 0 for extent in arr.shape):
            raise DimensionError(f"Tensor extents must be positive, got shape {arr.shape}")
        out.values = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = None
        out._graph = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        """Constant copy outside any graph."""
        return Tensor._wrap(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, inputs)

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other))

    def __sub__(self, other) -> "Tensor":
        return sub(self, _as_tensor(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, graph: Graph) -> bool:
    """Whether gradient should flow into ``t`` within ``graph``."""
    if not t.requires_grad:
        return False
    if t._graph is None:
        return True
    if t._graph is graph:
        return True
    if t._graph.live:
        raise GraphError(
            f"Tensor {t!r} participates in live graph {t._graph.graph_id}, "
            f"cannot join graph {graph.graph_id}"
        )
    # Output of a consumed graph: a constant from here on.
    return False


def _make(op: str, values: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    """Wrap an op result, recording a node when any input is tracked."""
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        graph = current_graph()
        if any(_tracked(t, graph) for t in inputs):
            out = Tensor._wrap(values, requires_grad=True)
            graph.record(op, inputs, out, vjp)
            return out
    return Tensor._wrap(values)


def _fill_missing_grads(inputs: Optional[Iterable[Tensor]]) -> None:
    for t in inputs or ():
        if t.grad is None:
            t.zero_grad()


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """
    Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tracked tensor.

    Leaf gradients accumulate across calls until reset; the graph is consumed,
    so a second call on the same loss raises ``GraphError``. Tensors listed in
    ``inputs`` that the loss does not reach (all of them for a constant loss)
    end with an all-zero gradient instead of None.

    Raises:
        GraphError: If the loss is not a scalar or its graph was already consumed
    """
    if loss.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    inputs = list(inputs) if inputs is not None else None
    graph = loss._graph
    if graph is None:
        logger.debug("backward() on a constant loss; no gradients to propagate")
        _fill_missing_grads(inputs)
        return
    if not graph.live:
        raise GraphError(
            f"Graph {graph.graph_id} was already consumed by backward(); rebuild the forward pass"
        )

    pending = {loss.node_id: np.ones(())}
    for node in reversed(graph.nodes[: loss.node_id + 1]):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        node.output.grad = g if node.output.grad is None else node.output.grad + g
        for inp, inp_grad in zip(node.inputs, node.vjp(g)):
            if inp_grad is None or not inp.requires_grad:
                continue
            if inp._graph is graph:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = inp_grad if prev is None else prev + inp_grad
            elif inp._graph is None:
                inp.grad = np.array(inp_grad, dtype=np.float64) if inp.grad is None else inp.grad + inp_grad
    logger.debug(f"Backward through graph {graph.graph_id} done")
    graph.close()
    _fill_missing_grads(inputs)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _make("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector matching the last axis of ``a``."""
    if a.shape == b.shape:
        return _make("add", a.values + b.values, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        width = b.shape[0]
        return _make(
            "add_bias", a.values + b.values, (a, b),
            lambda g: (g, g.reshape(-1, width).sum(axis=0)),
        )
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not agree")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not agree")
    return _make("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not agree")
    av, bv = a.values, b.values
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.values * c, (a,), lambda g: (g * c,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("add_n needs at least one tensor")
    return reduce(add, tensors)


# ---------------------------------------------------------------------------
# Row plumbing


def _check_index(idx: np.ndarray, bound: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError(f"{what}: index must be a non-empty vector, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= bound:
        raise IndexError(f"{what}: index out of range [0, {bound})")
    return idx


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]`` (embedding lookup, position selection)."""
    if a.ndim != 2:
        raise DimensionError(f"take_rows needs a matrix, got shape {a.shape}")
    idx = _check_index(idx, a.shape[0], "take_rows")
    n_rows = a.shape[0]

    def vjp(g):
        out = np.zeros((n_rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _make("take_rows", a.values[idx], (a,), vjp)


def scatter_rows(a: Tensor, idx, num_rows: int) -> Tensor:
    """Sum rows of ``a`` into a zero ``num_rows``×d matrix at positions ``idx``."""
    if a.ndim != 2:
        raise DimensionError(f"scatter_rows needs a matrix, got shape {a.shape}")
    idx = _check_index(idx, num_rows, "scatter_rows")
    if idx.size != a.shape[0]:
        raise DimensionError(f"scatter_rows: {idx.size} indices for {a.shape[0]} rows")
    out = np.zeros((num_rows, a.shape[1]))
    np.add.at(out, idx, a.values)
    return _make("scatter_rows", out, (a,), lambda g: (g[idx],))


def take_column(a: Tensor, j: int) -> Tensor:
    if a.ndim != 2 or not 0 <= j < a.shape[1]:
        raise DimensionError(f"take_column: column {j} invalid for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _make("take_column", a.values[:, j].copy(), (a,), vjp)


def mul_rows(a: Tensor, w: Tensor) -> Tensor:
    """Scale row i of an n×d matrix by ``w[i]``."""
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise DimensionError(f"mul_rows: shapes {a.shape} and {w.shape} do not agree")
    av, wv = a.values, w.values
    return _make(
        "mul_rows", av * wv[:, None], (a, w),
        lambda g: (g * wv[:, None], (g * av).sum(axis=1)),
    )


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"slice_columns: [{start}:{stop}] invalid for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make("slice_columns", a.values[:, start:stop].copy(), (a,), vjp)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.ndim != 2 or p.shape[0] != parts[0].shape[0] for p in parts):
        raise DimensionError(f"concat_columns: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make("concat_columns", np.concatenate([p.values for p in parts], axis=1), tuple(parts), vjp)


# ---------------------------------------------------------------------------
# Reductions


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum", np.array(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make("mean", np.array(a.values.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis of a matrix."""
    if a.ndim != 2:
        raise DimensionError(f"row_sum needs a matrix, got shape {a.shape}")
    width = a.shape[1]
    return _make("row_sum", a.values.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], width, axis=1),))


# ---------------------------------------------------------------------------
# Nonlinearities


def silu(x: Tensor) -> Tensor:
    """t·sigmoid(t), elementwise."""
    xv = x.values
    sig = expit(xv)

    def vjp(g):
        return (g * (sig + xv * sig * (1.0 - sig)),)

    return _make("silu", xv * sig, (x,), vjp)


def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis, computed with max-subtraction.

    Args:
        x: Input logits
        mask: Optional boolean array of ``x``'s shape; False entries get
              probability exactly 0

    Raises:
        NumericError: On NaN input
    """
    xv = x.values
    _check_finite(xv, "softmax")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xv.shape:
            raise DimensionError(f"softmax: mask shape {mask.shape} != input shape {xv.shape}")
        if not mask.any(axis=-1).all():
            raise EmptyBatchError("softmax: a row has every entry masked")
        shifted = np.where(mask, xv, -np.inf)
    else:
        shifted = xv
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    xv = x.values
    _check_finite(xv, "log_softmax")
    out = xv - logsumexp(xv, axis=-1, keepdims=True)
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), vjp)


def huber(x: Tensor, beta: float) -> Tensor:
    """Elementwise smooth-L1: 0.5·x²/β inside |x|<β, |x|−0.5·β outside."""
    if beta <= 0:
        raise ValueError(f"huber: beta must be positive, got {beta}")
    xv = x.values
    ax = np.abs(xv)
    out = np.where(ax < beta, 0.5 * xv * xv / beta, ax - 0.5 * beta)
    return _make("huber", out, (x,), lambda g: (g * np.clip(xv / beta, -1.0, 1.0),))


# ---------------------------------------------------------------------------
# Model blocks


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """
    Mean negative log-likelihood over unmasked positions.

    Args:
        logits: T×V tensor
        targets: T integer ids in [0, V)
        mask: Optional T booleans; False positions are excluded

    Raises:
        IndexError: If a target id is out of range
        EmptyBatchError: If every position is masked
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs T×V logits, got shape {logits.shape}")
    n_pos, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n_pos,):
        raise DimensionError(f"cross_entropy: {targets.shape} targets for {n_pos} positions")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"cross_entropy: target id out of range [0, {vocab})")
    weights = np.ones(n_pos) if mask is None else np.asarray(mask, dtype=bool).astype(np.float64)
    count = weights.sum()
    if count == 0:
        raise EmptyBatchError("cross_entropy: every position is masked")

    lv = logits.values
    _check_finite(lv, "cross_entropy")
    rows = np.arange(n_pos)
    lse = logsumexp(lv, axis=1)
    nll = lse - lv[rows, targets]
    loss = float((nll * weights).sum() / count)

    def vjp(g):
        grad = np.exp(lv - lse[:, None])
        grad[rows, targets] -= 1.0
        return (grad * (weights / count * float(g))[:, None],)

    return _make("cross_entropy", np.array(loss), (logits,), vjp)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """x · gain / sqrt(mean(x²) + eps) over the last axis."""
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"rmsnorm: input {x.shape} and gain {gain.shape} do not agree")
    xv, gv = x.values, gain.values
    inv = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    normed = xv * inv
    width = gv.shape[0]

    def vjp(g):
        gn = g * gv
        dx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        dgain = (g * normed).reshape(-1, width).sum(axis=0)
        return dx, dgain

    return _make("rmsnorm", normed * gv, (x, gain), vjp)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """W_d · (silu(x·W_g) ⊙ (x·W_u)) for an n×d input."""
    if not (w_gate.shape == w_up.shape and w_down.shape == w_gate.shape[::-1]):
        raise DimensionError(
            f"swiglu: gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape} do not agree"
        )
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


# ---------------------------------------------------------------------------
# Geometry


def _cosine(a: Tensor, b: Tensor, op: str) -> Tensor:
    av, bv = a.values, b.values
    ra = np.linalg.norm(av, axis=-1, keepdims=True)
    rb = np.linalg.norm(bv, axis=-1, keepdims=True)
    if (ra == 0).any() or (rb == 0).any():
        raise DegenerateVectorError(f"{op}: zero-norm input has no direction")
    ua, ub = av / ra, bv / rb
    cos = np.sum(ua * ub, axis=-1, keepdims=True)

    def vjp(g):
        g = np.asarray(g)[..., None]
        # d cos / d a = (v - s·u) / r, the tangential difference over the norm
        return g * (ub - cos * ua) / ra, g * (ua - cos * ub) / rb

    return _make(op, cos[..., 0], (a, b), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """aᵀb / (‖a‖‖b‖) for two d-vectors.

    Raises:
        DegenerateVectorError: If either input has zero norm
    """
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} must be equal vectors")
    return _cosine(a, b, "cosine_similarity")


def rowwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of matching rows of two n×d matrices (length-n result)."""
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"rowwise_cosine: shapes {a.shape} and {b.shape} must be equal matrices")
    return _cosine(a, b, "rowwise_cosine")


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity whose backward contributes nothing to ``x``'s ancestors."""
    out = Tensor._wrap(x.values.copy())
    if is_grad_enabled() and x.requires_grad:
        graph = current_graph()
        if _tracked(x, graph):
            graph.record("stop_gradient", (x,), out, lambda g: (None,))
    return out
