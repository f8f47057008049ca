"""
Dense tensors with a recording tape for reverse-mode differentiation.

Primitives are module-level functions. Inside `with Tape() as tape:` every
primitive is recorded on `tape`; outside a tape they only compute values,
which is the inference path used by evaluation and tracing.
"""

import itertools
import math
from contextvars import ContextVar
from dataclasses import dataclass, field
from enum import Enum
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

from constants import Activation, DType
from errors import (
    DTypeMismatchError,
    LabelRangeError,
    ShapeMismatchError,
    TapeError,
)

_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)
_IDS = itertools.count()

_DTYPES = {np.dtype(np.float32): DType.F32, np.dtype(np.float64): DType.F64}


class OpKind(StrEnum):
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    ADD = "add"
    ADD_BIAS = "add_bias"
    ACTIVATION = "activation"
    GATHER_ROWS = "gather_rows"
    SEGMENT_MEAN = "segment_mean"
    MEAN = "mean"
    SUM = "sum"
    SCALE = "scale"
    SOFTMAX_XENT = "softmax_cross_entropy"


class Tensor:
    """Immutable value: a read-only float array plus the id it carries on a tape"""

    __slots__ = ("data", "tid")

    def __init__(self, data, tid: int | None = None):
        arr = np.array(data, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype not in _DTYPES:
            raise DTypeMismatchError(f"unsupported dtype {arr.dtype}; use f32 or f64")
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.tid = tid if tid is not None else next(_IDS)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> DType:
        return _DTYPES[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, tid={self.tid})"


@dataclass
class Node:
    op: OpKind
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    _leaves: dict[int, Tensor] = field(default_factory=dict)
    _known: dict[int, tuple[tuple[int, ...], np.dtype]] = field(default_factory=dict)
    _token: object = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def watch(self, data: np.ndarray) -> Tensor:
        """Register a parameter leaf; backward always returns a gradient for it"""
        t = Tensor(data)
        self._leaves[t.tid] = t
        self._known[t.tid] = (t.shape, t.data.dtype)
        return t

    @property
    def leaves(self) -> dict[int, Tensor]:
        return dict(self._leaves)

    def record(self, op: OpKind, inputs: Sequence[Tensor], out: Tensor, backward_fn):
        self.nodes.append(Node(op, tuple(t.tid for t in inputs), out.tid, backward_fn))
        self._known[out.tid] = (out.shape, out.data.dtype)
        return out

    def knows(self, tid: int) -> bool:
        return tid in self._known


def current_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _emit(op: OpKind, inputs: Sequence[Tensor], value: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(value)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _same_dtype(*tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        names = ", ".join(str(_DTYPES[d]) for d in sorted(dtypes, key=str))
        raise DTypeMismatchError(f"mixed dtypes in one operation: {names}")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in _DTYPES:
        # plain python numbers enter as f64 constants
        arr = arr.astype(np.float64)
    return Tensor(arr)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul shapes {list(a.shape)} and {list(b.shape)} do not conform"
        )
    av, bv = a.data, b.data

    def backward(g):
        return g @ bv.T, av.T @ g

    return _emit(OpKind.MATMUL, (a, b), av @ bv, backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose needs a matrix, got shape {list(a.shape)}")
    return _emit(
        OpKind.TRANSPOSE, (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,)
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"elementwise shapes {list(a.shape)} and {list(b.shape)} differ"
        )
    return _emit(OpKind.ADD, (a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[n, m] + bias[m], the only broadcast the engine allows"""
    x, bias = _as_tensor(x), _as_tensor(bias)
    _same_dtype(x, bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeMismatchError(
            f"bias of shape {list(bias.shape)} does not fit rows of {list(x.shape)}"
        )

    def backward(g):
        return g, np.add.reduce(g, axis=0)

    return _emit(OpKind.ADD_BIAS, (x, bias), x.data + bias.data, backward)


def _activate(kind: Activation, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and derivative of the activation at x"""
    if kind == Activation.RELU:
        return np.maximum(x, 0).astype(x.dtype), (x > 0).astype(x.dtype)
    if kind == Activation.SILU:
        s = expit(x)
        return x * s, s * (1 + x * (1 - s))
    if kind == Activation.GELU:
        cdf = 0.5 * (1 + erf(x / math.sqrt(2)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
        return (x * cdf).astype(x.dtype), (cdf + x * pdf).astype(x.dtype)
    raise ValueError(f"unknown activation {kind!r}")


def activation(x: Tensor, kind: Activation) -> Tensor:
    x = _as_tensor(x)
    value, slope = _activate(Activation(kind), x.data)
    return _emit(OpKind.ACTIVATION, (x,), value, lambda g: (g * slope,))


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Embedding lookup: out[i] = table[indices[i]]"""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatchError(f"gather needs a matrix, got {list(table.shape)}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"row index out of range for table of shape {list(table.shape)}"
        )
    shape, dtype = table.shape, table.data.dtype

    def backward(g):
        grad = np.zeros(shape, dtype=dtype)
        np.add.at(grad, idx, g)
        return (grad,)

    return _emit(OpKind.GATHER_ROWS, (table,), table.data[idx], backward)


def segment_mean(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Mean of the rows of x sharing a segment id; rows are summed in index order"""
    x = _as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    if x.data.ndim != 2 or seg.shape != (x.shape[0],):
        raise ShapeMismatchError(
            f"segment ids of shape {list(seg.shape)} do not label rows of {list(x.shape)}"
        )
    counts = np.bincount(seg, minlength=n_segments)
    if counts.shape[0] != n_segments or np.any(counts == 0):
        raise ShapeMismatchError("every segment needs at least one row")
    sums = np.zeros((n_segments, x.shape[1]), dtype=x.data.dtype)
    np.add.at(sums, seg, x.data)
    denom = counts.astype(x.data.dtype)[:, None]

    def backward(g):
        return ((g / denom)[seg],)

    return _emit(OpKind.SEGMENT_MEAN, (x,), sums / denom, backward)


def mean(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeMismatchError(f"axis {axis} out of range for shape {list(x.shape)}")
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / x.data.dtype.type(n),)

    return _emit(OpKind.MEAN, (x,), np.mean(x.data, axis=axis, dtype=x.data.dtype), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, dtype = x.shape, x.data.dtype
    value = np.asarray(np.add.reduce(x.data.reshape(-1)), dtype=dtype)
    return _emit(OpKind.SUM, (x,), value, lambda g: (np.full(shape, g, dtype=dtype),))


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    c = x.data.dtype.type(factor)
    return _emit(OpKind.SCALE, (x,), x.data * c, lambda g: (g * c,))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch, as a 0-d tensor"""
    logits = _as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"labels of shape {list(y.shape)} do not match logits {list(logits.shape)}"
        )
    n, c = logits.shape
    bad = np.flatnonzero((y < 0) | (y >= c))
    if bad.size:
        i = int(bad[0])
        raise LabelRangeError(f"label {int(y[i])} at example {i} not in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(z)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = z - np.log(total)
    rows = np.arange(n)
    dtype = logits.data.dtype
    value = np.asarray(-np.mean(log_probs[rows, y], dtype=dtype), dtype=dtype)

    def backward(g):
        grad = exp / total
        grad[rows, y] -= 1
        return (grad * (g / dtype.type(n)),)

    return _emit(OpKind.SOFTMAX_XENT, (logits,), value, backward)


_PRIMITIVES = {
    OpKind.MATMUL: matmul,
    OpKind.TRANSPOSE: transpose,
    OpKind.ADD: add,
    OpKind.ADD_BIAS: add_bias,
    OpKind.ACTIVATION: activation,
    OpKind.GATHER_ROWS: gather_rows,
    OpKind.SEGMENT_MEAN: segment_mean,
    OpKind.MEAN: mean,
    OpKind.SUM: sum_all,
    OpKind.SCALE: scale,
    OpKind.SOFTMAX_XENT: softmax_cross_entropy,
}


def forward_primitive(kind: OpKind | str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. forward_primitive("matmul", a, b)"""
    try:
        fn = _PRIMITIVES[OpKind(kind)]
    except ValueError:
        raise TapeError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


def backward(tape: Tape, loss_id: int) -> dict[int, np.ndarray]:
    """
    Reverse sweep over the tape from a scalar loss.

    Returns a gradient for every watched leaf; leaves with no path to the
    loss get zeros of their own shape.
    """
    if not tape.knows(loss_id):
        raise TapeError(f"tensor id {loss_id} was not produced on this tape")
    shape, dtype = tape._known[loss_id]
    if int(np.prod(shape, dtype=np.int64)) != 1:
        raise TapeError(f"loss must be scalar, got shape {list(shape)}")

    grads: dict[int, np.ndarray] = {loss_id: np.ones(shape, dtype=dtype)}
    for node in reversed(tape.nodes):
        g_out = grads.get(node.output)
        if g_out is None:
            continue
        for tid, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not tape.knows(tid):
                continue
            prev = grads.get(tid)
            grads[tid] = g if prev is None else prev + g

    tape.gradients = {
        tid: np.asarray(grads[tid], dtype=leaf.data.dtype).reshape(leaf.shape)
        if tid in grads
        else np.zeros(leaf.shape, dtype=leaf.data.dtype)
        for tid, leaf in tape.leaves.items()
    }
    return tape.gradients


def gradient_check(
    fn: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], step: float = 1e-5
) -> float:
    """Relative error between analytic and central-difference gradients of fn"""
    with Tape() as tape:
        leaves = [tape.watch(a) for a in arrays]
        loss = fn(leaves)
    analytic = backward(tape, loss.tid)

    worst = 0.0
    for leaf, base in zip(leaves, arrays):
        numeric = np.zeros_like(base, dtype=np.float64)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            plus, minus = base.copy(), base.copy()
            plus.reshape(-1)[i] += step
            minus.reshape(-1)[i] -= step
            f_plus = fn([Tensor(plus) if a is base else Tensor(a) for a in arrays]).item()
            f_minus = fn([Tensor(minus) if a is base else Tensor(a) for a in arrays]).item()
            flat[i] = (f_plus - f_minus) / (2 * step)
        exact = analytic[leaf.tid].astype(np.float64)
        scale_ = max(np.linalg.norm(exact), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(exact - numeric) / scale_))
    return worst
