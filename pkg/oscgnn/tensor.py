"""
Dense real tensors with tape-based reverse-mode differentiation.
Complex feature matrices are carried as a pair of real planes.
"""
from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, EmptySoftmaxError, TapeStateError

Array = np.ndarray
VJP = Callable[[Array], Tuple[Optional[Array], ...]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)
_node_ids = itertools.count()


class RealTensor:
    """Row-major float64 matrix that can take part in a recorded computation."""

    __slots__ = ("_data", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}", shape=arr.shape)
        arr = np.atleast_2d(arr)
        arr.flags.writeable = False
        self._data = arr
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: Array) -> "RealTensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out._data = arr
        out.grad = None
        out.requires_grad = False
        out.node_id = next(_node_ids)
        out.tape = None
        out.name = None
        return out

    @property
    def data(self) -> Array:
        return self._data

    @property
    def shape(self) -> Tuple[int, int]:
        return self._data.shape

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    def assign(self, values: Array) -> None:
        """Replace the values in place (optimizer updates); shape is fixed."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise DimensionError(f"cannot assign {arr.shape} into {self.shape}", expected=self.shape, got=arr.shape)
        arr.flags.writeable = False
        self._data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self._data[0, 0])

    def numpy(self) -> Array:
        return self._data

    def detach(self) -> "RealTensor":
        return RealTensor._wrap(self._data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<RealTensor{label} shape={self.shape} requires_grad={self.requires_grad}>"


def as_tensor(value: Union["RealTensor", Array, float]) -> RealTensor:
    if isinstance(value, RealTensor):
        return value
    return RealTensor(value)


def zeros(rows: int, cols: int) -> RealTensor:
    return RealTensor._wrap(np.zeros((rows, cols)))


@dataclass
class _Record:
    output: RealTensor
    parents: Tuple[RealTensor, ...]
    vjp: VJP


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on tensors that require gradients are
    recorded while the tape is active. One tape supports one backward pass.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False
        self._leaves: Dict[int, RealTensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, data: Array, parents: Sequence[RealTensor], vjp: VJP) -> RealTensor:
        if self.consumed:
            raise TapeStateError("cannot record on a tape whose backward pass already ran")
        out = RealTensor._wrap(data)
        out.requires_grad = True
        out.tape = self
        for parent in parents:
            if parent.requires_grad and parent.tape is not self:
                self._leaves.setdefault(parent.node_id, parent)
        self.records.append(_Record(out, tuple(parents), vjp))
        return out

    def backward(self, loss: RealTensor) -> None:
        if self.consumed:
            raise TapeStateError("backward already ran on this tape; build a new tape")
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be 1x1, got {loss.shape}", shape=loss.shape)
        if not self.records:
            raise ContractError("tape is empty")
        if loss.tape is not self:
            raise ContractError("loss was not produced on this tape")

        grads: Dict[int, Array] = {loss.node_id: np.ones((1, 1))}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg

        for node_id, leaf in self._leaves.items():
            g = grads.get(node_id)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.consumed = True


def backward(loss: RealTensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``."""
    if loss.tape is None:
        raise ContractError("loss was not produced under a recording tape")
    loss.tape.backward(loss)


def record_op(data: Array, parents: Sequence[RealTensor], vjp: VJP) -> RealTensor:
    """Create an op output, recording it when a tape is active and any parent tracks gradients."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        return tape.record(data, parents, vjp)
    return RealTensor._wrap(data)


# ---------------------------------------------------------------------------
# broadcasting helpers (row vector, column vector and scalar operands only)

def _check_broadcast(a: RealTensor, b: RealTensor, op: str) -> None:
    if a.shape == b.shape:
        return
    (ar, ac), (br, bc) = a.shape, b.shape
    if (br, bc) == (1, 1) or (br == 1 and bc == ac) or (bc == 1 and br == ar):
        return
    if (ar, ac) == (1, 1) or (ar == 1 and ac == bc) or (ac == 1 and ar == br):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}", left=a.shape, right=b.shape)


def _unbroadcast(g: Array, shape: Tuple[int, int]) -> Array:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise suite

def add(a: RealTensor, b: RealTensor) -> RealTensor:
    _check_broadcast(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: RealTensor, b: RealTensor) -> RealTensor:
    _check_broadcast(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def neg(a: RealTensor) -> RealTensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def scale(a: RealTensor, s: float) -> RealTensor:
    s = float(s)
    return record_op(a.data * s, (a,), lambda g: (g * s,))


def hadamard(a: RealTensor, b: RealTensor) -> RealTensor:
    _check_broadcast(a, b, "hadamard")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def leaky_relu(a: RealTensor, slope: float) -> RealTensor:
    mask = a.data > 0
    factor = np.where(mask, 1.0, float(slope))
    return record_op(a.data * factor, (a,), lambda g: (g * factor,))


def sqrt(a: RealTensor) -> RealTensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input", minimum=float(a.data.min()))
    out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        local = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
    return record_op(out, (a,), lambda g: (g * local,))


def magnitude(re: RealTensor, im: RealTensor) -> RealTensor:
    """sqrt(re^2 + im^2) with a zero subgradient at the origin."""
    if re.shape != im.shape:
        raise DimensionError(f"magnitude: planes differ {re.shape} vs {im.shape}")
    r = np.hypot(re.data, im.data)
    safe = np.where(r > 0, r, 1.0)
    dre = np.where(r > 0, re.data / safe, 0.0)
    dim = np.where(r > 0, im.data / safe, 0.0)
    return record_op(r, (re, im), lambda g: (g * dre, g * dim))


def atan2(y: RealTensor, x: RealTensor) -> RealTensor:
    """Four-quadrant arctangent in (-pi, pi]; atan2(0, 0) = 0 with zero gradient."""
    if y.shape != x.shape:
        raise DimensionError(f"atan2: shapes differ {y.shape} vs {x.shape}")
    out = np.arctan2(y.data, x.data)
    out = np.where(out == -np.pi, np.pi, out)
    r2 = y.data ** 2 + x.data ** 2
    safe = np.where(r2 > 0, r2, 1.0)
    dy = np.where(r2 > 0, x.data / safe, 0.0)
    dx = np.where(r2 > 0, -y.data / safe, 0.0)
    return record_op(out, (y, x), lambda g: (g * dy, g * dx))


def sin(a: RealTensor) -> RealTensor:
    c = np.cos(a.data)
    return record_op(np.sin(a.data), (a,), lambda g: (g * c,))


def cos(a: RealTensor) -> RealTensor:
    s = np.sin(a.data)
    return record_op(np.cos(a.data), (a,), lambda g: (-g * s,))


def exp(a: RealTensor) -> RealTensor:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def softmax_rows(a: RealTensor) -> RealTensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record_op(p, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a: RealTensor, b: RealTensor) -> RealTensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}", left=a.shape, right=b.shape)
    ad, bd = a.data, b.data
    return record_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: RealTensor) -> RealTensor:
    return record_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: RealTensor) -> RealTensor:
    shape = a.shape
    return record_op(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: RealTensor) -> RealTensor:
    shape, size = a.shape, a.data.size
    return record_op(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / size),))


def row_sum(a: RealTensor) -> RealTensor:
    cols = a.cols
    return record_op(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, cols, axis=1),))


def mean_rows(a: RealTensor) -> RealTensor:
    """Column means as a 1 x cols row."""
    rows = a.rows
    return record_op(a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / rows, rows, axis=0),))


def slice_cols(a: RealTensor, start: int, stop: int) -> RealTensor:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return record_op(a.data[:, start:stop].copy(), (a,), vjp)


def concat_cols(parts: Sequence[RealTensor]) -> RealTensor:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError("concat_cols: row counts differ", shapes=[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def take_rows(a: RealTensor, index: Array) -> RealTensor:
    idx = np.asarray(index, dtype=np.int64)
    rows = a.rows

    def vjp(g):
        full = np.zeros((rows, g.shape[1]))
        np.add.at(full, idx, g)
        return (full,)

    return record_op(a.data[idx], (a,), vjp)


def segment_sum(a: RealTensor, segments: Array, num_segments: int) -> RealTensor:
    """Sum rows of ``a`` into ``num_segments`` buckets; empty buckets are zero."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.rows:
        raise DimensionError("segment_sum: one segment id per row required", rows=a.rows, ids=seg.shape[0])
    out = np.zeros((num_segments, a.cols))
    np.add.at(out, seg, a.data)
    return record_op(out, (a,), lambda g: (g[seg],))


def segment_mean(a: RealTensor, segments: Array, num_segments: int) -> RealTensor:
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    summed = segment_sum(a, seg, num_segments)
    inv = RealTensor._wrap((1.0 / np.where(counts > 0, counts, 1.0))[:, None])
    return hadamard(summed, inv)


def segment_max(a: RealTensor, segments: Array, num_segments: int) -> RealTensor:
    seg = np.asarray(segments, dtype=np.int64)
    out = np.full((num_segments, a.cols), -np.inf)
    np.maximum.at(out, seg, a.data)
    out = np.where(np.isfinite(out), out, 0.0)
    # gradient routed to the first row attaining each maximum
    winner = np.full((num_segments, a.cols), -1, dtype=np.int64)
    hits = a.data == out[seg]
    for row in range(a.rows - 1, -1, -1):
        cols = hits[row]
        winner[seg[row], cols] = row
    rows_n = a.rows

    def vjp(g):
        full = np.zeros((rows_n, g.shape[1]))
        valid = winner >= 0
        seg_idx, col_idx = np.nonzero(valid)
        full[winner[seg_idx, col_idx], col_idx] += g[seg_idx, col_idx]
        return (full,)

    return record_op(out, (a,), vjp)


def segment_softmax(logits: RealTensor, segments: Array, num_segments: int) -> RealTensor:
    """Softmax of an (E, k) logit column block within each segment, per column."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != logits.rows:
        raise DimensionError("segment_softmax: one segment id per row required")
    if logits.rows == 0:
        raise EmptySoftmaxError("softmax over an empty neighbourhood")
    seg_max = np.full((num_segments, logits.cols), -np.inf)
    np.maximum.at(seg_max, seg, logits.data)
    e = np.exp(logits.data - seg_max[seg])
    denom = np.zeros((num_segments, logits.cols))
    np.add.at(denom, seg, e)
    p = e / denom[seg]

    def vjp(g):
        dot = np.zeros((num_segments, logits.cols))
        np.add.at(dot, seg, g * p)
        return (p * (g - dot[seg]),)

    return record_op(p, (logits,), vjp)


def sparse_matmul(rows: Array, cols: Array, values: Array, n: int, x: RealTensor) -> RealTensor:
    """Constant sparse (COO) matrix times a dense tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(values, dtype=np.float64)[:, None]
    if x.rows != n:
        raise DimensionError(f"sparse_matmul: graph has {n} nodes, features have {x.rows} rows", n=n, rows=x.rows)
    out = np.zeros((n, x.cols))
    np.add.at(out, rows, vals * x.data[cols])

    def vjp(g):
        back = np.zeros((n, g.shape[1]))
        np.add.at(back, cols, vals * g[rows])
        return (back,)

    return record_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits: RealTensor, labels: Array) -> RealTensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    y = np.asarray(labels, dtype=np.int64)
    if y.shape[0] != logits.rows:
        raise DimensionError("cross_entropy: one label per row required", rows=logits.rows, labels=y.shape[0])
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.rows
    loss = -log_p[np.arange(n), y].mean()
    p = np.exp(log_p)

    def vjp(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (g[0, 0] * d / n,)

    return record_op(np.array([[loss]]), (logits,), vjp)


def mean_squared_error(pred: RealTensor, target: Array) -> RealTensor:
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - t
    size = diff.size
    return record_op(np.array([[np.mean(diff ** 2)]]), (pred,), lambda g: (g[0, 0] * 2.0 * diff / size,))


# ---------------------------------------------------------------------------
# complex matrices as paired real planes

@dataclass(frozen=True)
class ComplexMatrix:
    re: RealTensor
    im: RealTensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(f"complex planes differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.re.shape

    @classmethod
    def from_numpy(cls, z: Array) -> "ComplexMatrix":
        z = np.atleast_2d(np.asarray(z, dtype=np.complex128))
        return cls(RealTensor(z.real), RealTensor(z.imag))

    def to_numpy(self) -> Array:
        return self.re.data + 1j * self.im.data

    def abs(self) -> RealTensor:
        return magnitude(self.re, self.im)

    def angle(self) -> RealTensor:
        return atan2(self.im, self.re)


def complex_add(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    return ComplexMatrix(add(a.re, b.re), add(a.im, b.im))


def complex_scale(a: ComplexMatrix, s: float) -> ComplexMatrix:
    return ComplexMatrix(scale(a.re, s), scale(a.im, s))


def complex_mul(a: ComplexMatrix, b: ComplexMatrix, mode: str = "elementwise") -> ComplexMatrix:
    """Complex product, either elementwise (``hadamard``) or as a matrix product (``matmul``)."""
    if mode == "elementwise":
        prod = hadamard
    elif mode == "matmul":
        prod = matmul
    else:
        raise ContractError(f"unknown complex product mode {mode!r}")
    re = sub(prod(a.re, b.re), prod(a.im, b.im))
    im = add(prod(a.re, b.im), prod(a.im, b.re))
    return ComplexMatrix(re, im)


# ---------------------------------------------------------------------------
# finite differences

def numerical_gradient(fn: Callable[[], RealTensor], param: RealTensor, h: float = 1e-5) -> Array:
    """Central-difference gradient of the scalar ``fn()`` with respect to ``param``."""
    base = param.data.copy()
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] = base[idx] + h
        param.assign(bumped)
        plus = fn().item()
        bumped[idx] = base[idx] - h
        param.assign(bumped)
        minus = fn().item()
        grad[idx] = (plus - minus) / (2.0 * h)
    param.assign(base)
    return grad


def relative_error(analytic: Array, numeric: Array) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
