"""Dense reverse-mode autodiff over numpy arrays.

Every op applied to a tensor that requires grad appends a record to the
thread's active :class:`Tape`. :func:`backward` replays the tape in reverse,
writes ``.grad`` on leaf tensors and frees the tape; tensors produced on a
freed tape cannot be differentiated again. Everything is float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, NumericError, ShapeError

_local = threading.local()


class Tape:
    def __init__(self):
        self.records: list[tuple["Tensor", tuple, Callable]] = []
        self.freed = False


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.freed:
        tape = _local.tape = Tape()
    return tape


def _recording() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = _recording()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None  # set for op outputs only

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a python scalar is supported")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{op}: non-finite input")


def _record(op: str, out_values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_values)
    if not _recording():
        return out
    needs = False
    for t in inputs:
        if t._tape is not None and t._tape.freed:
            raise ContractError(f"{op}: input belongs to a freed tape; recompute the forward pass")
        needs = needs or t.requires_grad
    if needs:
        tape = active_tape()
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``; free the tape."""
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or tape.freed:
        raise ContractError("loss is not on an active tape (backward already ran?)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    try:
        for out, inputs, fn in reversed(tape.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is not None:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    finally:
        tape.records.clear()
        tape.freed = True


# --- sparse operand ---------------------------------------------------------


class SparseMatrix:
    """Constant CSR matrix (no gradient) used as the left operand of :func:`spmm`."""

    def __init__(self, offsets, indices, values, shape: tuple[int, int]):
        offsets = np.asarray(offsets, dtype=np.int64)
        if len(offsets) != shape[0] + 1:
            raise ShapeError("offsets length must equal rows + 1")
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NumericError("SparseMatrix: non-finite values")
        self.csr = sp.csr_matrix((values, np.asarray(indices, dtype=np.int64), offsets), shape=shape)
        self._t = None

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        return cls(m.indptr, m.indices, m.data, m.shape)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls.from_scipy(sp.identity(n, format="csr"))

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def offsets(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.csr.indices

    @property
    def data(self) -> np.ndarray:
        return self.csr.data

    @property
    def transposed(self):
        if self._t is None:
            self._t = self.csr.T.tocsr()
        return self._t

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def rows(self, idx) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.csr[np.asarray(idx)])


# --- ops --------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_finite("matmul", a.values, b.values)
    av, bv = a.values, b.values
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(A: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse (constant) times dense; only ``x`` receives gradient."""
    if x.values.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {A.shape} by {x.shape}")
    _check_finite("spmm", x.values)
    return _record("spmm", np.asarray(A.csr @ x.values), (x,), lambda g: (np.asarray(A.transposed @ g),))


def transpose(x: Tensor) -> Tensor:
    return _record("transpose", x.values.T.copy(), (x,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("add", a.values, b.values)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("sub", a.values, b.values)
    try:
        out = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("mul", a.values, b.values)
    av, bv = a.values, b.values
    try:
        out = av * bv
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    _check_finite("scale", x.values)
    c = float(c)
    return _record("scale", x.values * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x.values)
    out = np.exp(x.values)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    _check_finite("log", x.values)
    if np.any(x.values <= 0):
        raise NumericError("log: non-positive input")
    xv = x.values
    return _record("log", np.log(xv), (x,), lambda g: (g / xv,))


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.values)
    mask = x.values > 0
    return _record("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is a constant of the tape."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    _check_finite("sum", x.values)
    shape = x.shape
    if axis is None:
        return _record("sum", np.array(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.values.sum(axis=axis)
    return _record(
        "sum", out, (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return scale(sum(x), 1.0 / n)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]``; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.values.ndim != 2:
        raise ShapeError("gather_rows needs a matrix")
    if len(idx) and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise IndexError("gather_rows: row index out of range")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", x.values[idx], (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    _check_finite("log_softmax_rows", x.values)
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _record(
        "log_softmax_rows", out, (x,),
        lambda g: (g - soft * g.sum(axis=1, keepdims=True),),
    )


def nll_loss(logp: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``labels`` under row log-probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logp.shape
    if labels.shape != (n,):
        raise ShapeError(f"nll_loss: {n} rows but {labels.shape} labels")
    if n == 0:
        raise ContractError("nll_loss over zero rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError("nll_loss: label outside [0, num_classes) (masked label?)")
    _check_finite("nll_loss", logp.values)
    rows = np.arange(n)
    picked = logp.values[rows, labels]
    if reduction == "mean":
        factor = 1.0 / n
    elif reduction == "sum":
        factor = 1.0
    else:
        raise ContractError(f"unknown reduction {reduction!r}")

    def bw(g):
        full = np.zeros((n, c))
        full[rows, labels] = -factor * g
        return (full,)

    return _record("nll_loss", np.array(-picked.sum() * factor), (logp,), bw)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    return nll_loss(log_softmax_rows(logits), labels, reduction)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Rows scaled to unit norm; all-zero rows stay zero."""
    _check_finite("l2_normalize_rows", x.values)
    xv = x.values
    norms = np.sqrt((xv * xv).sum(axis=1, keepdims=True))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    out = np.where(zero, 0.0, xv / safe)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (np.where(zero, 0.0, (g - out * dot) / safe),)

    return _record("l2_normalize_rows", out, (x,), bw)


def pairwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """All row dot products, ``a @ b.T`` of shape [p, q]."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_dot: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("pairwise_dot", a.values, b.values)
    av, bv = a.values, b.values
    return _record("pairwise_dot", av @ bv.T, (a, b), lambda g: (g @ bv, g.T @ av))


def masked_logsumexp_rows(x: Tensor, mask) -> Tensor:
    """``log(sum_j mask_ij * exp(x_ij))`` per row; rows with an empty mask give 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape or x.values.ndim != 2:
        raise ShapeError("masked_logsumexp_rows: mask must match a matrix input")
    _check_finite("masked_logsumexp_rows", x.values)
    xv = np.where(mask, x.values, -np.inf)
    has = mask.any(axis=1)
    m = np.where(has, xv.max(axis=1, initial=-np.inf), 0.0)
    e = np.where(mask, np.exp(xv - m[:, None]), 0.0)
    s = e.sum(axis=1)
    out = np.where(has, m + np.log(np.where(has, s, 1.0)), 0.0)
    soft = e / np.where(has, s, 1.0)[:, None]
    return _record("masked_logsumexp_rows", out, (x,), lambda g: (soft * g[:, None],))


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Weight decay is the coupled L2 form (added to the gradient). Parameters
    without a gradient entry are skipped, moments included.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.values
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / c2) + state.eps
        # v == 0 implies m == 0, so the update there is exactly zero (also when eps == 0)
        update = np.divide(m / c1, denom, out=np.zeros_like(m), where=denom > 0)
        p.values = p.values - state.lr * update


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)


class Sgd:
    """Plain gradient descent, ``p <- p - lr * grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.values = p.values - self.lr * p.grad
