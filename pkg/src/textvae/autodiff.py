"""Reverse-mode automatic differentiation over dense float64 tensors.

A dynamic tape records every differentiable operation in execution order.
Operations compute eagerly with numpy; each recorded entry carries a backward
rule that maps the output adjoint to input adjoints.  ``Tape.backward`` walks
the record once in reverse and accumulates ``∂loss/∂tensor`` into ``.grad``
(+= semantics, so twin-pass losses and repeated calls compose).

Everything is 64-bit: gradient checks at 1e-4 relative error are not
reachable in single precision.
"""

from __future__ import annotations

import numbers
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

# np.exp overflows to inf a little above this
_EXP_MAX = 700.0

# Test hook: when True, tanh's backward rule is deliberately wrong.
# Used as a negative control by grad_check tests and `textvae selfcheck`.
_CORRUPT_TANH_BACKWARD = False


class Tensor:
    """Dense float64 array with an attached gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


class Tape:
    """Ordered record of operations; inputs always precede their users.

    One backward pass visits every recorded operation exactly once, in
    reverse order.  Adjoints are kept in a scratch map during the walk and
    flushed into ``.grad`` at the end, so calling backward twice adds the
    full gradient twice (accumulation semantics).
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        # id -> (tensor, adjoint); tensor ref kept so ids stay unique
        adjoints: dict[int, list] = {id(loss): [loss, np.ones(())]}
        for out, inputs, backward_fn in reversed(self._entries):
            slot = adjoints.get(id(out))
            if slot is None:
                continue  # not an ancestor of the loss
            for inp, contrib in zip(inputs, backward_fn(slot[1])):
                if contrib is None or not inp.requires_grad:
                    continue
                islot = adjoints.get(id(inp))
                if islot is None:
                    adjoints[id(inp)] = [inp, np.array(contrib, dtype=np.float64, copy=True)]
                else:
                    islot[1] += contrib
        for tensor, adj in adjoints.values():
            if tensor.requires_grad:
                tensor.grad += adj


_TAPE_STACK: list[Tape] = []


@contextmanager
def tape():
    """Open a fresh tape; ops executed inside are recorded on it."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    if _TAPE_STACK and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1].record(out, inputs, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (numbers.Number, np.ndarray, list, tuple)):
        return Tensor(x)
    raise TypeError(f"cannot treat {type(x).__name__} as a Tensor")


def zero_grads(params) -> None:
    """Zero the gradient buffers of an iterable of (name, Tensor) or Tensors."""
    for p in params:
        t = p[1] if isinstance(p, tuple) else p
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise operations


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    """Same shape, or one side scalar (broadcast).  Returns (a_scalar, b_scalar)."""
    if a.shape == b.shape:
        return False, False
    if a.shape == ():
        return True, False
    if b.shape == ():
        return False, True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_sc, b_sc = _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        ga = g.sum() if a_sc else g
        gb = g.sum() if b_sc else g
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_sc, b_sc = _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        ga = g.sum() if a_sc else g
        gb = -(g.sum() if b_sc else g)
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_sc, b_sc = _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = (g * bd).sum() if a_sc else g * bd
        gb = (g * ad).sum() if b_sc else g * ad
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _record(out, (a, b), backward)


def negate(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(-x.data)

    def backward(g):
        return (-g,)

    return _record(out, (x,), backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)

    def backward(g):
        return (g * c,)

    return _record(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore", invalid="ignore"):
        xd = x.data
        y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-xd)), np.exp(xd) / (1.0 + np.exp(xd)))
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _record(out, (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)

    def backward(g):
        d = 1.0 - y * y
        if _CORRUPT_TANH_BACKWARD:
            d = -d
        return (g * d,)

    return _record(out, (x,), backward)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.size and np.max(x.data) > _EXP_MAX:
        raise NumericError(f"exp would overflow: max input {np.max(x.data):.3g}")
    y = np.exp(x.data)
    out = Tensor(y)

    def backward(g):
        return (g * y,)

    return _record(out, (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.size and np.min(x.data) <= 0:
        raise NumericError(f"log requires strictly positive input, min {np.min(x.data):.3g}")
    xd = x.data
    out = Tensor(np.log(xd))

    def backward(g):
        return (g / xd,)

    return _record(out, (x,), backward)


_POINTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "negate": negate,
    "scale": scale,
}


def pointwise(op_kind: str, *operands) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _POINTWISE[op_kind]
    except KeyError:
        raise ConfigError(f"unknown pointwise op {op_kind!r}; choose from {sorted(_POINTWISE)}")
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra and structural operations


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record(out, (a, b), backward)


def add_col(mat, col) -> Tensor:
    """Add a (m,1) column vector to every column of a (m,n) matrix."""
    mat, col = _as_tensor(mat), _as_tensor(col)
    if mat.data.ndim != 2 or col.shape != (mat.shape[0], 1):
        raise DimensionError(f"add_col: matrix {mat.shape} with column {col.shape}")
    out = Tensor(mat.data + col.data)

    def backward(g):
        return (g if mat.requires_grad else None,
                g.sum(axis=1, keepdims=True) if col.requires_grad else None)

    return _record(out, (mat, col), backward)


def select_columns(x, idx) -> Tensor:
    """Gather columns of a (m,n) matrix; repeated indices accumulate gradient."""
    x = _as_tensor(x)
    ids = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or ids.ndim != 1:
        raise DimensionError(f"select_columns: matrix {x.shape}, index shape {ids.shape}")
    n = x.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"column index out of range [0, {n}): {ids[(ids < 0) | (ids >= n)][:4]}")
    xd = x.data
    out = Tensor(xd[:, ids])

    def backward(g):
        full = np.zeros_like(xd)
        np.add.at(full, (slice(None), ids), g)
        return (full,)

    return _record(out, (x,), backward)


def concat_rows(a, b) -> Tensor:
    """Stack two matrices with equal column counts vertically."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: shapes {a.shape} and {b.shape}")
    m = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def backward(g):
        return (g[:m] if a.requires_grad else None, g[m:] if b.requires_grad else None)

    return _record(out, (a, b), backward)


def concat_cols(tensors) -> Tensor:
    """Concatenate matrices with equal row counts horizontally."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_cols of an empty sequence")
    rows = ts[0].shape[0]
    for t in ts:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise DimensionError(f"concat_cols: inconsistent shape {t.shape}, expected {rows} rows")
    widths = [t.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)
    out = Tensor(np.concatenate([t.data for t in ts], axis=1))

    def backward(g):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return _record(out, tuple(ts), backward)


def column_sums(x) -> Tensor:
    """Sum each column of a (m,n) matrix, producing a (1,n) row."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"column_sums needs a matrix, got shape {x.shape}")
    shp = x.shape
    out = Tensor(x.data.sum(axis=0, keepdims=True))

    def backward(g):
        return (np.broadcast_to(g, shp),)

    return _record(out, (x,), backward)


def maximum_scalar(x, c: float) -> Tensor:
    """Elementwise max(x, c); gradient follows x where x >= c, else zero."""
    x = _as_tensor(x)
    c = float(c)
    xd = x.data
    out = Tensor(np.maximum(xd, c))

    def backward(g):
        return (g * (xd >= c),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses and reductions


def softmax_cross_entropy_cols(logits, targets) -> Tensor:
    """Per-column cross entropy of (V,B) logits against B target indices.

    Stabilized with log-sum-exp; returns a (1,B) row of
    -(logits[target_j, j] - logsumexp(logits[:, j])).
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy_cols: logits shape {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    vocab, batch = logits.shape
    if tgt.shape != (batch,):
        raise DimensionError(f"targets shape {tgt.shape} does not match batch {batch}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"target index out of range [0, {vocab})")
    ld = logits.data
    m = ld.max(axis=0, keepdims=True)
    shifted = ld - m
    sumexp = np.exp(shifted).sum(axis=0, keepdims=True)
    lse = m + np.log(sumexp)
    picked = ld[tgt, np.arange(batch)][None, :]
    out = Tensor(lse - picked)

    def backward(g):
        p = np.exp(shifted) / sumexp
        p[tgt, np.arange(batch)] -= 1.0
        return (p * g,)

    return _record(out, (logits,), backward)


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """Scalar cross entropy of a logit vector against one target index."""
    logits = _as_tensor(logits)
    ld = logits.data
    if ld.ndim == 1:
        col = Tensor(ld[:, None])

        def reshape_back(g):
            return (g[:, 0],)

        logits_col = _record(col, (logits,), reshape_back)
    elif ld.ndim == 2 and ld.shape[1] == 1:
        logits_col = logits
    else:
        raise DimensionError(f"softmax_cross_entropy expects a vector, got shape {logits.shape}")
    row = softmax_cross_entropy_cols(logits_col, [int(target)])
    return reduce_sum(row)


def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    shp = x.shape
    out = Tensor(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, shp),)

    return _record(out, (x,), backward)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    shp = x.shape
    n = x.data.size
    out = Tensor(x.data.mean())

    def backward(g):
        return (np.broadcast_to(g / n, shp),)

    return _record(out, (x,), backward)


def squared_l2_norm(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = Tensor((xd * xd).sum())

    def backward(g):
        return (2.0 * xd * g,)

    return _record(out, (x,), backward)


_REDUCE = {
    "sum": reduce_sum,
    "mean": reduce_mean,
    "squared_l2_norm": squared_l2_norm,
}


def reduce(op_kind: str, x) -> Tensor:
    """Dispatch a reduction by name."""
    try:
        fn = _REDUCE[op_kind]
    except KeyError:
        raise ConfigError(f"unknown reduce op {op_kind!r}; choose from {sorted(_REDUCE)}")
    return fn(x)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-finite-difference comparison."""

    per_param: dict
    max_error: float
    tol: float
    passed: bool
    worst_param: str

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max relative error {self.max_error:.3e} "
                f"(tol {self.tol:.1e}, worst {self.worst_param!r})")


# Relative-error denominator floor.  Central differences on O(1) losses carry
# ~1e-10 roundoff noise; without a floor, parameters whose true gradient is
# zero would divide noise by noise.
_REL_ERR_FLOOR = 1e-4


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central finite differences.

    ``f`` must be a zero-argument deterministic program returning a scalar
    Tensor; ``params`` is a dict or iterable of (name, Tensor).  Every
    parameter entry is perturbed by ±h.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [p if isinstance(p, tuple) else (f"p{i}", p) for i, p in enumerate(params)]

    with tape():
        first = f()
    if first.shape != ():
        raise ContractError(f"grad_check target must be scalar, got shape {first.shape}")
    second = f()
    if not np.array_equal(first.data, second.data):
        raise ContractError("grad_check target is non-deterministic: two forward passes disagree")

    zero_grads(named)
    with tape() as t:
        loss = f()
        t.backward(loss)
    analytic = {name: p.grad.copy() for name, p in named}

    per_param: dict[str, float] = {}
    worst, worst_name = 0.0, ""
    for name, p in named:
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), _REL_ERR_FLOOR)
        err = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
        per_param[name] = err
        if err >= worst:
            worst, worst_name = err, name
    return GradCheckReport(per_param=per_param, max_error=worst, tol=tol,
                           passed=worst < tol, worst_param=worst_name)
