"""float64 tensors with tape-based reverse-mode differentiation.

Design:

* A ``Tensor`` is a shape plus a C-contiguous float64 buffer. Operations
  never mutate their inputs; only optimizers and finite-difference probes
  write into ``Parameter`` buffers, which is their job.
* A ``GradTape`` is an ordered list of executed primitive operations. While
  a tape is active (``with GradTape() as tape:``) every op whose inputs
  include a tracked tensor appends one record: the output node plus one
  vector-Jacobian closure per tracked input.
* ``backward(loss, tape)`` seeds d(loss)/d(loss) = 1 and replays the tape
  once, in reverse recording order. Adjoints accumulate with sum semantics,
  so a parameter used twice receives both contributions. Parameter grads
  persist across calls; callers zero them between optimizer steps.

Gradient correctness for every primitive is checked against central finite
differences (``finite_diff_grad``) in the test suite; nothing in this module
assumes those two routes agree by construction.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class Tensor:
    """Immutable (by convention) float64 array value.

    ``tracked`` marks tensors whose value influences some Parameter's
    gradient; constants and raw data stay untracked so the tape skips them.
    ``grad`` is filled in during backward replay.
    """

    __slots__ = ("data", "grad", "tracked")

    def __init__(self, data, tracked: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tracked = tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        kind = "Parameter" if isinstance(self, Parameter) else "Tensor"
        return f"{kind}(shape={self.shape}, tracked={self.tracked})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Named trainable leaf. grad is allocated up front and persists."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, tracked=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


class _Record:
    __slots__ = ("out", "pairs")

    def __init__(self, out: Tensor, pairs):
        self.out = out
        self.pairs = pairs  # list of (tracked input, vjp closure)


# Per-thread stacks: concurrent training cells must not record onto each
# other's tapes.
_TAPES = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = _TAPES.stack = []
    return stack


class GradTape:
    """Ordered record of primitive ops, replayed exactly once in reverse."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must nest"
        return False

    def __len__(self) -> int:
        return len(self.records)


def _finish(out: Tensor, pairs) -> Tensor:
    """Propagate tracking and record on the active tape if needed."""
    tracked_pairs = [(t, fn) for t, fn in pairs if t.tracked]
    if tracked_pairs:
        out.tracked = True
        stack = _tape_stack()
        if stack:
            stack[-1].records.append(_Record(out, tracked_pairs))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every tensor on the tape.

    Records whose outputs received no adjoint (not reachable from the loss)
    are skipped; each record is visited once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        for t, vjp in rec.pairs:
            contrib = vjp(g)
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += contrib


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError as exc:  # mismatched batch dims
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc
    ad, bd = a.data, b.data
    return _finish(
        out,
        [
            (a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)),
            (b, lambda g: _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)),
        ],
    )


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _finish(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _finish(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _finish(
        out,
        [
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        ],
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _finish(out, [(a, lambda g: -g)])


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    old = a.data.shape
    return _finish(out, [(a, lambda g: g.reshape(old))])


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, axis1, axis2))
    return _finish(out, [(a, lambda g: np.ascontiguousarray(np.swapaxes(g, axis1, axis2)))])


def repeat_axis(a, axis: int, reps: int) -> Tensor:
    """Insert a new axis at `axis` and repeat the tensor `reps` times along it."""
    a = _as_tensor(a)
    out = Tensor(np.repeat(np.expand_dims(a.data, axis), reps, axis=axis))
    return _finish(out, [(a, lambda g: np.ascontiguousarray(g.sum(axis=axis)))])


def mean_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    n = a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis))
    return _finish(
        out,
        [(a, lambda g: np.ascontiguousarray(np.repeat(np.expand_dims(g, axis), n, axis=axis)) / n)],
    )


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum())
    shp = a.data.shape
    return _finish(out, [(a, lambda g: np.full(shp, g.sum()))])


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean())
    shp = a.data.shape
    n = a.data.size
    return _finish(out, [(a, lambda g: np.full(shp, g.sum() / n))])


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis (the rows of a 2-d input).

    Shifted by the row max before exponentiation; the shift is constant with
    respect to the input inside each row, so the adjoint is the usual
    y * (g - sum(g * y)).
    """
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    return _finish(out, [(a, vjp)])


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit (biased) variance,
    then apply an elementwise affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def vjp_x(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    return _finish(
        out,
        [
            (a, vjp_x),
            (gain, lambda g: _unbroadcast(g * xhat, gain.data.shape)),
            (bias, lambda g: _unbroadcast(g, bias.data.shape)),
        ],
    )


def gelu(a) -> Tensor:
    """Exact Gaussian-error-function gelu."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return _finish(out, [(a, lambda g: g * (cdf + x * pdf))])


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = expit(a.data)
    out = Tensor(y)
    return _finish(out, [(a, lambda g: g * y * (1.0 - y))])


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero each element with probability `rate`, scaling survivors by
    1/(1-rate). Identity (and zero rng draws) when not training or rate is 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    a = _as_tensor(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng stream")
    keep = rng.random(a.data.shape) >= rate
    scale = keep / (1.0 - rate)
    out = Tensor(a.data * scale)
    return _finish(out, [(a, lambda g: g * scale)])


def mse(pred, target) -> Tensor:
    """Mean squared error over every element."""
    d = sub(pred, target)
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# numerical gradient oracle


def finite_diff_grad(f: Callable[[], float | Tensor], param: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of f with respect to `param`.

    f must be deterministic (fix any rng inside it) and must read the
    parameter's current buffer on every call. Each coordinate is perturbed
    in place by +/-h and restored bit-exactly.
    """
    flat = param.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        fp = fp.item() if isinstance(fp, Tensor) else float(fp)
        fm = fm.item() if isinstance(fm, Tensor) else float(fm)
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.data.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise relative disagreement, discounting an absolute floor.

    Central differences at h=1e-5 carry rounding noise around 1e-11 for a
    loss of order one, so absolute differences up to `floor` are treated as
    agreement; anything above it is measured relative to the larger of the
    two magnitudes. A wrong gradient differs by the gradient's own scale
    and still scores near 1.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    excess = np.maximum(np.abs(a - n) - floor, 0.0)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(excess / denom))
