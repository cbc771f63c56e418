"""Dense real tensors with taped reverse-mode differentiation.

Values live in numpy arrays.  Each differentiable operation records a
backward closure on the ambient :class:`Tape` (define-by-run; a fresh tape
is opened per forward pass).  With no tape active the identical numeric
code runs and nothing is recorded, so gradient-free evaluation is
bit-identical to a recorded pass.

Broadcasting is deliberately restricted: binary operations accept operands
of identical shape, or one operand that is a scalar (a Python number or a
single-element tensor).  Every other alignment must be made explicit with
:func:`tile_leading` / :func:`expand_last`.

Two precisions are supported, float64 (default, required by all
verification paths) and float32 (training throughput).  Mixed-precision
operands are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError, ValidationError

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_SUPPORTED_DTYPES = (np.float32, np.float64)

_TAPES: list["Tape"] = []


class Tensor:
    """A dense real array with an optional gradient slot.

    `data` is always a numpy float array; treat it as immutable while a
    tape recording that mentions it is still alive.  `grad`, when present,
    has the same shape as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        if dtype not in _SUPPORTED_DTYPES:
            raise ValidationError(f"unsupported dtype {dtype!r}; use float32 or float64")
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Tape:
    """Ordered record of executed operations.

    Execution order is a topological order of the graph, so one reversed
    sweep visits every node exactly once.  Gradients are accumulated in a
    tape-local map and only deposited on tensors by :meth:`backward`,
    keeping independent tapes free of shared mutable state.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def _run(self, output: Tensor, seed=None):
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=output.dtype)
            if seed.shape != output.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): seed}
        tensors: dict[int, Tensor] = {id(output): output}

        def accum(t: Tensor, g: np.ndarray):
            if not (isinstance(t, Tensor) and t.requires_grad):
                return
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                tensors[key] = t

        for out, backward in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            backward(g, accum)
        return grads, tensors

    def gradient(self, output: Tensor, sources, seed=None):
        """Gradients of `output` w.r.t. each tensor in `sources`.

        Returns plain numpy arrays (zeros for sources the output does not
        depend on).  Does not touch any `.grad` attribute, so concurrent
        tapes over shared parameters stay independent.
        """
        grads, _ = self._run(output, seed)
        return [np.array(grads.get(id(s), np.zeros_like(s.data))) for s in sources]

    def backward(self, output: Tensor, seed=None):
        """Run the reverse sweep and accumulate into `.grad` attributes."""
        grads, tensors = self._run(output, seed)
        for key, t in tensors.items():
            if not t.requires_grad:
                continue
            g = grads[key]
            if t.grad is None:
                t.grad = np.array(g)
            else:
                t.grad = t.grad + g


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _result(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    return t


def _record(out: Tensor, inputs, backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(
        isinstance(x, Tensor) and x.requires_grad for x in inputs
    ):
        out.requires_grad = True
        tape._nodes.append((out, backward))
    return out


def _wrap_scalar(value, dtype) -> Tensor:
    return _result(np.asarray(value, dtype=dtype))


def _coerce_pair(a, b, name):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ValidationError(f"{name}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _wrap_scalar(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _wrap_scalar(b, a.dtype)
    if a.dtype != b.dtype:
        raise ValidationError(f"{name}: mixed dtypes {a.dtype} and {b.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not aligned "
                         "(only scalar-vs-tensor broadcasting is supported)")
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # Only scalar-vs-tensor broadcasting exists, so either shapes already
    # match or the target is a single element.
    if g.shape == tuple(shape):
        return g
    return g.sum().reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b, "add")
    out = _result(a.data + b.data)

    def backward(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a, b):
    a, b = _coerce_pair(a, b, "sub")
    out = _result(a.data - b.data)

    def backward(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward)


def mul(a, b):
    a, b = _coerce_pair(a, b, "mul")
    out = _result(a.data * b.data)

    def backward(g, accum):
        accum(a, _unbroadcast(g * b.data, a.shape))
        accum(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward)


def div(a, b):
    a, b = _coerce_pair(a, b, "div")
    out = _result(a.data / b.data)

    def backward(g, accum):
        accum(a, _unbroadcast(g / b.data, a.shape))
        accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), backward)


def neg(a: Tensor):
    out = _result(-a.data)

    def backward(g, accum):
        accum(a, -g)

    return _record(out, (a,), backward)


def sqrt(a: Tensor):
    out = _result(np.sqrt(a.data))

    def backward(g, accum):
        accum(a, g * 0.5 / out.data)

    return _record(out, (a,), backward)


def square(a: Tensor):
    out = _result(a.data * a.data)

    def backward(g, accum):
        accum(a, g * 2.0 * a.data)

    return _record(out, (a,), backward)


def gelu(a: Tensor):
    """Gaussian-error-linear activation (exact erf form, smooth everywhere)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _result(x * cdf)

    def backward(g, accum):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        accum(a, g * (cdf + x * pdf))

    return _record(out, (a,), backward)


# -- contractions and reductions ----------------------------------------


def matmul(a: Tensor, b: Tensor):
    """Batched matrix product (..., m, k) x (..., k, n) -> (..., m, n).

    Leading batch extents must match exactly; there is no batch
    broadcasting.
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ValidationError("matmul operands must be Tensors")
    if a.dtype != b.dtype:
        raise ValidationError(f"matmul: mixed dtypes {a.dtype} and {b.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    out = _result(a.data @ b.data)

    def backward(g, accum):
        accum(a, g @ np.swapaxes(b.data, -1, -2))
        accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _record(out, (a, b), backward)


def _check_axis(a: Tensor, axis: int) -> int:
    nd = a.data.ndim
    if not isinstance(axis, (int, np.integer)) or not -nd <= axis < nd:
        raise ValidationError(f"axis {axis!r} invalid for shape {a.shape}")
    return axis % nd if nd else 0


def reduce_sum(a: Tensor, axis=None):
    if axis is None:
        out = _result(a.data.sum())

        def backward(g, accum):
            accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

        return _record(out, (a,), backward)

    axis = _check_axis(a, axis)
    out = _result(a.data.sum(axis=axis))

    def backward(g, accum):
        accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _record(out, (a,), backward)


def reduce_mean(a: Tensor, axis=None):
    if axis is None:
        n = a.data.size
        out = _result(a.data.mean())

        def backward(g, accum):
            accum(a, np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False))

        return _record(out, (a,), backward)

    axis = _check_axis(a, axis)
    n = a.shape[axis]
    out = _result(a.data.mean(axis=axis))

    def backward(g, accum):
        accum(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape))

    return _record(out, (a,), backward)


def softmax(a: Tensor):
    """Softmax over the last axis, stabilized by max subtraction."""
    if a.data.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y)

    def backward(g, accum):
        accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS):
    """Normalize each last-axis slice to zero mean / unit variance, then
    apply the per-channel affine (gain, bias).  `eps` sits inside the
    square root, so constant slices collapse to the bias."""
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gain.data + bias.data)

    def backward(g, accum):
        accum(gain, (g * xhat).reshape(-1, c).sum(axis=0))
        accum(bias, g.reshape(-1, c).sum(axis=0))
        dxhat = g * gain.data
        accum(a, inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))

    return _record(out, (a, gain, bias), backward)


# -- structural ops ------------------------------------------------------


def split(a: Tensor, sizes, axis: int):
    """Split along `axis` into parts of the given extents (must sum up)."""
    axis = _check_axis(a, axis)
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes) or sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not partition extent {a.shape[axis]}")
    pieces = []
    offset = 0
    for s in sizes:
        index = [slice(None)] * a.data.ndim
        index[axis] = slice(offset, offset + s)
        index = tuple(index)
        piece = _result(a.data[index].copy())

        def backward(g, accum, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            accum(a, full)

        pieces.append(_record(piece, (a,), backward))
        offset += s
    return pieces


def concat(pieces, axis: int):
    """Concatenate tensors along `axis`; exact inverse of :func:`split`."""
    pieces = list(pieces)
    if not pieces:
        raise ValidationError("concat needs at least one piece")
    axis = _check_axis(pieces[0], axis)
    out = _result(np.concatenate([p.data for p in pieces], axis=axis))

    def backward(g, accum):
        offset = 0
        for p in pieces:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + p.shape[axis])
            accum(p, g[tuple(index)])
            offset += p.shape[axis]

    return _record(out, tuple(pieces), backward)


def reshape(a: Tensor, shape):
    shape = tuple(int(s) for s in shape)
    out = _result(a.data.reshape(shape))

    def backward(g, accum):
        accum(a, g.reshape(a.shape))

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes):
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for shape {a.shape}")
    out = _result(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def backward(g, accum):
        accum(a, np.transpose(g, inverse))

    return _record(out, (a,), backward)


def permute_leading(a: Tensor, perm):
    """Reorder axis 0 by the permutation `perm` (out[i] = a[perm[i]])."""
    perm = np.asarray(perm, dtype=np.intp)
    n = a.shape[0] if a.data.ndim else 0
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValidationError(f"perm must be a permutation of range({n})")
    out = _result(a.data[perm])
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(n)

    def backward(g, accum):
        accum(a, g[inverse])

    return _record(out, (a,), backward)


def tile_leading(a: Tensor, repeats: int):
    """Stack `repeats` copies of `a` along a new leading axis."""
    repeats = int(repeats)
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    out = _result(np.broadcast_to(a.data, (repeats,) + a.shape).copy())

    def backward(g, accum):
        accum(a, g.sum(axis=0))

    return _record(out, (a,), backward)


def expand_last(a: Tensor, repeats: int):
    """Repeat every element `repeats` times along a new trailing axis."""
    repeats = int(repeats)
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    out = _result(np.broadcast_to(a.data[..., None], a.shape + (repeats,)).copy())

    def backward(g, accum):
        accum(a, g.sum(axis=-1))

    return _record(out, (a,), backward)


# -- gradient verification ----------------------------------------------


@dataclass
class GradCheckResult:
    """Outcome of an analytic-vs-numeric gradient comparison."""

    max_rel_error: float
    per_input: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fn, inputs, step: float = 1e-6, tolerance: float = 1e-4) -> GradCheckResult:
    """Compare reverse-mode gradients of `fn` against central differences.

    `fn` maps the given tensors to a single-element tensor and must be
    deterministic.  All inputs must be float64; finite differences are
    meaningless at float32.  The relative error per element is
    |a - n| / max(|a|, |n|, 1e-3), and the check passes when the maximum
    over all inputs is below `tolerance`.

    Raises NumericalError if either gradient contains non-finite values.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValidationError("grad_check needs at least one input")
    for x in inputs:
        if x.dtype != np.float64:
            raise ValidationError("grad_check requires float64 inputs")

    probes = [Tensor(x.data, requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*probes)
    if out.size != 1:
        raise ValidationError(f"grad_check target must be scalar, got shape {out.shape}")
    analytic = tape.gradient(out, probes)
    for g in analytic:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite analytic gradient")

    def evaluate() -> float:
        value = fn(*probes)
        return float(value.data.reshape(-1)[0])

    per_input = []
    for probe, a_grad in zip(probes, analytic):
        flat = probe.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            kept = flat[j]
            flat[j] = kept + step
            f_plus = evaluate()
            flat[j] = kept - step
            f_minus = evaluate()
            flat[j] = kept
            numeric[j] = (f_plus - f_minus) / (2.0 * step)
        if not np.all(np.isfinite(numeric)):
            raise NumericalError("non-finite numeric gradient")
        a_flat = a_grad.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a_flat), np.abs(numeric)), 1e-3)
        rel = np.abs(a_flat - numeric) / denom
        per_input.append(float(rel.max()) if rel.size else 0.0)

    return GradCheckResult(max_rel_error=max(per_input), per_input=per_input,
                           tolerance=tolerance)
