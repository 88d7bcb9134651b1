"""Dense tensors with tape-based reverse-mode differentiation.

The operation set is exactly what the chord models need: matrix products,
depthwise causal convolution, SiLU / softplus / softmax nonlinearities, time
reversal, feature concatenation, and a few elementwise and reduction helpers
for composing losses. Two precision modes are supported: HIGH (float64, used
by tests and oracles) and STANDARD (float32, used for training).

Tensors are immutable once created; every operation allocates its output.
Broadcasting is deliberately restricted to scalar-with-tensor arithmetic and
per-channel bias/gain application, so shape mistakes fail loudly instead of
silently broadcasting.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

HIGH = np.dtype(np.float64)
STANDARD = np.dtype(np.float32)

_uid_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class Tensor:
    """Immutable dense array with row-major storage and a fixed float dtype."""

    __slots__ = ("data", "uid")

    def __init__(self, values, dtype=None):
        if dtype is None:
            src = np.asarray(values)
            dtype = src.dtype if src.dtype in (HIGH, STANDARD) else HIGH
        dtype = np.dtype(dtype)
        if dtype not in (HIGH, STANDARD):
            raise TypeError(f"unsupported dtype {dtype}; use HIGH or STANDARD")
        arr = np.array(values, dtype=dtype, order="C")
        arr.setflags(write=False)
        self.data = arr
        self.uid = next(_uid_counter)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal: adopt an array the caller owns, without copying.
        t = object.__new__(cls)
        a = arr if arr.flags.c_contiguous else np.asarray(arr, order="C")
        a.setflags(write=False)
        t.data = a
        t.uid = next(_uid_counter)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def tensor(values, dtype=HIGH) -> Tensor:
    return Tensor(values, dtype=dtype)


def zeros(shape, dtype=HIGH) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=HIGH) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


def full(shape, value, dtype=HIGH) -> Tensor:
    return Tensor._wrap(np.full(shape, value, dtype=dtype))


# --------------------------------------------------------------------------
# Tape

class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_tapes = _TapeStack()


class Tape:
    """Ordered record of executed operations, replayed in reverse for adjoints.

    A tape is confined to one logical execution: enter it, run the forward
    computation, then ask for gradients. Entries hold strong references to
    the tensors involved, so uids stay unique for the tape's lifetime.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes.stack.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
        """d(loss)/d(param) for each param, by adjoint replay in reverse order."""
        if loss.shape != ():
            raise ShapeError(f"loss must be a scalar tensor, got shape {loss.shape}")
        adjoints: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=loss.dtype)}
        for out, parents, vjp in reversed(self._entries):
            g = adjoints.get(out.uid)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None:
                    continue
                cur = adjoints.get(parent.uid)
                adjoints[parent.uid] = pg if cur is None else cur + pg
        result = []
        for p in params:
            g = adjoints.get(p.uid)
            if g is None:
                g = np.zeros(p.shape, dtype=p.dtype)
            result.append(Tensor._wrap(np.asarray(g, dtype=p.dtype).reshape(p.shape)))
        return result


def active_tape() -> Tape | None:
    return _tapes.stack[-1] if _tapes.stack else None


def record_op(out: Tensor, parents: Sequence[Tensor], vjp: Callable) -> None:
    """Append an operation to the active tape; no-op when not recording.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent,
    each shaped exactly like that parent. It must not mutate ``grad_out``.
    """
    t = active_tape()
    if t is not None:
        t._entries.append((out, tuple(parents), vjp))


def grad(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of the scalar ``loss_fn()`` with respect to ``params``.

    Records every operation executed inside ``loss_fn`` on a fresh tape and
    replays adjoints in reverse. Parameters not reachable from the loss get
    zero gradients.
    """
    tape = Tape()
    with tape:
        loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    return tape.gradients(loss, params)


# --------------------------------------------------------------------------
# Helpers

def _check_same_dtype(*ts: Tensor) -> np.dtype:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise TypeError(f"mixed dtypes {d} and {t.dtype}; cast explicitly")
    return d


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form: never exponentiates a positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # For x > 30 the identity is exact to double precision.
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


# --------------------------------------------------------------------------
# Elementwise arithmetic (same-shape, or tensor-with-python-scalar)

def _binary(a: Tensor, b, op_name: str, fwd, vjp_maker) -> Tensor:
    if isinstance(b, (int, float)):
        out = Tensor._wrap(fwd(a.data, a.dtype.type(b)))
        vjp_a, _ = vjp_maker(a.data, a.dtype.type(b))
        record_op(out, (a,), lambda g: (vjp_a(g),))
        return out
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"{op_name} needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor._wrap(fwd(a.data, b.data))
    vjp_a, vjp_b = vjp_maker(a.data, b.data)
    record_op(out, (a, b), lambda g: (vjp_a(g), vjp_b(g)))
    return out


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda x, y: (lambda g: g, lambda g: g))


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda x, y: (lambda g: g, lambda g: -g))


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda x, y: (lambda g: g * y, lambda g: g * x))


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.exp(a.data))
    out_data = out.data
    record_op(out, (a,), lambda g: (g * out_data,))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.log(a.data))
    record_op(out, (a,), lambda g: (g / a.data,))
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: x[L,d] + b[d]."""
    _check_same_dtype(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias needs (L,d) and (d,), got {x.shape} and {b.shape}")
    out = Tensor._wrap(x.data + b.data[None, :])
    record_op(out, (x, b), lambda g: (g, g.sum(axis=0)))
    return out


def mul_bias(x: Tensor, v: Tensor) -> Tensor:
    """Row-broadcast gain: x[L,d] * v[d]."""
    _check_same_dtype(x, v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"mul_bias needs (L,d) and (d,), got {x.shape} and {v.shape}")
    out = Tensor._wrap(x.data * v.data[None, :])
    record_op(out, (x, v), lambda g: (g * v.data[None, :], (g * x.data).sum(axis=0)))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype))
    shape = x.shape
    record_op(out, (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))
    return out


# --------------------------------------------------------------------------
# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (m,k) @ (k,n)."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data)
    a_data, b_data = a.data, b.data
    record_op(out, (a, b), lambda g: (g @ b_data.T, a_data.T @ g))
    return out


def conv1d_depthwise(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Causal depthwise convolution over the time axis.

    y[t,c] = bias[c] + sum_j w[c,j] * x[t-k+1+j, c], with k-1 zeros of left
    padding so the output keeps length L. w[c,-1] multiplies the current
    frame; earlier taps look strictly into the past. Kernels longer than the
    sequence are fine (the overhang reads padding); k must be positive.
    """
    _check_same_dtype(x, w, bias)
    if x.data.ndim != 2 or w.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"conv1d_depthwise got shapes {x.shape}, {w.shape}, {bias.shape}")
    L, d = x.shape
    dw, k = w.shape
    if dw != d or bias.shape[0] != d:
        raise ShapeError(f"channel mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}")
    if k <= 0:
        raise ShapeError(f"kernel width must be positive, got {k}")
    xpad = np.zeros((L + k - 1, d), dtype=x.dtype)
    xpad[k - 1:] = x.data
    y = np.tile(bias.data, (L, 1))
    for j in range(k):
        y += w.data[:, j][None, :] * xpad[j:j + L]
    out = Tensor._wrap(y)
    w_data = w.data

    def vjp(g):
        gx_pad = np.zeros_like(xpad)
        gw = np.empty_like(w_data)
        for j in range(k):
            gx_pad[j:j + L] += g * w_data[:, j][None, :]
            gw[:, j] = (xpad[j:j + L] * g).sum(axis=0)
        return gx_pad[k - 1:], gw, g.sum(axis=0)

    record_op(out, (x, w, bias), vjp)
    return out


# --------------------------------------------------------------------------
# Nonlinearities

def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = _sigmoid(x.data)
    out = Tensor._wrap(x.data * sig)
    x_data = x.data
    record_op(out, (x,), lambda g: (g * (sig * (1.0 + x_data * (1.0 - sig))),))
    return out


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), with the exact identity branch for large x."""
    out = Tensor._wrap(_softplus(x.data))
    sig = _sigmoid(x.data)
    record_op(out, (x,), lambda g: (g * sig,))
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, max-subtracted for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(y)
    y_data = out.data
    record_op(out, (x,), lambda g: (y_data * (g - (g * y_data).sum(axis=1, keepdims=True)),))
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax; gradients match softmax exactly."""
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor._wrap(shifted - lse)
    soft = np.exp(out.data)
    record_op(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))
    return out


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization with a learned per-channel gain.

    y[t] = x[t] / sqrt(mean_c(x[t,c]^2) + eps) * gain. Gain-only: no bias.
    """
    _check_same_dtype(x, gain)
    if x.data.ndim != 2 or gain.data.ndim != 1 or x.shape[1] != gain.shape[0]:
        raise ShapeError(f"rmsnorm needs (L,d) and (d,), got {x.shape} and {gain.shape}")
    d = x.shape[1]
    ms = (x.data * x.data).mean(axis=1, keepdims=True) + x.dtype.type(eps)
    rms = np.sqrt(ms)
    u = x.data / rms
    out = Tensor._wrap(u * gain.data[None, :])
    gain_data = gain.data

    def vjp(g):
        gu = g * gain_data[None, :]
        dot = (gu * u).sum(axis=1, keepdims=True)
        gx = (gu - u * (dot / d)) / rms
        return gx, (g * u).sum(axis=0)

    record_op(out, (x, gain), vjp)
    return out


# --------------------------------------------------------------------------
# Structure ops

def reverse_time(x: Tensor) -> Tensor:
    """Reverse along the leading (time) axis. An exact involution."""
    if x.data.ndim < 1:
        raise ShapeError("reverse_time needs at least one axis")
    out = Tensor._wrap(x.data[::-1].copy())
    record_op(out, (x,), lambda g: (g[::-1].copy(),))
    return out


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two (L,d) tensors along the feature axis."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features needs matching rows, got {a.shape} and {b.shape}")
    da = a.shape[1]
    out = Tensor._wrap(np.concatenate([a.data, b.data], axis=1))
    record_op(out, (a, b), lambda g: (g[:, :da].copy(), g[:, da:].copy()))
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {x.shape}")
    if not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {x.shape}")
    out = Tensor._wrap(x.data[:, start:stop].copy())
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    record_op(out, (x,), vjp)
    return out


def masked_gather_mean(x: Tensor, indices: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of x[t, indices[t]] over rows where mask[t] is True.

    Rows with mask False contribute nothing, to the value and (exactly) to
    the gradient. All-False masks are an error: the mean would be undefined.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"masked_gather_mean needs a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    msk = np.asarray(mask, dtype=bool)
    if idx.shape != (x.shape[0],) or msk.shape != (x.shape[0],):
        raise ShapeError(f"indices/mask must have shape ({x.shape[0]},)")
    rows = np.nonzero(msk)[0]
    if rows.size == 0:
        raise ValueError("masked_gather_mean: every row is masked out")
    picked = x.data[rows, idx[rows]]
    out = Tensor._wrap(np.asarray(picked.mean(), dtype=x.dtype))
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, idx[rows]] = g / rows.size
        return (gx,)

    record_op(out, (x,), vjp)
    return out
