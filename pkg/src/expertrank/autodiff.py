"""Dense tensor arithmetic with reverse-mode differentiation.

A small numpy-backed engine: `Tensor` wraps a row-major array, ops executed
under an active `GradTape` record themselves, and `GradTape.backward` replays
the tape in exact reverse execution order. Every op validates that its output
is finite and raises `NumericsError` otherwise. Two precision modes are
supported by construction: build parameters in float32 for training, float64
for finite-difference verification.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NumericsError",
    "ShapeError",
    "tensor",
    "matmul",
    "add",
    "mul",
    "relu",
    "softmax",
    "cross_entropy",
    "layer_norm",
    "take_rows",
    "index_select",
    "reshape",
    "transpose",
    "concat",
    "dropout",
    "AdamState",
    "adam_step",
    "grad_check",
    "grad_check_params",
]


class NumericsError(ArithmeticError):
    """An op produced NaN/Inf, or numeric state went bad."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericsError(f"{op}: non-finite values in output")


class Tensor:
    """A dense row-major array plus grad bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, np.sum, _sum_backward)

    def mean(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, np.mean, _mean_backward)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of executed ops; replayed in reverse for gradients."""

    def __init__(self):
        # (output tensor, input tensors, backward fn: grad_out -> per-input grads)
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.entries.append((out, inputs, backward))

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of `root` (a scalar) into .grad of every
        requires_grad tensor the tape touched."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for out, inputs, fn in reversed(self.entries):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi.astype(inp.dtype, copy=True)
                else:
                    inp.grad += gi


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with broadcast batch dims: (..., m, k) @ (..., k, n)."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out_data, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (x,), backward, "softmax")


def cross_entropy(logits, target) -> Tensor:
    """-log softmax(logits)[target].

    1-D logits with an int target give a scalar; 2-D (rows, classes) logits
    with an int vector give per-row losses.
    """
    logits = _as_tensor(logits)
    if logits.ndim == 1:
        squeeze = True
        data = logits.data[None, :]
        targets = np.asarray([target], dtype=np.int64)
    elif logits.ndim == 2:
        squeeze = False
        data = logits.data
        targets = np.asarray(target, dtype=np.int64)
        if targets.shape != (data.shape[0],):
            raise ShapeError(f"cross_entropy: {targets.shape} targets for {data.shape} logits")
    else:
        raise ShapeError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    n_classes = data.shape[1]
    if targets.min() < 0 or targets.max() >= n_classes:
        raise IndexError(f"cross_entropy: target out of range [0, {n_classes})")

    m = data.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(data - m).sum(axis=-1))
    rows = np.arange(data.shape[0])
    losses = lse - data[rows, targets]

    def backward(g):
        gv = np.atleast_1d(np.asarray(g)).reshape(-1)
        p = np.exp(data - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, targets] -= 1.0
        gl = p * gv[:, None]
        return (gl[0] if squeeze else gl,)

    out_data = losses[0] if squeeze else losses
    return _make(np.asarray(out_data), (logits,), backward, "cross_entropy")


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, like=x)
    bias = _as_tensor(bias, like=x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gain.data * xhat + bias.data

    def backward(g):
        n = x.shape[-1]
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, ggain, gbias

    return _make(out_data, (x, gain, bias), backward, "layer_norm")


def take_rows(t, idx) -> Tensor:
    """Gather rows of `t` along axis 0 by integer index array."""
    t = _as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64)
    if t.data.shape[0] == 0:
        raise ShapeError("take_rows from empty tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise IndexError(f"take_rows: index out of range [0, {t.shape[0]})")
    out_data = t.data[idx]

    def backward(g):
        gt = np.zeros_like(t.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out_data, (t,), backward, "take_rows")


def index_select(x, axis: int, index: int) -> Tensor:
    """Pick one slice along `axis`, dropping that axis."""
    x = _as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(x.data[sl], (x,), backward, "index_select")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward, "transpose")


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p == 0.0:
        return _as_tensor(x)
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


def _reduce(x, axis, keepdims, np_fn, backward_maker):
    x = _as_tensor(x)
    out_data = np_fn(x.data, axis=axis, keepdims=keepdims)
    backward = backward_maker(x, axis, keepdims)
    return _make(np.asarray(out_data), (x,), backward, np_fn.__name__)


def _sum_backward(x, axis, keepdims):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return backward


def _mean_backward(x, axis, keepdims):
    if axis is None:
        count = x.data.size
    else:
        count = np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype) / count,)

    return backward


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on `params`."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        _check_finite(p.data, "adam_step")
    return state


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error of the reverse-mode gradient of scalar f at x
    against central differences (f(x+h) - f(x-h)) / 2h."""
    x.requires_grad = True
    x.zero_grad()
    with GradTape() as tape:
        out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    tape.backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    return _rel_err(analytic, numeric)


def grad_check_params(f, params: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of scalar f() against reverse-mode gradients
    for every tensor in `params`. Returns per-name max relative errors."""
    for p in params.values():
        p.zero_grad()
    with GradTape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check_params: f must be scalar-valued, got shape {out.shape}")
    tape.backward(out)

    errs: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        errs[name] = _rel_err(analytic, numeric)
    return errs
