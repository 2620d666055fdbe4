"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every numeric operation used by the rectifier, recognizer and training loop
is defined here as a taped primitive.  Design constraints:

* float64 everywhere; forward evaluation is deterministic and bit-exact
  across repeated runs on one machine,
* gradients are recorded on an explicit :class:`Tape` (execution order is a
  topological order, so backward is a single reverse sweep),
* replaying ``tape.backward`` reproduces the same gradients bit-exactly
  (gradient buffers are re-zeroed at the start of every sweep).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Bases below this are clamped before exponentiation so fractional powers
# (exponents as small as 0.01) keep finite values and gradients at black pixels.
POWER_CLAMP = 1e-6


class OpError(ValueError):
    """Raised on malformed operands (shape mismatch, non-scalar loss, ...)."""


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise OpError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all route through the taped primitives below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: object  # callable(out_grad) -> tuple of arrays/None per input


class Tape:
    """Ordered log of operations; backward replays rules in reverse.

    Operations append themselves in execution order, which is a topological
    order of the graph by construction.  Tensors are treated as immutable
    once recorded.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[_Record]:
        return self._records

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise OpError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not any(rec.output is loss for rec in self._records):
            raise OpError("loss was not produced on this tape")
        for rec in self._records:
            for t in rec.inputs:
                if t.requires_grad:
                    t.grad = np.zeros_like(t.data)
            rec.output.grad = np.zeros_like(rec.output.data)
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            out_grad = rec.output.grad
            grads = rec.backward(out_grad)
            for t, g in zip(rec.inputs, grads):
                if g is not None and t.requires_grad:
                    t.grad += g


_LOCAL = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _finish(op: str, inputs: tuple[Tensor, ...], out: Tensor, backward) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append(_Record(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out dimensions numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise OpError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise OpError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    """Hadamard product; scalars broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise OpError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", (a, b), out, backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise OpError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _finish("matmul", (a, b), out, backward)


def power(x, exponent: float) -> Tensor:
    """x ** exponent with a constant exponent.

    The base is clamped to [POWER_CLAMP, inf) first; negative bases are a
    hard error when the exponent is fractional.
    """
    x = _as_tensor(x)
    exponent = float(exponent)
    if not float(exponent).is_integer() and np.any(x.data < 0.0):
        raise OpError(f"power: negative base with fractional exponent {exponent}")
    clamped = np.maximum(x.data, POWER_CLAMP)
    out = Tensor(np.power(clamped, exponent))

    def backward(g):
        mask = x.data >= POWER_CLAMP
        return (g * exponent * np.power(clamped, exponent - 1.0) * mask,)

    return _finish("power", (x,), out, backward)


# ---------------------------------------------------------------------------
# activations and pointwise transcendentals
# ---------------------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    pos = d >= 0
    y = np.empty_like(d)
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _finish("sigmoid", (x,), out, backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _finish("tanh", (x,), out, backward)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y)

    def backward(g):
        return (g * y,)

    return _finish("exp", (x,), out, backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise OpError("log: non-positive input")
    out = Tensor(np.log(x.data))

    def backward(g):
        return (g / x.data,)

    return _finish("log", (x,), out, backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g):
        return (g * (x.data > 0.0),)

    return _finish("relu", (x,), out, backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _finish("softmax", (x,), out, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    return _finish("sum", (x,), out, backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    scale = out.data.size / x.data.size

    def backward(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) * scale,)

    return _finish("mean", (x,), out, backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise OpError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", (x,), out, backward)


def narrow(x, key) -> Tensor:
    """Basic (slice/int) indexing; no fancy indexing."""
    x = _as_tensor(x)
    out = Tensor(np.array(x.data[key]))

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[key] += g
        return (dx,)

    return _finish("narrow", (x,), out, backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise OpError("concat: empty input list")
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        raise OpError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _finish("concat", tensors, out, backward)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def conv2d(x, weight) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

    x: (N, Cin, H, W); weight: (Cout, Cin, 3, 3).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise OpError(f"conv2d: bad shapes x={x.shape} w={weight.shape}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise OpError(f"conv2d: channel mismatch x={x.shape} w={weight.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N,Cin,H,W,3,3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, cin * 9)
    wmat = weight.data.reshape(cout, cin * 9)
    out_data = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, cout, h, w)
    out = Tensor(out_data)

    def backward(g):
        gmat = g.reshape(n, cout, h * w).transpose(0, 2, 1)  # (N, HW, Cout)
        dw = np.einsum("nxo,nxk->ok", gmat, cols).reshape(cout, cin, 3, 3)
        dcols = (gmat @ wmat).reshape(n, h, w, cin, 3, 3)
        dpadded = np.zeros_like(padded)
        for ki in range(3):
            for kj in range(3):
                dpadded[:, :, ki:ki + h, kj:kj + w] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        return dpadded[:, :, 1:h + 1, 1:w + 1], dw

    return _finish("conv2d", (x, weight), out, backward)


def maxpool2d(x, kernel: tuple[int, int], stride: tuple[int, int] | None = None) -> Tensor:
    """Max pooling; ties broken by first index in row-major window order."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise OpError(f"maxpool2d: need (N,C,H,W), got {x.shape}")
    kh, kw = kernel
    sh, sw = stride if stride is not None else kernel
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise OpError(f"maxpool2d: kernel {kernel} exceeds input {x.shape}")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def backward(g):
        hi = np.arange(ho)[None, None, :, None] * sh + arg // kw
        wi = np.arange(wo)[None, None, None, :] * sw + arg % kw
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ni, ci, hi, wi), g)
        return (dx,)

    return _finish("maxpool2d", (x,), out, backward)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise OpError(f"global_avg_pool: need (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w),)

    return _finish("global_avg_pool", (x,), out, backward)


def _interp_matrix(out_n: int, in_n: int) -> np.ndarray:
    """1-D align-corners linear interpolation weights, rows sum to exactly 1."""
    m = np.zeros((out_n, in_n))
    for i in range(out_n):
        s = i * (in_n - 1) / (out_n - 1) if out_n > 1 else 0.0
        i0 = int(np.floor(s))
        if i0 >= in_n - 1:
            m[i, in_n - 1] = 1.0
        else:
            w0 = 1.0 - (s - i0)
            m[i, i0] = w0
            m[i, i0 + 1] = 1.0 - w0
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resampling of (N, C, H, W)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise OpError(f"bilinear_resize: need (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    rh = _interp_matrix(out_h, h)
    rw = _interp_matrix(out_w, w)
    out = Tensor(rh[None, None] @ x.data @ rw.T[None, None])

    def backward(g):
        return (rh.T[None, None] @ g @ rw[None, None],)

    return _finish("bilinear_resize", (x,), out, backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets, ignore_index: int | None = None,
                  reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy with integer targets.

    logits: (M, C); targets: int array (M,).  Rows whose target equals
    ``ignore_index`` contribute nothing (and do not count toward the mean).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise OpError(f"cross_entropy: bad shapes logits={logits.shape} targets={targets.shape}")
    if reduction not in ("mean", "sum"):
        raise OpError(f"cross_entropy: unknown reduction {reduction!r}")
    m, _ = logits.shape
    keep = np.ones(m, dtype=bool) if ignore_index is None else targets != ignore_index
    n_kept = int(keep.sum())
    safe_targets = np.where(keep, targets, 0).astype(np.intp)

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    logprob = shifted - np.log(e.sum(axis=-1, keepdims=True))
    nll = -logprob[np.arange(m), safe_targets] * keep
    total = nll.sum()
    out = Tensor(total / n_kept if reduction == "mean" and n_kept > 0 else total)

    def backward(g):
        d = probs.copy()
        d[np.arange(m), safe_targets] -= 1.0
        d *= keep[:, None]
        if reduction == "mean" and n_kept > 0:
            d /= n_kept
        return (d * g,)

    return _finish("cross_entropy", (logits,), out, backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}, {self.n_checked} elements)"


def grad_check(f, x: Tensor, tol: float = 1e-4, max_elements: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    Central step is 1e-5 * max(1, |x_i|) per element.  For large inputs a
    deterministic subset of ``max_elements`` entries is probed.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise OpError(f"grad_check: f must be scalar-valued, got {y.shape}")
        tape.backward(y)
    analytic = x.grad.copy().reshape(-1)

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))

    max_err = 0.0
    for i in idx:
        h = 1e-5 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(x.data)).item()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        err = abs(fd - analytic[i]) / max(1.0, abs(fd), abs(analytic[i]))
        if err > max_err:
            max_err = err
    return GradCheckReport(max_rel_err=float(max_err), tol=tol, n_checked=len(idx))
