"""A small dense-tensor engine with reverse-mode differentiation.

Every operation records, when gradients are enabled and at least one input
requires them, a closure mapping the output gradient to input gradients.
``Tensor.backward`` replays those closures in reverse topological order.

Broadcasting is deliberately absent: binary ops demand identical shapes (or
a Python scalar operand). The only implicit expansion is the per-channel
bias inside the convolutions.
"""
from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import DegenerateDirectionError, DomainError, ShapeError, SingularMatrixError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense real array plus optional gradient buffer.

    Tensors are treated as immutable once built; only ``grad`` changes
    (accumulated by ``backward``) and optimizers update ``data`` in place.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / other)

    def sum(self) -> Tensor:
        return sum_all(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _raise_nonscalar(shape):
    raise ShapeError(f"expected a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min():.3g})")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _make(y, (a,), lambda g: (g * y * (1 - y),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` beginning at ``start``."""
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis of size {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    src = a.shape

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw)


def split_channels(x: Tensor, index: int) -> tuple[Tensor, Tensor]:
    """Split a [B, C, T] tensor into channels [:index] and [index:]."""
    if x.ndim != 3:
        raise ShapeError(f"split_channels expects [B, C, T], got {x.shape}")
    c = x.shape[1]
    if not 0 <= index <= c:
        raise ShapeError(f"split index {index} outside [0, {c}]")
    return narrow(x, 1, 0, index), narrow(x, 1, index, c - index)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    b, _, t = parts[0].shape
    for p in parts:
        if p.ndim != 3 or p.shape[0] != b or p.shape[2] != t:
            raise ShapeError(f"concat_channels: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def lu_logabsdet(w: np.ndarray):
    """LU-factorise ``w`` and return (lu_piv, log|det w|).

    Raises SingularMatrixError when |det w| <= 1e-12.
    """
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"expected a square matrix, got {w.shape}")
    with warnings.catch_warnings():
        # a zero pivot is reported below as SingularMatrixError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(w, check_finite=True)
    diag = np.abs(np.diag(lu))
    if np.any(diag == 0):
        raise SingularMatrixError("matrix is exactly singular (zero pivot)")
    logdet = float(np.sum(np.log(diag)))
    if logdet <= np.log(1e-12):
        raise SingularMatrixError(f"|det W| = exp({logdet:.3f}) <= 1e-12")
    return (lu, piv), logdet


def logabsdet(w: Tensor) -> Tensor:
    """log|det w| from the LU pivots; gradient is inv(w)^T."""
    lu_piv, value = lu_logabsdet(w.data)

    def bw(g):
        inv = scipy.linalg.lu_solve(lu_piv, np.eye(w.shape[0], dtype=w.dtype))
        return (g * inv.T.astype(w.dtype),)

    return _make(np.asarray(value, dtype=w.dtype), (w,), bw)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Effective weight ``g * v / ||v||`` with one norm per output channel (axis 0)."""
    if g.shape != (v.shape[0],):
        raise ShapeError(f"weight_norm: g shape {g.shape} does not match {v.shape[0]} output channels")
    vd = v.data
    flat = vd.reshape(vd.shape[0], -1)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    if np.any(norms < 1e-12):
        raise DegenerateDirectionError(f"weight-norm direction has norm {norms.min():.3g} < 1e-12")
    expand = (slice(None),) + (None,) * (vd.ndim - 1)
    unit = vd / norms[expand]
    gd = g.data

    def bw(grad):
        gflat = grad.reshape(grad.shape[0], -1)
        uflat = unit.reshape(unit.shape[0], -1)
        dg = np.sum(gflat * uflat, axis=1)
        dv = (gd / norms)[:, None] * (gflat - dg[:, None] * uflat)
        return dv.reshape(vd.shape), dg

    return _make(gd[expand] * unit, (v, g), bw)


# ---------------------------------------------------------------------------
# convolutions


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis with zero padding.

    x: [B, Cin, T], weight: [Cout, Cin, K], bias: [Cout] -> [B, Cout, T'].
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects x [B,Cin,T] and weight [Cout,Cin,K]; got {x.shape}, {weight.shape}")
    b, cin, t = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: input has {cin} channels but weight expects {wcin}")
    if dilation < 1 or padding < 0 or k < 1:
        raise ShapeError(f"conv1d: invalid dilation={dilation}, padding={padding}, kernel={k}")
    span = dilation * (k - 1) + 1
    if t + 2 * padding < span:
        raise ShapeError(f"conv1d: padded length {t + 2 * padding} shorter than receptive span {span}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {bias.shape}, expected ({cout},)")
    tout = t + 2 * padding - dilation * (k - 1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    if k == 1:
        cols = xp
    else:
        cols = np.concatenate([xp[:, :, j * dilation:j * dilation + tout] for j in range(k)], axis=1)
    w2 = weight.data.transpose(0, 2, 1).reshape(cout, k * cin)
    y = np.matmul(w2, cols)
    if bias is not None:
        y += bias.data[None, :, None]

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(cout, k, cin).transpose(0, 2, 1)
        gcols = np.matmul(w2.T, g)
        if k == 1:
            gxp = gcols
        else:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation:j * dilation + tout] += gcols[:, j * cin:(j + 1) * cin]
        gx = gxp[:, :, padding:padding + t] if padding else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return (np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, bw)


_TCONV_CHUNK = 1 << 23


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution without padding.

    x: [B, Cin, F], weight: [Cin, Cout, K] -> [B, Cout, (F-1)*stride + K].
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv_transpose1d expects 3-D tensors, got {x.shape}, {weight.shape}")
    b, cin, f = x.shape
    wcin, cout, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose1d: input has {cin} channels but weight expects {wcin}")
    if stride < 1:
        raise ShapeError(f"conv_transpose1d: stride must be positive, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose1d: bias shape {bias.shape}, expected ({cout},)")
    tout = (f - 1) * stride + k
    nblk = -(-k // stride)
    kpad = nblk * stride
    w2 = weight.data.reshape(cin, cout * k)
    # frames per chunk keep the [B, Cout*K, chunk] intermediate bounded
    chunk = max(1, _TCONV_CHUNK // max(1, b * cout * k))

    out = np.zeros((b, cout, f - 1 + nblk, stride), dtype=x.dtype)
    for f0 in range(0, f, chunk):
        f1 = min(f, f0 + chunk)
        y = np.matmul(w2.T, x.data[:, :, f0:f1]).reshape(b, cout, k, f1 - f0)
        if kpad != k:
            y = np.concatenate([y, np.zeros((b, cout, kpad - k, f1 - f0), dtype=y.dtype)], axis=2)
        for j in range(nblk):
            out[:, :, f0 + j:f1 + j, :] += y[:, :, j * stride:(j + 1) * stride, :].transpose(0, 1, 3, 2)
    out = out.reshape(b, cout, -1)[:, :, :tout]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gpad = np.zeros((b, cout, (f - 1 + nblk) * stride), dtype=g.dtype)
        gpad[:, :, :tout] = g
        gblk = gpad.reshape(b, cout, f - 1 + nblk, stride)
        gx = np.empty_like(x.data)
        gw = np.zeros_like(w2)
        for f0 in range(0, f, chunk):
            f1 = min(f, f0 + chunk)
            gy = np.empty((b, cout, kpad, f1 - f0), dtype=g.dtype)
            for j in range(nblk):
                gy[:, :, j * stride:(j + 1) * stride, :] = gblk[:, :, f0 + j:f1 + j, :].transpose(0, 1, 3, 2)
            gy = gy[:, :, :k, :].reshape(b, cout * k, f1 - f0)
            gx[:, :, f0:f1] = np.matmul(w2, gy)
            gw += np.tensordot(x.data[:, :, f0:f1], gy, axes=([0, 2], [0, 2]))
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw.reshape(cin, cout, k), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar. With ``max_coords`` set, at most that
    many coordinates per input are probed (chosen by a seeded generator).
    Inputs' ``grad`` buffers are reset.

    The relative error's denominator is floored at the difference quotient's
    own rounding noise, about 100 ulp of f over 2 eps; gradients below that
    cannot be resolved by differencing and are compared absolutely.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck requires float64 inputs, got {t.dtype}")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    out.backward()
    floor = max(1e-8, 100 * np.finfo(np.float64).eps * max(abs(out.item()), 1.0) / (2 * eps))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            afl = a.reshape(-1)
            if max_coords is not None and flat.size > max_coords:
                idxs = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            else:
                idxs = range(flat.size)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(afl[i] - num) / max(abs(afl[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
