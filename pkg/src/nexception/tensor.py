"""Reverse-mode autodiff on NumPy arrays, NCHW layout.

A Tensor wraps an ndarray plus an optional gradient buffer. Every
differentiable op records its parents and a backward closure on the result;
``backward()`` replays those closures in reverse topological order. float32
is the working dtype; feeding float64 data switches the whole graph to
float64, which is how the finite-difference gradient checks run.

Every op validates its output for NaN/Inf and raises NumericsError at the
offending op instead of letting poison propagate. The check can be disabled
around hot loops with ``numerics_checks(False)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import GraphError, NumericsError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

def _quiet():
    # Overflow/invalid become NumericsError via the finite check; the
    # intermediate warnings are noise.
    return np.errstate(over="ignore", invalid="ignore")

# Module-level switches. Plain globals, toggled via context managers only.
_GRAD_ENABLED = True
_FINITE_CHECKS = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def numerics_checks(enabled: bool):
    """Toggle per-op NaN/Inf validation (on by default)."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")


def _same_dtype(op: str, *arrs: np.ndarray) -> np.dtype:
    dt = arrs[0].dtype
    for a in arrs[1:]:
        if a.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {a.dtype}")
    return dt


class Tensor:
    """An ndarray with an optional grad buffer and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def from_op(data: np.ndarray, op: str, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build the result tensor of a differentiable op.

    ``backward`` receives the upstream gradient and must push contributions
    into the parents via ``accumulate_grad``. Recording is skipped when no
    parent needs gradients or inside a ``no_grad`` block.
    """
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to ``t`` (repeat calls accumulate)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients add onto whatever is already stored, so callers clear them
    between steps. Raises GraphError for a non-scalar root or a graph cycle.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    # Iterative DFS with tri-state marks; a back-edge means a cycle.
    order: list[Tensor] = []
    marks: dict[int, int] = {}  # id -> 1 in-stack, 2 done
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, pi = stack.pop()
        if pi == 0:
            state = marks.get(id(node), 0)
            if state == 2:
                continue
            if state == 1:
                raise GraphError("autodiff graph contains a cycle")
            marks[id(node)] = 1
        advanced = False
        for j in range(pi, len(node._parents)):
            child = node._parents[j]
            st = marks.get(id(child), 0)
            if st == 1:
                raise GraphError("autodiff graph contains a cycle")
            if st == 0 and child.requires_grad:
                stack.append((node, j + 1))
                stack.append((child, 0))
                advanced = True
                break
        if not advanced:
            marks[id(node)] = 2
            order.append(node)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and structural ops ---------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with NumPy broadcasting."""
    _same_dtype("add", a.data, b.data)
    with _quiet():
        out_data = a.data + b.data

    def bwd(g):
        accumulate_grad(a, _sum_to_shape(g, a.data.shape))
        accumulate_grad(b, _sum_to_shape(g, b.data.shape))

    return from_op(out_data, "add", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with NumPy broadcasting."""
    _same_dtype("mul", a.data, b.data)
    with _quiet():
        out_data = a.data * b.data

    def bwd(g):
        accumulate_grad(a, _sum_to_shape(g * b.data, a.data.shape))
        accumulate_grad(b, _sum_to_shape(g * a.data, b.data.shape))

    return from_op(out_data, "mul", (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar, preserving dtype."""
    cval = x.data.dtype.type(c)
    with _quiet():
        out_data = x.data * cval

    def bwd(g):
        accumulate_grad(x, g * cval)

    return from_op(out_data, "scale", (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        accumulate_grad(x, g.reshape(x.data.shape))

    return from_op(out_data, "reshape", (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element; the usual loss-head reduction."""
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = x.data.dtype.type(1.0 / x.data.size)

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g * inv, x.data.shape))

    return from_op(out_data, "mean_all", (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g, x.data.shape))

    return from_op(out_data, "sum_all", (x,), bwd)


# -- activations -----------------------------------------------------------

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _act_forward(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "gelu":
        # Exact erf form, not the tanh approximation.
        return (0.5 * x * (1.0 + erf(x / _SQRT2))).astype(x.dtype)
    if kind in ("elu", "celu"):
        # alpha = 1; the two parameterizations coincide there.
        with np.errstate(over="ignore"):
            return np.where(x > 0, x, np.expm1(np.minimum(x, 0))).astype(x.dtype)
    if kind == "sigmoid":
        with np.errstate(over="ignore"):
            pos = 1.0 / (1.0 + np.exp(-np.maximum(x, 0)))
            ex = np.exp(np.minimum(x, 0))
            neg = ex / (1.0 + ex)
        return np.where(x >= 0, pos, neg).astype(x.dtype)
    raise ShapeError(f"unknown activation kind '{kind}'")


def _act_grad(kind: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (cdf + x * pdf).astype(x.dtype)
    if kind in ("elu", "celu"):
        return np.where(x > 0, 1.0, y + 1.0).astype(x.dtype)
    if kind == "sigmoid":
        return (y * (1.0 - y)).astype(x.dtype)
    raise ShapeError(f"unknown activation kind '{kind}'")


ACTIVATION_KINDS = ("relu", "gelu", "elu", "celu", "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    """Pointwise nonlinearity; gelu uses the exact normal CDF."""
    out_data = _act_forward(kind, x.data)

    def bwd(g):
        accumulate_grad(x, g * _act_grad(kind, x.data, out_data))

    return from_op(out_data, kind, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# -- linear ----------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: x [B, in] @ w.T [in, out] + b."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d x and w, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: x has {x.data.shape[1]} features, w expects {w.data.shape[1]}")
    _same_dtype("linear", x.data, w.data)
    with _quiet():
        out_data = x.data @ w.data.T
        if b is not None:
            out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if x.requires_grad:
            accumulate_grad(x, g @ w.data)
        if w.requires_grad:
            accumulate_grad(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            accumulate_grad(b, g.sum(axis=0))

    return from_op(out_data, "linear", parents, bwd)


# -- convolution -----------------------------------------------------------


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out <= 0:
        raise ShapeError(f"conv window k={k} stride={stride} pad={pad} does not fit extent {n}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix (B, C*kh*kw, ho*wo) from a padded NCHW array."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xp_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add inverse of _im2col back onto the padded input."""
    b, c = xp_shape[0], xp_shape[1]
    out = np.zeros(xp_shape, dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d convolution (cross-correlation) on NCHW input.

    Weights are [out_ch, in_ch/groups, kh, kw]. Implemented as im2col plus
    a batched matmul over groups, so depthwise (groups == in_ch) runs
    without a per-group python loop.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d weight, got shape {w.data.shape}")
    _same_dtype("conv2d", x.data, w.data)
    bs, cin, h, wdt = x.data.shape
    cout, cw, kh, kw = w.data.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide in_ch={cin} and out_ch={cout}")
    if cw != cin // groups:
        raise ShapeError(f"weight in_ch {cw} != in_ch/groups {cin // groups}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wdt, kw, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)                  # (B, C·kh·kw, N)
    kdim = cw * kh * kw
    cols_g = cols.reshape(bs, groups, kdim, ho * wo)
    w_g = w.data.reshape(groups, cout // groups, kdim)
    with _quiet():
        out = np.matmul(w_g[None], cols_g)                      # (B, G, outg, N)
        out = out.reshape(bs, cout, ho, wo)
        if b is not None:
            if b.data.shape != (cout,):
                raise ShapeError(f"conv2d bias shape {b.data.shape} != ({cout},)")
            out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        go = g.reshape(bs, groups, cout // groups, ho * wo)
        if w.requires_grad:
            gw = np.matmul(go, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
            accumulate_grad(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            accumulate_grad(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w_g.transpose(0, 2, 1)[None], go)
            gxp = _col2im(gcols.reshape(bs, cin * kh * kw, ho * wo),
                          xp.shape, kh, kw, stride, ho, wo)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wdt]
            accumulate_grad(x, gxp)

    return from_op(out, "conv2d", parents, bwd)


# -- pooling ---------------------------------------------------------------


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling; ties route the gradient to the first window index."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got shape {x.data.shape}")
    bs, c, h, w = x.data.shape
    ho = _conv_out_size(h, kernel, stride, padding)
    wo = _conv_out_size(w, kernel, stride, padding)
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    sb, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(bs, c, ho, wo, kernel, kernel),
        strides=(sb, sc, stride * sh, stride * sw, sh, sw), writeable=False)
    flat = win.reshape(bs, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        gp = np.zeros(xp.shape, dtype=g.dtype)
        oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oh[None, None] * stride + idx // kernel
        cols = ow[None, None] * stride + idx % kernel
        bi = np.arange(bs)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gp, (bi, ci, rows, cols), g)
        if padding:
            gp = gp[:, :, padding:padding + h, padding:padding + w]
        accumulate_grad(x, gp)

    return from_op(out, "max_pool2d", (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: [B, C, H, W] -> [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.data.shape}")
    bs, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))
    inv = x.data.dtype.type(1.0 / (h * w))

    def bwd(g):
        accumulate_grad(x, np.broadcast_to((g * inv)[:, :, None, None], x.data.shape))

    return from_op(out_data, "global_avg_pool", (x,), bwd)


# -- normalization ---------------------------------------------------------


def _norm_backward(g, xhat, gamma, inv_std, axes):
    n = 1
    for ax in axes:
        n *= xhat.shape[ax]
    gxhat = g * gamma
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (gxhat - m1 - xhat * m2)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over the batch (and spatial dims for NCHW).

    Training mode normalizes with biased batch statistics and folds them
    into the running buffers (unbiased variance, EMA with the given
    momentum). Eval mode uses the running buffers. A training batch whose
    per-channel sample count is 1 has no usable variance and is an error.
    """
    nd = x.data.ndim
    if nd == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    elif nd == 2:
        axes, view = (0,), (1, -1)
    else:
        raise ShapeError(f"batch_norm expects 2-d or 4-d input, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm affine shapes {gamma.data.shape}/{beta.data.shape} != ({c},)")
    dt = x.data.dtype

    if training:
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
        if n < 2:
            raise ShapeError("batch_norm: batch of 1 sample per channel has degenerate statistics")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = running_mean.astype(dt, copy=False)
        var = running_var.astype(dt, copy=False)

    inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt).reshape(view)
    xhat = (x.data - mean.astype(dt).reshape(view)) * inv_std
    out_data = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def bwd(g):
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=axes))
        if x.requires_grad:
            if training:
                gx = _norm_backward(g, xhat, gamma.data.reshape(view), inv_std, axes)
            else:
                gx = g * gamma.data.reshape(view) * inv_std
            accumulate_grad(x, gx.astype(dt))

    return from_op(out_data.astype(dt), "batch_norm", (x, gamma, beta), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-6) -> Tensor:
    """Layer normalization over the channel axis.

    NCHW input is normalized across C independently at every (batch,
    position); 2-d input across its feature axis. The affine parameters are
    per channel either way.
    """
    nd = x.data.ndim
    if nd == 4:
        axes, view = (1,), (1, -1, 1, 1)
    elif nd == 2:
        axes, view = (1,), (1, -1)
    else:
        raise ShapeError(f"layer_norm expects 2-d or 4-d input, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} != ({c},)")
    dt = x.data.dtype
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (x.data - mean) * inv_std
    out_data = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def bwd(g):
        if gamma.requires_grad:
            red = tuple(i for i in range(nd) if i != 1)
            accumulate_grad(gamma, (g * xhat).sum(axis=red))
        if beta.requires_grad:
            red = tuple(i for i in range(nd) if i != 1)
            accumulate_grad(beta, g.sum(axis=red))
        if x.requires_grad:
            gx = _norm_backward(g, xhat, gamma.data.reshape(view), inv_std, axes)
            accumulate_grad(x, gx.astype(dt))

    return from_op(out_data.astype(dt), "layer_norm", (x, gamma, beta), bwd)


# -- parameters ------------------------------------------------------------


class Parameter:
    """A named, checkpointable tensor.

    Trainable parameters carry gradients and receive optimizer updates.
    Non-trainable ones (normalization running statistics) are still part of
    the model state: they are counted, checkpointed, and restored.
    ``weight_decay_exempt`` marks tensors the optimizer must not decay
    (biases, normalization scales/shifts).
    """

    __slots__ = ("name", "value", "trainable", "weight_decay_exempt")

    def __init__(self, value: Tensor, *, trainable: bool = True,
                 weight_decay_exempt: bool = False, name: str = ""):
        self.name = name
        self.value = value
        self.trainable = trainable
        self.weight_decay_exempt = weight_decay_exempt
        value.requires_grad = trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr: np.ndarray) -> None:
        self.value.data = arr

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def size(self) -> int:
        return int(self.value.data.size)

    def __repr__(self) -> str:
        return (f"Parameter({self.name!r}, shape={self.value.data.shape}, "
                f"trainable={self.trainable})")
