"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

The engine records executed operations on an explicit :class:`Tape`;
:func:`backward` replays the tape in reverse, accumulating adjoints. The
operation set is exactly what the separator network and the SI-SNR/PIT
losses need: elementwise arithmetic, 1-D (transposed) convolutions,
PReLU/ReLU/sigmoid, reductions, log10, projection helpers, global layer
normalization, and shape plumbing (pad/narrow/reshape).

Adjoint rules live in the module-level ``BACKWARD`` table keyed by op name
so a verification harness can exercise (or deliberately corrupt) each rule
independently. Everything is double precision; ``EPS`` is the global
numeric floor used by downstream loss code.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-8

_LN10 = math.log(10.0)


class Tape:
    """Ordered record of the operations of one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []


_tape_stack: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def tape():
    """Open a recording scope; ops executed inside become differentiable."""
    t = Tape()
    _tape_stack.append(t)
    try:
        yield t
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad():
    """Suspend recording; ops compute values only (used for teacher passes)."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


class Tensor:
    """A value in the compute graph with a same-shape gradient accumulator."""

    __slots__ = ("value", "grad", "op", "parents", "ctx", "needs_grad", "tape")

    def __init__(self, value, trainable: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx = None
        self.needs_grad = bool(trainable)
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        tag = self.op or ("param" if self.needs_grad else "const")
        return f"Tensor({tag}, shape={self.value.shape})"

    # arithmetic sugar; the named ops below do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, op: str, parents: tuple[Tensor, ...], ctx) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    t = _active_tape()
    if t is not None and any(p.needs_grad for p in parents):
        out.op = op
        out.parents = parents
        out.ctx = ctx
        out.needs_grad = True
        out.tape = t
        t.nodes.append(out)
    else:
        out.op = None
        out.parents = ()
        out.ctx = None
        out.needs_grad = False
        out.tape = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


BACKWARD: dict[str, callable] = {}


def _adjoint(name):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable leaf."""
    if loss.value.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    tp = loss.tape
    if tp is None:
        raise ValueError("loss is constant (not recorded on a tape); nothing to differentiate")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tp.nodes):
        g = node.grad
        if g is None:
            continue
        for parent, pg in zip(node.parents, BACKWARD[node.op](node, g)):
            if pg is None or not parent.needs_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
        node.grad = None  # interior grads are not needed once propagated


def detach(x: Tensor) -> Tensor:
    """Value-equal constant; gradients never flow through it."""
    out = Tensor.__new__(Tensor)
    out.value = x.value
    out.grad = None
    out.op = None
    out.parents = ()
    out.ctx = None
    out.needs_grad = False
    out.tape = None
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record(a.value + b.value, "add", (a, b), None)


@_adjoint("add")
def _add_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record(a.value - b.value, "sub", (a, b), None)


@_adjoint("sub")
def _sub_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record(a.value * b.value, "mul", (a, b), None)


@_adjoint("mul")
def _mul_bw(node, g):
    a, b = node.parents
    ga = _unbroadcast(g * b.value, a.shape) if a.needs_grad else None
    gb = _unbroadcast(g * a.value, b.shape) if b.needs_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    return _record(a.value / b.value, "div", (a, b), None)


@_adjoint("div")
def _div_bw(node, g):
    a, b = node.parents
    ga = _unbroadcast(g / b.value, a.shape) if a.needs_grad else None
    gb = _unbroadcast(-g * a.value / (b.value * b.value), b.shape) if b.needs_grad else None
    return ga, gb


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record(x.value * c, "scalar_mul", (x,), c)


@_adjoint("scalar_mul")
def _scalar_mul_bw(node, g):
    return (g * node.ctx,)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.value * x.value, "square", (x,), None)


@_adjoint("square")
def _square_bw(node, g):
    (x,) = node.parents
    return (2.0 * x.value * g,)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.sqrt(x.value), "sqrt", (x,), None)


@_adjoint("sqrt")
def _sqrt_bw(node, g):
    return (g / (2.0 * node.value),)


def log10(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.log10(x.value), "log10", (x,), None)


@_adjoint("log10")
def _log10_bw(node, g):
    (x,) = node.parents
    return (g / (x.value * _LN10),)


def maximum_scalar(x, floor: float) -> Tensor:
    """max(x, floor); the subgradient passes through where x >= floor."""
    x = as_tensor(x)
    return _record(np.maximum(x.value, floor), "maximum_scalar", (x,), float(floor))


@_adjoint("maximum_scalar")
def _maximum_scalar_bw(node, g):
    (x,) = node.parents
    return (g * (x.value >= node.ctx),)


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.maximum(x.value, 0.0), "relu", (x,), None)


@_adjoint("relu")
def _relu_bw(node, g):
    (x,) = node.parents
    return (g * (x.value > 0.0),)


def prelu(x, slope) -> Tensor:
    """PReLU with a learned per-channel slope; channel axis is -2."""
    x, slope = as_tensor(x), as_tensor(slope)
    if x.ndim < 2:
        raise ValueError(f"prelu expects (..., C, T) input, got shape {x.shape}")
    if slope.shape != (x.shape[-2],):
        raise ValueError(f"prelu slope shape {slope.shape} does not match channels {x.shape[-2]}")
    xv = x.value
    value = np.where(xv > 0.0, xv, slope.value[:, None] * xv)
    return _record(value, "prelu", (x, slope), None)


@_adjoint("prelu")
def _prelu_bw(node, g):
    x, slope = node.parents
    xv = x.value
    neg = xv <= 0.0
    gx = np.where(neg, slope.value[:, None] * g, g) if x.needs_grad else None
    gs = None
    if slope.needs_grad:
        contrib = np.where(neg, g * xv, 0.0)
        axes = tuple(range(contrib.ndim - 2)) + (contrib.ndim - 1,)
        gs = contrib.sum(axis=axes)
    return gx, gs


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    # numerically stable in both tails
    value = np.where(xv >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(xv))), np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))
    return _record(value, "sigmoid", (x,), None)


@_adjoint("sigmoid")
def _sigmoid_bw(node, g):
    s = node.value
    return (g * s * (1.0 - s),)


# ---------------------------------------------------------------------------
# reductions


def _sum_like(x, axis, keepdims, mode) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    value = x.value.sum(axis=axes, keepdims=keepdims)
    n = 1
    for a in axes:
        n *= x.shape[a]
    if mode == "mean":
        value = value / n
    return _record(value, mode, (x,), (axes, keepdims, n))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    return _sum_like(x, axis, keepdims, "sum")


def tmean(x, axis=None, keepdims=False) -> Tensor:
    return _sum_like(x, axis, keepdims, "mean")


def _expand_reduced(g, x_shape, axes, keepdims):
    if not keepdims:
        shape = list(x_shape)
        for a in axes:
            shape[a] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, x_shape)


@_adjoint("sum")
def _sum_bw(node, g):
    (x,) = node.parents
    axes, keepdims, _ = node.ctx
    return (_expand_reduced(g, x.shape, axes, keepdims).copy(),)


@_adjoint("mean")
def _mean_bw(node, g):
    (x,) = node.parents
    axes, keepdims, n = node.ctx
    return (_expand_reduced(g / n, x.shape, axes, keepdims).copy(),)


def dot(a, b) -> Tensor:
    """Inner product over the last axis: (..., T) x (..., T) -> (...)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"dot: shapes {a.shape} and {b.shape} differ")
    value = np.einsum("...t,...t->...", a.value, b.value)
    return _record(np.asarray(value), "dot", (a, b), None)


@_adjoint("dot")
def _dot_bw(node, g):
    a, b = node.parents
    g = np.asarray(g)[..., None]
    ga = g * b.value if a.needs_grad else None
    gb = g * a.value if b.needs_grad else None
    return ga, gb


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.value.reshape(shape), "reshape", (x,), x.shape)


@_adjoint("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.ctx),)


def pad1d(x, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    x = as_tensor(x)
    if left < 0 or right < 0:
        raise ValueError(f"pad1d: negative padding ({left}, {right})")
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    return _record(np.pad(x.value, width), "pad1d", (x,), (left, x.shape[-1]))


@_adjoint("pad1d")
def _pad1d_bw(node, g):
    left, n = node.ctx
    return (g[..., left : left + n],)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of shape {x.shape}"
        )
    idx = tuple(slice(None) if a != axis else slice(start, start + length) for a in range(x.ndim))
    return _record(np.ascontiguousarray(x.value[idx]), "narrow", (x,), (axis, start, length))


@_adjoint("narrow")
def _narrow_bw(node, g):
    (x,) = node.parents
    axis, start, length = node.ctx
    full = np.zeros(x.shape)
    idx = tuple(slice(None) if a != axis else slice(start, start + length) for a in range(x.ndim))
    full[idx] = g
    return (full,)


# ---------------------------------------------------------------------------
# convolutions

def _conv_out_len(t: int, kernel: int, stride: int, dilation: int) -> int:
    span = (kernel - 1) * dilation + 1
    if t < span:
        raise ValueError(f"conv1d: input length {t} shorter than receptive span {span}")
    return (t - span) // stride + 1


def _frames(x: np.ndarray, kernel: int, stride: int, dilation: int) -> np.ndarray:
    """Read-only (B, C, F, K) window view of (B, C, T)."""
    b, c, t = x.shape
    f = _conv_out_len(t, kernel, stride, dilation)
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, f, kernel), (s0, s1, s2 * stride, s2 * dilation), writeable=False
    )


def conv1d(x, w, b=None, stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    """Valid 1-D convolution: (B, Cin, T) x (Cout, Cin/groups, K) -> (B, Cout, F)."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or dilation < 1 or groups < 1:
        raise ValueError(f"conv1d: stride/dilation/groups must be positive, got {stride}/{dilation}/{groups}")
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d: expected 3-D input and weight, got {x.shape} and {w.shape}")
    batch, cin, t = x.shape
    cout, cin_g, kernel = w.shape
    if cin_g * groups != cin or cout % groups:
        raise ValueError(
            f"conv1d: weight {w.shape} incompatible with {cin} input channels and {groups} groups"
        )
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ValueError(f"conv1d: bias shape {b.shape} does not match {cout} output channels")

    f = _conv_out_len(t, kernel, stride, dilation)
    if groups == 1 and kernel == 1 and stride == 1 and dilation == 1:
        mode = "pointwise"
        value = np.matmul(w.value[:, :, 0], x.value)
    elif groups == cin and cout == cin and cin_g == 1:
        mode = "depthwise"
        value = np.zeros((batch, cout, f))
        xv, wv = x.value, w.value
        last = (f - 1) * stride + 1
        for k in range(kernel):
            value += xv[:, :, k * dilation : k * dilation + last : stride] * wv[None, :, 0, k, None]
    elif groups == 1:
        mode = "dense"
        patches = _frames(x.value, kernel, stride, dilation)  # (B, Cin, F, K)
        flat = patches.transpose(0, 2, 1, 3).reshape(batch * f, cin * kernel)
        value = (flat @ w.value.reshape(cout, cin * kernel).T).reshape(batch, f, cout)
        value = np.ascontiguousarray(value.transpose(0, 2, 1))
    else:
        raise ValueError(f"conv1d: unsupported channel grouping {groups} for weight {w.shape}")
    if b is not None:
        value += b.value[:, None]
    parents = (x, w) if b is None else (x, w, b)
    return _record(value, "conv1d", parents, (stride, dilation, mode, f))


@_adjoint("conv1d")
def _conv1d_bw(node, g):
    x, w = node.parents[0], node.parents[1]
    bias = node.parents[2] if len(node.parents) == 3 else None
    stride, dilation, mode, f = node.ctx
    xv, wv = x.value, w.value
    cout, cin_g, kernel = wv.shape
    last = (f - 1) * stride + 1

    gx = gw = gb = None
    if bias is not None and bias.needs_grad:
        gb = g.sum(axis=(0, 2))

    if mode == "pointwise":
        if x.needs_grad:
            gx = np.matmul(wv[:, :, 0].T, g)
        if w.needs_grad:
            gw = np.einsum("bot,bct->oc", g, xv)[:, :, None]
    elif mode == "depthwise":
        if x.needs_grad:
            gx = np.zeros(xv.shape)
            for k in range(kernel):
                gx[:, :, k * dilation : k * dilation + last : stride] += g * wv[None, :, 0, k, None]
        if w.needs_grad:
            gw = np.empty(wv.shape)
            for k in range(kernel):
                sl = xv[:, :, k * dilation : k * dilation + last : stride]
                gw[:, 0, k] = np.einsum("bcf,bcf->c", g, sl)
    else:  # dense
        if x.needs_grad:
            gx = np.zeros(xv.shape)
            for k in range(kernel):
                gx[:, :, k * dilation : k * dilation + last : stride] += np.matmul(
                    wv[:, :, k].T, g
                )
        if w.needs_grad:
            patches = _frames(xv, kernel, stride, dilation)
            gw = np.einsum("bof,bcfk->ock", g, patches)
    return (gx, gw) if bias is None else (gx, gw, gb)


def conv1d_transpose(x, w, b=None, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution: (B, C, F) x (C, Cout, K) -> (B, Cout, (F-1)*stride + K)."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ValueError(f"conv1d_transpose: stride must be positive, got {stride}")
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d_transpose: expected 3-D input and weight, got {x.shape} and {w.shape}")
    batch, c, f = x.shape
    c_w, cout, kernel = w.shape
    if c_w != c:
        raise ValueError(f"conv1d_transpose: weight {w.shape} incompatible with {c} input channels")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ValueError(f"conv1d_transpose: bias shape {b.shape} does not match {cout} channels")
    t = (f - 1) * stride + kernel
    contrib = np.einsum("bcf,cok->bofk", x.value, w.value)
    value = np.zeros((batch, cout, t))
    last = (f - 1) * stride + 1
    for k in range(kernel):
        value[:, :, k : k + last : stride] += contrib[:, :, :, k]
    if b is not None:
        value += b.value[:, None]
    parents = (x, w) if b is None else (x, w, b)
    return _record(value, "conv1d_transpose", parents, (stride, kernel, f))


@_adjoint("conv1d_transpose")
def _conv1d_transpose_bw(node, g):
    x, w = node.parents[0], node.parents[1]
    bias = node.parents[2] if len(node.parents) == 3 else None
    stride, kernel, f = node.ctx
    gframes = _frames(g, kernel, stride, 1)  # (B, Cout, F, K)
    gx = np.einsum("bofk,cok->bcf", gframes, w.value) if x.needs_grad else None
    gw = np.einsum("bcf,bofk->cok", x.value, gframes) if w.needs_grad else None
    gb = g.sum(axis=(0, 2)) if bias is not None and bias.needs_grad else None
    return (gx, gw) if bias is None else (gx, gw, gb)


# ---------------------------------------------------------------------------
# normalization


def global_layer_norm(x, gamma, beta, eps: float = EPS) -> Tensor:
    """Normalize over (channels, time) per batch item, with per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ValueError(f"global_layer_norm expects (..., C, T), got shape {x.shape}")
    c = x.shape[-2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"global_layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    axes = (x.ndim - 2, x.ndim - 1)
    mu = x.value.mean(axis=axes, keepdims=True)
    var = x.value.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    value = gamma.value[:, None] * xhat + beta.value[:, None]
    return _record(value, "global_layer_norm", (x, gamma, beta), (xhat, inv_std, axes))


@_adjoint("global_layer_norm")
def _gln_bw(node, g):
    x, gamma, beta = node.parents
    xhat, inv_std, axes = node.ctx
    reduce_affine = tuple(a for a in range(g.ndim) if a != g.ndim - 2)
    gbeta = g.sum(axis=reduce_affine) if beta.needs_grad else None
    ggamma = (g * xhat).sum(axis=reduce_affine) if gamma.needs_grad else None
    gx = None
    if x.needs_grad:
        gg = g * gamma.value[:, None]
        gx = inv_std * (
            gg - gg.mean(axis=axes, keepdims=True) - xhat * (gg * xhat).mean(axis=axes, keepdims=True)
        )
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_err) and self.max_rel_err < self.tol


def finite_difference_check(fn, leaves, step: float = 1e-5, tol: float = 1e-4, name: str = "fn") -> GradCheckResult:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its graph from the current leaf values on every
    call; the analytic pass runs on a fresh tape, the difference quotients
    re-evaluate values only. The relative error of entry ``i`` uses
    ``max(|analytic|, |numeric|, 1)`` as denominator so the dB-scale losses
    do not drown true mismatches in cancellation noise.
    """
    with tape():
        loss = fn()
        backward(loss)
    analytic = [None if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    for leaf in leaves:
        leaf.zero_grad()

    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        grad = np.zeros(leaf.shape) if grad is None else grad
        flat = leaf.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().value)
            flat[i] = orig - step
            lo = float(fn().value)
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            ana = float(grad.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            worst = max(worst, err)
    return GradCheckResult(name, worst, tol)
