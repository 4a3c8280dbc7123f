"""Minimal differentiable tensor engine.

Tensors wrap numpy arrays (float32 by default). Operators record nodes on
the active Graph (a tape); the backward pass replays the tape in exact
reverse insertion order. Reductions accumulate in float64 and cast back to
the tensor dtype so that gradient checks against central finite differences
are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    pass


class NumericError(EngineError):
    pass


class Tensor:
    """An n-d array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic (same-shape or scalar operands)
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Graph:
    """Tape of operator applications, in insertion order."""

    _stack: list["Graph"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc):
        Graph._stack.pop()
        return False

    @staticmethod
    def current() -> Optional["Graph"]:
        return Graph._stack[-1] if Graph._stack else None


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    g = Graph.current()
    if g is not None and needs:
        g.nodes.append(Node(op, inputs, out, backward))
    return out


def backprop(graph: Graph, loss: Tensor, params: Optional[Sequence[Tensor]] = None):
    """Reverse-mode gradients of a scalar loss over a recorded graph.

    Returns a dict mapping each requested parameter to its gradient array;
    parameters the loss does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    for node in graph.nodes:
        node.output.grad = None
        for t in node.inputs:
            if isinstance(t, Tensor):
                t.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
            else:
                t.grad = t.grad + gi.astype(t.data.dtype)
    if params is None:
        return None
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# elementwise operators


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _record("div", (a, b), out, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    out = np.maximum(a.data, lo)
    mask = a.data > lo
    return _record("clamp_min", (a,), out, lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    mask = a.data >= 0
    out = np.where(mask, a.data, slope * a.data).astype(a.data.dtype)
    return _record("leaky_relu", (a,), out,
                   lambda g: (np.where(mask, g, slope * g),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda g: (g.reshape(a.shape),))


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=axis)
    split = a.data.shape[axis]
    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb
    return _record("concat", (a, b), out, bwd)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64)).astype(a.data.dtype)
    return _record("sum_all", (a,), out,
                   lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n).astype(a.data.dtype)
    return _record("mean_all", (a,), out,
                   lambda g: (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),))


# ---------------------------------------------------------------------------
# spatial operators: trailing axes are spatial


def convolve(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 zero-padded cross-correlation preserving spatial extents.

    x: (*lead, C_in, spatial...), kernel: (C_out, C_in, k...), bias: (C_out,).
    lead is an optional batch prefix.
    """
    kd, xd = kernel.data, x.data
    D = kd.ndim - 2
    c_out, c_in = kd.shape[0], kd.shape[1]
    if xd.ndim < D + 1:
        raise ShapeError(f"input ndim {xd.ndim} too small for kernel with {D} spatial dims")
    if xd.shape[-(D + 1)] != c_in:
        raise ShapeError(
            f"input has {xd.shape[-(D + 1)]} channels but kernel expects {c_in}"
        )
    ksz = kd.shape[2:]
    if any(k % 2 == 0 for k in ksz):
        raise ShapeError(f"kernel extents must be odd, got {ksz}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({c_out},)")

    out = _corr_raw(xd, kd)
    out = out + bias.data.reshape((c_out,) + (1,) * D)
    out = out.astype(xd.dtype)

    def bwd(g):
        lead_axes = tuple(range(g.ndim - D - 1))
        sp_axes = tuple(range(g.ndim - D, g.ndim))
        gb = g.sum(axis=lead_axes + sp_axes, dtype=np.float64)
        # input grad: correlate g with the spatially flipped, channel-swapped kernel
        kT = np.flip(kd, axis=tuple(range(2, kd.ndim))).swapaxes(0, 1)
        gx = _corr_raw(g, np.ascontiguousarray(kT)).astype(xd.dtype)
        # kernel grad: correlate input windows with g
        win = _windows(xd, ksz, D)                      # (B*P, c_in*K)
        lead = xd.shape[:-(D + 1)]
        gm = np.moveaxis(g, g.ndim - D - 1, g.ndim - 1) # (*lead, *spatial, c_out)
        gm = gm.reshape(-1, c_out)
        gk = (gm.T @ win).reshape(kd.shape)
        return gx, gk.astype(kd.dtype), gb.astype(bias.data.dtype)

    return _record("convolve", (x, kernel, bias), out, bwd)


def _windows(xd: np.ndarray, ksz, D: int) -> np.ndarray:
    """im2col over the trailing D spatial axes; returns (B*P, C_in*K)."""
    lead = xd.shape[:-(D + 1)]
    c_in = xd.shape[-(D + 1)]
    pads = [(0, 0)] * (len(lead) + 1) + [(k // 2, k // 2) for k in ksz]
    xp = np.pad(xd, pads)
    win = sliding_window_view(xp, ksz, axis=tuple(range(xd.ndim - D, xd.ndim)))
    # (*lead, c_in, *spatial, *k) -> (*lead, *spatial, c_in, *k)
    win = np.moveaxis(win, len(lead), len(lead) + D)
    K = int(np.prod(ksz))
    return win.reshape(-1, c_in * K)


def _corr_raw(xd: np.ndarray, kd: np.ndarray) -> np.ndarray:
    """Raw same-padding cross-correlation; no bias, no recording."""
    D = kd.ndim - 2
    c_out = kd.shape[0]
    ksz = kd.shape[2:]
    lead = xd.shape[:-(D + 1)]
    spatial = xd.shape[-D:]
    win = _windows(xd, ksz, D)
    y = win @ kd.reshape(c_out, -1).T          # (B*P, c_out)
    y = y.reshape(lead + spatial + (c_out,))
    return np.moveaxis(y, y.ndim - 1, len(lead))


def maxpool2(x: Tensor, spatial_ndim: Optional[int] = None) -> Tensor:
    """Halve each of the trailing spatial axes taking window maxima."""
    D = x.data.ndim if spatial_ndim is None else spatial_ndim
    sp = x.data.shape[-D:]
    for i, s in enumerate(sp):
        if s % 2:
            raise ShapeError(f"maxpool2 requires even extents; axis {x.data.ndim - D + i} has {s}")
    lead = x.data.shape[:-D]
    half = tuple(s // 2 for s in sp)
    shaped = ()
    for s in sp:
        shaped += (s // 2, 2)
    r = x.data.reshape(lead + shaped)
    win_axes = [len(lead) + 2 * i + 1 for i in range(D)]
    r = np.moveaxis(r, win_axes, range(r.ndim - D, r.ndim))
    flat = r.reshape(lead + half + (2 ** D,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        z = np.zeros(lead + half + (2 ** D,), dtype=g.dtype)
        np.put_along_axis(z, arg[..., None], g[..., None], axis=-1)
        z = z.reshape(lead + half + (2,) * D)
        z = np.moveaxis(z, range(z.ndim - D, z.ndim), win_axes)
        return (z.reshape(x.shape),)

    return _record("maxpool2", (x,), out, bwd)


def upsample2_nearest(x: Tensor, spatial_ndim: Optional[int] = None) -> Tensor:
    """Double each of the trailing spatial axes by replication."""
    D = x.data.ndim if spatial_ndim is None else spatial_ndim
    out = x.data
    for ax in range(x.data.ndim - D, x.data.ndim):
        out = np.repeat(out, 2, axis=ax)

    def bwd(g):
        for ax in range(g.ndim - D, g.ndim):
            s = g.shape[ax] // 2
            g = g.reshape(g.shape[:ax] + (s, 2) + g.shape[ax + 1:]).sum(axis=ax + 1)
        return (g,)

    return _record("upsample2_nearest", (x,), out, bwd)


def window_sum(x: Tensor, window: int, spatial_ndim: Optional[int] = None) -> Tensor:
    """Zero-padded moving-window sum over the trailing spatial axes."""
    D = x.data.ndim if spatial_ndim is None else spatial_ndim
    size = (1,) * (x.data.ndim - D) + (window,) * D

    def run(a):
        s = ndimage.uniform_filter(a.astype(np.float64), size=size, mode="constant")
        return s * float(window ** D)

    out = run(x.data).astype(x.data.dtype)
    # the box filter is self-adjoint under zero padding
    return _record("window_sum", (x,), out,
                   lambda g: (run(g).astype(x.data.dtype),))


def spatial_diff(x: Tensor, axis: int) -> Tensor:
    """Forward finite difference along one axis; last entry is zero."""
    out = np.zeros_like(x.data)
    head = [slice(None)] * x.data.ndim
    tail = [slice(None)] * x.data.ndim
    head[axis] = slice(None, -1)
    tail[axis] = slice(1, None)
    out[tuple(head)] = x.data[tuple(tail)] - x.data[tuple(head)]

    def bwd(g):
        gm = g.copy()
        last = [slice(None)] * g.ndim
        last[axis] = slice(-1, None)
        gm[tuple(last)] = 0            # last output entry is constant zero
        gx = -gm
        gx[tuple(tail)] += gm[tuple(head)]
        return (gx,)

    return _record("spatial_diff", (x,), out, bwd)


# ---------------------------------------------------------------------------
# losses


def loss_mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"loss_mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = d.size
    out = np.asarray((d * d).sum() / n).astype(a.data.dtype)

    def bwd(g):
        gd = (2.0 / n) * d * g
        return gd.astype(a.data.dtype), (-gd).astype(b.data.dtype)

    return _record("loss_mse", (a, b), out, bwd)


def loss_ncc(a: Tensor, b: Tensor, window: int = 9) -> Tensor:
    """Negated mean local squared correlation coefficient; value in [-1, 0].

    Local sums use zero padding; normalization uses the effective in-bounds
    count per window so the score stays affine-invariant at the borders.
    """
    if a.shape != b.shape:
        raise ShapeError(f"loss_ncc shape mismatch: {a.shape} vs {b.shape}")
    if window % 2 == 0:
        raise ValueError(f"loss_ncc window must be odd, got {window}")
    if window > min(a.shape):
        raise ValueError(f"loss_ncc window {window} exceeds smallest extent {min(a.shape)}")
    eps = 1e-9
    n_eff = window_sum(Tensor(np.ones(a.shape, dtype=a.data.dtype)), window)
    inv_n = Tensor(1.0 / n_eff.data)

    sa = window_sum(a, window)
    sb = window_sum(b, window)
    sab = window_sum(mul(a, b), window)
    saa = window_sum(mul(a, a), window)
    sbb = window_sum(mul(b, b), window)

    cross = sub(sab, mul(mul(sa, sb), inv_n))
    var_a = clamp_min(sub(saa, mul(mul(sa, sa), inv_n)), 0.0)
    var_b = clamp_min(sub(sbb, mul(mul(sb, sb), inv_n)), 0.0)
    denom = add(mul(var_a, var_b), Tensor(np.full(a.shape, eps, dtype=a.data.dtype)))
    cc = div(mul(cross, cross), denom)
    return scale(mean_all(cc), -1.0)


def loss_gradmag(f: Tensor) -> Tensor:
    """Mean squared forward difference of a (D, spatial...) field.

    Differences are taken along every spatial axis; the one-sided boundary
    entry counts as zero. The mean runs over voxels, components and axes.
    """
    if f.ndim < 2:
        raise ShapeError("loss_gradmag expects a (components, spatial...) tensor")
    axes = range(1, f.ndim)
    total = None
    for ax in axes:
        s = sum_all(square(spatial_diff(f, ax)))
        total = s if total is None else add(total, s)
    return scale(total, 1.0 / (f.data.size * (f.ndim - 1)))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, class_axis: int) -> Tensor:
    """Mean per-voxel cross-entropy of integer labels against logits."""
    z = logits.data.astype(np.float64)
    z = np.moveaxis(z, class_axis, -1)
    labs = np.asarray(labels)
    if labs.shape != z.shape[:-1]:
        raise ShapeError(f"label shape {labs.shape} != logit spatial shape {z.shape[:-1]}")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    logp = (z - m) - np.log(s)
    n = labs.size
    picked = np.take_along_axis(logp, labs[..., None], axis=-1)[..., 0]
    out = np.asarray(-picked.sum() / n).astype(logits.data.dtype)

    def bwd(g):
        p = e / s
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labs[..., None], 1.0, axis=-1)
        gz = (p - onehot) * (g / n)
        return (np.moveaxis(gz, -1, class_axis).astype(logits.data.dtype),)

    return _record("softmax_xent", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 5e-4

    @staticmethod
    def for_param(param: Tensor, learning_rate: float = 5e-4) -> "AdamState":
        return AdamState(first_moment=np.zeros(param.shape, dtype=np.float64),
                         second_moment=np.zeros(param.shape, dtype=np.float64),
                         learning_rate=learning_rate)


def adam_update(param: Tensor, grad: np.ndarray, state: AdamState) -> None:
    """One Adam step with bias correction, in place."""
    if grad.shape != param.data.shape:
        raise ShapeError(f"grad shape {grad.shape} != param shape {param.data.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter '{param.name or 'unnamed'}'")
    g = grad.astype(np.float64)
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * (g * g)
    m_hat = state.first_moment / (1 - state.beta1 ** t)
    v_hat = state.second_moment / (1 - state.beta2 ** t)
    new = param.data.astype(np.float64) - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.data = new.astype(param.data.dtype)


class Adam:
    """Adam over a list of parameters, one state per parameter."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 5e-4):
        self.params = list(params)
        self.states = {id(p): AdamState.for_param(p, learning_rate) for p in self.params}

    def step(self, grads: dict) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            adam_update(p, g, self.states[id(p)])
