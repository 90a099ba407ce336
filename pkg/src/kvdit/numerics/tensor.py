"""Dense float64 tensors with hand-written reverse-mode gradients.

The op set is deliberately small and fixed: exactly what the attention
blocks, the diffusion trainer and the experiment harness need.  Every
backward rule is written out by hand next to its forward so it can be
audited line by line; there is no generic graph optimizer.

Gradients are accumulated by a classic tape walk: each result tensor keeps
references to its parents and a closure that routes the incoming gradient
to them.  ``backward()`` topologically sorts the graph and runs the
closures in reverse.  All reductions use numpy's fixed left-to-right
ordering, so results are bitwise reproducible for a given seed on one
platform.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from ..errors import DimensionError, NumericalError

_grad_enabled = True


@contextmanager
def no_grad():
    """Skip graph construction inside the block (probes, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-d float64 array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # autograd driver
    # ------------------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise DimensionError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray, own: bool = False):
        # `own=True` promises `g` is not handed to any other node, so the
        # first accumulation can keep the array instead of copying it.
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    # elementwise arithmetic
    # ------------------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            ga = _unbroadcast(g, a.data.shape)
            a._accum(ga, own=ga is not g)
            gb = _unbroadcast(g, b.data.shape)
            b._accum(gb, own=gb is not g)

        return Tensor._result(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g, a=self):
            a._accum(-g, own=True)

        return Tensor._result(-self.data, (self,), bwd)

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def bwd(g, a=self, b=other):
            ga = _unbroadcast(g, a.data.shape)
            a._accum(ga, own=ga is not g)
            b._accum(_unbroadcast(-g, b.data.shape), own=True)

        return Tensor._result(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g * b.data, a.data.shape), own=True)
            b._accum(_unbroadcast(g * a.data, b.data.shape), own=True)

        return Tensor._result(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __pow__(self, exponent: float):
        out_data = self.data**exponent

        def bwd(g, a=self, n=exponent):
            a._accum(g * n * a.data ** (n - 1), own=True)

        return Tensor._result(out_data, (self,), bwd)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bwd(g, a=self, k=key):
            full = np.zeros_like(a.data)
            if isinstance(k, tuple) and all(
                isinstance(x, (slice, int)) or x is Ellipsis for x in k
            ) or isinstance(k, (slice, int)):
                full[k] += g  # basic indexing selects disjoint elements
            else:
                np.add.at(full, k, g)
            a._accum(full, own=True)

        return Tensor._result(out_data, (self,), bwd)

    # ------------------------------------------------------------------
    # shape ops
    # ------------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def bwd(g, a=self, s=src_shape):
            a._accum(g.reshape(s), own=True)

        return Tensor._result(out_data, (self,), bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def bwd(g, a=self, inv=tuple(inv)):
            a._accum(g.transpose(inv), own=True)

        return Tensor._result(out_data, (self,), bwd)

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy(), own=True)

        return Tensor._result(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading dims with numpy semantics."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape), own=True)
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape), own=True)

    return Tensor._result(out_data, (a, b), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs last extent >= 1")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accum(y * (g - dot), own=True)

    return Tensor._result(y, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last (channel) axis, then scale and shift."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layernorm gain/bias must have shape ({c},), got "
            f"{gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gain.data * xhat + bias.data

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        gain._accum((g * xhat).sum(axis=red), own=True)
        bias._accum(g.sum(axis=red), own=True)
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True)
        term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        term *= inv
        x._accum(term, own=True)

    return Tensor._result(y, (x, gain, bias), bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); smooth, so finite-difference checks stay clean."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def bwd(g):
        x._accum(g * (s + x.data * s * (1.0 - s)), own=True)

    return Tensor._result(y, (x,), bwd)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup for embedding tables; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = table.data[idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accum(full, own=True)

    return Tensor._result(out_data, (table,), bwd)


def strided_group_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Per-channel (grouped) convolution with non-overlapping windows.

    `x` is (B, H, W, C); the kernel is (C, R, R) with R == stride, so each
    output value is a weighted sum over one R x R window of its own channel.
    """
    from ..errors import LayoutError

    b, h, w, c = x.shape
    r = int(stride)
    if kernel.shape != (c, r, r):
        raise DimensionError(
            f"kernel must be ({c}, {r}, {r}), got {kernel.shape}"
        )
    if bias.shape != (c,):
        raise DimensionError(f"bias must be ({c},), got {bias.shape}")
    if h % r or w % r:
        raise LayoutError(f"grid {h}x{w} not divisible by stride {r}")
    ho, wo = h // r, w // r
    win = x.data.reshape(b, ho, r, wo, r, c).transpose(0, 1, 3, 2, 4, 5)
    out_data = np.einsum("bijuvc,cuv->bijc", win, kernel.data) + bias.data

    def bwd(g):
        bias._accum(g.sum(axis=(0, 1, 2)), own=True)
        kernel._accum(np.einsum("bijuvc,bijc->cuv", win, g), own=True)
        gwin = np.einsum("bijc,cuv->bijuvc", g, kernel.data)
        x._accum(gwin.transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c), own=True)

    return Tensor._result(out_data, (x, kernel, bias), bwd)


def bilinear_resize_grid(grid: Tensor, target: tuple[int, int]) -> Tensor:
    """Align-corners bilinear resize of an (Hs, Ws, C) grid.

    Exact passthrough when the target equals the source; linear in the
    input, so the backward pass scatters the interpolation weights.
    """
    hs, ws, _ = grid.shape
    ht, wt = int(target[0]), int(target[1])
    if hs < 1 or ws < 1 or ht < 1 or wt < 1:
        raise DimensionError(f"resize extents must be >= 1, got {grid.shape} -> {target}")
    if (ht, wt) == (hs, ws):
        return grid[:, :, :]  # identity view keeps the graph connected

    def coords(src: int, dst: int) -> np.ndarray:
        if dst == 1:
            return np.zeros(1)
        return np.arange(dst) * ((src - 1) / (dst - 1))

    rr = coords(hs, ht)
    cc = coords(ws, wt)
    r0 = np.floor(rr).astype(np.int64)
    c0 = np.floor(cc).astype(np.int64)
    r1 = np.minimum(r0 + 1, hs - 1)
    c1 = np.minimum(c0 + 1, ws - 1)
    fr = (rr - r0)[:, None, None]
    fc = (cc - c0)[None, :, None]

    g = grid.data
    out_data = (
        g[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
        + g[np.ix_(r0, c1)] * (1 - fr) * fc
        + g[np.ix_(r1, c0)] * fr * (1 - fc)
        + g[np.ix_(r1, c1)] * fr * fc
    )

    def bwd(gout):
        full = np.zeros_like(grid.data)
        for ri, ci, wgt in (
            (r0, c0, (1 - fr) * (1 - fc)),
            (r0, c1, (1 - fr) * fc),
            (r1, c0, fr * (1 - fc)),
            (r1, c1, fr * fc),
        ):
            np.add.at(full, np.ix_(ri, ci), gout * wgt)
        grid._accum(full, own=True)

    return Tensor._result(out_data, (grid,), bwd)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed (non-learned) timestep features: [sin(t w_i) | cos(t w_i)]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = t * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def parameter(rng, shape, scale: float | None = None, name: str = "") -> Tensor:
    """Learnable tensor with fan-in scaled normal init."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else 1
        scale = 1.0 / math.sqrt(max(fan_in, 1))
    t = Tensor(rng.normal(shape, scale=scale), requires_grad=True, name=name)
    return t


def zeros(shape, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)
