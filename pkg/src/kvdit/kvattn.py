"""Multi-head self-attention with key/value token compression.

Queries keep all N tokens; keys and values are merged over R x R spatial
windows before the scaled dot-product, shrinking the score matrix from
N x N to N x (N/R^2).  Three operators are supported:

  discard  keep the top-left token of each window (strided subsampling)
  pool     arithmetic mean of each window (pool_mode="nearest" instead
           picks the top-left token, reproducing a nearest-neighbor
           downsample exactly)
  conv     per-channel strided convolution followed by LayerNorm; with
           avg-init weights (all 1/R^2, zero bias) the pre-norm output
           equals mean pooling

A stride of 1 always bypasses compression entirely, including the conv
branch's LayerNorm, so every operator is exactly the identity there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, LayoutError
from .numerics import (
    Rng,
    Tensor,
    layernorm,
    matmul,
    parameter,
    softmax_lastdim,
    strided_group_conv2d,
    zeros,
)

OPERATORS = ("none", "discard", "pool", "conv")


@dataclass
class TokenGrid:
    """A batch of token sequences with an explicit 2D layout.

    `data` is (B, N, C) with N == height * width; the grid view is a
    lossless reshape.
    """

    data: Tensor
    height: int
    width: int

    def __post_init__(self):
        b, n, c = self.data.shape
        if n != self.height * self.width:
            raise LayoutError(
                f"token count {n} != {self.height}x{self.width} layout"
            )

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def as_grid(self) -> Tensor:
        return self.data.reshape(self.batch, self.height, self.width, self.channels)

    @staticmethod
    def from_grid(grid: Tensor) -> "TokenGrid":
        b, h, w, c = grid.shape
        return TokenGrid(grid.reshape(b, h * w, c), h, w)


@dataclass(frozen=True)
class CompressionSpec:
    """Which operator compresses K/V, by how much, and in which blocks."""

    operator: str = "none"
    stride: int = 1
    layer_range: tuple[int, int] = (1, 0)  # inclusive, 1-based; empty by default
    pool_mode: str = "mean"  # "mean" | "nearest"
    pad: str = "reject"  # "reject" | "edge"

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown compression operator {self.operator!r}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.pool_mode not in ("mean", "nearest"):
            raise ConfigError(f"unknown pool_mode {self.pool_mode!r}")
        if self.pad not in ("reject", "edge"):
            raise ConfigError(f"unknown pad mode {self.pad!r}")

    @property
    def active(self) -> bool:
        return self.operator != "none" and self.stride > 1

    def covers(self, layer: int) -> bool:
        lo, hi = self.layer_range
        return lo <= layer <= hi


def layer_preset(name: str, depth: int) -> tuple[int, int]:
    """Proportional shallow/middle/deep block ranges for any depth."""
    if name == "shallow":
        return (1, math.ceil(depth / 2))
    if name == "middle":
        return (math.ceil(depth / 4) + 1, math.ceil(3 * depth / 4))
    if name == "deep":
        return (depth // 2 + 1, depth)
    raise ConfigError(f"unknown layer preset {name!r}")


@dataclass
class AttentionWeights:
    """Projections for one attention block, plus optional conv-compression weights."""

    qkv_w: Tensor  # (C, 3C)
    qkv_b: Tensor  # (3C,)
    out_w: Tensor  # (C, C)
    out_b: Tensor  # (C,)
    heads: int
    conv_kernel: Tensor | None = None  # (C, R, R)
    conv_bias: Tensor | None = None  # (C,)
    norm_gain: Tensor | None = None  # (C,)
    norm_bias: Tensor | None = None  # (C,)

    @property
    def channels(self) -> int:
        return self.qkv_w.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.qkv.w": self.qkv_w,
            f"{prefix}.qkv.b": self.qkv_b,
            f"{prefix}.out.w": self.out_w,
            f"{prefix}.out.b": self.out_b,
        }
        if self.conv_kernel is not None:
            out[f"{prefix}.sr.kernel"] = self.conv_kernel
            out[f"{prefix}.sr.bias"] = self.conv_bias
            out[f"{prefix}.sr.norm_gain"] = self.norm_gain
            out[f"{prefix}.sr.norm_bias"] = self.norm_bias
        return out


def make_attention_weights(
    channels: int, heads: int, rng: Rng, conv_stride: int | None = None,
    conv_init: str = "avg",
) -> AttentionWeights:
    if channels % heads:
        raise ConfigError(f"channels {channels} not divisible by heads {heads}")
    w = AttentionWeights(
        qkv_w=parameter(rng.child("qkv.w"), (channels, 3 * channels)),
        qkv_b=zeros((3 * channels,), requires_grad=True),
        out_w=parameter(rng.child("out.w"), (channels, channels)),
        out_b=zeros((channels,), requires_grad=True),
        heads=heads,
    )
    if conv_stride is not None:
        attach_conv_weights(w, conv_stride, rng.child("sr"), init=conv_init)
    return w


def conv_avg_init(stride: int, channels: int, rng: Rng | None = None):
    """Averaging initialization: kernel weights 1/R^2, zero bias, unit norm.

    `rng` is accepted for interface uniformity with random init but unused.
    """
    if stride < 1 or channels < 1:
        raise ConfigError(f"need stride >= 1 and channels >= 1, got {stride}, {channels}")
    kernel = Tensor(np.full((channels, stride, stride), 1.0 / stride**2), requires_grad=True)
    bias = zeros((channels,), requires_grad=True)
    gain = Tensor(np.ones(channels), requires_grad=True)
    nbias = zeros((channels,), requires_grad=True)
    return kernel, bias, gain, nbias


def conv_random_init(stride: int, channels: int, rng: Rng):
    """Fan-in scaled random kernel; the baseline arm in retrofit races."""
    kernel = parameter(rng.child("kernel"), (channels, stride, stride), scale=1.0 / stride)
    bias = zeros((channels,), requires_grad=True)
    gain = Tensor(np.ones(channels), requires_grad=True)
    nbias = zeros((channels,), requires_grad=True)
    return kernel, bias, gain, nbias


def attach_conv_weights(w: AttentionWeights, stride: int, rng: Rng, init: str = "avg"):
    maker = {"avg": conv_avg_init, "random": conv_random_init}.get(init)
    if maker is None:
        raise ConfigError(f"unknown conv init {init!r}")
    w.conv_kernel, w.conv_bias, w.norm_gain, w.norm_bias = maker(
        stride, w.channels, rng
    )


def _pad_edge(grid: Tensor, r: int) -> Tensor:
    b, h, w, c = grid.shape
    pad_h = (-h) % r
    pad_w = (-w) % r
    data = np.pad(grid.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return Tensor(data)  # padding is a preprocessing affordance, not on the grad path


def compress_tokens(
    x: TokenGrid, spec: CompressionSpec, weights: AttentionWeights | None = None,
    skip_norm: bool = False,
) -> TokenGrid:
    """Merge R x R token windows per `spec.operator`; identity when inactive."""
    if not spec.active:
        return x
    r = spec.stride
    grid = x.as_grid()
    h, w = x.height, x.width
    if h % r or w % r:
        if spec.pad == "edge":
            grid = _pad_edge(grid, r)
            h, w = grid.shape[1], grid.shape[2]
        else:
            raise LayoutError(
                f"grid {h}x{w} not divisible by stride {r} (pad=reject)"
            )
    b, c = grid.shape[0], grid.shape[3]
    ho, wo = h // r, w // r

    if spec.operator == "discard" or (spec.operator == "pool" and spec.pool_mode == "nearest"):
        out = grid[:, ::r, ::r, :]
    elif spec.operator == "pool":
        out = grid.reshape(b, ho, r, wo, r, c).mean(axis=(2, 4))
    elif spec.operator == "conv":
        if weights is None or weights.conv_kernel is None:
            raise ConfigError("conv operator requires conv_kernel/conv_bias weights")
        out = strided_group_conv2d(grid, weights.conv_kernel, weights.conv_bias, r)
        if not skip_norm:
            out = layernorm(out, weights.norm_gain, weights.norm_bias)
    else:  # pragma: no cover - guarded by CompressionSpec validation
        raise ConfigError(f"unknown operator {spec.operator!r}")
    return TokenGrid.from_grid(out)


def score_matrix_shape(n: int, r: int) -> tuple[int, int]:
    """Score-matrix extents (N, N/R^2) for a square N-token grid."""
    side = math.isqrt(n)
    if side * side != n:
        raise LayoutError(f"N={n} is not a square grid")
    if side % r:
        raise LayoutError(f"grid side {side} not divisible by stride {r}")
    return (n, n // (r * r))


def kv_compressed_attention(
    x: TokenGrid,
    spec: CompressionSpec,
    weights: AttentionWeights,
    probe: dict | None = None,
    probe_prefix: str = "",
) -> TokenGrid:
    """Self-attention with all-N queries against compressed keys/values."""
    b, n, c = x.data.shape
    if c != weights.channels:
        raise DimensionError(
            f"token channels {c} != weight channels {weights.channels}"
        )
    heads, dk = weights.heads, weights.head_dim

    qkv = matmul(x.data, weights.qkv_w) + weights.qkv_b
    q = qkv[:, :, :c]
    k = qkv[:, :, c : 2 * c]
    v = qkv[:, :, 2 * c :]

    if spec.active:
        kg = compress_tokens(TokenGrid(k, x.height, x.width), spec, weights)
        vg = compress_tokens(TokenGrid(v, x.height, x.width), spec, weights)
        k, v = kg.data, vg.data
    n_kv = k.shape[1]

    if probe is not None:
        probe[f"{probe_prefix}score_shape"] = (n, n_kv)
        probe[f"{probe_prefix}k_compressed"] = k.data.copy()

    def split_heads(t: Tensor, tokens: int) -> Tensor:
        return t.reshape(b, tokens, heads, dk).transpose(0, 2, 1, 3)

    qh = split_heads(q, n)
    kh = split_heads(k, n_kv)
    vh = split_heads(v, n_kv)

    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    attn = softmax_lastdim(scores)
    ctx = matmul(attn, vh)  # (B, heads, N, dk)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, n, c)
    out = matmul(merged, weights.out_w) + weights.out_b
    return TokenGrid(out, x.height, x.width)


def conv_param_count(channels: int, stride: int) -> int:
    """Parameters one conv-compression block adds: kernel + bias + norm."""
    return channels * stride**2 + channels + 2 * channels


def dense_spec() -> CompressionSpec:
    return CompressionSpec()


def with_layer_range(spec: CompressionSpec, lo: int, hi: int) -> CompressionSpec:
    return replace(spec, layer_range=(lo, hi))
