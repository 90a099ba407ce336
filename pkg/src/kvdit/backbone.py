"""Toy diffusion transformer backbone.

patchify -> learnable positional embedding -> D blocks of
[self-attention (optionally KV-compressed), cross-attention to condition
tokens, MLP] with timestep scale/shift modulation -> unpatchify.

Self-attention in blocks covered by a CompressionSpec uses the
KV-compressed kernel; everything else is dense.  The output projection is
zero-initialized so a fresh model predicts exactly zero noise.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, LayoutError
from .kvattn import (
    AttentionWeights,
    CompressionSpec,
    TokenGrid,
    attach_conv_weights,
    conv_param_count,
    kv_compressed_attention,
    make_attention_weights,
)
from .numerics import (
    Rng,
    Tensor,
    bilinear_resize_grid,
    gather_rows,
    layernorm,
    matmul,
    parameter,
    silu,
    sinusoidal_embedding,
    zeros,
)


@dataclass
class ModelConfig:
    depth: int = 8
    channels: int = 64
    heads: int = 4
    patch_size: int = 2
    base_grid: tuple[int, int] = (8, 8)  # PE grid, in patches
    in_channels: int = 3
    cond_vocab: int = 16
    cond_dim: int = 64
    cond_tokens: int = 4
    time_embed_dim: int = 64
    mlp_ratio: int = 4
    compression: list[CompressionSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        self.validate_compression(self.compression)

    def validate_compression(self, specs: list[CompressionSpec]):
        covered: set[int] = set()
        for spec in specs:
            lo, hi = spec.layer_range
            if lo < 1 or hi > self.depth or lo > hi:
                raise ConfigError(
                    f"layer_range {spec.layer_range} outside depth {self.depth}"
                )
            rng = set(range(lo, hi + 1))
            if covered & rng:
                raise ConfigError("compression layer ranges overlap")
            covered |= rng

    @property
    def image_size(self) -> tuple[int, int]:
        return (
            self.patch_size * self.base_grid[0],
            self.patch_size * self.base_grid[1],
        )

    @property
    def tokens(self) -> int:
        return self.base_grid[0] * self.base_grid[1]

    def spec_for_layer(self, layer: int) -> CompressionSpec | None:
        for spec in self.compression:
            if spec.covers(layer):
                return spec
        return None

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "channels": self.channels,
            "heads": self.heads,
            "patch_size": self.patch_size,
            "base_grid": list(self.base_grid),
            "in_channels": self.in_channels,
            "cond_vocab": self.cond_vocab,
            "cond_dim": self.cond_dim,
            "cond_tokens": self.cond_tokens,
            "time_embed_dim": self.time_embed_dim,
            "mlp_ratio": self.mlp_ratio,
            "compression": [
                {
                    "operator": s.operator,
                    "stride": s.stride,
                    "layer_range": list(s.layer_range),
                    "pool_mode": s.pool_mode,
                    "pad": s.pad,
                }
                for s in self.compression
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["base_grid"] = tuple(d["base_grid"])
        d["compression"] = [
            CompressionSpec(
                operator=s["operator"],
                stride=s["stride"],
                layer_range=tuple(s["layer_range"]),
                pool_mode=s.get("pool_mode", "mean"),
                pad=s.get("pad", "reject"),
            )
            for s in d.get("compression", [])
        ]
        return ModelConfig(**d)


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionWeights
    ln2_g: Tensor
    ln2_b: Tensor
    xq_w: Tensor
    xq_b: Tensor
    xk_w: Tensor
    xk_b: Tensor
    xv_w: Tensor
    xv_b: Tensor
    xo_w: Tensor
    xo_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


class Model:
    """Parameter container plus the forward pass."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        c = config.channels
        p = config.patch_size
        hp, wp = config.base_grid
        pin = p * p * config.in_channels
        hidden = c * config.mlp_ratio

        self.patch_w = parameter(rng.child("patch.w"), (pin, c))
        self.patch_b = zeros((c,), requires_grad=True)
        self.pos_embed = parameter(rng.child("pos_embed"), (hp, wp, c), scale=0.02)
        self.cond_table = parameter(
            rng.child("cond_table"), (config.cond_vocab, config.cond_dim), scale=0.02
        )
        self.cond_w = parameter(rng.child("cond.w"), (config.cond_dim, c))
        self.cond_b = zeros((c,), requires_grad=True)
        # one shared MLP emits scale/shift for every block
        self.time_w1 = parameter(rng.child("time.w1"), (config.time_embed_dim, hidden))
        self.time_b1 = zeros((hidden,), requires_grad=True)
        self.time_w2 = parameter(
            rng.child("time.w2"), (hidden, config.depth * 2 * c), scale=0.02
        )
        self.time_b2 = zeros((config.depth * 2 * c,), requires_grad=True)

        self.blocks: list[Block] = []
        for i in range(1, config.depth + 1):
            brng = rng.child(f"block{i}")
            spec = config.spec_for_layer(i)
            conv_stride = (
                spec.stride if spec is not None and spec.operator == "conv" and spec.stride > 1
                else None
            )
            self.blocks.append(
                Block(
                    ln1_g=Tensor(np.ones(c), requires_grad=True),
                    ln1_b=zeros((c,), requires_grad=True),
                    attn=make_attention_weights(
                        c, config.heads, brng.child("attn"), conv_stride=conv_stride
                    ),
                    ln2_g=Tensor(np.ones(c), requires_grad=True),
                    ln2_b=zeros((c,), requires_grad=True),
                    xq_w=parameter(brng.child("xq.w"), (c, c)),
                    xq_b=zeros((c,), requires_grad=True),
                    xk_w=parameter(brng.child("xk.w"), (c, c)),
                    xk_b=zeros((c,), requires_grad=True),
                    xv_w=parameter(brng.child("xv.w"), (c, c)),
                    xv_b=zeros((c,), requires_grad=True),
                    xo_w=parameter(brng.child("xo.w"), (c, c)),
                    xo_b=zeros((c,), requires_grad=True),
                    ln3_g=Tensor(np.ones(c), requires_grad=True),
                    ln3_b=zeros((c,), requires_grad=True),
                    mlp_w1=parameter(brng.child("mlp.w1"), (c, hidden)),
                    mlp_b1=zeros((hidden,), requires_grad=True),
                    mlp_w2=parameter(brng.child("mlp.w2"), (hidden, c)),
                    mlp_b2=zeros((c,), requires_grad=True),
                )
            )
        self.final_ln_g = Tensor(np.ones(c), requires_grad=True)
        self.final_ln_b = zeros((c,), requires_grad=True)
        # zero init: a fresh model predicts exactly zero noise
        self.out_w = zeros((c, pin), requires_grad=True)
        self.out_b = zeros((pin,), requires_grad=True)

    # ------------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {
            "patch_proj.w": self.patch_w,
            "patch_proj.b": self.patch_b,
            "pos_embed": self.pos_embed,
            "cond_table": self.cond_table,
            "cond_proj.w": self.cond_w,
            "cond_proj.b": self.cond_b,
            "time_mlp.w1": self.time_w1,
            "time_mlp.b1": self.time_b1,
            "time_mlp.w2": self.time_w2,
            "time_mlp.b2": self.time_b2,
        }
        for i, blk in enumerate(self.blocks, start=1):
            pre = f"block{i}"
            params[f"{pre}.ln1.g"] = blk.ln1_g
            params[f"{pre}.ln1.b"] = blk.ln1_b
            params.update(blk.attn.named(f"{pre}.attn"))
            params[f"{pre}.ln2.g"] = blk.ln2_g
            params[f"{pre}.ln2.b"] = blk.ln2_b
            for nm in ("xq", "xk", "xv", "xo"):
                params[f"{pre}.{nm}.w"] = getattr(blk, f"{nm}_w")
                params[f"{pre}.{nm}.b"] = getattr(blk, f"{nm}_b")
            params[f"{pre}.ln3.g"] = blk.ln3_g
            params[f"{pre}.ln3.b"] = blk.ln3_b
            params[f"{pre}.mlp.w1"] = blk.mlp_w1
            params[f"{pre}.mlp.b1"] = blk.mlp_b1
            params[f"{pre}.mlp.w2"] = blk.mlp_w2
            params[f"{pre}.mlp.b2"] = blk.mlp_b2
        params["final_ln.g"] = self.final_ln_g
        params["final_ln.b"] = self.final_ln_b
        params["out_proj.w"] = self.out_w
        params["out_proj.b"] = self.out_b
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def load_parameters(self, tensors: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ConfigError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, p in params.items():
            if p.data.shape != tensors[name].shape:
                raise DimensionError(
                    f"shape mismatch for {name}: {p.data.shape} vs {tensors[name].shape}"
                )
            p.data = np.array(tensors[name], dtype=np.float64)

    def clone(self) -> "Model":
        m = Model(self.config, Rng(0))
        m.load_parameters({k: v.data.copy() for k, v in self.parameters().items()})
        return m

    # ------------------------------------------------------------------
    def _cross_attention(self, blk: Block, x: Tensor, cond: Tensor) -> Tensor:
        import math

        b, n, c = x.shape
        heads = self.config.heads
        dk = c // heads
        nk = cond.shape[1]
        q = matmul(x, blk.xq_w) + blk.xq_b
        k = matmul(cond, blk.xk_w) + blk.xk_b
        v = matmul(cond, blk.xv_w) + blk.xv_b
        qh = q.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
        kh = k.reshape(b, nk, heads, dk).transpose(0, 2, 1, 3)
        vh = v.reshape(b, nk, heads, dk).transpose(0, 2, 1, 3)
        from .numerics import softmax_lastdim

        scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
        ctx = matmul(softmax_lastdim(scores), vh)
        merged = ctx.transpose(0, 2, 1, 3).reshape(b, n, c)
        return matmul(merged, blk.xo_w) + blk.xo_b

    def patchify(self, image: Tensor) -> TokenGrid:
        return patchify(image, self.config.patch_size, self.patch_w, self.patch_b)

    def forward(
        self,
        noisy_image: Tensor,
        t: np.ndarray,
        labels: np.ndarray,
        probe: dict | None = None,
    ) -> Tensor:
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= cfg.cond_vocab:
            raise ConfigError(
                f"labels must lie in [0, {cfg.cond_vocab}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        grid = self.patchify(noisy_image)
        b, n, c = grid.data.shape
        hp, wp = grid.height, grid.width
        if (hp, wp) != tuple(self.pos_embed.shape[:2]):
            raise LayoutError(
                f"input patch grid {hp}x{wp} != positional embedding grid "
                f"{self.pos_embed.shape[0]}x{self.pos_embed.shape[1]}"
            )
        x = grid.data + self.pos_embed.reshape(n, c)

        cond = gather_rows(self.cond_table, labels)  # (B, K, cond_dim)
        cond = matmul(cond, self.cond_w) + self.cond_b

        temb = Tensor(sinusoidal_embedding(t, cfg.time_embed_dim))
        mod = matmul(silu(matmul(temb, self.time_w1) + self.time_b1), self.time_w2)
        mod = (mod + self.time_b2).reshape(b, cfg.depth, 2, c)

        for i, blk in enumerate(self.blocks, start=1):
            scale = mod[:, i - 1, 0, :].reshape(b, 1, c)
            shift = mod[:, i - 1, 1, :].reshape(b, 1, c)
            h = layernorm(x, blk.ln1_g, blk.ln1_b)
            h = h * (scale + 1.0) + shift
            spec = cfg.spec_for_layer(i)
            prefix = f"block{i}." if probe is not None else ""
            attended = kv_compressed_attention(
                TokenGrid(h, hp, wp),
                spec if spec is not None else CompressionSpec(),
                blk.attn,
                probe=probe,
                probe_prefix=prefix,
            )
            x = x + attended.data
            x = x + self._cross_attention(blk, layernorm(x, blk.ln2_g, blk.ln2_b), cond)
            m = layernorm(x, blk.ln3_g, blk.ln3_b)
            m = matmul(silu(matmul(m, blk.mlp_w1) + blk.mlp_b1), blk.mlp_w2) + blk.mlp_b2
            x = x + m

        x = layernorm(x, self.final_ln_g, self.final_ln_b)
        out_tokens = matmul(x, self.out_w) + self.out_b
        return unpatchify(TokenGrid(out_tokens, hp, wp), cfg.patch_size, cfg.in_channels)


# ----------------------------------------------------------------------
# tokenization
# ----------------------------------------------------------------------
def patchify(image: Tensor, p: int, proj_w: Tensor | None = None, proj_b: Tensor | None = None) -> TokenGrid:
    """Split (B, H, W, Cin) into p x p patches, flatten, optionally project."""
    b, h, w, cin = image.shape
    if h % p or w % p:
        raise LayoutError(f"image {h}x{w} not divisible by patch size {p}")
    hp, wp = h // p, w // p
    tokens = (
        image.reshape(b, hp, p, wp, p, cin)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, hp * wp, p * p * cin)
    )
    if proj_w is not None:
        tokens = matmul(tokens, proj_w)
        if proj_b is not None:
            tokens = tokens + proj_b
    return TokenGrid(tokens, hp, wp)


def unpatchify(grid: TokenGrid, p: int, cin: int) -> Tensor:
    """Inverse of patchify for already-projected (B, N, p*p*Cin) tokens."""
    b, n, d = grid.data.shape
    if d != p * p * cin:
        raise DimensionError(f"token dim {d} != p*p*Cin = {p * p * cin}")
    hp, wp = grid.height, grid.width
    return (
        grid.data.reshape(b, hp, wp, p, p, cin)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, hp * p, wp * p, cin)
    )


# ----------------------------------------------------------------------
# weak-to-strong weight surgery
# ----------------------------------------------------------------------
def resize_positional_embedding(pe: Tensor, target: tuple[int, int]) -> Tensor:
    """Channelwise align-corners bilinear resize of a learnable PE grid."""
    out = bilinear_resize_grid(pe, target)
    return Tensor(out.data.copy(), requires_grad=True)


def retrofit_compression(
    model: Model, spec: CompressionSpec, rng: Rng | None = None, init: str = "avg"
) -> Model:
    """Insert conv compression into a trained model; existing weights kept bitwise."""
    if spec.operator != "conv":
        raise ConfigError("retrofit installs the conv operator; got " + spec.operator)
    new_cfg = replace(
        model.config, compression=model.config.compression + [spec]
    )  # validates overlap
    out = Model(new_cfg, Rng(0))
    old = model.parameters()
    news = out.parameters()
    added = set(news) - set(old)
    for name in old:
        news[name].data = old[name].data.copy()
    init_rng = rng if rng is not None else Rng(0)
    lo, hi = spec.layer_range
    for i in range(lo, hi + 1):
        if spec.stride > 1:
            attach_conv_weights(
                out.blocks[i - 1].attn, spec.stride,
                init_rng.child(f"retrofit.block{i}"), init=init,
            )
    return out


def resize_model(model: Model, target_grid: tuple[int, int], pe_mode: str, rng: Rng) -> Model:
    """Build a higher-resolution model initialized from `model`'s weights.

    Every weight transfers unchanged except the positional embedding, which
    is either bilinearly interpolated to the new grid or drawn fresh.
    """
    src = model.config.base_grid
    if target_grid[0] < src[0] or target_grid[1] < src[1]:
        raise ConfigError(f"target grid {target_grid} smaller than base {src}")
    new_cfg = replace(model.config, base_grid=tuple(target_grid))
    out = Model(new_cfg, rng.child("resize"))
    old = model.parameters()
    news = out.parameters()
    for name in old:
        if name == "pos_embed":
            continue
        news[name].data = old[name].data.copy()
    if pe_mode == "interpolate":
        out.pos_embed.data = resize_positional_embedding(
            model.pos_embed, tuple(target_grid)
        ).data
    elif pe_mode == "random":
        pass  # keep the fresh random PE from construction
    else:
        raise ConfigError(f"unknown pe_mode {pe_mode!r}")
    return out
