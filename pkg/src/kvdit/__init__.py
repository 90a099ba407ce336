"""kvdit: KV token-compressed attention for toy diffusion transformers,
with weak-to-strong adaptation experiments and cost benchmarking."""

__version__ = "0.1.0"
