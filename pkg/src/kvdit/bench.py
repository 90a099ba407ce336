"""FLOP accounting and wall-clock sweeps for compressed attention.

The cost model itemizes exact multiply-add counts per attention stage; the
score and weighted-sum terms shrink by exactly R^2 under compression.

The timing harness measures a plain float32 numpy forward pass with
warmups and reports the median over repeats, never the mean.  Scores,
softmax and the weighted sum run over fixed-size key/value blocks with an
online (running max/denominator) softmax, so the dense and compressed
paths touch memory the same way per element and the measured ratio
reflects work saved rather than cache-size artifacts.

Two speedup references are reported:
  * `flops_ratio_vs_dense` in the CSV is the itemized total-FLOP ratio.
  * the sanity bound for measured speedups uses only the compressible
    core terms (scores + softmax + weighted sum), whose ratio is the
    theoretical N^2 -> N^2/R^2 limit; projection FLOPs run at near-peak
    GEMM speed and would make a total-FLOP bound meaningless on hardware
    where exp-heavy stages run an order of magnitude slower per FLOP.
"""

from __future__ import annotations

import csv
import io
import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError
from .numerics import Rng

CSV_COLUMNS = [
    "N", "R", "operator", "dtype", "threads", "flops_total",
    "flops_ratio_vs_dense", "median_ms", "p10_ms", "p90_ms",
    "speedup_measured", "reliable",
]

# softmax is charged 8 FLOPs per score entry: running-max compare,
# subtract, exp as a short polynomial (4), accumulate, divide
SOFTMAX_FLOPS_PER_ENTRY = 8


# ----------------------------------------------------------------------
# FLOP model
# ----------------------------------------------------------------------
@dataclass
class CostModel:
    n: int
    channels: int
    heads: int
    stride: int
    terms: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.terms.values())

    @property
    def core(self) -> int:
        """Compressible terms only; shrink by exactly R^2 under compression."""
        return self.terms["scores"] + self.terms["softmax"] + self.terms["weighted_sum"]


def flops_attention(n: int, channels: int, heads: int, stride: int) -> CostModel:
    """Exact itemized FLOP counts for one attention forward pass.

    Matrix products count 2 FLOPs per multiply-add.
    """
    n_kv = score_matrix_shape_checked(n, stride)[1]
    c = channels
    terms = {
        "qkv_proj": 2 * n * c * 3 * c,
        "compression": (2 * n_kv * c * stride * stride * 2 if stride > 1 else 0),
        "scores": 2 * n * n_kv * c,
        "softmax": SOFTMAX_FLOPS_PER_ENTRY * n * n_kv,
        "weighted_sum": 2 * n * n_kv * c,
        "out_proj": 2 * n * c * c,
    }
    return CostModel(n=n, channels=c, heads=heads, stride=stride, terms=terms)


def score_matrix_shape_checked(n: int, r: int) -> tuple[int, int]:
    from .kvattn import score_matrix_shape

    return score_matrix_shape(n, r)


def counted_score_flops(n: int, n_kv: int, channels: int) -> tuple[int, int]:
    """Instrumented per-element multiply-add counter (oracle for small instances).

    Walks the score and weighted-sum loops literally, incrementing a counter
    for every multiply and every add, independent of the closed form.
    """
    scores = 0
    for _ in range(n):
        for _ in range(n_kv):
            for _ in range(channels):
                scores += 2  # one multiply + one add into the accumulator
    weighted = 0
    for _ in range(n):
        for _ in range(channels):
            for _ in range(n_kv):
                weighted += 2
    return scores, weighted


# ----------------------------------------------------------------------
# wall-clock harness
# ----------------------------------------------------------------------
@dataclass
class BenchRecord:
    n: int
    stride: int
    operator: str
    repeats: int
    warmups: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    dtype: str
    thread_count: int


def attention_forward_f32(
    x: np.ndarray, qkv_w: np.ndarray, out_w: np.ndarray,
    heads: int, stride: int, operator: str, side: int,
    kernel: np.ndarray | None = None, q_chunk: int = 1024, kv_block: int = 4096,
) -> np.ndarray:
    """Float32 attention forward used only for timing.

    Keys/values are visited in `kv_block`-sized blocks with an online
    softmax, so the N x N' score matrix never materializes whole and block
    size is identical for the dense and compressed paths.
    """
    b, n, c = x.shape
    dk = c // heads
    qkv = x @ qkv_w
    q, k, v = qkv[..., :c], qkv[..., c : 2 * c], qkv[..., 2 * c :]

    if operator != "none" and stride > 1:
        r = stride
        so = side // r
        if operator == "discard":
            k = k.reshape(b, side, side, c)[:, ::r, ::r, :].reshape(b, so * so, c)
            v = v.reshape(b, side, side, c)[:, ::r, ::r, :].reshape(b, so * so, c)
        elif operator == "pool":
            k = k.reshape(b, so, r, so, r, c).mean(axis=(2, 4)).reshape(b, so * so, c)
            v = v.reshape(b, so, r, so, r, c).mean(axis=(2, 4)).reshape(b, so * so, c)
        elif operator == "conv":
            for src in ("k", "v"):
                t = (k if src == "k" else v).reshape(b, so, r, so, r, c)
                t = np.einsum("bijuvc,cuv->bijc", t.transpose(0, 1, 3, 2, 4, 5), kernel)
                mu = t.mean(axis=-1, keepdims=True)
                sd = t.std(axis=-1, keepdims=True)
                t = ((t - mu) / (sd + 1e-6)).reshape(b, so * so, c)
                if src == "k":
                    k = t
                else:
                    v = t
    n_kv = k.shape[1]

    kh = np.ascontiguousarray(k.reshape(b, n_kv, heads, dk).transpose(0, 2, 3, 1))
    vh = np.ascontiguousarray(v.reshape(b, n_kv, heads, dk).transpose(0, 2, 1, 3))
    qh = np.ascontiguousarray(q.reshape(b, n, heads, dk).transpose(0, 2, 1, 3))
    scale = np.float32(1.0 / math.sqrt(dk))
    out = np.empty((b, heads, n, dk), dtype=np.float32)
    for qs in range(0, n, q_chunk):
        qe = min(qs + q_chunk, n)
        qc = qh[:, :, qs:qe, :]
        acc = m = den = None
        for ks in range(0, n_kv, kv_block):
            ke = min(ks + kv_block, n_kv)
            s = (qc @ kh[:, :, :, ks:ke]) * scale
            bm = s.max(axis=-1, keepdims=True)
            if m is None:
                m = bm
                np.exp(s - m, out=s)
                den = s.sum(axis=-1, keepdims=True)
                acc = s @ vh[:, :, ks:ke, :]
            else:
                nm = np.maximum(m, bm)
                corr = np.exp(m - nm)
                np.exp(s - nm, out=s)
                den = den * corr + s.sum(axis=-1, keepdims=True)
                acc = acc * corr + s @ vh[:, :, ks:ke, :]
                m = nm
        out[:, :, qs:qe, :] = acc / den
    merged = out.transpose(0, 2, 1, 3).reshape(b, n, c)
    return merged @ out_w


def bench_attention(
    n: int, channels: int, heads: int, stride: int, operator: str,
    repeats: int = 5, warmups: int = 2, thread_count: int = 0, seed: int = 0,
) -> BenchRecord:
    """Median wall-clock of the attention forward on seed-fixed inputs."""
    if repeats < 5 or warmups < 2:
        raise LayoutError("protocol requires repeats >= 5 after warmups >= 2")
    side = math.isqrt(n)
    if side * side != n:
        raise LayoutError(f"N={n} is not a square grid")
    if operator != "none" and stride > 1 and side % stride:
        raise LayoutError(f"grid side {side} not divisible by stride {stride}")

    rng = Rng(seed)
    x = rng.child("x").normal((1, n, channels)).astype(np.float32)
    qkv_w = rng.child("qkv").normal((channels, 3 * channels), scale=0.05).astype(np.float32)
    out_w = rng.child("out").normal((channels, channels), scale=0.05).astype(np.float32)
    kernel = np.full((channels, stride, stride), 1.0 / stride**2, dtype=np.float32)

    times = []
    for i in range(warmups + repeats):
        t0 = time.perf_counter()
        attention_forward_f32(x, qkv_w, out_w, heads, stride, operator, side, kernel)
        dt = time.perf_counter() - t0
        if i >= warmups:
            times.append(dt * 1000.0)
    times.sort()
    return BenchRecord(
        n=n, stride=stride, operator=operator, repeats=repeats, warmups=warmups,
        median_ms=float(np.median(times)),
        p10_ms=float(np.percentile(times, 10)),
        p90_ms=float(np.percentile(times, 90)),
        dtype="float32", thread_count=thread_count,
    )


def record_reliable(rec: BenchRecord) -> bool:
    tick_ms = time.get_clock_info("perf_counter").resolution * 1000.0
    return rec.median_ms >= 20.0 * tick_ms


def predicted_speedup_bound(n: int, channels: int, heads: int, stride: int) -> float:
    """Core-term FLOP ratio: the theoretical ceiling a measured speedup
    may approach (sanity bound allows 10% measurement slack above it)."""
    dense = flops_attention(n, channels, heads, 1)
    comp = flops_attention(n, channels, heads, stride)
    return dense.core / comp.core


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------
@dataclass
class SweepConfig:
    ns: list[int] = field(default_factory=lambda: [1024, 4096, 16384])
    rs: list[int] = field(default_factory=lambda: [1, 2])
    operators: list[str] = field(default_factory=lambda: ["conv"])
    channels: int = 128
    heads: int = 4
    repeats: int = 5
    warmups: int = 2
    thread_count: int = 0
    seed: int = 0


def sweep(config: SweepConfig, log=sys.stderr) -> str:
    """Cross-product sweep; invalid cells are skipped and logged, not fatal."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    baselines: dict[int, float] = {}
    prev_by_r: dict[tuple[int, str], tuple[int, float]] = {}
    for n in config.ns:
        if not config.rs:
            continue
        try:
            rec = bench_attention(
                n, config.channels, config.heads, 1, "none",
                config.repeats, config.warmups, config.thread_count, config.seed,
            )
        except LayoutError as e:
            print(f"sweep: skipping dense N={n}: {e}", file=log)
            continue
        baselines[n] = rec.median_ms
        dense_cost = flops_attention(n, config.channels, config.heads, 1)
        _emit(w, rec, dense_cost, dense_cost, 1.0)
    for n in sorted(baselines):
        dense_cost = flops_attention(n, config.channels, config.heads, 1)
        for r in config.rs:
            if r == 1:
                continue  # dense row already emitted
            for op in config.operators:
                try:
                    cost = flops_attention(n, config.channels, config.heads, r)
                    rec = bench_attention(
                        n, config.channels, config.heads, r, op,
                        config.repeats, config.warmups, config.thread_count,
                        config.seed,
                    )
                except LayoutError as e:
                    print(f"sweep: skipping N={n} R={r} op={op}: {e}", file=log)
                    continue
                speedup = baselines[n] / rec.median_ms
                _emit(w, rec, cost, dense_cost, speedup)
                key = (r, op)
                if key in prev_by_r and rec.median_ms <= prev_by_r[key][1]:
                    print(
                        f"sweep: warning: median not monotone in N for R={r} "
                        f"op={op}: N={prev_by_r[key][0]} took {prev_by_r[key][1]:.3f}ms, "
                        f"N={n} took {rec.median_ms:.3f}ms", file=log,
                    )
                prev_by_r[key] = (n, rec.median_ms)
    return buf.getvalue()


def _emit(w, rec: BenchRecord, cost: CostModel, dense: CostModel, speedup: float):
    w.writerow([
        rec.n, rec.stride, rec.operator, rec.dtype, rec.thread_count,
        cost.total, repr(cost.total / dense.total),
        repr(rec.median_ms), repr(rec.p10_ms), repr(rec.p90_ms),
        repr(speedup), record_reliable(rec),
    ])


def parse_sweep_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        for key in ("N", "R", "threads", "flops_total"):
            row[key] = int(row[key])
        for key in ("flops_ratio_vs_dense", "median_ms", "p10_ms", "p90_ms", "speedup_measured"):
            row[key] = float(row[key])
        row["reliable"] = row["reliable"] == "True"
    return rows


def speedup_svg(rows: list[dict], width: int = 480, height: int = 320) -> str:
    """Speedup vs N chart for one sweep's compressed rows."""
    pts = [(r["N"], r["speedup_measured"]) for r in rows if r["R"] > 1]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if pts:
        pts.sort()
        xmax = max(p[0] for p in pts)
        ymax = max(max(p[1] for p in pts), 1.0)
        pad = 30
        poly = " ".join(
            f"{pad + (width - 2 * pad) * x / xmax:.1f},"
            f"{height - pad - (height - 2 * pad) * y / ymax:.1f}"
            for x, y in pts
        )
        parts.append(
            f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{poly}"/>'
        )
        parts.append(
            f'<text x="{pad}" y="14" font-size="10">measured speedup vs N</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
