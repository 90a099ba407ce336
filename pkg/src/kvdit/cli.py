"""Config-driven command line runner.

Subcommands: train, finetune, sample, bench, stats, checkgrad.
Global flags: --config PATH, --seed U64, --out DIR, --threads N.
Exit codes: 0 success, 2 usage/config error, 3 numerical failure, 4 I/O.

Configs are flat ``section.key = value`` UTF-8 text; unknown keys are
rejected before any work starts, and every run writes a resolved copy of
its full configuration beside its outputs (timestamps live in a separate
metadata file so reruns stay byte-identical).

Only stdlib modules are imported at module load so that ``--threads`` can
pin BLAS thread counts before numpy initializes.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import struct
import sys
import time
from dataclasses import dataclass

# ----------------------------------------------------------------------
# config schema
# ----------------------------------------------------------------------
def _int_list(s: str) -> list[int]:
    return [int(p) for p in str(s).split(",") if p.strip()]


def _str_list(s: str) -> list[str]:
    return [p.strip() for p in str(s).split(",") if p.strip()]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "output_dir": (str, "out"),
    "model.depth": (int, 8),
    "model.channels": (int, 64),
    "model.heads": (int, 4),
    "model.patch_size": (int, 2),
    "model.grid": (int, 8),
    "model.in_channels": (int, 3),
    "model.cond_vocab": (int, 16),
    "model.cond_dim": (int, 64),
    "model.cond_tokens": (int, 4),
    "model.time_embed_dim": (int, 64),
    "model.mlp_ratio": (int, 4),
    "compress.operator": (str, "none"),
    "compress.stride": (int, 1),
    "compress.layers": (str, "deep"),
    "compress.pool_mode": (str, "mean"),
    "compress.pad": (str, "reject"),
    "schedule.steps": (int, 1000),
    "schedule.beta_start": (float, 1e-4),
    "schedule.beta_end": (float, 0.02),
    "train.steps": (int, 100),
    "train.batch_size": (int, 8),
    "train.lr": (float, 2e-5),
    "train.checkpoint_interval": (int, 50),
    "train.dataset_size": (int, 64),
    "train.sample_count": (int, 4),
    "train.sample_steps": (int, 25),
    "data.generator": (str, "checker"),
    "data.seed": (int, 0),
    "sample.count": (int, 4),
    "sample.steps": (int, 50),
    "bench.ns": (_int_list, [1024, 4096, 16384]),
    "bench.rs": (_int_list, [1, 2]),
    "bench.operators": (_str_list, ["conv"]),
    "bench.channels": (int, 128),
    "bench.heads": (int, 4),
    "bench.repeats": (int, 5),
    "bench.warmups": (int, 2),
    "experiment.budget": (int, 300),
    "experiment.batch_size": (int, 8),
    "experiment.lr": (float, 1e-3),
    "experiment.dataset_size": (int, 64),
    "experiment.generator": (str, "checker"),
    "experiment.probe_size": (int, 256),
    "experiment.probe_steps": (_int_list, [0, 100]),
    "experiment.seeds": (_int_list, [1, 2, 3]),
    "experiment.threshold_window": (int, 20),
    "experiment.threshold_factor": (float, 1.2),
    "experiment.target_grid": (int, 16),
    "experiment.codec_a": (str, "identity"),
    "experiment.codec_b": (str, "permute"),
    "checkgrad.depth": (int, 2),
    "checkgrad.channels": (int, 16),
    "checkgrad.heads": (int, 2),
    "checkgrad.grid": (int, 4),
    "checkgrad.batch_size": (int, 2),
    "checkgrad.tolerance": (float, 1e-4),
}


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    from .errors import ConfigError

    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(val)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    return values


def load_config(path: str | None) -> dict:
    from .errors import IOFailure

    resolved = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise IOFailure(f"cannot read config {path}: {e}") from e
        resolved.update(parse_config_text(text))
    return resolved


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------
CKPT_MAGIC = b"KVDT"
CKPT_VERSION = 1
_DTYPES = {"<f8": 0, "<f4": 1, "<i8": 2}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path: str, meta: dict, tensors: dict) -> None:
    """Binary container: magic, u32 version, length-prefixed JSON metadata,
    named little-endian tensors, trailing 64-bit checksum of prior bytes."""
    import numpy as np

    from .errors import IOFailure

    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    jb = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(jb)))
    buf.write(jb)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.dtype.newbyteorder("<")
        code = _DTYPES.get(le.str)
        if code is None:
            raise IOFailure(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.astype(le, copy=False).tobytes())
    body = buf.getvalue()
    digest = hashlib.blake2b(body, digest_size=8).digest()
    try:
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(digest)
    except OSError as e:
        raise IOFailure(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Returns (metadata, tensors); rejects magic/version/checksum mismatch."""
    import numpy as np

    from .errors import IOFailure

    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise IOFailure(f"{path}: not a checkpoint (bad magic)")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise IOFailure(f"{path}: checksum mismatch (file corrupted)")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CKPT_VERSION:
        raise IOFailure(f"{path}: format version {version} != supported {CKPT_VERSION}")
    (jlen,) = struct.unpack_from("<Q", body, off)
    off += 8
    meta = json.loads(body[off : off + jlen].decode("utf-8"))
    off += jlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        dtype = np.dtype(_DTYPES_INV[code])
        size = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if ndim else dtype.itemsize
        arr = np.frombuffer(body[off : off + size], dtype=dtype).reshape(shape)
        off += size
        tensors[name] = arr.copy()
    return meta, tensors


# ----------------------------------------------------------------------
# image output (binary pixmap / graymap)
# ----------------------------------------------------------------------
def to_uint8(img) -> "object":
    import numpy as np

    return np.clip((np.asarray(img) + 1.0) * 127.5, 0, 255).astype(np.uint8)


def write_ppm(path: str, img) -> None:
    """img: (H, W, 3) uint8."""
    from .errors import IOFailure

    h, w, c = img.shape
    if c != 3:
        raise IOFailure(f"pixmap needs 3 channels, got {c}")
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
    except OSError as e:
        raise IOFailure(f"cannot write image {path}: {e}") from e


def write_pgm(path: str, img) -> None:
    """img: (H, W) uint8."""
    from .errors import IOFailure

    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
    except OSError as e:
        raise IOFailure(f"cannot write image {path}: {e}") from e


def image_grid(images) -> "object":
    """Tile (B, H, W, 3) images into one horizontal strip."""
    import numpy as np

    return np.concatenate(list(images), axis=1)


# ----------------------------------------------------------------------
# corpus statistics
# ----------------------------------------------------------------------
HISTOGRAM_EDGES = [25, 50, 75, 100, 125, 150, 175, 200, 225, 250, 275, 300]


@dataclass
class CorpusStats:
    caption_count: int
    total_words: int
    distinct_words: int
    valid_distinct_words: int  # case-folded frequency > 10
    average_length: float
    histogram: list[tuple[str, int]]

    def summary(self) -> str:
        lines = [
            f"captions: {self.caption_count}",
            f"total words: {self.total_words}",
            f"distinct words: {self.distinct_words}",
            f"valid distinct words (freq > 10): {self.valid_distinct_words}",
            f"average caption length: {self.average_length!r}",
        ]
        for bucket, count in self.histogram:
            lines.append(f"  {bucket}: {count}")
        return "\n".join(lines)

    def histogram_csv(self) -> str:
        out = ["bucket,count"]
        out += [f"{b},{c}" for b, c in self.histogram]
        return "\n".join(out) + "\n"


def compute_corpus_stats(text: str) -> CorpusStats:
    """Whitespace tokenization; distinct counts are case-folded."""
    from collections import Counter

    from .errors import ConfigError

    lines = text.splitlines()
    if not lines:
        raise ConfigError("corpus is empty: need at least one caption line")
    freq: Counter = Counter()
    lengths: list[int] = []
    total = 0
    for line in lines:
        words = line.split()
        lengths.append(len(words))
        total += len(words)
        freq.update(w.casefold() for w in words)
    buckets = []
    lo = 0
    for hi in HISTOGRAM_EDGES:
        label = f"{lo}-{hi}"
        buckets.append((label, sum(1 for n in lengths if lo <= n <= hi)))
        lo = hi + 1
    buckets.append((f">{HISTOGRAM_EDGES[-1]}", sum(1 for n in lengths if n > HISTOGRAM_EDGES[-1])))
    return CorpusStats(
        caption_count=len(lines),
        total_words=total,
        distinct_words=len(freq),
        valid_distinct_words=sum(1 for c in freq.values() if c > 10),
        average_length=total / len(lines),
        histogram=buckets,
    )


# ----------------------------------------------------------------------
# shared run plumbing
# ----------------------------------------------------------------------
def _prepare_out(cfg: dict, args) -> str:
    from .errors import IOFailure

    out = args.out or cfg["output_dir"]
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as e:
        raise IOFailure(f"cannot create output dir {out}: {e}") from e
    return out


def _write_text(path: str, text: str) -> None:
    from .errors import IOFailure

    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise IOFailure(f"cannot write {path}: {e}") from e


def _finish_run(out: str, cfg: dict, started: float, argv: list[str]) -> None:
    _write_text(os.path.join(out, "resolved.cfg"), format_config(cfg))
    meta = {
        "argv": argv,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    _write_text(os.path.join(out, "metadata.json"), json.dumps(meta, indent=2) + "\n")


def build_model_config(cfg: dict):
    from .backbone import ModelConfig
    from .kvattn import CompressionSpec, layer_preset

    compression = []
    if cfg["compress.operator"] != "none" and cfg["compress.stride"] > 1:
        layers = cfg["compress.layers"]
        depth = cfg["model.depth"]
        if "-" in layers:
            lo, hi = (int(p) for p in layers.split("-", 1))
        else:
            lo, hi = layer_preset(layers, depth)
        compression.append(
            CompressionSpec(
                operator=cfg["compress.operator"],
                stride=cfg["compress.stride"],
                layer_range=(lo, hi),
                pool_mode=cfg["compress.pool_mode"],
                pad=cfg["compress.pad"],
            )
        )
    return ModelConfig(
        depth=cfg["model.depth"],
        channels=cfg["model.channels"],
        heads=cfg["model.heads"],
        patch_size=cfg["model.patch_size"],
        base_grid=(cfg["model.grid"], cfg["model.grid"]),
        in_channels=cfg["model.in_channels"],
        cond_vocab=cfg["model.cond_vocab"],
        cond_dim=cfg["model.cond_dim"],
        cond_tokens=cfg["model.cond_tokens"],
        time_embed_dim=cfg["model.time_embed_dim"],
        mlp_ratio=cfg["model.mlp_ratio"],
        compression=compression,
    )


def _model_tensors(model, state=None) -> dict:
    tensors = {f"param.{k}": v.data for k, v in model.parameters().items()}
    if state is not None:
        tensors.update({f"adam_m.{k}": v for k, v in state.moments_m.items()})
        tensors.update({f"adam_v.{k}": v for k, v in state.moments_v.items()})
    return tensors


def _restore_model(meta: dict, tensors: dict):
    """Rebuild a Model from checkpoint metadata + tensors."""
    from .backbone import Model, ModelConfig
    from .numerics import Rng

    mc = ModelConfig.from_dict(meta["model"])
    model = Model(mc, Rng(0))
    model.load_parameters(
        {k[len("param.") :]: v for k, v in tensors.items() if k.startswith("param.")}
    )
    return model


def _check_lineage(ckpt_model_cfg: dict, cfg_model_cfg: dict) -> None:
    from .errors import ConfigError

    for key in cfg_model_cfg:
        if ckpt_model_cfg.get(key) != cfg_model_cfg[key]:
            raise ConfigError(
                f"checkpoint lineage mismatch on model.{key}: checkpoint has "
                f"{ckpt_model_cfg.get(key)!r}, config asks {cfg_model_cfg[key]!r}"
            )


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_train(args, argv: list[str]) -> int:
    import numpy as np

    from .backbone import Model
    from .data import batch_indices, make_dataset
    from .diffusion import TrainState, linear_schedule, sample, train_step
    from .errors import NumericalError
    from .numerics import Rng

    started = time.time()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["train.steps"] = args.steps
    out = _prepare_out(cfg, args)

    mc = build_model_config(cfg)
    schedule = linear_schedule(
        cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"]
    )
    dataset = make_dataset(
        cfg["data.generator"], mc.image_size[0], cfg["train.dataset_size"],
        cfg["data.seed"], mc.cond_vocab,
    )

    if args.resume:
        meta, tensors = load_checkpoint(args.resume)
        _check_lineage(meta["model"], mc.to_dict())
        model = _restore_model(meta, tensors)
        state = TrainState(
            model=model, schedule=schedule, seed=cfg["seed"], lr=cfg["train.lr"],
            step=meta["step"],
            moments_m={k[len("adam_m.") :]: v.copy() for k, v in tensors.items()
                       if k.startswith("adam_m.")},
            moments_v={k[len("adam_v.") :]: v.copy() for k, v in tensors.items()
                       if k.startswith("adam_v.")},
        )
    else:
        model = Model(mc, Rng(cfg["seed"]).child("init"))
        state = TrainState(model=model, schedule=schedule, seed=cfg["seed"], lr=cfg["train.lr"])

    loss_rows = ["step,loss"]
    timing_rows = ["step,wall_ms"]
    interval = cfg["train.checkpoint_interval"]
    total = cfg["train.steps"]
    try:
        while state.step < total:
            step = state.step + 1
            idx = batch_indices(cfg["data.seed"], step, cfg["train.batch_size"], dataset.count)
            t0 = time.perf_counter()
            loss = train_step(state, dataset.batch(idx))
            dt_ms = (time.perf_counter() - t0) * 1000.0
            loss_rows.append(f"{step},{loss!r}")
            timing_rows.append(f"{step},{dt_ms!r}")
            if interval > 0 and step % interval == 0 and step != total:
                save_checkpoint(
                    os.path.join(out, f"checkpoint_{step:06d}.kvdt"),
                    {"model": mc.to_dict(), "step": step, "seed": cfg["seed"]},
                    _model_tensors(model, state),
                )
    finally:
        # keep partial artifacts on abort (e.g. non-finite loss)
        _write_text(os.path.join(out, "loss.csv"), "\n".join(loss_rows) + "\n")
        _write_text(os.path.join(out, "timing.csv"), "\n".join(timing_rows) + "\n")
        _finish_run(out, cfg, started, argv)

    save_checkpoint(
        os.path.join(out, "checkpoint.kvdt"),
        {"model": mc.to_dict(), "step": state.step, "seed": cfg["seed"]},
        _model_tensors(model, state),
    )

    count = cfg["train.sample_count"]
    if count > 0:
        labels = dataset.labels[:count]
        images, _ = sample(
            model, schedule, labels, Rng(cfg["seed"]).child("sample"),
            steps=min(cfg["train.sample_steps"], schedule.steps),
        )
        write_ppm(os.path.join(out, "samples.ppm"), to_uint8(image_grid(images)))
    print(f"trained {state.step} steps; final loss {state.loss_history[-1]!r}"
          if state.loss_history else f"at step {state.step}, no steps run")
    return 0


def cmd_finetune(args, argv: list[str]) -> int:
    from .diffusion import linear_schedule
    from .errors import ConfigError
    from .kvattn import CompressionSpec, layer_preset
    from .w2s import (
        RaceConfig,
        loss_curve_svg,
        make_codec,
        run_codec_swap,
        run_kv_retrofit,
        run_upscale,
    )

    started = time.time()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _prepare_out(cfg, args)

    meta, tensors = load_checkpoint(args.from_ckpt)
    base_model = _restore_model(meta, tensors)
    _check_lineage(meta["model"], build_model_config(cfg).to_dict())

    schedule = linear_schedule(
        cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"]
    )
    race = RaceConfig(
        budget=cfg["experiment.budget"],
        batch_size=cfg["experiment.batch_size"],
        lr=cfg["experiment.lr"],
        schedule_steps=cfg["schedule.steps"],
        dataset_size=cfg["experiment.dataset_size"],
        generator=cfg["experiment.generator"],
        probe_size=cfg["experiment.probe_size"],
        probe_steps=tuple(cfg["experiment.probe_steps"]),
        threshold_window=cfg["experiment.threshold_window"],
        threshold_factor=cfg["experiment.threshold_factor"],
    )
    seeds = cfg["experiment.seeds"]

    if args.adapt == "codec":
        codec_a = make_codec(cfg["experiment.codec_a"], base_model.config.in_channels)
        codec_b = make_codec(
            args.codec_b or cfg["experiment.codec_b"], base_model.config.in_channels
        )
        report = run_codec_swap(base_model, codec_a, codec_b, schedule, race, seeds)
    elif args.adapt == "upscale":
        if args.pe not in (None, "interpolate", "random"):
            raise ConfigError(f"--pe must be interpolate or random, got {args.pe!r}")
        g = cfg["experiment.target_grid"]
        report = run_upscale(base_model, (g, g), schedule, race, seeds)
    elif args.adapt == "kvcompress":
        if args.init not in (None, "avg", "random"):
            raise ConfigError(f"--init must be avg or random, got {args.init!r}")
        stride = args.stride if args.stride is not None else cfg["compress.stride"]
        layers = cfg["compress.layers"]
        if "-" in layers:
            lo, hi = (int(p) for p in layers.split("-", 1))
        else:
            lo, hi = layer_preset(layers, base_model.config.depth)
        spec = CompressionSpec(
            operator="conv", stride=stride, layer_range=(lo, hi),
            pool_mode=cfg["compress.pool_mode"], pad=cfg["compress.pad"],
        )
        report = run_kv_retrofit(base_model, spec, schedule, race, seeds)
    else:
        raise ConfigError(f"unknown adaptation {args.adapt!r}")

    _write_text(os.path.join(out, "report.csv"), report.to_csv())
    _write_text(os.path.join(out, "summary.txt"), report.summary() + "\n")
    _write_text(os.path.join(out, "curves.svg"), loss_curve_svg(report) + "\n")
    _finish_run(out, cfg, started, argv)
    print(report.summary())
    return 0


def cmd_sample(args, argv: list[str]) -> int:
    from .data import make_dataset
    from .diffusion import linear_schedule, sample
    from .numerics import Rng

    started = time.time()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _prepare_out(cfg, args)

    meta, tensors = load_checkpoint(args.from_ckpt)
    model = _restore_model(meta, tensors)
    schedule = linear_schedule(
        cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"]
    )
    count = cfg["sample.count"]
    dataset = make_dataset(
        cfg["data.generator"], model.config.image_size[0], count,
        cfg["data.seed"], model.config.cond_vocab,
    )
    images, evals = sample(
        model, schedule, dataset.labels, Rng(cfg["seed"]).child("sample"),
        steps=min(cfg["sample.steps"], schedule.steps),
    )
    write_ppm(os.path.join(out, "samples.ppm"), to_uint8(image_grid(images)))
    for i in range(count):
        write_ppm(os.path.join(out, f"sample_{i:03d}.ppm"), to_uint8(images[i]))
    _finish_run(out, cfg, started, argv)
    print(f"wrote {count} samples ({evals} model evaluations each batch)")
    return 0


def cmd_bench(args, argv: list[str]) -> int:
    from .bench import SweepConfig, parse_sweep_csv, speedup_svg, sweep

    started = time.time()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _prepare_out(cfg, args)

    rs = _int_list(args.rs) if args.rs else cfg["bench.rs"]
    sweep_cfg = SweepConfig(
        ns=cfg["bench.ns"],
        rs=rs,
        operators=cfg["bench.operators"],
        channels=cfg["bench.channels"],
        heads=cfg["bench.heads"],
        repeats=cfg["bench.repeats"],
        warmups=cfg["bench.warmups"],
        thread_count=args.threads or 0,
        seed=cfg["seed"],
    )
    csv_text = sweep(sweep_cfg)
    _write_text(os.path.join(out, "sweep.csv"), csv_text)
    _write_text(os.path.join(out, "speedup.svg"), speedup_svg(parse_sweep_csv(csv_text)) + "\n")
    _finish_run(out, cfg, started, argv)
    print(csv_text, end="")
    return 0


def cmd_stats(args, argv: list[str]) -> int:
    from .errors import IOFailure

    started = time.time()
    cfg = load_config(args.config)
    out = _prepare_out(cfg, args)
    try:
        with open(args.corpus, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise IOFailure(f"cannot read corpus {args.corpus}: {e}") from e
    stats = compute_corpus_stats(text)
    _write_text(os.path.join(out, "stats.txt"), stats.summary() + "\n")
    _write_text(os.path.join(out, "histogram.csv"), stats.histogram_csv())
    _finish_run(out, cfg, started, argv)
    print(stats.summary())
    return 0


def cmd_checkgrad(args, argv: list[str]) -> int:
    import numpy as np

    from .backbone import Model, ModelConfig
    from .data import make_dataset
    from .diffusion import compute_loss, linear_schedule
    from .errors import ConfigError, NumericalError
    from .kvattn import CompressionSpec
    from .numerics import Rng
    from .numerics.gradcheck import check_gradients

    started = time.time()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _prepare_out(cfg, args)

    grid = cfg["checkgrad.grid"]
    if grid > 8:
        raise ConfigError(f"checkgrad grid must be <= 8, got {grid}")
    depth = cfg["checkgrad.depth"]
    tol = cfg["checkgrad.tolerance"]
    schedule = linear_schedule(50)
    seed = cfg["seed"]

    if args.corrupt:
        _corrupt_silu_backward()

    operators = ["discard", "pool", "conv"]
    all_ok = True
    reports = []
    for op in operators:
        mc = ModelConfig(
            depth=depth, channels=cfg["checkgrad.channels"],
            heads=cfg["checkgrad.heads"], base_grid=(grid, grid),
            cond_dim=cfg["checkgrad.channels"],
            time_embed_dim=cfg["checkgrad.channels"],
            compression=[CompressionSpec(operator=op, stride=2, layer_range=(1, depth))],
        )
        model = Model(mc, Rng(seed).child(f"model.{op}"))
        # the output projection is zero-initialized by design, which would
        # zero every upstream gradient; randomize it so all paths carry signal
        orng = Rng(seed).child(f"outproj.{op}")
        model.out_w.data[...] = orng.normal(model.out_w.data.shape, scale=0.1)
        model.out_b.data[...] = orng.child("b").normal(model.out_b.data.shape, scale=0.1)

        b = cfg["checkgrad.batch_size"]
        ds = make_dataset("checker", mc.image_size[0], b, seed, mc.cond_vocab)
        drng = Rng(seed).child(f"draw.{op}")
        t = drng.child("t").integers(1, schedule.steps + 1, size=b)
        noise = drng.child("noise").normal(ds.images.shape)

        def loss_fn():
            return compute_loss(model, ds.images, ds.labels, t, noise, schedule)

        report = check_gradients(loss_fn, model.parameters(), probe_seed=seed)
        ok = report.passed(tol)
        all_ok = all_ok and ok
        reports.append(f"operator={op}: {'pass' if ok else 'FAIL'}\n{report.summary()}")
        if not ok:
            worst = report.worst()[:5]
            reports.append(
                "worst tensors: "
                + ", ".join(f"{p.name} rel_err={p.max_rel_err:.3e}" for p in worst)
            )
    text = "\n".join(reports)
    _write_text(os.path.join(out, "checkgrad.txt"), text + "\n")
    _finish_run(out, cfg, started, argv)
    print(text)
    if not all_ok:
        raise NumericalError(f"gradient check failed at tolerance {tol}")
    return 0


def _corrupt_silu_backward() -> None:
    """Negative-control fixture: breaks one op's backward on purpose."""
    from .numerics import tensor as tmod

    original = tmod.silu

    def broken_silu(x):
        out = original(x)
        inner = out._backward

        def corrupted(g):
            inner(g)
            if x.requires_grad and x.grad is not None:
                x.grad *= 1.5
        out._backward = corrupted
        return out

    tmod.silu = broken_silu
    # rebind in every module that imported it by name
    from . import backbone

    backbone.silu = broken_silu


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------
def _set_threads(argv: list[str]) -> None:
    """Pin BLAS thread pools before numpy loads (only effective then)."""
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is not None and n.isdigit() and int(n) > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None, help="overrides config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")

    p = argparse.ArgumentParser(prog="kvdit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a diffusion model")
    t.add_argument("--steps", type=int, default=None, help="overrides train.steps")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    f = sub.add_parser("finetune", parents=[common], help="weak-to-strong adaptation race")
    f.add_argument("--from", dest="from_ckpt", required=True, help="base checkpoint")
    f.add_argument("--adapt", required=True, choices=["codec", "upscale", "kvcompress"])
    f.add_argument("--pe", default=None, help="interpolate|random (upscale)")
    f.add_argument("--init", default=None, help="avg|random (kvcompress)")
    f.add_argument("--stride", type=int, default=None, help="compression stride (kvcompress)")
    f.add_argument("--codec-b", dest="codec_b", default=None, help="target codec (codec)")

    s = sub.add_parser("sample", parents=[common], help="sample images from a checkpoint")
    s.add_argument("--from", dest="from_ckpt", required=True, help="checkpoint to sample")

    b = sub.add_parser("bench", parents=[common], help="attention FLOP/latency sweep")
    b.add_argument("--Rs", dest="rs", default=None, help="comma-separated strides")

    st = sub.add_parser("stats", parents=[common], help="caption corpus statistics")
    st.add_argument("corpus", help="UTF-8 text file, one caption per line")

    cg = sub.add_parser("checkgrad", parents=[common], help="finite-difference gradient audit")
    cg.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    return p


_COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "stats": cmd_stats,
    "checkgrad": cmd_checkgrad,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import KvditError

    try:
        return _COMMANDS[args.command](args, argv)
    except KvditError as e:
        print(f"kvdit: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"kvdit: i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
