import json
import os
import re
from collections import Counter

import numpy as np
import pytest

from kvdit.cli import (
    CKPT_MAGIC,
    compute_corpus_stats,
    format_config,
    load_checkpoint,
    load_config,
    main,
    parse_config_text,
    save_checkpoint,
    to_uint8,
    write_pgm,
    write_ppm,
)
from kvdit.errors import ConfigError, IOFailure
from kvdit.numerics import Rng

TOY_CFG = """
seed = 7
model.depth = 2
model.channels = 16
model.heads = 2
model.grid = 4
model.cond_dim = 16
model.time_embed_dim = 16
schedule.steps = 50
train.steps = 6
train.batch_size = 4
train.lr = 0.001
train.checkpoint_interval = 3
train.dataset_size = 16
train.sample_count = 1
train.sample_steps = 5
"""


@pytest.fixture
def toy_cfg(tmp_path):
    p = tmp_path / "toy.cfg"
    p.write_text(TOY_CFG)
    return str(p)


# ----------------------------------------------------------------------
# config parsing
# ----------------------------------------------------------------------
def test_parse_config_types_and_comments():
    cfg = parse_config_text(
        "seed = 9  # trailing comment\n"
        "\n"
        "# full-line comment\n"
        "train.lr = 0.5\n"
        "bench.ns = 64,256\n"
        "data.generator = checker\n"
    )
    assert cfg["seed"] == 9
    assert cfg["train.lr"] == 0.5
    assert cfg["bench.ns"] == [64, 256]
    assert cfg["data.generator"] == "checker"


def test_parse_config_rejects_unknown_duplicate_and_malformed():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("model.dept = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("just some words\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_text("seed = seven\n")


def test_load_config_fills_defaults_and_roundtrips(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 3\n")
    cfg = load_config(str(p))
    assert cfg["seed"] == 3
    assert cfg["model.depth"] == 8  # default
    # the resolved dump parses back to the same values
    reparsed = parse_config_text(format_config(cfg))
    assert reparsed == cfg


def test_load_config_missing_file_is_io_error():
    with pytest.raises(IOFailure):
        load_config("/nonexistent/path.cfg")


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------
def test_checkpoint_roundtrip_bitwise(tmp_path):
    path = str(tmp_path / "m.kvdt")
    tensors = {
        "a": Rng(0).normal((3, 4)),
        "b": np.arange(5, dtype=np.float32),
        "c": np.array([[1, 2], [3, 4]], dtype=np.int64),
        "scalarish": np.array(2.5),
    }
    meta = {"model": {"depth": 2}, "step": 7}
    save_checkpoint(path, meta, tensors)
    meta2, tensors2 = load_checkpoint(path)
    assert meta2 == meta
    assert set(tensors2) == set(tensors)
    for k in tensors:
        assert tensors2[k].dtype == tensors[k].dtype
        np.testing.assert_array_equal(tensors2[k], tensors[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.kvdt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(IOFailure, match="magic"):
        load_checkpoint(str(path))


def test_checkpoint_rejects_corruption(tmp_path):
    path = str(tmp_path / "m.kvdt")
    save_checkpoint(path, {"step": 1}, {"a": np.ones(4)})
    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 2] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(IOFailure, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_rejects_version_mismatch(tmp_path):
    import hashlib
    import struct

    path = str(tmp_path / "m.kvdt")
    save_checkpoint(path, {"step": 1}, {"a": np.ones(2)})
    blob = bytearray(open(path, "rb").read())
    struct.pack_into("<I", blob, 4, 99)  # bump version
    body = bytes(blob[:-8])
    open(path, "wb").write(body + hashlib.blake2b(body, digest_size=8).digest())
    with pytest.raises(IOFailure, match="version"):
        load_checkpoint(path)


def test_checkpoint_starts_with_magic(tmp_path):
    path = str(tmp_path / "m.kvdt")
    save_checkpoint(path, {}, {"x": np.zeros(1)})
    assert open(path, "rb").read(4) == CKPT_MAGIC


# ----------------------------------------------------------------------
# images
# ----------------------------------------------------------------------
def test_ppm_and_pgm_headers_and_payload(tmp_path):
    img = to_uint8(np.linspace(-1, 1, 2 * 3 * 3).reshape(2, 3, 3))
    p = str(tmp_path / "x.ppm")
    write_ppm(p, img)
    blob = open(p, "rb").read()
    assert blob.startswith(b"P6\n3 2\n255\n")
    assert blob[len(b"P6\n3 2\n255\n"):] == img.tobytes()

    gray = img[:, :, 0]
    g = str(tmp_path / "x.pgm")
    write_pgm(g, gray)
    gb = open(g, "rb").read()
    assert gb.startswith(b"P5\n3 2\n255\n")
    assert gb[len(b"P5\n3 2\n255\n"):] == gray.tobytes()


def test_to_uint8_range():
    out = to_uint8(np.array([-1.0, 0.0, 1.0, 5.0, -5.0]))
    assert out.tolist() == [0, 127, 255, 255, 0]


# ----------------------------------------------------------------------
# corpus stats
# ----------------------------------------------------------------------
def test_stats_hand_fixture():
    stats = compute_corpus_stats("a b\na b c d\n")
    assert stats.caption_count == 2
    assert stats.total_words == 6
    assert stats.distinct_words == 4
    assert stats.average_length == 3.0
    assert stats.average_length == stats.total_words / stats.caption_count


def test_stats_case_folding_and_valid_words():
    text = "\n".join(["Word word WORD wOrD"] * 3)  # 12 occurrences of one word
    stats = compute_corpus_stats(text)
    assert stats.distinct_words == 1
    assert stats.valid_distinct_words == 1  # 12 > 10
    stats2 = compute_corpus_stats("Word word\n")
    assert stats2.valid_distinct_words == 0


def test_stats_histogram_buckets():
    text = "\n".join([
        " ".join(["w"] * 10),   # bucket 0-25
        " ".join(["w"] * 25),   # bucket 0-25 (inclusive upper edge)
        " ".join(["w"] * 26),   # bucket 26-50
        " ".join(["w"] * 301),  # bucket >300
    ])
    hist = dict(compute_corpus_stats(text).histogram)
    assert hist["0-25"] == 2
    assert hist["26-50"] == 1
    assert hist[">300"] == 1
    assert sum(hist.values()) == 4


def test_stats_against_independent_recount():
    # oracle: brute-force recount written without reusing the implementation
    rng = Rng(99)
    vocab = [f"tok{i}" for i in range(30)]
    lines = []
    for i in range(200):
        n = int(rng.child(f"len.{i}").integers(0, 40))
        idx = rng.child(f"words.{i}").integers(0, len(vocab), size=n)
        lines.append(" ".join(vocab[j] for j in idx))
    text = "\n".join(lines)

    stats = compute_corpus_stats(text)

    recount_total = sum(len(l.split()) for l in lines)
    recount_freq = Counter(w.lower() for l in lines for w in l.split())
    assert stats.caption_count == len(lines)
    assert stats.total_words == recount_total
    assert stats.distinct_words == len(recount_freq)
    assert stats.valid_distinct_words == sum(1 for c in recount_freq.values() if c > 10)
    assert stats.average_length == recount_total / len(lines)


def test_stats_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        compute_corpus_stats("")


# ----------------------------------------------------------------------
# subcommand integration (in-process main)
# ----------------------------------------------------------------------
def test_train_writes_artifacts_and_is_deterministic(toy_cfg, tmp_path):
    out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert main(["train", "--config", toy_cfg, "--out", out1]) == 0
    assert main(["train", "--config", toy_cfg, "--out", out2]) == 0
    for name in ("loss.csv", "timing.csv", "resolved.cfg", "metadata.json",
                 "checkpoint.kvdt", "checkpoint_000003.kvdt", "samples.ppm"):
        assert os.path.exists(os.path.join(out1, name)), name
    # byte-identical loss CSVs across reruns
    a = open(os.path.join(out1, "loss.csv"), "rb").read()
    b = open(os.path.join(out2, "loss.csv"), "rb").read()
    assert a == b
    assert a.decode().splitlines()[0] == "step,loss"
    assert len(a.decode().splitlines()) == 7  # header + 6 steps


def test_train_steps_flag_overrides(toy_cfg, tmp_path):
    out = str(tmp_path / "short")
    assert main(["train", "--config", toy_cfg, "--steps", "2", "--out", out]) == 0
    assert len(open(os.path.join(out, "loss.csv")).read().splitlines()) == 3


def test_resume_equals_uninterrupted_bitwise(toy_cfg, tmp_path):
    full = str(tmp_path / "full")
    half = str(tmp_path / "half")
    resumed = str(tmp_path / "resumed")
    assert main(["train", "--config", toy_cfg, "--out", full]) == 0
    assert main(["train", "--config", toy_cfg, "--steps", "3", "--out", half]) == 0
    assert main(["train", "--config", toy_cfg, "--out", resumed,
                 "--resume", os.path.join(half, "checkpoint.kvdt")]) == 0
    _, t_full = load_checkpoint(os.path.join(full, "checkpoint.kvdt"))
    _, t_res = load_checkpoint(os.path.join(resumed, "checkpoint.kvdt"))
    for k in t_full:
        np.testing.assert_array_equal(t_full[k], t_res[k])


def test_resolved_config_reproduces_run(toy_cfg, tmp_path):
    out1 = str(tmp_path / "a")
    assert main(["train", "--config", toy_cfg, "--out", out1]) == 0
    out2 = str(tmp_path / "b")
    resolved = os.path.join(out1, "resolved.cfg")
    assert main(["train", "--config", resolved, "--out", out2]) == 0
    a = open(os.path.join(out1, "loss.csv"), "rb").read()
    b = open(os.path.join(out2, "loss.csv"), "rb").read()
    assert a == b


def test_unknown_config_key_exits_2_before_writing(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.dept = 2\n")
    out = str(tmp_path / "never")
    assert main(["train", "--config", str(bad), "--out", out]) == 2
    assert not os.path.exists(out)
    assert "unknown config key" in capsys.readouterr().err


def test_missing_checkpoint_exits_4(toy_cfg, tmp_path, capsys):
    out = str(tmp_path / "o")
    code = main(["sample", "--config", toy_cfg,
                 "--from", str(tmp_path / "nope.kvdt"), "--out", out])
    assert code == 4


def test_sample_from_checkpoint(toy_cfg, tmp_path):
    train_out = str(tmp_path / "t")
    assert main(["train", "--config", toy_cfg, "--out", train_out]) == 0
    cfg2 = tmp_path / "s.cfg"
    cfg2.write_text(TOY_CFG + "sample.count = 2\nsample.steps = 4\n")
    out = str(tmp_path / "s")
    assert main(["sample", "--config", str(cfg2),
                 "--from", os.path.join(train_out, "checkpoint.kvdt"),
                 "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "sample_000.ppm"))
    assert os.path.exists(os.path.join(out, "sample_001.ppm"))
    assert open(os.path.join(out, "samples.ppm"), "rb").read(2) == b"P6"


def test_bench_single_cell_and_rs_flag(tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text(
        "bench.ns = 64\nbench.rs = 1,2\nbench.operators = pool\n"
        "bench.channels = 16\nbench.heads = 2\n"
    )
    out = str(tmp_path / "bench")
    assert main(["bench", "--config", str(cfg), "--out", out, "--Rs", "1"]) == 0
    lines = open(os.path.join(out, "sweep.csv")).read().splitlines()
    assert len(lines) == 2  # header + single dense row
    assert lines[1].split(",")[1] == "1"
    assert os.path.exists(os.path.join(out, "speedup.svg"))


def test_stats_subcommand_and_artifacts(tmp_path):
    corpus = tmp_path / "c.txt"
    corpus.write_text("a b\na b c d\n")
    out = str(tmp_path / "stats")
    assert main(["stats", str(corpus), "--out", out]) == 0
    hist = open(os.path.join(out, "histogram.csv")).read().splitlines()
    assert hist[0] == "bucket,count"
    assert "0-25,2" in hist
    assert "captions: 2" in open(os.path.join(out, "stats.txt")).read()


def test_stats_missing_file_exits_4(tmp_path):
    assert main(["stats", str(tmp_path / "ghost.txt"), "--out", str(tmp_path / "o")]) == 4


def _finetune_cfg(tmp_path):
    cfg = tmp_path / "ft.cfg"
    cfg.write_text(
        TOY_CFG
        + "experiment.budget = 3\nexperiment.batch_size = 4\n"
        + "experiment.dataset_size = 16\nexperiment.probe_size = 8\n"
        + "experiment.probe_steps = 0,2\nexperiment.seeds = 1\n"
        + "compress.layers = 2-2\n"
    )
    return str(cfg)


def test_finetune_kvcompress_stride1_divergence_zero(toy_cfg, tmp_path, capsys):
    train_out = str(tmp_path / "base")
    assert main(["train", "--config", toy_cfg, "--out", train_out]) == 0
    cfg = _finetune_cfg(tmp_path)
    out = str(tmp_path / "ft")
    assert main(["finetune", "--config", cfg,
                 "--from", os.path.join(train_out, "checkpoint.kvdt"),
                 "--adapt", "kvcompress", "--init", "avg", "--stride", "1",
                 "--out", out]) == 0
    summary = open(os.path.join(out, "summary.txt")).read()
    divs = [float(m) for m in re.findall(r"step0_divergence=([\d.e+-]+)", summary)]
    assert divs and all(d < 1e-10 for d in divs)
    assert os.path.exists(os.path.join(out, "report.csv"))
    assert os.path.exists(os.path.join(out, "curves.svg"))


def test_finetune_codec_identity_step0_matches_base(toy_cfg, tmp_path):
    train_out = str(tmp_path / "base")
    assert main(["train", "--config", toy_cfg, "--out", train_out]) == 0
    cfg = _finetune_cfg(tmp_path)
    out = str(tmp_path / "ftc")
    assert main(["finetune", "--config", cfg,
                 "--from", os.path.join(train_out, "checkpoint.kvdt"),
                 "--adapt", "codec", "--codec-b", "identity",
                 "--out", out]) == 0
    summary = open(os.path.join(out, "summary.txt")).read()
    threshold = float(re.search(r"pre-registered\): ([\d.]+)", summary).group(1))
    base_loss = threshold / 1.2
    ft_step0 = float(re.search(r"arm finetune:.*?step0=([\d.]+)", summary).group(1))
    assert ft_step0 == pytest.approx(base_loss, rel=0.10)


def test_finetune_lineage_mismatch_named(toy_cfg, tmp_path, capsys):
    train_out = str(tmp_path / "base")
    assert main(["train", "--config", toy_cfg, "--out", train_out]) == 0
    bad_cfg = tmp_path / "other.cfg"
    bad_cfg.write_text(TOY_CFG.replace("model.channels = 16", "model.channels = 32"))
    code = main(["finetune", "--config", str(bad_cfg),
                 "--from", os.path.join(train_out, "checkpoint.kvdt"),
                 "--adapt", "codec", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "channels" in capsys.readouterr().err


def test_every_run_writes_resolved_config(toy_cfg, tmp_path):
    out = str(tmp_path / "r")
    assert main(["train", "--config", toy_cfg, "--out", out]) == 0
    resolved = open(os.path.join(out, "resolved.cfg")).read()
    assert "train.steps = 6" in resolved
    meta = json.load(open(os.path.join(out, "metadata.json")))
    assert "started_unix" in meta and "finished_unix" in meta
    # timestamps live only in metadata, keeping resolved.cfg reproducible
    assert "unix" not in resolved
