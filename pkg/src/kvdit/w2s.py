"""Weak-to-strong adaptation experiments as two-arm convergence races.

Each experiment pairs an adapted initialization against a baseline
(scratch or random init), trains both arms on identical data sequences,
and reports loss curves, fixed-step probes and steps-to-threshold.  The
verdict is an ordering statement over seeds, never an absolute quality
claim.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Model, ModelConfig, resize_model, retrofit_compression
from .data import SyntheticDataset, batch_indices, make_dataset
from .diffusion import NoiseSchedule, TrainState, probe_loss, train_step
from .errors import ConfigError
from .kvattn import CompressionSpec
from .numerics import Rng, Tensor
from .numerics.tensor import no_grad


# ----------------------------------------------------------------------
# latent codec (toy VAE stand-in)
# ----------------------------------------------------------------------
@dataclass
class LinearCodec:
    """Invertible per-pixel channel mix: encode(x) = x @ M.T + shift."""

    matrix: np.ndarray  # (C, C)
    shift: np.ndarray  # (C,)
    codec_id: str

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        c = self.matrix.shape[0]
        if self.matrix.shape != (c, c) or self.shift.shape != (c,):
            raise ConfigError(
                f"codec needs (C,C) matrix and (C,) shift, got "
                f"{self.matrix.shape} and {self.shift.shape}"
            )
        if abs(np.linalg.det(self.matrix)) < 1e-8:
            raise ConfigError(f"codec {self.codec_id!r} matrix is not invertible")
        self._inv = np.linalg.inv(self.matrix)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return x @ self.matrix.T + self.shift

    def decode(self, z: np.ndarray) -> np.ndarray:
        return (z - self.shift) @ self._inv.T


def make_codec(kind: str, channels: int = 3, seed: int = 0) -> LinearCodec:
    if kind == "identity":
        return LinearCodec(np.eye(channels), np.zeros(channels), "identity")
    if kind == "permute":
        perm = np.roll(np.eye(channels), 1, axis=0)
        return LinearCodec(perm, np.zeros(channels), "permute")
    if kind == "random_mix":
        rng = Rng(seed).child("codec")
        q, _ = np.linalg.qr(rng.normal((channels, channels)))
        return LinearCodec(q, rng.child("shift").normal(channels, scale=0.1), "random_mix")
    raise ConfigError(f"unknown codec kind {kind!r}")


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------
@dataclass
class ArmResult:
    arm_name: str
    loss_curve: list[float]
    steps_to_threshold: int | None
    probe_losses: dict[int, float] = field(default_factory=dict)
    step0_divergence: float | None = None


@dataclass
class SeedResult:
    seed: int
    arms: list[ArmResult]


@dataclass
class ExperimentReport:
    experiment: str  # codec_swap | upscale | kv_retrofit
    seeds: list[int]
    runs: list[SeedResult]
    verdict: str
    threshold: float | None = None
    notes: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "seed", "arm", "step", "loss"])
        for run in self.runs:
            for arm in run.arms:
                for step, loss in enumerate(arm.loss_curve, start=1):
                    w.writerow([self.experiment, run.seed, arm.arm_name, step, repr(loss)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"experiment: {self.experiment}", f"seeds: {self.seeds}"]
        if self.threshold is not None:
            lines.append(f"loss threshold (pre-registered): {self.threshold:.6f}")
        for run in self.runs:
            lines.append(f"seed {run.seed}:")
            for arm in run.arms:
                bits = [f"  arm {arm.arm_name}:"]
                bits.append(f"steps_to_threshold={arm.steps_to_threshold}")
                if arm.probe_losses:
                    probes = ", ".join(
                        f"step{k}={v:.5f}" for k, v in sorted(arm.probe_losses.items())
                    )
                    bits.append(f"probes[{probes}]")
                if arm.step0_divergence is not None:
                    bits.append(f"step0_divergence={arm.step0_divergence:.3e}")
                lines.append(" ".join(bits))
        lines.append(f"verdict: {self.verdict}")
        if self.notes:
            lines.append(f"notes: {self.notes}")
        return "\n".join(lines)


def steps_to_threshold(curve, threshold: float, window: int = 1) -> int | None:
    """First 1-based step whose trailing `window`-mean is <= threshold."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    for i in range(window, len(curve) + 1):
        if float(np.mean(curve[i - window : i])) <= threshold:
            return i
    return None


# ----------------------------------------------------------------------
# shared arm runner
# ----------------------------------------------------------------------
@dataclass
class RaceConfig:
    budget: int = 400
    batch_size: int = 8
    lr: float = 1e-3
    schedule_steps: int = 1000
    dataset_size: int = 64
    generator: str = "checker"
    probe_size: int = 256
    probe_steps: tuple[int, ...] = (0, 100)
    threshold_window: int = 20
    threshold_factor: float = 1.2  # pre-registered multiple of base loss


def _train_arm(
    model: Model,
    dataset: SyntheticDataset,
    encode,
    schedule: NoiseSchedule,
    race: RaceConfig,
    data_seed: int,
    arm_name: str,
    probe: tuple[np.ndarray, np.ndarray, int] | None = None,
) -> ArmResult:
    """Train one arm; batch order depends only on data_seed, not the arm."""
    state = TrainState(model=model, schedule=schedule, seed=data_seed, lr=race.lr)
    probe_losses: dict[int, float] = {}

    def maybe_probe(step: int):
        if probe is not None and step in race.probe_steps:
            px, pl, pseed = probe
            probe_losses[step] = probe_loss(model, px, pl, schedule, pseed)

    maybe_probe(0)
    for step in range(1, race.budget + 1):
        idx = batch_indices(data_seed, step, race.batch_size, dataset.count)
        x0, labels = dataset.batch(idx)
        train_step(state, (encode(x0), labels))
        maybe_probe(step)
    if probe is not None and race.budget not in probe_losses:
        px, pl, pseed = probe
        probe_losses[race.budget] = probe_loss(model, px, pl, schedule, pseed)
    return ArmResult(
        arm_name=arm_name,
        loss_curve=list(state.loss_history),
        steps_to_threshold=None,  # filled by the caller once a threshold exists
        probe_losses=probe_losses,
    )


def _probe_batch(dataset: SyntheticDataset, encode, size: int, seed: int):
    idx = Rng(seed).child("probe.batch").integers(0, dataset.count, size=size)
    x0, labels = dataset.batch(idx)
    return encode(x0), labels


# ----------------------------------------------------------------------
# the three experiments
# ----------------------------------------------------------------------
def run_codec_swap(
    base_model: Model,
    codec_a: LinearCodec,
    codec_b: LinearCodec,
    schedule: NoiseSchedule,
    race: RaceConfig,
    seeds: list[int],
    dataset_seed: int = 1000,
) -> ExperimentReport:
    """Fine-tune under a new latent codec vs training from scratch."""
    dataset = make_dataset(
        race.generator, base_model.config.image_size[0], race.dataset_size,
        dataset_seed, base_model.config.cond_vocab,
    )
    # pre-registered threshold: 1.2x the base model's converged probe loss
    probe_a = _probe_batch(dataset, codec_a.encode, race.probe_size, dataset_seed)
    base_loss = probe_loss(base_model, probe_a[0], probe_a[1], schedule, dataset_seed + 1)
    threshold = race.threshold_factor * base_loss

    runs: list[SeedResult] = []
    wins = 0
    for seed in seeds:
        probe_b = _probe_batch(dataset, codec_b.encode, race.probe_size, dataset_seed)
        ft = _train_arm(
            base_model.clone(), dataset, codec_b.encode, schedule, race,
            data_seed=seed, arm_name="finetune",
            probe=(probe_b[0], probe_b[1], dataset_seed + 1),
        )
        scratch_model = Model(base_model.config, Rng(seed).child("scratch"))
        sc = _train_arm(
            scratch_model, dataset, codec_b.encode, schedule, race,
            data_seed=seed, arm_name="scratch",
            probe=(probe_b[0], probe_b[1], dataset_seed + 1),
        )
        win = race.threshold_window
        ft.steps_to_threshold = steps_to_threshold(ft.loss_curve, threshold, win)
        sc.steps_to_threshold = steps_to_threshold(sc.loss_curve, threshold, win)
        sc_steps = sc.steps_to_threshold if sc.steps_to_threshold is not None else race.budget
        if ft.steps_to_threshold is not None and ft.steps_to_threshold <= 0.5 * sc_steps:
            wins += 1
        runs.append(SeedResult(seed=seed, arms=[ft, sc]))

    verdict = (
        f"finetune reached threshold in <=50% of scratch steps in "
        f"{wins}/{len(seeds)} seeds"
    )
    return ExperimentReport(
        experiment="codec_swap", seeds=list(seeds), runs=runs, verdict=verdict,
        threshold=threshold,
        notes=(
            f"codec {codec_a.codec_id} -> {codec_b.codec_id}; base probe loss "
            f"{base_loss:.6f}; threshold factor {race.threshold_factor} is an "
            "artifact choice, pre-registered in config"
        ),
    )


def run_upscale(
    base_model: Model,
    target_grid: tuple[int, int],
    schedule: NoiseSchedule,
    race: RaceConfig,
    seeds: list[int],
    dataset_seed: int = 2000,
) -> ExperimentReport:
    """PE-interpolated vs randomly re-initialized PE at a larger grid."""
    src = base_model.config.base_grid
    if target_grid[0] < src[0] or target_grid[1] < src[1]:
        raise ConfigError(f"target grid {target_grid} smaller than base {src}")
    image_size = base_model.config.patch_size * target_grid[0]
    dataset = make_dataset(
        race.generator, image_size, race.dataset_size, dataset_seed,
        base_model.config.cond_vocab,
    )
    identity = lambda x: x

    runs: list[SeedResult] = []
    wins = 0
    probe_step = race.probe_steps[1] if len(race.probe_steps) > 1 else race.budget
    for seed in seeds:
        probe = _probe_batch(dataset, identity, race.probe_size, dataset_seed)
        arms = []
        for pe_mode in ("interpolate", "random"):
            hr = resize_model(base_model, target_grid, pe_mode, Rng(seed).child(pe_mode))
            arms.append(
                _train_arm(
                    hr, dataset, identity, schedule, race, data_seed=seed,
                    arm_name=f"pe_{pe_mode}",
                    probe=(probe[0], probe[1], dataset_seed + 1),
                )
            )
        interp, rand = arms
        if interp.probe_losses[probe_step] < rand.probe_losses[probe_step]:
            wins += 1
        runs.append(SeedResult(seed=seed, arms=arms))

    verdict = (
        f"interpolated PE had lower probe loss at step {probe_step} in "
        f"{wins}/{len(seeds)} seeds"
    )
    return ExperimentReport(
        experiment="upscale", seeds=list(seeds), runs=runs, verdict=verdict,
        notes=f"grid {src} -> {tuple(target_grid)}",
    )


def run_kv_retrofit(
    base_model: Model,
    spec: CompressionSpec,
    schedule: NoiseSchedule,
    race: RaceConfig,
    seeds: list[int],
    dataset_seed: int = 3000,
    n_probe_batches: int = 4,
) -> ExperimentReport:
    """Conv Avg Init vs random conv init when adding KV compression."""
    for existing in base_model.config.compression:
        lo, hi = spec.layer_range
        elo, ehi = existing.layer_range
        if not (hi < elo or lo > ehi):
            raise ConfigError("retrofit range overlaps existing compression")
    dataset = make_dataset(
        race.generator, base_model.config.image_size[0], race.dataset_size,
        dataset_seed, base_model.config.cond_vocab,
    )
    identity = lambda x: x

    runs: list[SeedResult] = []
    strict_wins = 0
    for seed in seeds:
        arms = []
        for init in ("avg", "random"):
            model = retrofit_compression(
                base_model, spec, rng=Rng(seed).child(f"init.{init}"), init=init
            )
            divergences = _output_divergence(
                base_model, model, dataset, schedule, dataset_seed, n_probe_batches
            )
            probe = _probe_batch(dataset, identity, race.probe_size, dataset_seed)
            arm = _train_arm(
                model, dataset, identity, schedule, race, data_seed=seed,
                arm_name=f"init_{init}",
                probe=(probe[0], probe[1], dataset_seed + 1),
            )
            arm.step0_divergence = float(np.mean(divergences))
            arm._all_divergences = divergences  # kept for per-batch assertions
            arms.append(arm)
        avg, rand = arms
        if all(
            a < r for a, r in zip(avg._all_divergences, rand._all_divergences)
        ):
            strict_wins += 1
        runs.append(SeedResult(seed=seed, arms=arms))

    verdict = (
        f"avg-init step-0 divergence below random-init on every probe batch in "
        f"{strict_wins}/{len(seeds)} seeds"
    )
    return ExperimentReport(
        experiment="kv_retrofit", seeds=list(seeds), runs=runs, verdict=verdict,
        notes=f"spec operator={spec.operator} stride={spec.stride} range={spec.layer_range}",
    )


def _output_divergence(
    base: Model, adapted: Model, dataset: SyntheticDataset,
    schedule: NoiseSchedule, seed: int, n_batches: int, batch_size: int = 8,
) -> list[float]:
    """Mean squared difference of predicted noise on fixed probe batches."""
    from .diffusion import q_sample

    out = []
    for b in range(n_batches):
        rng = Rng(seed).child(f"div.{b}")
        idx = rng.child("idx").integers(0, dataset.count, size=batch_size)
        x0, labels = dataset.batch(idx)
        t = rng.child("t").integers(1, schedule.steps + 1, size=batch_size)
        noise = rng.child("noise").normal(x0.shape)
        xt = q_sample(x0, t, noise, schedule)
        with no_grad():
            ref = base.forward(Tensor(xt), t, labels).data
            got = adapted.forward(Tensor(xt), t, labels).data
        out.append(float(np.mean((ref - got) ** 2)))
    return out


def loss_curve_svg(report: ExperimentReport, width: int = 640, height: int = 360) -> str:
    """Minimal SVG line plot of every arm's loss curve."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    curves = []
    for run in report.runs:
        for arm in run.arms:
            curves.append((f"{arm.arm_name} (seed {run.seed})", arm.loss_curve))
    if not curves or not any(c for _, c in curves):
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    ymax = max(max(c) for _, c in curves if c)
    ymin = min(min(c) for _, c in curves if c)
    span = max(ymax - ymin, 1e-12)
    xmax = max(len(c) for _, c in curves)
    pad = 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i, (name, curve) in enumerate(curves):
        color = palette[i % len(palette)]
        pts = " ".join(
            f"{pad + (width - 2 * pad) * j / max(xmax - 1, 1):.1f},"
            f"{height - pad - (height - 2 * pad) * (v - ymin) / span:.1f}"
            for j, v in enumerate(curve)
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'
        )
        parts.append(
            f'<text x="{pad}" y="{12 + 12 * i}" font-size="10" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
