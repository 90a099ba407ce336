"""DDPM-style training objective and ancestral sampler.

Epsilon prediction with uniformly sampled timesteps and a mean-squared
loss, optimized with Adam (weight decay 0, constant learning rate).  All
per-step randomness is derived statelessly from (seed, step), so a run
resumed from a checkpoint is bitwise identical to an uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Model
from .errors import ConfigError, NumericalError
from .numerics import Rng, Tensor
from .numerics.tensor import no_grad


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def linear_schedule(t_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if t_steps < 1:
        raise ConfigError(f"need at least one step, got {t_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    if t_steps == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, t_steps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(x0: np.ndarray, t: np.ndarray, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward-noise x0 to step t: sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 1 or t.max() > schedule.steps:
        raise ConfigError(f"t out of range [1, {schedule.steps}]: {t}")
    abar = schedule.alpha_bars[t - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


@dataclass
class TrainState:
    model: Model
    schedule: NoiseSchedule
    seed: int
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    step: int = 0
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name, p in self.model.parameters().items():
            if name not in self.moments_m:
                self.moments_m[name] = np.zeros_like(p.data)
                self.moments_v[name] = np.zeros_like(p.data)

    @property
    def rng(self) -> Rng:
        return Rng(self.seed)


def compute_loss(
    model: Model,
    x0: np.ndarray,
    labels: np.ndarray,
    t: np.ndarray,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> Tensor:
    """Mean squared error between predicted and injected noise."""
    xt = q_sample(x0, t, noise, schedule)
    eps_hat = model.forward(Tensor(xt), t, labels)
    return ((eps_hat - Tensor(noise)) ** 2).mean()


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray]) -> float:
    """One optimizer step; randomness keyed by (seed, step) only."""
    x0, labels = batch
    step = state.step + 1
    srng = state.rng.child(f"step.{step}")
    t = srng.child("t").integers(1, state.schedule.steps + 1, size=x0.shape[0])
    noise = srng.child("noise").normal(x0.shape)

    params = state.model.parameters()
    for p in params.values():
        p.zero_grad()
    loss = compute_loss(state.model, x0, labels, t, noise, state.schedule)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise NumericalError(
            f"non-finite loss {loss_val} at step {step} (t={t.tolist()})"
        )
    loss.backward()

    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.moments_m[name]
        v = state.moments_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr != 0.0:
            p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.adam_eps)

    state.step = step
    state.loss_history.append(loss_val)
    return loss_val


def probe_loss(
    model: Model,
    x0: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    probe_seed: int,
) -> float:
    """Deterministic evaluation loss on a fixed (t, noise) draw; no graph."""
    rng = Rng(probe_seed)
    t = rng.child("t").integers(1, schedule.steps + 1, size=x0.shape[0])
    noise = rng.child("noise").normal(x0.shape)
    with no_grad():
        loss = compute_loss(model, x0, labels, t, noise, schedule)
    return loss.item()


def sample(
    model: Model,
    schedule: NoiseSchedule,
    labels: np.ndarray,
    rng: Rng,
    steps: int | None = None,
    shape: tuple | None = None,
    eta: float = 1.0,
    forward_fn=None,
) -> tuple[np.ndarray, int]:
    """Ancestral denoising from Gaussian noise.

    Returns (images clamped to [-1, 1], model evaluation count).  `steps`
    may subsample the schedule with an evenly strided timestep ladder.
    `forward_fn(xt, t, labels)` overrides the model call (oracle tests).
    """
    t_total = schedule.steps
    if steps is None:
        steps = t_total
    if steps < 1 or steps > t_total:
        raise ConfigError(f"steps must lie in [1, {t_total}], got {steps}")
    if shape is None:
        h, w = model.config.image_size
        shape = (labels.shape[0], h, w, model.config.in_channels)
    if forward_fn is None:
        def forward_fn(xt, t, labels):
            with no_grad():
                return model.forward(Tensor(xt), t, labels).data

    # evenly spaced, descending timestep ladder ending at 1
    ts = np.unique(np.linspace(1, t_total, steps).round().astype(np.int64))[::-1]
    x = rng.child("init").normal(shape)
    evals = 0
    for i, t in enumerate(ts):
        t_batch = np.full(shape[0], t, dtype=np.int64)
        eps_hat = forward_fn(x, t_batch, labels)
        evals += 1
        if not np.all(np.isfinite(eps_hat)):
            raise NumericalError(f"non-finite model output at sampler step {i} (t={t})")
        abar_t = schedule.alpha_bars[t - 1]
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        abar_prev = schedule.alpha_bars[t_prev - 1] if t_prev >= 1 else 1.0

        x0_hat = (x - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
        # DDPM posterior q(x_prev | x_t, x0) generalized to a strided ladder
        beta_eff = 1.0 - abar_t / abar_prev
        var = eta * beta_eff * (1.0 - abar_prev) / (1.0 - abar_t)
        mean = (
            math.sqrt(abar_prev) * beta_eff / (1.0 - abar_t) * x0_hat
            + math.sqrt(abar_t / abar_prev) * (1.0 - abar_prev) / (1.0 - abar_t) * x
        )
        if t_prev >= 1 and var > 0:
            x = mean + math.sqrt(var) * rng.child(f"noise.{i}").normal(shape)
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite sampler state at step {i} (t={t})")
    return np.clip(x, -1.0, 1.0), evals
