"""Synthetic image datasets with condition labels.

Three generator families produce (B, H, W, 3) images in [-1, 1] plus four
discrete labels per sample describing the generator parameters, so
cross-attention has something real to condition on.  Regeneration with the
same seed is bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import Rng

GENERATORS = ("gaussian_blobs", "striped_patterns", "checker")


@dataclass
class SyntheticDataset:
    generator_id: str
    images: np.ndarray  # (n, H, W, 3), float64 in [-1, 1]
    labels: np.ndarray  # (n, 4) ints < label_vocab
    seed: int
    label_vocab: int

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def _blobs(rng: Rng, size: int, vocab: int):
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    cx = rng.child("cx").uniform((), 0.2, 0.8)
    cy = rng.child("cy").uniform((), 0.2, 0.8)
    sigma = rng.child("sigma").uniform((), 0.1, 0.3)
    color = rng.child("color").uniform(3, -1.0, 1.0)
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    img = blob[:, :, None] * color[None, None, :]
    labels = [
        int(cx * 4) % vocab,
        int(cy * 4) % vocab,
        int(sigma * 10) % vocab,
        int((color[0] + 1) * 2) % vocab,
    ]
    return img, labels


def _stripes(rng: Rng, size: int, vocab: int):
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    horizontal = int(rng.child("orient").integers(0, 2))
    freq = int(rng.child("freq").integers(1, 4))
    phase = rng.child("phase").uniform((), 0.0, 2 * np.pi)
    coord = yy if horizontal else xx
    wave = np.sin(2 * np.pi * freq * coord + phase)
    color = rng.child("color").uniform(3, 0.3, 1.0)
    img = wave[:, :, None] * color[None, None, :]
    labels = [horizontal % vocab, freq % vocab, int(phase) % vocab, int(color[1] * 4) % vocab]
    return img, labels


def _checker(rng: Rng, size: int, vocab: int):
    cell = int(rng.child("cell").integers(1, max(size // 4, 2)))
    ox = int(rng.child("ox").integers(0, cell))
    oy = int(rng.child("oy").integers(0, cell))
    polarity = int(rng.child("pol").integers(0, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    board = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    if polarity:
        board = 1.0 - board
    color = rng.child("color").uniform(3, 0.4, 1.0)
    img = (board * 2.0 - 1.0)[:, :, None] * color[None, None, :]
    labels = [cell % vocab, ox % vocab, oy % vocab, polarity % vocab]
    return img, labels


_MAKERS = {
    "gaussian_blobs": _blobs,
    "striped_patterns": _stripes,
    "checker": _checker,
}


def make_dataset(
    generator_id: str, image_size: int, count: int, seed: int, label_vocab: int = 16
) -> SyntheticDataset:
    if generator_id not in GENERATORS:
        raise ConfigError(
            f"unknown generator {generator_id!r}; pick one of {GENERATORS}"
        )
    maker = _MAKERS[generator_id]
    root = Rng(seed)
    images = np.zeros((count, image_size, image_size, 3))
    labels = np.zeros((count, 4), dtype=np.int64)
    for i in range(count):
        img, lab = maker(root.child(f"sample.{i}"), image_size, label_vocab)
        images[i] = np.clip(img, -1.0, 1.0)
        labels[i] = lab
    return SyntheticDataset(
        generator_id=generator_id,
        images=images,
        labels=labels,
        seed=seed,
        label_vocab=label_vocab,
    )


def batch_indices(data_seed: int, step: int, batch_size: int, count: int) -> np.ndarray:
    """Deterministic batch selection keyed only by (seed, step)."""
    return Rng(data_seed).child(f"batch.{step}").integers(0, count, size=batch_size)
