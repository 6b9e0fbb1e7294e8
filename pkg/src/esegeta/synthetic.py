"""Synthetic inputs: a bright tube through a noisy volume, roughly vessel-like."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .runtime import sample_rng


def tube_volume(shape: Sequence[int], seed: int = 0, radius: float = 2.0, noise: float = 0.1) -> np.ndarray:
    """float32 volume of `shape` (2D or 3D) with a randomly oriented bright line plus Gaussian noise."""
    shape = tuple(int(s) for s in shape)
    rng = sample_rng(seed, "tube")
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"), axis=-1)
    centre = np.array(shape) / 2.0 + rng.uniform(-1, 1, size=len(shape))
    direction = rng.normal(size=len(shape))
    direction /= np.linalg.norm(direction)
    rel = grid - centre
    dist = np.linalg.norm(rel - (rel @ direction)[..., None] * direction, axis=-1)
    vol = np.exp(-0.5 * (dist / radius) ** 2) + rng.normal(0.0, noise, size=shape)
    return vol.astype(np.float32)
