"""Hypersphere skill space: prior samples, projection, distance and schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MIN_RAW_NORM = 1e-8


class ResampleLatent(ValueError):
    """Raised by :func:`normalize` when the raw vector is too close to zero."""


def normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    n = np.linalg.norm(raw)
    if not n > MIN_RAW_NORM:
        raise ResampleLatent(f"raw latent norm {n:.3g} too small to project")
    return raw / n


def normalize_rows(raw) -> np.ndarray:
    """Row-wise :func:`normalize`; rows that are too short raise."""
    raw = np.asarray(raw, dtype=np.float64)
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(~(n > MIN_RAW_NORM)):
        raise ResampleLatent("a raw latent row is too close to zero")
    return raw / n


def sample_prior(rng: np.random.Generator, d: int, size: int | None = None) -> np.ndarray:
    """Uniform sample(s) on the unit (d-1)-sphere via normalized Gaussians."""
    if d < 2:
        raise ConfigError(f"latent dimension must be >= 2, got {d}")
    shape = (d,) if size is None else (size, d)
    while True:
        raw = rng.standard_normal(shape)
        try:
            return normalize(raw) if size is None else normalize_rows(raw)
        except ResampleLatent:
            continue


def latent_distance(z1, z2):
    """Cosine distance 0.5 * (1 - z1.z2), clipped into [0, 1]."""
    dot = np.sum(np.asarray(z1) * np.asarray(z2), axis=-1)
    return np.clip(0.5 * (1.0 - dot), 0.0, 1.0)


@dataclass
class LatentSchedule:
    """Per-step indices into ``latents``; each run holds one prior sample."""

    indices: np.ndarray
    latents: np.ndarray
    min_hold: int
    max_hold: int

    def __len__(self) -> int:
        return len(self.indices)

    def at(self, t: int) -> np.ndarray:
        return self.latents[self.indices[t]]

    def per_step(self) -> np.ndarray:
        return self.latents[self.indices]

    def run_lengths(self) -> list[int]:
        return np.bincount(self.indices, minlength=len(self.latents)).tolist()


def make_schedule(rng: np.random.Generator, T: int, min_hold: int, max_hold: int, d: int) -> LatentSchedule:
    if not 1 <= min_hold <= max_hold <= T:
        raise ConfigError(f"need 1 <= min_hold <= max_hold <= T, got {min_hold}, {max_hold}, {T}")
    indices = np.empty(T, dtype=np.int64)
    latents = []
    t = 0
    while t < T:
        hold = int(rng.integers(min_hold, max_hold + 1))
        indices[t : t + hold] = len(latents)
        latents.append(sample_prior(rng, d))
        t += hold
    return LatentSchedule(indices, np.array(latents), min_hold, max_hold)
