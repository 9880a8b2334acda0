"""Behavior diagnostics for a trained low-level policy.

Nearest-clip transition matching, the clip coverage histogram, the
skill-to-skill transition matrix and the fall-recovery probe. Any function
that takes ``actor`` accepts either a :class:`LowLevelModel` (mean actions)
or a callable ``actor(states, z) -> actions`` for scripted baselines.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import env as envmod
from .env import CharState, EnvConfig
from .errors import ConfigError
from .latent import sample_prior
from .models import LowLevelModel
from .motiondata import FeatureStats, MotionDataset, normalize_features

Actor = Callable[[CharState, np.ndarray], np.ndarray]
COVERAGE_TRAJ_LEN = 90
SWITCH_RANGE = (150, 200)
RECOVERY_TIMEOUT = 300
IMPULSE_RANGE = (2.0, 6.0)
_QUERY_CHUNK = 256


def as_actor(actor: Union[LowLevelModel, Actor]) -> tuple[Actor, EnvConfig, int | None]:
    """Normalize to ``(callable, env config, latent dim or None)``."""
    if isinstance(actor, LowLevelModel):
        cfg = actor.env_config
        return (lambda states, z: actor.act(envmod.observe(states, cfg), z)), cfg, actor.latent_dim
    return actor, EnvConfig(), None


@dataclass
class MatchResult:
    clips: np.ndarray
    distances: np.ndarray
    majority: int


@dataclass
class TransitionMatrix:
    counts: np.ndarray

    @property
    def coverage(self) -> float:
        return float(np.count_nonzero(self.counts)) / self.counts.size


def _normalized_table(dataset: MotionDataset, stats: FeatureStats):
    src, dst, clip = dataset.transitions()
    return normalize_features(stats, src), normalize_features(stats, dst), clip


def _best(cost: np.ndarray, clip: np.ndarray) -> tuple[int, float]:
    best = cost.min()
    return int(clip[cost == best].min()), float(best)


def match_transition(dataset: MotionDataset, stats: FeatureStats, s, s_next) -> tuple[int, float]:
    """Clip holding the closest dataset transition to ``(s, s_next)`` and its squared distance.

    Distances are measured on normalized features; ties go to the lowest clip index.
    """
    a, b, clip = _normalized_table(dataset, stats)
    qa, qb = normalize_features(stats, s), normalize_features(stats, s_next)
    cost = np.sum((a - qa) ** 2, axis=1) + np.sum((b - qb) ** 2, axis=1)
    return _best(cost, clip)


def match_transitions(dataset: MotionDataset, stats: FeatureStats, s, s_next) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`match_transition` over rows of ``s`` and ``s_next``."""
    a, b, clip = _normalized_table(dataset, stats)
    qa, qb = normalize_features(stats, s), normalize_features(stats, s_next)
    n = len(qa)
    out_clip = np.empty(n, dtype=np.int64)
    out_dist = np.empty(n)
    for lo in range(0, n, _QUERY_CHUNK):
        hi = min(n, lo + _QUERY_CHUNK)
        cost = (np.sum((a[None] - qa[lo:hi, None]) ** 2, axis=2)
                + np.sum((b[None] - qb[lo:hi, None]) ** 2, axis=2))
        best = cost.min(axis=1, keepdims=True)
        # lowest clip among tied minima
        out_clip[lo:hi] = np.where(cost == best, clip[None], np.iinfo(np.int64).max).min(axis=1)
        out_dist[lo:hi] = best[:, 0]
    return out_clip, out_dist


def majority_clip(clips, n_clips: int) -> int:
    return int(np.argmax(np.bincount(np.asarray(clips), minlength=n_clips)))


def match_trajectory(dataset: MotionDataset, stats: FeatureStats, trajectory) -> MatchResult:
    """Match every consecutive pair of a ``(T, 11)`` feature trajectory."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or len(traj) < 2:
        raise ConfigError("a trajectory needs at least two frames")
    clips, dist = match_transitions(dataset, stats, traj[:-1], traj[1:])
    return MatchResult(clips, dist, majority_clip(clips, len(dataset.clips)))


def _rollout_features(actor: Actor, cfg: EnvConfig, states: CharState, latents: np.ndarray) -> np.ndarray:
    """Observations along a batched rollout; ``latents`` is ``(T, N, d)``. Returns ``(T + 1, N, 11)``."""
    feats = [envmod.observe(states, cfg)]
    for z in latents:
        states = envmod.step(states, actor(states, z), cfg)
        feats.append(envmod.observe(states, cfg))
    return np.stack(feats)


def _start_states(rng: np.random.Generator, n: int, cfg: EnvConfig) -> CharState:
    return envmod.stack_states([envmod.reset(cfg, rng, 0.0) for _ in range(n)])


def _latent_dim(d: int | None, latent_dim: int | None) -> int:
    d = d if d is not None else latent_dim
    if d is None:
        raise ConfigError("latent_dim is required for a scripted actor")
    return d


def coverage_histogram(actor, dataset: MotionDataset, n_trajs: int, rng: np.random.Generator,
                       traj_len: int = COVERAGE_TRAJ_LEN, stats: FeatureStats | None = None,
                       latent_dim: int | None = None) -> np.ndarray:
    """Per-clip counts of trajectory majority matches; each rollout holds one prior latent."""
    if n_trajs < 1 or traj_len < 1:
        raise ConfigError("n_trajs and traj_len must be >= 1")
    act, cfg, d = as_actor(actor)
    d = _latent_dim(d, latent_dim)
    stats = stats or dataset.stats
    states = _start_states(rng, n_trajs, cfg)
    z = sample_prior(rng, d, n_trajs)
    feats = _rollout_features(act, cfg, states, np.broadcast_to(z, (traj_len,) + z.shape))
    counts = np.zeros(len(dataset.clips), dtype=np.int64)
    for i in range(n_trajs):
        counts[match_trajectory(dataset, stats, feats[:, i]).majority] += 1
    return counts


def transition_matrix(actor, dataset: MotionDataset, n_trajs: int, rng: np.random.Generator,
                      switch_range=SWITCH_RANGE, dest_len: int = COVERAGE_TRAJ_LEN,
                      stats: FeatureStats | None = None, latent_dim: int | None = None) -> TransitionMatrix:
    """Source-to-destination clip counts for rollouts that switch latent once.

    Each rollout holds a source latent for a uniform number of steps in
    ``switch_range`` (inclusive) and then a destination latent for ``dest_len``
    steps; the two segments are matched separately.
    """
    if n_trajs < 1:
        raise ConfigError("n_trajs must be >= 1")
    act, cfg, d = as_actor(actor)
    d = _latent_dim(d, latent_dim)
    stats = stats or dataset.stats
    lo, hi = switch_range
    states = _start_states(rng, n_trajs, cfg)
    z_src = sample_prior(rng, d, n_trajs)
    z_dst = sample_prior(rng, d, n_trajs)
    switch = rng.integers(lo, hi + 1, size=n_trajs)
    total = hi + dest_len
    steps = np.arange(total)[:, None]
    latents = np.where((steps < switch[None])[..., None], z_src[None], z_dst[None])
    feats = _rollout_features(act, cfg, states, latents)
    C = len(dataset.clips)
    counts = np.zeros((C, C), dtype=np.int64)
    for i in range(n_trajs):
        k = switch[i]
        src = match_trajectory(dataset, stats, feats[: k + 1, i]).majority
        dst = match_trajectory(dataset, stats, feats[k : k + dest_len + 1, i]).majority
        counts[src, dst] += 1
    return TransitionMatrix(counts)


@dataclass
class RecoveryResult:
    impulses: np.ndarray
    steps: np.ndarray
    success: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success))


def recovery_probe(actor, n_trials: int, rng: np.random.Generator, impulse_range=IMPULSE_RANGE,
                   timeout: int = RECOVERY_TIMEOUT, latent_dim: int | None = None,
                   env_config: EnvConfig | None = None) -> RecoveryResult:
    """Push a standing character and count control steps until it is upright again.

    Impulse magnitude is uniform in ``impulse_range`` with a uniform direction;
    each trial holds one prior latent. Trials still down after ``timeout``
    steps report ``timeout`` and fail.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    act, cfg, d = as_actor(actor)
    cfg = env_config or cfg
    d = _latent_dim(d, latent_dim)
    states = _start_states(rng, n_trials, cfg)
    mag = rng.uniform(impulse_range[0], impulse_range[1], size=n_trials)
    ang = rng.uniform(-np.pi, np.pi, size=n_trials)
    impulse = mag[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    z = sample_prior(rng, d, n_trials)
    states = envmod.apply_perturbation(states, impulse, cfg)
    steps = np.full(n_trials, timeout, dtype=np.int64)
    done = envmod.is_recovered(states, cfg)
    steps[done] = 0
    for t in range(1, timeout + 1):
        if done.all():
            break
        states = envmod.step(states, act(states, z), cfg)
        now = envmod.is_recovered(states, cfg) & ~done
        steps[now] = t
        done |= now
    return RecoveryResult(mag, steps, done.copy())


# ---------------------------------------------------------------- CSV writers


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def coverage_csv(dataset: MotionDataset, counts) -> str:
    return _csv(("clip_name", "count"), [(c.name, int(n)) for c, n in zip(dataset.clips, counts)])


def transitions_csv(dataset: MotionDataset, tm: TransitionMatrix) -> str:
    names = dataset.names
    rows = [(names[i], names[j], int(tm.counts[i, j])) for i in range(len(names)) for j in range(len(names))]
    return _csv(("source", "dest", "count"), rows) + f"# coverage,{tm.coverage:.6f}\n"


def recovery_csv(result: RecoveryResult) -> str:
    rows = [(i, f"{m:.6f}", int(s), int(ok)) for i, (m, s, ok) in
            enumerate(zip(result.impulses, result.steps, result.success))]
    return _csv(("trial", "impulse", "steps", "success"), rows)
