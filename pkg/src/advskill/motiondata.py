"""Synthetic motion clips, dataset files, expert transitions and feature stats.

Clips are stored directly in observation-feature space (the same 11 features
that :func:`advskill.env.observe` produces), at 30 frames per second.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import FEATURE_NAMES, OBS_DIM, EnvConfig
from .errors import ConfigError

FPS = 30
FORMAT_VERSION = 1
STD_FLOOR = 1e-3
NOISE_AMPLITUDE = 0.02

CLIP_KINDS = ("walk", "run", "walk-back", "sidestep", "turn", "idle", "crouch-walk", "sword-swing")

# local (forward, lateral) root velocity and posture height per kind
_LOCOMOTION = {
    "walk": (1.2, 0.0, 1.0),
    "run": (3.5, 0.0, 1.0),
    "walk-back": (-1.0, 0.0, 1.0),
    "sidestep": (0.0, 1.0, 1.0),
    "crouch-walk": (1.0, 0.0, 0.5),
    "turn": (0.0, 0.0, 1.0),
    "idle": (0.0, 0.0, 1.0),
    "sword-swing": (0.0, 0.0, 1.0),
}
TURN_RATE = 1.5
SWING_FREQ = 0.75  # Hz
SWING_AMPS = (1.2, 0.8)
SWING_PHASE = 0.6


@dataclass
class MotionClip:
    name: str
    frames: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != OBS_DIM:
            raise ConfigError(f"clip {self.name!r}: frames must be (n, {OBS_DIM}), got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ConfigError(f"clip {self.name!r} needs at least 2 frames")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class MotionDataset:
    clips: list[MotionClip]
    stats: FeatureStats = field(init=False)

    def __post_init__(self):
        if not self.clips:
            raise ConfigError("dataset needs at least one clip")
        self.stats = compute_stats(self)
        # transition table: (clip index, frame index) of every consecutive pair
        self._clip_of = np.concatenate([np.full(len(c) - 1, i) for i, c in enumerate(self.clips)])
        self._frame_of = np.concatenate([np.arange(len(c) - 1) for c in self.clips])
        self._src = np.concatenate([c.frames[:-1] for c in self.clips])
        self._dst = np.concatenate([c.frames[1:] for c in self.clips])

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.clips]

    @property
    def n_frames(self) -> int:
        return sum(len(c) for c in self.clips)

    @property
    def n_transitions(self) -> int:
        return len(self._src)

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All consecutive pairs as ``(src, dst, clip_index)`` arrays, clip-major order."""
        return self._src, self._dst, self._clip_of


def _smooth_noise(rng, n, t, amplitude=NOISE_AMPLITUDE, n_waves=3):
    """Band-limited noise bounded by ``amplitude`` plus its time integral.

    Returns ``(signal, integral)`` each of shape ``(len(t), n)``.
    """
    freqs = rng.uniform(0.2, 1.0, size=(n_waves, n))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_waves, n))
    weights = rng.dirichlet(np.ones(n_waves), size=n).T  # columns sum to 1
    w = 2 * np.pi * freqs
    arg = w[None] * t[:, None, None] + phases[None]
    sig = amplitude * np.sum(weights[None] * np.sin(arg), axis=1)
    integ = amplitude * np.sum(weights[None] * (np.cos(phases)[None] - np.cos(arg)) / w[None], axis=1)
    return sig, integ


def generate_clip(kind: str, params: dict | None = None, rng: np.random.Generator | None = None,
                  env_config: EnvConfig | None = None) -> MotionClip:
    """Scripted clip of one behavior kind.

    ``params`` may set ``n_frames`` (default 120), ``sign`` (+1/-1; turn and
    sidestep direction) and ``name``.
    """
    if kind not in CLIP_KINDS:
        raise ConfigError(f"unknown clip kind {kind!r}; expected one of {CLIP_KINDS}")
    params = dict(params or {})
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = env_config or EnvConfig()
    n = int(params.get("n_frames", 120))
    if n < 2:
        raise ConfigError("n_frames must be >= 2")
    sign = float(params.get("sign", 1.0))
    t = np.arange(n) / FPS

    vf, vl, h = _LOCOMOTION[kind]
    if kind == "sidestep":
        vl *= sign
    omega = TURN_RATE * sign if kind == "turn" else 0.0

    # velocity channels get bounded smooth noise; joint angles integrate their noisy velocities
    vel_noise, _ = _smooth_noise(rng, 3, t)
    jvel_noise, jang_noise = _smooth_noise(rng, 2, t)

    q = np.zeros((n, 2))
    dq = np.zeros((n, 2))
    if kind == "sword-swing":
        w = 2 * np.pi * SWING_FREQ
        phase0 = rng.uniform(0, 2 * np.pi)
        for j, (amp, off) in enumerate(zip(SWING_AMPS, (0.0, SWING_PHASE))):
            q[:, j] = amp * np.sin(w * t + phase0 + off)
            dq[:, j] = amp * w * np.cos(w * t + phase0 + off)
    q += jang_noise
    dq += jvel_noise

    tip_x = cfg.link1 * np.cos(q[:, 0]) + cfg.link2 * np.cos(q[:, 0] + q[:, 1])
    tip_y = cfg.link1 * np.sin(q[:, 0]) + cfg.link2 * np.sin(q[:, 0] + q[:, 1])

    frames = np.column_stack([
        np.full(n, h), np.ones(n),
        vf + vel_noise[:, 0], vl + vel_noise[:, 1], omega + vel_noise[:, 2],
        q[:, 0], q[:, 1], dq[:, 0], dq[:, 1], tip_x, tip_y,
    ])
    return MotionClip(params.get("name", kind), frames)


def build_default_dataset(rng: np.random.Generator, clips_per_kind: int = 1,
                          kinds=CLIP_KINDS, n_frames: int = 120) -> MotionDataset:
    """Every kind ``clips_per_kind`` times; turn/sidestep alternate direction."""
    if clips_per_kind < 1:
        raise ConfigError("clips_per_kind must be >= 1")
    clips = []
    for kind in kinds:
        for i in range(clips_per_kind):
            name = kind if clips_per_kind == 1 else f"{kind}-{i}"
            sign = 1.0 if i % 2 == 0 else -1.0
            clips.append(generate_clip(kind, {"n_frames": n_frames, "sign": sign, "name": name}, rng))
    return MotionDataset(clips)


def compute_stats(dataset: MotionDataset) -> FeatureStats:
    allf = np.concatenate([c.frames for c in dataset.clips])
    mean = allf.mean(axis=0)
    std = np.maximum(allf.std(axis=0), STD_FLOOR)
    return FeatureStats(mean, std)


def normalize_features(stats: FeatureStats, s) -> np.ndarray:
    return (np.asarray(s, dtype=np.float64) - stats.mean) / stats.std


def denormalize_features(stats: FeatureStats, s_bar) -> np.ndarray:
    return np.asarray(s_bar, dtype=np.float64) * stats.std + stats.mean


def sample_expert_transitions(dataset: MotionDataset, rng: np.random.Generator, K: int):
    """``K`` consecutive-frame pairs drawn uniformly over all transitions.

    Returns ``(s, s_next)`` arrays of shape ``(K, 11)``.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    src, dst, _ = dataset.transitions()
    idx = rng.integers(0, len(src), size=K)
    return src[idx], dst[idx]


# ---------------------------------------------------------------- file format


def save_dataset(dataset: MotionDataset, path) -> None:
    doc = {
        "version": FORMAT_VERSION,
        "fps": FPS,
        "feature_names": list(FEATURE_NAMES),
        "clips": [{"name": c.name, "frames": c.frames.tolist()} for c in dataset.clips],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_dataset(path) -> MotionDataset:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset version {doc.get('version')!r}")
    if doc.get("fps") != FPS:
        raise ConfigError(f"dataset fps must be {FPS}, got {doc.get('fps')!r}")
    if list(doc.get("feature_names", [])) != list(FEATURE_NAMES):
        raise ConfigError("dataset feature_names do not match the observation layout")
    return MotionDataset([MotionClip(c["name"], c["frames"]) for c in doc["clips"]])
