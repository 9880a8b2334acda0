"""Task training: a high-level policy picks latents for the frozen low-level policy.

The high-level policy acts in the unnormalized latent space; its samples are
projected to the unit sphere before the low-level policy sees them. Each
high-level decision is held for ``hold_steps`` control steps and earns the
sum of the per-step rewards ``w_goal * task + w_style * style`` over that window.

RNG streams: ``SeedSequence(seed).spawn(2 + n_envs)`` yields the init stream,
the update stream and one stream per env (resets, goals, latent noise).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import env as envmod
from .adversarial import net_input, style_reward
from .env import GOAL_DIMS, OBS_DIM, TASKS, CharState, TaskGoal
from .errors import ConfigError, TrainingFault
from .latent import MIN_RAW_NORM, sample_prior
from .models import HighLevelModel, LowLevelModel
from .nncore import AdamState, GaussianPolicy, MlpSpec, ValueFunction
from .rl import PPOConfig, PPOState, TrajectoryBuffer, ppo_update

log = logging.getLogger(__name__)

TASK_METRIC_FIELDS = ("iteration", "task_reward_mean", "style_reward_mean", "normalized_return")
RESAMPLE_GOAL_TASKS = ("reach", "speed", "steering")


@dataclass(frozen=True)
class TaskTrainConfig:
    task: str = "location"
    w_goal: float = 0.9
    w_style: float = 0.1
    hold_steps: int = 5
    iterations: int = 100
    n_envs: int = 32
    episode_len: int = 300
    goal_resample: int = 150
    fall_prob: float = 0.0
    hidden: tuple = (128, 64)
    action_var: float = 0.01
    stepsize: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    td_lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(x) for x in self.hidden))
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.hold_steps < 1:
            raise ConfigError("hold_steps must be >= 1")
        if self.episode_len % self.hold_steps:
            raise ConfigError("episode_len must be a multiple of hold_steps")
        if self.n_envs < 1 or self.goal_resample < 1:
            raise ConfigError("n_envs and goal_resample must be >= 1")

    @property
    def ppo(self) -> PPOConfig:
        return PPOConfig(self.gamma, self.lam, self.td_lam, self.clip, self.epochs, self.minibatches, self.stepsize)

    @property
    def decisions_per_episode(self) -> int:
        return self.episode_len // self.hold_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def hlp_input(llp: LowLevelModel, obs, goal_feats) -> np.ndarray:
    return np.concatenate([net_input(llp.stats, obs), np.asarray(goal_feats)], axis=-1).astype(np.float32)


def hlp_act(policy: GaussianPolicy, x, rng: np.random.Generator | None = None, noise=None):
    """Sample unnormalized latents; returns ``(z_raw, z_unit, logp(z_raw))``.

    Rows whose raw sample is too short to project are redrawn from ``rng``.
    With neither ``rng`` nor ``noise`` the mean is used.
    """
    mu = policy.mean(x).astype(np.float64)
    squeeze = mu.ndim == 1
    mu = np.atleast_2d(mu)
    if noise is None:
        noise = np.zeros_like(mu) if rng is None else rng.standard_normal(mu.shape)
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64)).copy()
    z_raw = mu + policy.head.std * noise
    norms = np.linalg.norm(z_raw, axis=-1)
    while np.any(norms <= MIN_RAW_NORM):
        if rng is None:
            raise ConfigError("high-level mean is at the origin; pass an rng to resample")
        bad = norms <= MIN_RAW_NORM
        z_raw[bad] = mu[bad] + policy.head.std * rng.standard_normal((int(bad.sum()), mu.shape[1]))
        norms = np.linalg.norm(z_raw, axis=-1)
    z = z_raw / norms[:, None]
    logp = policy.logprob(np.atleast_2d(x), z_raw) if np.ndim(x) > 1 else policy.logprob(x, z_raw[0])
    if squeeze:
        return z_raw[0], z[0], float(np.asarray(logp).reshape(-1)[0])
    return z_raw, z, logp


def hlp_reward(llp: LowLevelModel, task: str, state: CharState, action, next_state: CharState, goal: TaskGoal,
               w_goal: float, w_style: float):
    """Weighted task reward plus the frozen discriminator's style reward; returns (total, task, style)."""
    cfg = llp.env_config
    r_task = np.asarray(envmod.task_reward(task, state, action, next_state, goal, cfg), dtype=np.float64)
    s_bar = net_input(llp.stats, envmod.observe(state, cfg))
    s2_bar = net_input(llp.stats, envmod.observe(next_state, cfg))
    r_style = np.asarray(style_reward(llp.discenc, s_bar, s2_bar), dtype=np.float64)
    return w_goal * r_task + w_style * r_style, r_task, r_style


def build_high_level(cfg: TaskTrainConfig, latent_dim: int, rng: np.random.Generator) -> HighLevelModel:
    in_dim = OBS_DIM + GOAL_DIMS[cfg.task]
    policy = GaussianPolicy.create(MlpSpec(in_dim, cfg.hidden, latent_dim), cfg.action_var, rng)
    value = ValueFunction.create(MlpSpec(in_dim, cfg.hidden, 1), rng)
    return HighLevelModel(cfg.task, policy, value, latent_dim)


class TaskEnvs:
    """Batched episodes of one task, reset in lockstep at episode boundaries."""

    def __init__(self, task: str, llp: LowLevelModel, rngs, fall_prob: float):
        self.task, self.llp, self.rngs, self.fall_prob = task, llp, rngs, fall_prob
        self.reset()

    def reset(self):
        cfg = self.llp.env_config
        states = [envmod.reset(cfg, r, self.fall_prob) for r in self.rngs]
        self.states = envmod.stack_states(states)
        self.goal = TaskGoal.stack([envmod.sample_goal(self.task, r, s, cfg) for r, s in zip(self.rngs, states)])
        self.alive = np.ones(len(self.rngs), dtype=bool)

    def resample_goals(self):
        cfg = self.llp.env_config
        for i, r in enumerate(self.rngs):
            self.goal.assign(i, envmod.sample_goal(self.task, r, self.states.take(i), cfg))

    def features(self) -> np.ndarray:
        return envmod.goal_features(self.goal, self.states)

    def hold(self, z: np.ndarray, n_steps: int, w_goal: float, w_style: float):
        """Run the frozen low-level policy ``n_steps`` with latents ``z``; rewards of finished envs are zero."""
        llp, cfg = self.llp, self.llp.env_config
        total = np.zeros(len(z))
        task_sum = np.zeros(len(z))
        style_sum = np.zeros(len(z))
        for _ in range(n_steps):
            obs = envmod.observe(self.states, cfg)
            a = llp.act(obs, z)
            nxt = envmod.step(self.states, a, cfg)
            goal = envmod.advance_goal(self.goal, self.states, nxt, cfg)
            r, rt, rs = hlp_reward(llp, self.task, self.states, a, nxt, goal, w_goal, w_style)
            live = self.alive.astype(np.float64)
            total += live * r
            task_sum += live * rt
            style_sum += live * rs
            self.states, self.goal = nxt, goal
            self.alive &= ~envmod.episode_terminated(self.task, nxt, goal, cfg)
        return total, task_sum, style_sum


def _seeds(seed: int, n_envs: int):
    seqs = np.random.SeedSequence(seed).spawn(2 + n_envs)
    return (np.random.default_rng(seqs[0]), np.random.default_rng(seqs[1]),
            [np.random.default_rng(s) for s in seqs[2:]])


def _frozen_digest(llp: LowLevelModel) -> bytes:
    return b"".join(np.ascontiguousarray(v).tobytes() for _, v in sorted(llp.net_arrays().items()))


def run_task_training(llp: LowLevelModel, cfg: TaskTrainConfig, out_dir=None, progress=None):
    """Train a high-level policy for ``cfg.task``; returns ``(HighLevelModel, metric rows)``."""
    init_rng, update_rng, env_rngs = _seeds(cfg.seed, cfg.n_envs)
    hl = build_high_level(cfg, llp.latent_dim, init_rng)
    opt = PPOState(AdamState.fresh(hl.policy.params, cfg.stepsize), AdamState.fresh(hl.value.params, cfg.stepsize))
    before = _frozen_digest(llp)
    envs = TaskEnvs(cfg.task, llp, env_rngs, cfg.fall_prob)
    resample_every = cfg.goal_resample // cfg.hold_steps if cfg.task in RESAMPLE_GOAL_TASKS else 0
    rows = []
    obs_cfg = llp.env_config
    for it in range(1, cfg.iterations + 1):
        envs.reset()
        rec = {k: [] for k in ("x", "zr", "logp", "v", "r", "done", "task", "style", "alive")}
        task_return = np.zeros(cfg.n_envs)
        for k in range(cfg.decisions_per_episode):
            if resample_every and k and k % resample_every == 0:
                envs.resample_goals()
            x = hlp_input(llp, envmod.observe(envs.states, obs_cfg), envs.features())
            noise = np.stack([r.standard_normal(llp.latent_dim) for r in env_rngs])
            z_raw, z, logp = hlp_act(hl.policy, x, update_rng, noise)
            alive = envs.alive.copy()
            r, rt, rs = envs.hold(z, cfg.hold_steps, cfg.w_goal, cfg.w_style)
            task_return += rt
            last = k == cfg.decisions_per_episode - 1
            done = ~envs.alive | last
            if last:
                # running out of time truncates the episode; bootstrap the envs still going
                x_end = hlp_input(llp, envmod.observe(envs.states, obs_cfg), envs.features())
                r = r + cfg.gamma * np.where(envs.alive, hl.value(x_end).astype(np.float64), 0.0)
            for key, val in (("x", x), ("zr", z_raw), ("logp", logp), ("v", hl.value(x)), ("r", r),
                             ("done", done.astype(np.float64)), ("task", rt), ("style", rs), ("alive", alive)):
                rec[key].append(val)
        st = {k: np.stack(v) for k, v in rec.items()}
        if not np.all(np.isfinite(st["r"])):
            raise TrainingFault(f"non-finite task reward at iteration {it}")
        buf = TrajectoryBuffer(st["x"], st["x"], st["zr"], st["r"], st["v"], st["logp"], st["done"],
                               np.zeros(cfg.n_envs))
        # decisions taken after an early termination carry no information
        ppo_update(hl.policy, hl.value, buf, cfg.ppo, opt, update_rng, valid=st["alive"])
        n_live_steps = st["alive"].sum() * cfg.hold_steps
        row = {
            "iteration": it,
            "task_reward_mean": float(st["task"].sum() / n_live_steps),
            "style_reward_mean": float(st["style"].sum() / n_live_steps),
            "normalized_return": float(np.mean(task_return) / cfg.episode_len),
        }
        rows.append(row)
        log.info("task %s iter %d task=%.3f style=%.3f", cfg.task, it, row["task_reward_mean"],
                 row["style_reward_mean"])
        if progress is not None:
            progress(row)
    if _frozen_digest(llp) != before:
        raise TrainingFault("low-level parameters changed during task training")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "task_metrics.csv").write_text(task_metrics_csv(rows))
        hl.save(out / f"hlp_{cfg.task}.ckpt", extra_manifest={"iteration": cfg.iterations, "config": cfg.to_dict()})
    return hl, rows


def task_metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TASK_METRIC_FIELDS)
    for r in rows:
        w.writerow([r["iteration"]] + [f"{r[k]:.9g}" for k in TASK_METRIC_FIELDS[1:]])
    return buf.getvalue()


def evaluate_task(llp: LowLevelModel, task: str, n_episodes: int, seed: int, hl: HighLevelModel | None = None,
                  hold_steps: int = 5, episode_len: int = 300):
    """Deterministic evaluation episodes.

    With ``hl`` the high-level mean picks latents; without it a fresh prior
    latent is drawn every hold window (random-latent baseline). Returns final
    root-to-target distances (NaN for tasks without a target) and mean task reward.
    """
    seqs = np.random.SeedSequence(seed).spawn(n_episodes + 1)
    latent_rng = np.random.default_rng(seqs[0])
    envs = TaskEnvs(task, llp, [np.random.default_rng(s) for s in seqs[1:]], 0.0)
    total_task = np.zeros(n_episodes)
    steps = episode_len // hold_steps
    for _ in range(steps):
        if hl is not None:
            x = hlp_input(llp, envmod.observe(envs.states, llp.env_config), envs.features())
            _, z, _ = hlp_act(hl.policy, x, latent_rng, np.zeros((n_episodes, llp.latent_dim)))
        else:
            z = sample_prior(latent_rng, llp.latent_dim, n_episodes)
        _, rt, _ = envs.hold(z, hold_steps, 1.0, 0.0)
        total_task += rt
    if envs.goal.target is not None:
        dist = np.linalg.norm(envs.goal.target - envs.states.position, axis=-1)
    else:
        dist = np.full(n_episodes, np.nan)
    return dist, total_task / episode_len
