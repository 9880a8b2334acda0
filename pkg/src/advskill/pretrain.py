"""Low-level pre-training loop: latent-scheduled rollouts, encoder and
discriminator updates, then PPO on the combined style + skill reward.

RNG streams: ``SeedSequence(seed).spawn(3 + n_envs)`` gives, in order, the
network-initialisation stream, the update stream (minibatch shuffles,
discriminator/encoder batches, diversity latents), an evaluation stream, and
one stream per environment (resets, latent schedules, action noise). Env
streams are consumed in env-index order, so results do not depend on how
rollouts are scheduled.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import env as envmod
from .adversarial import DiscEncNet, PretrainHyper, diversity_loss_and_grads, disc_loss_and_grads, \
    encoder_loss_and_grads, net_input, pretrain_reward_terms
from .checkpoint import load_checkpoint, rng_from_state, rng_state
from .env import ACTION_DIM, ACTION_HIGH, ACTION_LOW, OBS_DIM, CharState, EnvConfig
from .errors import ConfigError, TrainingFault
from .latent import LatentSchedule, make_schedule, sample_prior
from .models import LowLevelModel, pack, unpack
from .motiondata import MotionDataset, sample_expert_transitions
from .nncore import AdamState, GaussianPolicy, MlpSpec, ValueFunction, adam_step
from .rl import PPOConfig, PPOState, TrajectoryBuffer, ppo_update

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "samples", "style_reward", "skill_reward", "disc_acc", "enc_score",
                 "div_loss", "policy_loss", "value_loss", "clip_frac")


@dataclass(frozen=True)
class PretrainRunConfig:
    n_envs: int = 64
    iterations: int = 200
    steps_per_iter: int = 150
    episode_len: int = 300
    fall_prob: float = 0.1
    min_hold: int = 1
    max_hold: int = 150
    latent_dim: int = 8
    policy_hidden: tuple = (256, 128)
    value_hidden: tuple = (256, 128)
    disc_hidden: tuple = (128, 128)
    action_var: float = 0.0025
    beta: float = 0.5
    w_gp: float = 5.0
    w_div: float = 0.01
    kappa: float = 1.0
    disc_steps: int = 2
    disc_batch: int = 1024
    stepsize: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    td_lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    checkpoint_every: int = 0
    seed: int = 0
    preset: str = "desk"
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        for name in ("policy_hidden", "value_hidden", "disc_hidden"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        if self.n_envs < 1 or self.steps_per_iter < 1 or self.episode_len < 1:
            raise ConfigError("n_envs, steps_per_iter and episode_len must be >= 1")
        if not 1 <= self.min_hold <= self.max_hold <= self.episode_len:
            raise ConfigError("need 1 <= min_hold <= max_hold <= episode_len")
        if self.disc_batch < 1 or self.disc_steps < 0:
            raise ConfigError("disc_batch must be >= 1 and disc_steps >= 0")

    @property
    def samples_per_iter(self) -> int:
        return self.n_envs * self.steps_per_iter

    @property
    def hyper(self) -> PretrainHyper:
        return PretrainHyper(self.beta, self.w_gp, self.w_div, self.kappa, latent_dim=self.latent_dim)

    @property
    def ppo(self) -> PPOConfig:
        return PPOConfig(self.gamma, self.lam, self.td_lam, self.clip, self.epochs, self.minibatches, self.stepsize)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"] = asdict(self.env)
        for k in ("policy_hidden", "value_hidden", "disc_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainRunConfig":
        d = dict(d)
        d["env"] = EnvConfig(**d.get("env", {}))
        return cls(**d)


def build_model(cfg: PretrainRunConfig, dataset: MotionDataset, rng: np.random.Generator) -> LowLevelModel:
    d = cfg.latent_dim
    policy = GaussianPolicy.create(MlpSpec(OBS_DIM + d, cfg.policy_hidden, ACTION_DIM), cfg.action_var, rng)
    # start every action at the middle of its range; for the one-sided balance effort that is 0.5, not the clip edge
    out_bias = f"b{len(cfg.policy_hidden)}"
    centre = (ACTION_LOW + ACTION_HIGH) / 2
    policy.params[out_bias] = (policy.params[out_bias] + centre).astype(policy.params[out_bias].dtype)
    value = ValueFunction.create(MlpSpec(OBS_DIM + d, cfg.value_hidden, 1), rng)
    discenc = DiscEncNet.create(OBS_DIM, d, cfg.disc_hidden, rng)
    return LowLevelModel(policy, value, discenc, dataset.stats, cfg.env)


def _subset(params, names):
    return {k: params[k] for k in names}


class PretrainRun:
    """Mutable state of one pre-training run; :meth:`iterate` runs one Algorithm-style iteration."""

    def __init__(self, cfg: PretrainRunConfig, dataset: MotionDataset):
        self.cfg = cfg
        self.dataset = dataset
        seqs = np.random.SeedSequence(cfg.seed).spawn(3 + cfg.n_envs)
        init_rng = np.random.default_rng(seqs[0])
        self.update_rng = np.random.default_rng(seqs[1])
        self.eval_rng = np.random.default_rng(seqs[2])
        self.env_rngs = [np.random.default_rng(s) for s in seqs[3:]]
        self.model = build_model(cfg, dataset, init_rng)
        m = self.model
        self.ppo_opt = PPOState(AdamState.fresh(m.policy.params, cfg.stepsize),
                                AdamState.fresh(m.value.params, cfg.stepsize))
        self.enc_names = m.discenc.enc_param_names()
        self.disc_names = m.discenc.disc_param_names()
        self.enc_opt = AdamState.fresh(_subset(m.discenc.params, self.enc_names), cfg.stepsize)
        self.disc_opt = AdamState.fresh(_subset(m.discenc.params, self.disc_names), cfg.stepsize)
        self.iteration = 0
        self.samples = 0
        self.metrics: list[dict] = []
        states, self.schedules = [], []
        for i in range(cfg.n_envs):
            s, sched = self._reset_env(i)
            states.append(s)
            self.schedules.append(sched)
        self.states = envmod.stack_states(states)
        self.t = np.zeros(cfg.n_envs, dtype=np.int64)

    # ------------------------------------------------------------ rollouts

    def _reset_env(self, i: int) -> tuple[CharState, LatentSchedule]:
        cfg = self.cfg
        rng = self.env_rngs[i]
        s = envmod.reset(cfg.env, rng, cfg.fall_prob)
        sched = make_schedule(rng, cfg.episode_len, cfg.min_hold, cfg.max_hold, cfg.latent_dim)
        return s, sched

    def _latents(self) -> np.ndarray:
        return np.stack([sch.at(int(t)) for sch, t in zip(self.schedules, self.t)])

    def collect_rollouts(self) -> TrajectoryBuffer:
        cfg, m = self.cfg, self.model
        T, N, d = cfg.steps_per_iter, cfg.n_envs, cfg.latent_dim
        rec = {k: [] for k in ("pin", "act", "logp", "val", "rew", "done", "s", "s2", "z", "style", "skill", "score")}
        hyper = cfg.hyper
        for _ in range(T):
            obs = envmod.observe(self.states, cfg.env)
            z = self._latents()
            s_bar = net_input(m.stats, obs).astype(np.float32)
            pin = np.concatenate([s_bar, z.astype(np.float32)], axis=1)
            noise = np.stack([r.standard_normal(ACTION_DIM) for r in self.env_rngs])
            a, _, logp = m.policy.sample(pin, noise)
            v = m.value(pin)
            nxt = envmod.step(self.states, a, cfg.env)
            s2_bar = net_input(m.stats, envmod.observe(nxt, cfg.env)).astype(np.float32)
            style, skill, score = pretrain_reward_terms(m.discenc, s_bar, s2_bar, z, hyper)
            self.t += 1
            done = self.t >= cfg.episode_len
            rew = style + skill
            if done.any():
                # the time limit is a truncation, not a terminal state: fold V(s_T) into the last reward
                v_end = m.value(np.concatenate([s2_bar, z.astype(np.float32)], axis=1)).astype(np.float64)
                rew = rew + cfg.gamma * np.where(done, v_end, 0.0)
            for k, val in (("pin", pin), ("act", a), ("logp", logp), ("val", v), ("rew", rew),
                           ("done", done.astype(np.float64)), ("s", s_bar), ("s2", s2_bar), ("z", z),
                           ("style", style), ("skill", skill), ("score", score)):
                rec[k].append(val)
            arr = nxt.as_array()
            for i in np.flatnonzero(done):
                s, self.schedules[i] = self._reset_env(i)
                arr[i] = s.as_array()
                self.t[i] = 0
            self.states = CharState.from_array(arr)
        obs = envmod.observe(self.states, cfg.env)
        pin_last = np.concatenate([net_input(m.stats, obs), self._latents()], axis=1).astype(np.float32)
        bootstrap = m.value(pin_last)
        st = {k: np.stack(v) for k, v in rec.items()}
        if not np.all(np.isfinite(st["rew"])):
            raise TrainingFault(f"non-finite reward in iteration {self.iteration + 1}")
        return TrajectoryBuffer(
            policy_in=st["pin"], value_in=st["pin"], actions=st["act"], rewards=st["rew"], values=st["val"],
            logp=st["logp"], dones=st["done"], bootstrap=bootstrap,
            extras={"s_bar": st["s"], "s_next_bar": st["s2"], "z": st["z"], "style": st["style"],
                    "skill": st["skill"], "score": st["score"]},
        )

    # ------------------------------------------------------------ updates

    def update_encoder(self, buffer: TrajectoryBuffer, n_steps: int, K: int) -> dict:
        net = self.model.discenc
        s, s2, z = buffer.flat("s_bar"), buffer.flat("s_next_bar"), buffer.flat("z")
        losses = []
        for _ in range(n_steps):
            idx = self.update_rng.integers(0, len(s), size=K)
            loss, grads = encoder_loss_and_grads(net, s[idx], s2[idx], z[idx], self.cfg.kappa)
            sub, self.enc_opt = adam_step(_subset(net.params, self.enc_names), grads, self.enc_opt)
            net.params.update(sub)
            losses.append(loss)
        return {"enc_loss": float(np.mean(losses)) if losses else 0.0}

    def update_discriminator(self, buffer: TrajectoryBuffer, n_steps: int, K: int, w_gp: float) -> dict:
        net, stats = self.model.discenc, self.model.stats
        s, s2 = buffer.flat("s_bar"), buffer.flat("s_next_bar")
        losses, accs = [], []
        for b in range(n_steps):
            rs, rs2 = sample_expert_transitions(self.dataset, self.update_rng, K)
            real = (net_input(stats, rs).astype(np.float32), net_input(stats, rs2).astype(np.float32))
            idx = self.update_rng.integers(0, len(s), size=K)
            loss, grads, info = disc_loss_and_grads(net, real, (s[idx], s2[idx]), w_gp, batch_index=b,
                                                    return_info=True)
            sub, self.disc_opt = adam_step(_subset(net.params, self.disc_names), grads, self.disc_opt)
            net.params.update(sub)
            losses.append(loss)
            accs.append(info["acc"])
        return {"disc_loss": float(np.mean(losses)) if losses else 0.0,
                "disc_acc": float(np.mean(accs)) if accs else 0.5}

    def _diversity(self):
        cfg = self.cfg

        def extra(policy, mb, rng):
            return diversity_loss_and_grads(policy, mb["s_bar"], rng, cfg.w_div, cfg.latent_dim)

        return {"div_loss": extra} if cfg.w_div > 0 else {}

    def iterate(self) -> dict:
        cfg = self.cfg
        buf = self.collect_rollouts()
        self.update_encoder(buf, cfg.disc_steps, cfg.disc_batch)
        dstats = self.update_discriminator(buf, cfg.disc_steps, cfg.disc_batch, cfg.w_gp)
        pstats = ppo_update(self.model.policy, self.model.value, buf, cfg.ppo, self.ppo_opt, self.update_rng,
                            self._diversity())
        self.iteration += 1
        self.samples += buf.n_steps
        row = {
            "iteration": self.iteration,
            "samples": self.samples,
            "style_reward": float(np.mean(buf.extras["style"])),
            "skill_reward": float(np.mean(buf.extras["skill"])),
            "disc_acc": dstats["disc_acc"],
            "enc_score": float(np.mean(buf.extras["score"])),
            "div_loss": pstats.get("div_loss", 0.0),
            "policy_loss": pstats["policy_loss"],
            "value_loss": pstats["value_loss"],
            "clip_frac": pstats["clip_frac"],
        }
        for k, v in row.items():
            if not np.isfinite(v):
                raise TrainingFault(f"non-finite metric {k} at iteration {self.iteration}")
        self.metrics.append(row)
        return row

    # ------------------------------------------------------------ persistence

    def save(self, path) -> None:
        m = self.model
        arrays = m.net_arrays()
        arrays.update(_opt_arrays("opt_policy", self.ppo_opt.policy_opt))
        arrays.update(_opt_arrays("opt_value", self.ppo_opt.value_opt))
        arrays.update(_opt_arrays("opt_enc", self.enc_opt))
        arrays.update(_opt_arrays("opt_disc", self.disc_opt))
        run_state = {
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "samples": self.samples,
            "metrics": self.metrics,
            "opt_steps": {"policy": self.ppo_opt.policy_opt.step_count, "value": self.ppo_opt.value_opt.step_count,
                          "enc": self.enc_opt.step_count, "disc": self.disc_opt.step_count},
            "env_states": self.states.as_array().tolist(),
            "env_t": self.t.tolist(),
            "schedules": [{"indices": s.indices.tolist(), "latents": s.latents.tolist()} for s in self.schedules],
            "dataset_names": self.dataset.names,
        }
        rng = {"update": rng_state(self.update_rng), "eval": rng_state(self.eval_rng),
               "envs": [rng_state(r) for r in self.env_rngs]}
        m.save(path, extra_arrays={k: v for k, v in arrays.items() if "/" in k and k.startswith("opt_")},
               extra_manifest={"iteration": self.iteration, "rng_state": rng, "run_state": run_state})

    @classmethod
    def resume(cls, path, dataset: MotionDataset) -> "PretrainRun":
        arrays, man = load_checkpoint(path)
        rs = man.get("run_state")
        if rs is None:
            raise ConfigError(f"{path} has no resumable run state")
        cfg = PretrainRunConfig.from_dict(rs["config"])
        if rs["dataset_names"] != dataset.names:
            raise ConfigError("dataset does not match the one used by the checkpointed run")
        run = cls.__new__(cls)
        run.cfg, run.dataset = cfg, dataset
        run.model = LowLevelModel.from_arrays(arrays, man)
        if not np.array_equal(run.model.stats.mean, dataset.stats.mean):
            raise ConfigError("dataset feature statistics differ from the checkpoint")
        steps = rs["opt_steps"]
        run.ppo_opt = PPOState(_opt_from(arrays, "opt_policy", steps["policy"], cfg.stepsize),
                               _opt_from(arrays, "opt_value", steps["value"], cfg.stepsize))
        run.enc_opt = _opt_from(arrays, "opt_enc", steps["enc"], cfg.stepsize)
        run.disc_opt = _opt_from(arrays, "opt_disc", steps["disc"], cfg.stepsize)
        run.enc_names = run.model.discenc.enc_param_names()
        run.disc_names = run.model.discenc.disc_param_names()
        run.iteration, run.samples, run.metrics = rs["iteration"], rs["samples"], rs["metrics"]
        rng = man["rng_state"]
        run.update_rng = rng_from_state(rng["update"])
        run.eval_rng = rng_from_state(rng["eval"])
        run.env_rngs = [rng_from_state(s) for s in rng["envs"]]
        run.states = CharState.from_array(np.array(rs["env_states"], dtype=np.float64))
        run.t = np.array(rs["env_t"], dtype=np.int64)
        run.schedules = [LatentSchedule(np.array(s["indices"], dtype=np.int64), np.array(s["latents"]),
                                        cfg.min_hold, cfg.max_hold) for s in rs["schedules"]]
        return run


def _opt_arrays(prefix: str, st: AdamState) -> dict:
    out = {f"{prefix}/m/{k}": v for k, v in st.first_moment.items()}
    out.update({f"{prefix}/v/{k}": v for k, v in st.second_moment.items()})
    return out


def _opt_from(arrays: dict, prefix: str, step: int, stepsize: float) -> AdamState:
    m = unpack(f"{prefix}/m", arrays)
    v = unpack(f"{prefix}/v", arrays)
    return AdamState(m, v, int(step), stepsize)


def metrics_csv(rows: list[dict], fields=METRIC_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([r[f] if isinstance(r[f], int) else f"{r[f]:.9g}" for f in fields])
    return buf.getvalue()


def run_pretraining(cfg: PretrainRunConfig, dataset: MotionDataset, out_dir=None, resume_from=None,
                    progress=None) -> PretrainRun:
    """Run (or continue) pre-training to ``cfg.iterations``.

    Writes ``metrics.csv`` and ``llp.ckpt`` (plus ``llp_iterNNNN.ckpt`` every
    ``checkpoint_every`` iterations) to ``out_dir`` when given.
    """
    run = PretrainRun.resume(resume_from, dataset) if resume_from else PretrainRun(cfg, dataset)
    if resume_from:
        run.cfg = replace(run.cfg, iterations=cfg.iterations)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while run.iteration < run.cfg.iterations:
        row = run.iterate()
        log.info("iter %d style=%.3f skill=%.3f acc=%.3f enc=%.3f", row["iteration"], row["style_reward"],
                 row["skill_reward"], row["disc_acc"], row["enc_score"])
        if progress is not None:
            progress(row)
        if out is not None:
            (out / "metrics.csv").write_text(metrics_csv(run.metrics))
            if run.cfg.checkpoint_every and run.iteration % run.cfg.checkpoint_every == 0:
                run.save(out / f"llp_iter{run.iteration:04d}.ckpt")
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(run.metrics))
        run.save(out / "llp.ckpt")
    return run


def encoder_score(model: LowLevelModel, rng: np.random.Generator, n_envs: int = 64, steps: int = 150,
                  warmup: int = 0) -> float:
    """Mean mu_q(s, s') . z over fresh rollouts, one prior latent held per rollout, mean actions."""
    cfg = model.env_config
    z = sample_prior(rng, model.latent_dim, n_envs)
    states = envmod.stack_states([envmod.standing_state(rng.uniform(-np.pi, np.pi)) for _ in range(n_envs)])
    scores = []
    for k in range(steps):
        obs = envmod.observe(states, cfg)
        nxt = envmod.step(states, model.act(obs, z), cfg)
        if k >= warmup:
            mu = model.discenc.encoder_mean(net_input(model.stats, obs), net_input(model.stats, envmod.observe(nxt, cfg)))
            scores.append(np.sum(mu.astype(np.float64) * z, axis=1))
        states = nxt
    return float(np.mean(scores))
