"""GAE(lambda), TD(lambda) targets, the clipped PPO objective and the update loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, TrainingFault
from .nncore import (
    AdamState,
    GaussianPolicy,
    ValueFunction,
    adam_step,
    add_grads,
    gaussian_logprob,
    mlp_backward,
    mlp_forward,
)

ADV_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    td_lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    stepsize: float = 3e-4

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1 and 0 <= self.td_lam <= 1):
            raise ConfigError("gamma and lambdas must lie in [0, 1]")
        if self.clip <= 0:
            raise ConfigError("PPO clip must be positive")
        if self.epochs < 1 or self.minibatches < 1:
            raise ConfigError("epochs and minibatches must be >= 1")


@dataclass
class TrajectoryBuffer:
    """Time-major rollout storage; every array has leading shape ``(T, n_envs)``.

    ``policy_in`` / ``value_in`` are the exact network inputs used when acting,
    so the update can recompute log-probs without knowing how they were built.
    ``bootstrap`` holds V(s_T) per env for trajectories cut before termination.
    """

    policy_in: np.ndarray
    value_in: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    logp: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.rewards.shape
        for name in ("policy_in", "value_in", "actions", "values", "logp", "dones"):
            if getattr(self, name).shape[:2] != shape[:2]:
                raise ConfigError(f"buffer field {name} misaligned: {getattr(self, name).shape} vs {shape}")
        if self.bootstrap.shape != shape[1:]:
            raise ConfigError("bootstrap must have one value per env")

    @property
    def n_steps(self) -> int:
        return int(np.prod(self.rewards.shape))

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name) if hasattr(self, name) else self.extras[name]
        return arr.reshape((-1,) + arr.shape[2:])


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float) -> np.ndarray:
    """Backward GAE recursion; arrays are ``(T,)`` or ``(T, n_envs)``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    nonterm = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    next_v = np.asarray(bootstrap, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * nonterm[t] * next_v - values[t]
        last = delta + gamma * lam * nonterm[t] * last
        adv[t] = last
        next_v = values[t]
    return adv


def td_lambda_targets(rewards, values, dones, bootstrap, gamma: float, lam: float) -> np.ndarray:
    return compute_gae(rewards, values, dones, bootstrap, gamma, lam) + np.asarray(values, dtype=np.float64)


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(adv.std(), ADV_STD_FLOOR)


def ppo_policy_loss(logp_new, logp_old, advantages, clip: float, normalize: bool = True,
                    return_grad: bool = False):
    """-mean(min(rho A, clip(rho, 1-c, 1+c) A)), rho = exp(logp_new - logp_old).

    With ``return_grad`` also returns d loss / d logp_new and the clip fraction.
    """
    logp_new = np.asarray(logp_new, dtype=np.float64)
    adv = normalize_advantages(advantages) if normalize else np.asarray(advantages, dtype=np.float64)
    ratio = np.exp(logp_new - np.asarray(logp_old, dtype=np.float64))
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr1, surr2 = ratio * adv, clipped * adv
    loss = -float(np.mean(np.minimum(surr1, surr2)))
    if not return_grad:
        return loss
    # the unclipped branch is active when it is the smaller one
    active = surr1 <= surr2
    dlogp = np.where(active, -ratio * adv, 0.0) / len(adv)
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    return loss, dlogp, clip_frac


def value_loss(predictions, targets, return_grad: bool = False):
    """0.5 * mean squared error."""
    err = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    loss = 0.5 * float(np.mean(err**2))
    if return_grad:
        return loss, err / err.size
    return loss


def policy_loss_and_grads(policy: GaussianPolicy, policy_in, actions, logp_old, advantages, clip: float,
                          normalize: bool = True):
    """PPO loss and its parameter gradients for one minibatch."""
    mean, cache = mlp_forward(policy.spec, policy.params, policy_in)
    mean64 = mean.astype(np.float64)
    logp = gaussian_logprob(policy.head, mean64, actions)
    loss, dlogp, clip_frac = ppo_policy_loss(logp, logp_old, advantages, clip, normalize, return_grad=True)
    dmean = dlogp[:, None] * (np.asarray(actions) - mean64) / policy.head.var
    grads, _ = mlp_backward(policy.spec, policy.params, cache, dmean.astype(mean.dtype))
    ratio = np.exp(logp - logp_old)
    return loss, grads, {"ratio": float(np.mean(ratio)), "clip_frac": clip_frac}


def value_loss_and_grads(value_fn: ValueFunction, value_in, targets):
    pred, cache = mlp_forward(value_fn.spec, value_fn.params, value_in)
    loss, g = value_loss(pred[:, 0], targets, return_grad=True)
    grads, _ = mlp_backward(value_fn.spec, value_fn.params, cache, g[:, None].astype(pred.dtype))
    return loss, grads


ExtraLoss = Callable[[GaussianPolicy, dict, np.random.Generator], tuple]


@dataclass
class PPOState:
    policy_opt: AdamState
    value_opt: AdamState


def ppo_update(policy: GaussianPolicy, value_fn: ValueFunction, buffer: TrajectoryBuffer, config: PPOConfig,
               opt: PPOState, rng: np.random.Generator, extra_losses: dict[str, ExtraLoss] | None = None,
               valid=None):
    """Epochs x minibatches of Adam steps on the policy (PPO + extras) and value (MSE).

    Updates ``policy.params``, ``value_fn.params`` and ``opt`` in place and
    returns a dict of mean statistics. ``valid`` (shape ``(T, n_envs)``)
    drops rows from the minibatches after advantages have been computed.
    """
    extra_losses = extra_losses or {}
    adv = compute_gae(buffer.rewards, buffer.values, buffer.dones, buffer.bootstrap, config.gamma, config.lam)
    if config.td_lam == config.lam:
        targets = adv + buffer.values
    else:
        targets = td_lambda_targets(buffer.rewards, buffer.values, buffer.dones, buffer.bootstrap,
                                    config.gamma, config.td_lam)
    data = {
        "policy_in": buffer.flat("policy_in"),
        "value_in": buffer.flat("value_in"),
        "actions": buffer.flat("actions"),
        "logp": buffer.flat("logp"),
        "adv": adv.reshape(-1),
        "targets": targets.reshape(-1),
    }
    for k in buffer.extras:
        data[k] = buffer.flat(k)
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).reshape(-1)
        data = {k: v[keep] for k, v in data.items()}
    n = len(data["adv"])
    stats = {"policy_loss": [], "value_loss": [], "ratio": [], "clip_frac": []}
    for name in extra_losses:
        stats[name] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for mb_i, idx in enumerate(np.array_split(perm, config.minibatches)):
            mb = {k: v[idx] for k, v in data.items()}
            p_loss, p_grads, info = policy_loss_and_grads(
                policy, mb["policy_in"], mb["actions"], mb["logp"], mb["adv"], config.clip)
            for name, fn in extra_losses.items():
                e_loss, e_grads = fn(policy, mb, rng)
                p_grads = add_grads(p_grads, e_grads)
                stats[name].append(e_loss)
            v_loss, v_grads = value_loss_and_grads(value_fn, mb["value_in"], mb["targets"])
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                raise TrainingFault(f"non-finite PPO loss at epoch {epoch}, minibatch {mb_i}: "
                                    f"policy={p_loss}, value={v_loss}")
            policy.params, opt.policy_opt = adam_step(policy.params, p_grads, opt.policy_opt)
            value_fn.params, opt.value_opt = adam_step(value_fn.params, v_grads, opt.value_opt)
            stats["policy_loss"].append(p_loss)
            stats["value_loss"].append(v_loss)
            stats["ratio"].append(info["ratio"])
            stats["clip_frac"].append(info["clip_frac"])
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}
