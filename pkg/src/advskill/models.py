"""Trained-model bundles and their checkpoint round trip."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adversarial import DiscEncNet, net_input
from .checkpoint import load_checkpoint, save_checkpoint
from .env import ACTION_DIM, OBS_DIM, EnvConfig
from .errors import ConfigError
from .motiondata import FeatureStats
from .nncore import GaussianHead, GaussianPolicy, MlpSpec, ValueFunction


def pack(prefix: str, params: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unpack(prefix: str, arrays: dict) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


@dataclass
class LowLevelModel:
    """Skill-conditioned policy pi(a|s,z), its value function and the disc/encoder."""

    policy: GaussianPolicy
    value: ValueFunction
    discenc: DiscEncNet
    stats: FeatureStats
    env_config: EnvConfig

    @property
    def latent_dim(self) -> int:
        return self.discenc.latent_dim

    def policy_input(self, obs, z) -> np.ndarray:
        return np.concatenate([net_input(self.stats, obs), np.asarray(z)], axis=-1).astype(np.float32)

    def act(self, obs, z, noise=None) -> np.ndarray:
        """Mean action, or a sample when ``noise`` (standard normal draws) is given."""
        mu = self.policy.mean(self.policy_input(obs, z)).astype(np.float64)
        if noise is None:
            return mu
        return mu + self.policy.head.std * noise

    def net_arrays(self) -> dict:
        return {**pack("policy", self.policy.params), **pack("value", self.value.params),
                **pack("discenc", self.discenc.params)}

    def manifest(self) -> dict:
        return {
            "kind": "low-level",
            "latent_dim": self.latent_dim,
            "specs": {
                "policy": self.policy.spec.to_dict(),
                "value": self.value.spec.to_dict(),
                "discenc_trunk": list(self.discenc.trunk_dims),
            },
            "action_var": list(self.policy.head.variance),
            "feature_stats": self.stats.to_dict(),
            "env_config": self.env_config.__dict__,
        }

    def save(self, path, extra_arrays=None, extra_manifest=None) -> None:
        arrays = self.net_arrays()
        arrays.update(extra_arrays or {})
        man = self.manifest()
        man.update(extra_manifest or {})
        save_checkpoint(path, arrays, man)

    @classmethod
    def from_arrays(cls, arrays: dict, man: dict) -> "LowLevelModel":
        if man.get("kind") != "low-level":
            raise ConfigError("not a low-level checkpoint")
        specs = man["specs"]
        pspec = MlpSpec.from_dict(specs["policy"])
        vspec = MlpSpec.from_dict(specs["value"])
        policy = GaussianPolicy(pspec, unpack("policy", arrays), GaussianHead(ACTION_DIM, tuple(man["action_var"])))
        value = ValueFunction(vspec, unpack("value", arrays))
        discenc = DiscEncNet(OBS_DIM, man["latent_dim"], tuple(specs["discenc_trunk"]), unpack("discenc", arrays))
        return cls(policy, value, discenc, FeatureStats.from_dict(man["feature_stats"]),
                   EnvConfig(**man["env_config"]))

    @classmethod
    def load(cls, path, expect_latent_dim: int | None = None) -> "LowLevelModel":
        arrays, man = load_checkpoint(path, expect_latent_dim)
        return cls.from_arrays(arrays, man)


@dataclass
class HighLevelModel:
    """Task policy over unnormalized latents and its value function."""

    task: str
    policy: GaussianPolicy
    value: ValueFunction
    latent_dim: int

    def save(self, path, extra_arrays=None, extra_manifest=None) -> None:
        arrays = {**pack("hlp", self.policy.params), **pack("hlv", self.value.params)}
        arrays.update(extra_arrays or {})
        man = {
            "kind": "high-level",
            "task": self.task,
            "latent_dim": self.latent_dim,
            "specs": {"policy": self.policy.spec.to_dict(), "value": self.value.spec.to_dict()},
            "action_var": list(self.policy.head.variance),
        }
        man.update(extra_manifest or {})
        save_checkpoint(path, arrays, man)

    @classmethod
    def load(cls, path, expect_latent_dim: int | None = None) -> "HighLevelModel":
        arrays, man = load_checkpoint(path, expect_latent_dim)
        if man.get("kind") != "high-level":
            raise ConfigError("not a high-level checkpoint")
        pspec = MlpSpec.from_dict(man["specs"]["policy"])
        policy = GaussianPolicy(pspec, unpack("hlp", arrays), GaussianHead(pspec.output_dim, tuple(man["action_var"])))
        value = ValueFunction(MlpSpec.from_dict(man["specs"]["value"]), unpack("hlv", arrays))
        return cls(man["task"], policy, value, man["latent_dim"])
