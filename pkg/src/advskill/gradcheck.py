"""Central finite-difference checks of every hand-written gradient, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adversarial import DiscEncNet, diversity_loss_and_grads, disc_loss_and_grads, draw_latent_pairs, \
    encoder_loss_and_grads
from .errors import AdvSkillError
from .latent import sample_prior
from .nncore import GaussianPolicy, MlpSpec, ValueFunction, adam_step, AdamState
from .rl import policy_loss_and_grads, value_loss_and_grads

FD_STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    family: str
    instances: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)


def numeric_grads(loss_fn: Callable[[], float], params: dict, step: float = FD_STEP) -> dict:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params`` (perturbed in place)."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = loss_fn()
            flat[i] = old - step
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def relative_error(analytic: dict, numeric: dict) -> float:
    """||a - n|| / max(||a|| + ||n||, 1e-10) over all parameters jointly; missing entries count as zero."""
    names = sorted(set(analytic) | set(numeric))
    a = np.concatenate([np.ravel(analytic.get(k, np.zeros_like(numeric[k]))) for k in names])
    n = np.concatenate([np.ravel(numeric.get(k, np.zeros_like(analytic[k]))) for k in names])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-10))


def _jitter(params: dict, rng, scale=0.3):
    for k in params:
        params[k] = params[k] + scale * rng.standard_normal(params[k].shape)


def _disc_instance(rng):
    obs, d = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    trunk = tuple(int(x) for x in rng.integers(3, 7, size=int(rng.integers(1, 3))))
    net = DiscEncNet.create(obs, d, trunk, rng, dtype=np.float64)
    _jitter(net.params, rng)
    br, bf = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    real = (rng.standard_normal((br, obs)), rng.standard_normal((br, obs)))
    fake = (rng.standard_normal((bf, obs)), rng.standard_normal((bf, obs)))
    return net, real, fake, d


def check_discriminator(rng, w_gp: float = 5.0):
    net, real, fake, _ = _disc_instance(rng)
    _, g = disc_loss_and_grads(net, real, fake, w_gp)
    # only the params the discriminator update touches
    sub = {k: net.params[k] for k in net.disc_param_names()}
    n = numeric_grads(lambda: disc_loss_and_grads(net, real, fake, w_gp)[0], sub)
    return relative_error(g, n)


def check_encoder(rng):
    net, real, _, d = _disc_instance(rng)
    z = sample_prior(rng, d, len(real[0]))
    kappa = float(rng.uniform(0.5, 2.0))
    _, g = encoder_loss_and_grads(net, *real, z, kappa)
    sub = {k: net.params[k] for k in net.enc_param_names()}
    n = numeric_grads(lambda: encoder_loss_and_grads(net, *real, z, kappa)[0], sub)
    return relative_error(g, n)


def _policy_instance(rng, out_scale=1.0):
    in_dim, out_dim = int(rng.integers(3, 7)), int(rng.integers(2, 5))
    hidden = tuple(int(x) for x in rng.integers(3, 7, size=int(rng.integers(1, 3))))
    var = float(rng.uniform(0.05, 0.5))
    pol = GaussianPolicy.create(MlpSpec(in_dim, hidden, out_dim), var, rng, np.float64, out_scale)
    # zero-initialised biases would put rows with all-dead units exactly on a ReLU kink
    _jitter(pol.params, rng)
    return pol


def check_ppo_policy(rng):
    pol = _policy_instance(rng)
    b = int(rng.integers(4, 12))
    x = rng.standard_normal((b, pol.spec.input_dim))
    mu = pol.mean(x)
    actions = mu + pol.head.std * rng.standard_normal(mu.shape)
    # old log-probs off the current policy so some ratios sit outside the clip range
    logp_old = pol.logprob(x, actions) + rng.normal(0.0, 0.3, size=b)
    adv = rng.standard_normal(b)
    _, g, _ = policy_loss_and_grads(pol, x, actions, logp_old, adv, 0.2)
    n = numeric_grads(lambda: policy_loss_and_grads(pol, x, actions, logp_old, adv, 0.2)[0], pol.params)
    return relative_error(g, n)


def check_value(rng):
    in_dim = int(rng.integers(3, 7))
    hidden = tuple(int(x) for x in rng.integers(3, 7, size=int(rng.integers(1, 3))))
    vf = ValueFunction.create(MlpSpec(in_dim, hidden, 1), rng, np.float64)
    _jitter(vf.params, rng)
    b = int(rng.integers(3, 10))
    x, targets = rng.standard_normal((b, in_dim)), rng.standard_normal(b)
    _, g = value_loss_and_grads(vf, x, targets)
    n = numeric_grads(lambda: value_loss_and_grads(vf, x, targets)[0], vf.params)
    return relative_error(g, n)


def check_diversity(rng):
    d = int(rng.integers(2, 5))
    obs = int(rng.integers(2, 5))
    hidden = tuple(int(x) for x in rng.integers(3, 7, size=int(rng.integers(1, 3))))
    pol = GaussianPolicy.create(MlpSpec(obs + d, hidden, int(rng.integers(2, 5))), float(rng.uniform(0.05, 0.5)),
                                rng, np.float64, 1.0)
    _jitter(pol.params, rng)
    b = int(rng.integers(3, 9))
    states = rng.standard_normal((b, obs))
    pairs = draw_latent_pairs(rng, b, d)
    w = float(rng.uniform(0.01, 1.0))
    _, g = diversity_loss_and_grads(pol, states, None, w, d, pairs)
    n = numeric_grads(lambda: diversity_loss_and_grads(pol, states, None, w, d, pairs)[0], pol.params)
    return relative_error(g, n)


FAMILIES = {
    "discriminator+penalty": check_discriminator,
    "discriminator-bce": lambda rng: check_discriminator(rng, w_gp=0.0),
    "encoder": check_encoder,
    "ppo-policy": check_ppo_policy,
    "value": check_value,
    "diversity": check_diversity,
}


def run_grad_checks(n_instances: int = 100, seed: int = 0, families=None) -> list[CheckResult]:
    results = []
    for i, name in enumerate(families or FAMILIES):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        errs = [FAMILIES[name](rng) for _ in range(n_instances)]
        results.append(CheckResult(name, n_instances, max(errs)))
    return results


def nonfinite_guard_trips() -> bool:
    """True when a NaN gradient is refused by the optimizer and a NaN input by the discriminator loss."""
    rng = np.random.default_rng(0)
    net, real, fake, _ = _disc_instance(rng)
    bad = (real[0].copy(), real[1])
    bad[0][0, 0] = np.nan
    tripped = 0
    try:
        disc_loss_and_grads(net, bad, fake, 5.0)
    except AdvSkillError:
        tripped += 1
    params = {"w": np.ones(3)}
    try:
        adam_step(params, {"w": np.array([0.0, np.nan, 0.0])}, AdamState.fresh(params))
    except AdvSkillError:
        tripped += 1
    return tripped == 2
