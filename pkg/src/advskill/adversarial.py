"""Discriminator, skill encoder, pre-training rewards and the diversity loss.

The discriminator D(s, s') and the encoder mean mu_q(s, s') share one ReLU
trunk with two output layers. The gradient penalty differentiates the
squared input-gradient norm of D with respect to the parameters by running
the backward pass of the input gradient a second time ("double backward");
with ReLU hidden units the activation masks are constant almost everywhere,
which keeps the second-order pass linear in each weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import latent
from .errors import TrainingFault
from .motiondata import FeatureStats, normalize_features
from .nncore import (
    SIGMOID_CLAMP,
    GaussianPolicy,
    MlpSpec,
    Params,
    add_grads,
    clamp_prob,
    gaussian_kl,
    init_params,
    mlp_backward,
    mlp_forward,
    sigmoid,
)

NET_INPUT_LINEAR = 3.0
_DEGENERATE_PAIR = 1e-3


def soft_clip(x, linear: float = NET_INPUT_LINEAR) -> np.ndarray:
    """Identity on [-linear, linear], logarithmic growth outside; strictly monotone.

    Features that never vary in the dataset get a tiny floored std, so their
    normalized values can reach the hundreds. A hard clip would make every such
    state look the same; the log tail keeps them ordered.
    """
    x = np.asarray(x, dtype=np.float64)
    excess = np.maximum(np.abs(x) - linear, 0.0)
    return np.where(excess > 0, np.sign(x) * (linear + np.log1p(excess)), x)


def net_input(stats: FeatureStats, s) -> np.ndarray:
    """Dataset-normalized features passed through :func:`soft_clip`, the form every network sees."""
    return soft_clip(normalize_features(stats, s))


@dataclass(frozen=True)
class PretrainHyper:
    beta: float = 0.5
    w_gp: float = 5.0
    w_div: float = 0.01
    kappa: float = 1.0
    clamp_eps: float = SIGMOID_CLAMP
    latent_dim: int = 8

    def __post_init__(self):
        from .errors import ConfigError

        if min(self.beta, self.w_gp, self.w_div) < 0 or self.kappa <= 0:
            raise ConfigError("need beta, w_gp, w_div >= 0 and kappa > 0")


def _sub(params: Params, prefix: str) -> Params:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + "/")}


def _pre(grads: Params, prefix: str) -> Params:
    return {f"{prefix}/{k}": v for k, v in grads.items()}


@dataclass
class DiscEncNet:
    obs_dim: int
    latent_dim: int
    trunk_dims: tuple[int, ...]
    params: Params

    @classmethod
    def create(cls, obs_dim: int, latent_dim: int, trunk_dims, rng: np.random.Generator,
               dtype=np.float32) -> "DiscEncNet":
        net = cls(obs_dim, latent_dim, tuple(trunk_dims), {})
        p = {}
        p.update(_pre(init_params(net.trunk_spec, rng, dtype), "trunk"))
        p.update(_pre(init_params(net.disc_spec, rng, dtype), "disc"))
        p.update(_pre(init_params(net.enc_spec, rng, dtype), "enc"))
        net.params = p
        return net

    @property
    def trunk_spec(self) -> MlpSpec:
        return MlpSpec(2 * self.obs_dim, self.trunk_dims[:-1], self.trunk_dims[-1], "relu")

    @property
    def disc_spec(self) -> MlpSpec:
        return MlpSpec(self.trunk_dims[-1], (), 1, "linear")

    @property
    def enc_spec(self) -> MlpSpec:
        return MlpSpec(self.trunk_dims[-1], (), self.latent_dim, "unit-normalize")

    def disc_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("enc/")]

    def enc_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("disc/")]

    # -- forward pieces

    def _trunk(self, s_bar, s_next_bar, cache=True):
        x = np.concatenate([np.atleast_2d(s_bar), np.atleast_2d(s_next_bar)], axis=-1)
        return mlp_forward(self.trunk_spec, _sub(self.params, "trunk"), x, cache)

    def disc_logit(self, s_bar, s_next_bar) -> np.ndarray:
        h, _ = self._trunk(s_bar, s_next_bar, cache=False)
        return mlp_forward(self.disc_spec, _sub(self.params, "disc"), h, cache=False)[0][:, 0]

    def encoder_mean(self, s_bar, s_next_bar) -> np.ndarray:
        h, _ = self._trunk(s_bar, s_next_bar, cache=False)
        return mlp_forward(self.enc_spec, _sub(self.params, "enc"), h, cache=False)[0]

    def both(self, s_bar, s_next_bar):
        """(clamped D, encoder mean) from one trunk evaluation."""
        h, _ = self._trunk(s_bar, s_next_bar, cache=False)
        logit = mlp_forward(self.disc_spec, _sub(self.params, "disc"), h, cache=False)[0][:, 0]
        mu = mlp_forward(self.enc_spec, _sub(self.params, "enc"), h, cache=False)[0]
        return clamp_prob(sigmoid(logit)), mu


def _squeeze_like(x, out):
    return out[0] if np.ndim(x) == 1 else out


def disc_prob(net: DiscEncNet, s_bar, s_next_bar):
    return _squeeze_like(s_bar, clamp_prob(sigmoid(net.disc_logit(s_bar, s_next_bar))))


def encoder_mean(net: DiscEncNet, s_bar, s_next_bar):
    return _squeeze_like(s_bar, net.encoder_mean(s_bar, s_next_bar))


def style_reward(net: DiscEncNet, s_bar, s_next_bar):
    """-log(1 - D(s, s')) with D clamped to [eps, 1 - eps]."""
    return -np.log1p(-disc_prob(net, s_bar, s_next_bar).astype(np.float64))


def skill_reward(net: DiscEncNet, s_bar, s_next_bar, z, beta: float, kappa: float):
    """beta * kappa * mu_q . z (vMF log-likelihood without its constant log-normalizer)."""
    mu = encoder_mean(net, s_bar, s_next_bar).astype(np.float64)
    return beta * kappa * np.sum(mu * np.asarray(z), axis=-1)


def pretrain_reward(net: DiscEncNet, s_bar, s_next_bar, z, hyper: PretrainHyper):
    d, mu = net.both(s_bar, s_next_bar)
    style = -np.log1p(-d.astype(np.float64))
    skill = hyper.beta * hyper.kappa * np.sum(mu.astype(np.float64) * np.atleast_2d(z), axis=-1)
    return _squeeze_like(s_bar, style + skill)


def pretrain_reward_terms(net: DiscEncNet, s_bar, s_next_bar, z, hyper: PretrainHyper):
    """Batched (style, skill, encoder score mu.z) arrays."""
    d, mu = net.both(s_bar, s_next_bar)
    style = -np.log1p(-d.astype(np.float64))
    score = np.sum(mu.astype(np.float64) * z, axis=-1)
    return style, hyper.beta * hyper.kappa * score, score


# ---------------------------------------------------------------- discriminator loss


def _penalty_double_backward(trunk_params: Params, disc_params: Params, masks, coef):
    """Input gradient of the logit and d/dtheta of sum_b coef_b * |grad_x logit_b|^2.

    Returns ``(input_grad, G, grads)`` where ``G[b] = |grad_x logit_b|^2`` and
    ``grads`` covers trunk weights and the disc head weight (biases get none).
    """
    L = len(masks)
    w_head = disc_params["W0"][:, 0]
    deltas = [None] * L
    deltas[L - 1] = masks[L - 1] * w_head
    for l in range(L - 1, 0, -1):
        deltas[l - 1] = (deltas[l] @ trunk_params[f"W{l}"].T) * masks[l - 1]
    gx = deltas[0] @ trunk_params["W0"].T
    G = np.sum(gx * gx, axis=1)

    dgx = 2.0 * coef[:, None] * gx
    grads = {"trunk/W0": dgx.T @ deltas[0]}
    d_delta = dgx @ trunk_params["W0"]
    for l in range(1, L):
        dt = d_delta * masks[l - 1]
        grads[f"trunk/W{l}"] = dt.T @ deltas[l]
        d_delta = dt @ trunk_params[f"W{l}"]
    grads["disc/W0"] = np.sum(d_delta * masks[L - 1], axis=0)[:, None]
    return gx, G, grads


def disc_loss_and_grads(net: DiscEncNet, real_batch, fake_batch, w_gp: float,
                        eps: float = SIGMOID_CLAMP, batch_index: int | None = None, return_info: bool = False):
    """Binary cross-entropy on real/fake transitions plus a gradient penalty on real ones.

    ``real_batch`` and ``fake_batch`` are ``(s_bar, s_next_bar)`` pairs of
    normalized features. The penalty is ``w_gp * mean_real |grad_x D|^2`` with
    ``D`` the sigmoid output and ``x`` the concatenated network input.
    """
    trunk_p, disc_p = _sub(net.params, "trunk"), _sub(net.params, "disc")
    ts, ds = net.trunk_spec, net.disc_spec

    h_r, c_tr = net._trunk(*real_batch)
    f_r, c_dr = mlp_forward(ds, disc_p, h_r)
    h_f, c_tf = net._trunk(*fake_batch)
    f_f, c_df = mlp_forward(ds, disc_p, h_f)
    f_r, f_f = f_r[:, 0], f_f[:, 0]
    br, bf = len(f_r), len(f_f)

    p_r, p_f = sigmoid(f_r), sigmoid(f_f)
    pr_c, pf_c = clamp_prob(p_r, eps), clamp_prob(p_f, eps)
    bce = -np.mean(np.log(pr_c.astype(np.float64))) - np.mean(np.log1p(-pf_c.astype(np.float64)))
    # gradients of the clamped logs vanish outside the clamp range
    in_r = (p_r > eps) & (p_r < 1 - eps)
    in_f = (p_f > eps) & (p_f < 1 - eps)
    df_r = np.where(in_r, -(1.0 - p_r), 0.0) / br
    df_f = np.where(in_f, p_f, 0.0) / bf

    loss = bce
    gp_grads = {}
    gp = 0.0
    if w_gp > 0:
        masks = c_tr.relu_masks()
        s = p_r * (1.0 - p_r)
        coef = (w_gp / br) * s * s
        _, G, gp_grads = _penalty_double_backward(trunk_p, disc_p, masks, coef)
        gp = float(np.mean(s.astype(np.float64) ** 2 * G))
        loss = bce + w_gp * gp
        # d(s^2)/df = 2 s * s(1 - 2p)
        df_r = df_r + (w_gp / br) * 2.0 * s * s * (1.0 - 2.0 * p_r) * G

    g_dr, gh_r = mlp_backward(ds, disc_p, c_dr, df_r[:, None].astype(h_r.dtype))
    g_df, gh_f = mlp_backward(ds, disc_p, c_df, df_f[:, None].astype(h_f.dtype))
    g_tr, _ = mlp_backward(ts, trunk_p, c_tr, gh_r)
    g_tf, _ = mlp_backward(ts, trunk_p, c_tf, gh_f)
    grads = add_grads(_pre(add_grads(g_dr, g_df), "disc"), _pre(add_grads(g_tr, g_tf), "trunk"))
    grads = add_grads(grads, gp_grads)
    grads = {k: np.asarray(v, dtype=net.params[k].dtype) for k, v in grads.items()}

    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        where = "" if batch_index is None else f" at batch {batch_index}"
        raise TrainingFault(f"non-finite discriminator loss/gradient{where}")
    if return_info:
        acc = 0.5 * (np.mean(p_r > 0.5) + np.mean(p_f < 0.5))
        return float(loss), grads, {"bce": float(bce), "gp": gp, "acc": float(acc),
                                    "d_real": float(np.mean(p_r)), "d_fake": float(np.mean(p_f))}
    return float(loss), grads


def disc_input_grad(net: DiscEncNet, s_bar, s_next_bar) -> np.ndarray:
    """grad_x D for each row (x = concatenated input); used by tests and diagnostics."""
    h, c_t = net._trunk(s_bar, s_next_bar)
    disc_p = _sub(net.params, "disc")
    f = mlp_forward(net.disc_spec, disc_p, h, cache=False)[0][:, 0]
    p = sigmoid(f)
    gx, _, _ = _penalty_double_backward(_sub(net.params, "trunk"), disc_p, c_t.relu_masks(), np.zeros(len(f)))
    return (p * (1 - p))[:, None] * gx


# ---------------------------------------------------------------- encoder loss


def encoder_loss_and_grads(net: DiscEncNet, s_bar, s_next_bar, z, kappa: float):
    """-kappa * mean(mu_q . z); gradients touch the trunk and encoder head."""
    trunk_p, enc_p = _sub(net.params, "trunk"), _sub(net.params, "enc")
    h, c_t = net._trunk(s_bar, s_next_bar)
    mu, c_e = mlp_forward(net.enc_spec, enc_p, h)
    z = np.atleast_2d(z)
    b = len(mu)
    loss = -kappa * float(np.mean(np.sum(mu.astype(np.float64) * z, axis=1)))
    g_mu = (-kappa / b) * z
    g_e, g_h = mlp_backward(net.enc_spec, enc_p, c_e, g_mu.astype(h.dtype))
    g_t, _ = mlp_backward(net.trunk_spec, trunk_p, c_t, g_h)
    grads = {**_pre(g_e, "enc"), **_pre(g_t, "trunk")}
    if not np.isfinite(loss):
        raise TrainingFault("non-finite encoder loss")
    return loss, grads


# ---------------------------------------------------------------- diversity


def draw_latent_pairs(rng: np.random.Generator, n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Two prior latents per row; near-identical pairs are redrawn."""
    z1 = latent.sample_prior(rng, d, n)
    z2 = latent.sample_prior(rng, d, n)
    bad = latent.latent_distance(z1, z2) < _DEGENERATE_PAIR
    while bad.any():
        z2[bad] = latent.sample_prior(rng, d, int(bad.sum()))
        bad = latent.latent_distance(z1, z2) < _DEGENERATE_PAIR
    return z1, z2


def diversity_loss_and_grads(policy: GaussianPolicy, states, rng: np.random.Generator | None, w_div: float,
                             latent_dim: int | None = None, pairs=None):
    """w_div * mean((KL(pi(.|s,z1) || pi(.|s,z2)) / D_z(z1, z2) - 1)^2).

    ``states`` are the observation part of the policy input; ``pairs`` may
    supply ``(z1, z2)`` explicitly instead of drawing them from ``rng``.
    """
    states = np.atleast_2d(states)
    n = len(states)
    d = latent_dim if latent_dim is not None else policy.spec.input_dim - states.shape[1]
    z1, z2 = pairs if pairs is not None else draw_latent_pairs(rng, n, d)
    dz = latent.latent_distance(z1, z2)
    x1 = np.concatenate([states, z1], axis=1)
    x2 = np.concatenate([states, z2], axis=1)
    mu1, c1 = mlp_forward(policy.spec, policy.params, x1)
    mu2, c2 = mlp_forward(policy.spec, policy.params, x2)
    var = policy.head.var
    diff = mu1.astype(np.float64) - mu2.astype(np.float64)
    kl = gaussian_kl(mu1.astype(np.float64), mu2.astype(np.float64), var)
    ratio_err = kl / dz - 1.0
    loss = w_div * float(np.mean(ratio_err**2))
    dkl = w_div * 2.0 * ratio_err / dz / n
    g_mu1 = dkl[:, None] * diff / var
    dt = policy.params["W0"].dtype
    g1, _ = mlp_backward(policy.spec, policy.params, c1, g_mu1.astype(dt))
    g2, _ = mlp_backward(policy.spec, policy.params, c2, (-g_mu1).astype(dt))
    grads = add_grads(g1, g2)
    if not np.isfinite(loss):
        raise TrainingFault("non-finite diversity loss")
    return loss, grads
