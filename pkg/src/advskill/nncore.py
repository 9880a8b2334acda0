"""Dense networks with hand-written backprop, Gaussian heads and Adam.

Parameters live in plain ``dict[str, np.ndarray]`` mappings with names
``W0, b0, W1, b1, ...``; the last pair is the output layer. Every forward
pass returns an explicit cache that the matching backward pass consumes, so
the functions stay pure and a network can be evaluated several times before
any gradient is taken (the diversity loss needs two passes per batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OptimizationError, UsageError

OUTPUT_ACTIVATIONS = ("linear", "sigmoid", "unit-normalize", "relu")
SIGMOID_CLAMP = 1e-4
_NORM_GUARD = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    output_activation: str = "linear"
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all layer sizes must be >= 1, got {dims}")
        if self.hidden_activation != "relu":
            raise ConfigError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], tuple(d["hidden_dims"]), d["output_dim"], d["output_activation"])


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32, out_scale: float = 1.0) -> Params:
    """Glorot-uniform weights, zero biases; the output layer is scaled by ``out_scale``."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if i == spec.n_layers - 1:
            w = w * out_scale
        params[f"W{i}"] = w.astype(dtype)
        params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
    return params


def check_params(spec: MlpSpec, params: Params) -> None:
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        w, b = params.get(f"W{i}"), params.get(f"b{i}")
        if w is None or b is None:
            raise ConfigError(f"missing parameters for layer {i}")
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ConfigError(
                f"layer {i}: expected W{(fan_in, fan_out)} b{(fan_out,)}, got W{w.shape} b{b.shape}"
            )


@dataclass
class MlpCache:
    spec: MlpSpec
    squeeze: bool
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activation of each layer
    output: np.ndarray | None = None
    norm: np.ndarray | None = None  # unit-normalize only

    def relu_masks(self) -> list[np.ndarray]:
        """Masks of the ReLU hidden layers (and of a ReLU output layer)."""
        masks = [p > 0 for p in self.pre[:-1]]
        if self.spec.output_activation == "relu":
            masks.append(self.pre[-1] > 0)
        return masks


def mlp_forward(spec: MlpSpec, params: Params, x, cache: bool = True):
    """Evaluate the network on a vector or a ``(batch, input_dim)`` array.

    Returns ``(output, cache)``; ``cache`` is None when ``cache=False``.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(f"input shape {x.shape} does not match input_dim={spec.input_dim}")
    dtype = params["W0"].dtype
    h = x.astype(dtype, copy=False)
    c = MlpCache(spec, squeeze) if cache else None
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        w, b = params[f"W{i}"], params[f"b{i}"]
        if w.shape[0] != h.shape[1]:
            raise ConfigError(f"layer {i} expects {w.shape[0]} inputs, got {h.shape[1]}")
        a = h @ w + b
        if c is not None:
            c.inputs.append(h)
            c.pre.append(a)
        h = np.maximum(a, 0) if (i < last or spec.output_activation == "relu") else a
    act = spec.output_activation
    if act == "sigmoid":
        h = sigmoid(h)
    elif act == "unit-normalize":
        h, norm = _unit_normalize(h)
        if c is not None:
            c.norm = norm
    if c is not None:
        c.output = h
    return (h[0] if squeeze else h), c


def mlp_backward(spec: MlpSpec, params: Params, cache: MlpCache | None, upstream):
    """Backpropagate ``upstream`` (dL/d output) through a cached forward pass.

    Returns ``(param_grads, input_grad)``. Sigmoid outputs are differentiated
    without the log clamp; the clamp only applies where a logarithm is taken.
    """
    if cache is None or not cache.pre:
        raise UsageError("mlp_backward needs the cache from a forward pass")
    if cache.spec != spec:
        raise UsageError("cache was produced by a different network spec")
    g = np.asarray(upstream, dtype=cache.pre[0].dtype)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ConfigError(f"upstream gradient shape {g.shape} != output shape {cache.output.shape}")
    act = spec.output_activation
    if act == "sigmoid":
        y = cache.output
        g = g * y * (1.0 - y)
    elif act == "unit-normalize":
        y = cache.output
        g = (g - y * np.sum(g * y, axis=1, keepdims=True)) / cache.norm
        g = np.where(cache.norm > _NORM_GUARD, g, 0.0).astype(y.dtype)
    elif act == "relu":
        g = g * (cache.pre[-1] > 0)
    grads = {}
    for i in range(spec.n_layers - 1, -1, -1):
        grads[f"W{i}"] = cache.inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"W{i}"].T
        if i > 0:
            g = g * (cache.pre[i - 1] > 0)
    return grads, (g[0] if cache.squeeze else g)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_prob(p, eps: float = SIGMOID_CLAMP):
    return np.clip(p, eps, 1.0 - eps)


def _unit_normalize(h):
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    safe = np.where(norm > _NORM_GUARD, norm, 1.0)
    out = h / safe
    bad = (norm <= _NORM_GUARD)[:, 0]
    if bad.any():
        out[bad] = 0.0
        out[bad, 0] = 1.0
    return out, norm


def add_grads(a: Params, b: Params, scale: float = 1.0) -> Params:
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + scale * v if k in out else scale * v
    return out


def scale_grads(g: Params, scale: float) -> Params:
    return {k: v * scale for k, v in g.items()}


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------- Gaussian heads


@dataclass(frozen=True)
class GaussianHead:
    mean_dim: int
    variance: tuple[float, ...]

    def __post_init__(self):
        var = tuple(float(v) for v in np.broadcast_to(self.variance, (self.mean_dim,)))
        if any(v <= 0 for v in var):
            raise ConfigError("Gaussian variance must be positive")
        object.__setattr__(self, "variance", var)

    @classmethod
    def isotropic(cls, dim: int, var: float) -> "GaussianHead":
        return cls(dim, (var,) * dim)

    @property
    def var(self) -> np.ndarray:
        return np.asarray(self.variance)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def gaussian_logprob(head: GaussianHead, mean, x):
    """Diagonal-Gaussian log density; batched over leading axes."""
    mean, x = np.asarray(mean, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if mean.shape[-1] != head.mean_dim or x.shape != mean.shape:
        raise ConfigError(f"shape mismatch: mean {mean.shape}, x {x.shape}, dim {head.mean_dim}")
    var = head.var
    return -0.5 * np.sum((x - mean) ** 2 / var + np.log(var) + _LOG_2PI, axis=-1)


def gaussian_logprob_grad_mean(head: GaussianHead, mean, x):
    """d logprob / d mean."""
    return (np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)) / head.var


def gaussian_kl(mean1, mean2, shared_diag_var):
    """KL between two diagonal Gaussians that share one fixed variance."""
    mean1, mean2 = np.asarray(mean1), np.asarray(mean2)
    if mean1.shape != mean2.shape:
        raise ConfigError(f"mean shapes differ: {mean1.shape} vs {mean2.shape}")
    var = np.asarray(shared_diag_var, dtype=np.float64)
    return np.sum((mean1 - mean2) ** 2 / (2.0 * var), axis=-1)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    first_moment: Params
    second_moment: Params
    step_count: int = 0
    stepsize: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: Params, stepsize: float = 3e-4, **kw) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0, stepsize, **kw)


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One Adam update. Pure: inputs are not modified."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ConfigError(f"gradient for {name!r} missing or mis-shaped")
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient in parameter {name!r}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * g * g
        step = state.stepsize * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new_p[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = AdamState(new_m, new_v, t, state.stepsize, b1, b2, state.epsilon)
    return new_p, new_state


# ---------------------------------------------------------------- policies


@dataclass
class GaussianPolicy:
    """MLP mean with a fixed, state-independent diagonal covariance."""

    spec: MlpSpec
    params: Params
    head: GaussianHead

    @classmethod
    def create(cls, spec: MlpSpec, variance: float, rng: np.random.Generator, dtype=np.float32,
               out_scale: float = 0.01) -> "GaussianPolicy":
        return cls(spec, init_params(spec, rng, dtype, out_scale), GaussianHead.isotropic(spec.output_dim, variance))

    def mean(self, x) -> np.ndarray:
        return mlp_forward(self.spec, self.params, x, cache=False)[0]

    def sample(self, x, noise) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Action sample ``mean + std * noise`` with its log-prob; returns (action, mean, logp)."""
        mu = self.mean(x).astype(np.float64)
        a = mu + self.head.std * np.asarray(noise)
        return a, mu, gaussian_logprob(self.head, mu, a)

    def logprob(self, x, actions) -> np.ndarray:
        return gaussian_logprob(self.head, self.mean(x), actions)


@dataclass
class ValueFunction:
    spec: MlpSpec
    params: Params

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, dtype=np.float32) -> "ValueFunction":
        return cls(spec, init_params(spec, rng, dtype))

    def __call__(self, x) -> np.ndarray:
        out = mlp_forward(self.spec, self.params, x, cache=False)[0]
        return out[..., 0].astype(np.float64)
