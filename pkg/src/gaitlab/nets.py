"""Actor-critic MLP with ELU activations and a state-independent log-std.

Parameters live in a flat name->array dict so the optimizer, checkpoint
serialization and finite-difference tests all see one canonical layout.
Forward passes come in two flavors: a plain numpy path for rollouts and
inference, and a graph path built on :mod:`gaitlab.autodiff` for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, param

LOGSTD_MIN, LOGSTD_MAX = -4.0, 1.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MlpPolicy:
    obs_dim: int
    critic_obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (64, 64)
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "MlpPolicy":
        return MlpPolicy(self.obs_dim, self.critic_obs_dim, self.act_dim,
                         self.hidden, {k: v.copy() for k, v in self.params.items()})

    @property
    def logstd(self) -> np.ndarray:
        return np.clip(self.params["actor.logstd"], LOGSTD_MIN, LOGSTD_MAX)


def _layer_sizes(in_dim: int, hidden: tuple[int, ...], out_dim: int):
    dims = (in_dim, *hidden, out_dim)
    return list(zip(dims[:-1], dims[1:]))


def init_policy(obs_dim: int, critic_obs_dim: int, act_dim: int,
                rng: np.random.Generator,
                hidden: tuple[int, ...] = (64, 64),
                init_std: float = 0.8) -> MlpPolicy:
    params: dict[str, np.ndarray] = {}
    for prefix, in_dim, out_dim in (("actor", obs_dim, act_dim),
                                    ("critic", critic_obs_dim, 1)):
        sizes = _layer_sizes(in_dim, hidden, out_dim)
        for i, (fan_in, fan_out) in enumerate(sizes):
            last = i == len(sizes) - 1
            scale = (0.01 if last and prefix == "actor" else 1.0) / np.sqrt(fan_in)
            params[f"{prefix}.W{i}"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
            params[f"{prefix}.b{i}"] = np.zeros(fan_out)
    params["actor.logstd"] = np.full(act_dim, np.log(init_std))
    return MlpPolicy(obs_dim, critic_obs_dim, act_dim, hidden, params)


def zero_policy(obs_dim: int, critic_obs_dim: int, act_dim: int,
                hidden: tuple[int, ...] = (64, 64)) -> MlpPolicy:
    rng = np.random.default_rng(0)
    pol = init_policy(obs_dim, critic_obs_dim, act_dim, rng, hidden)
    for k in pol.params:
        if k != "actor.logstd":
            pol.params[k][:] = 0.0
    return pol


def _n_layers(policy: MlpPolicy) -> int:
    return len(policy.hidden) + 1


def _mlp_numpy(policy: MlpPolicy, prefix: str, x: np.ndarray) -> np.ndarray:
    p = policy.params
    for i in range(_n_layers(policy)):
        x = x @ p[f"{prefix}.W{i}"] + p[f"{prefix}.b{i}"]
        if i < _n_layers(policy) - 1:
            x = np.where(x > 0, x, np.exp(np.minimum(x, 0.0)) - 1.0)  # ELU
    return x


def actor_mean(policy: MlpPolicy, obs: np.ndarray) -> np.ndarray:
    obs = _check_width(obs, policy.obs_dim, "actor")
    return _mlp_numpy(policy, "actor", obs)


def critic_value(policy: MlpPolicy, critic_obs: np.ndarray) -> np.ndarray:
    critic_obs = _check_width(critic_obs, policy.critic_obs_dim, "critic")
    return _mlp_numpy(policy, "critic", critic_obs)[..., 0]


def net_forward(policy: MlpPolicy, obs: np.ndarray, critic_obs: np.ndarray):
    """Deterministic forward pass: (action mean, log-std, value)."""
    return actor_mean(policy, obs), policy.logstd, critic_value(policy, critic_obs)


def _check_width(x: np.ndarray, width: int, which: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != width:
        raise ValueError(f"{which} obs width {x.shape[-1]} != expected {width}")
    return x


def gaussian_logp(mean: np.ndarray, logstd: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dims (numpy path)."""
    z = (actions - mean) / np.exp(logstd)
    return (-0.5 * z ** 2 - logstd - 0.5 * LOG_2PI).sum(axis=-1)


def sample_actions(policy: MlpPolicy, obs: np.ndarray, rng: np.random.Generator):
    """Stochastic rollout actions; returns (actions, logp, mean)."""
    mean = actor_mean(policy, obs)
    logstd = policy.logstd
    actions = mean + np.exp(logstd) * rng.standard_normal(mean.shape)
    return actions, gaussian_logp(mean, logstd, actions), mean


# -- graph (training) path ----------------------------------------------------

def param_tensors(policy: MlpPolicy) -> dict[str, Tensor]:
    return {k: param(v) for k, v in policy.params.items()}


def mlp_graph(policy: MlpPolicy, tensors: dict[str, Tensor], prefix: str,
              x) -> Tensor:
    from .autodiff import as_tensor

    h = as_tensor(x)
    for i in range(_n_layers(policy)):
        h = h @ tensors[f"{prefix}.W{i}"] + tensors[f"{prefix}.b{i}"]
        if i < _n_layers(policy) - 1:
            h = h.elu()
    return h


def actor_mean_graph(policy: MlpPolicy, tensors: dict[str, Tensor], obs) -> Tensor:
    return mlp_graph(policy, tensors, "actor", obs)


def critic_value_graph(policy: MlpPolicy, tensors: dict[str, Tensor], obs) -> Tensor:
    return mlp_graph(policy, tensors, "critic", obs)


def logstd_graph(tensors: dict[str, Tensor]) -> Tensor:
    return tensors["actor.logstd"].clip(LOGSTD_MIN, LOGSTD_MAX)


def gaussian_logp_graph(mean: Tensor, logstd: Tensor, actions: np.ndarray) -> Tensor:
    from .autodiff import as_tensor

    inv_std = (-logstd).exp()
    z = (as_tensor(actions) - mean) * inv_std
    return (-(z.square() * 0.5) - logstd - 0.5 * LOG_2PI).sum(axis=-1)


def entropy_graph(logstd: Tensor) -> Tensor:
    return (logstd + 0.5 * (LOG_2PI + 1.0)).sum()


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten_params(template: dict[str, np.ndarray], flat: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    i = 0
    for k in sorted(template):
        size = template[k].size
        out[k] = flat[i:i + size].reshape(template[k].shape)
        i += size
    return out
