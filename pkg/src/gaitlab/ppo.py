"""Clipped-surrogate policy optimization with GAE.

The update consumes a flat rollout batch (dict of arrays), optionally
mirror-augmented, and applies Adam over the flattened parameter vector.
Everything is float64 numpy; one seeded generator drives all shuffling and
regularizer draws, so updates are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets, toolbox
from .autodiff import Tensor, as_tensor, minimum
from .mdp import TrainParams, ToolboxConfig
from .robot import MirrorRule


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    """First-order adaptive optimizer over one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, flat: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(flat), v=np.zeros_like(flat))

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return flat - lr * mhat / (np.sqrt(vhat) + self.eps)


def compute_gae(rewards: np.ndarray, values: np.ndarray,
                bootstrap_value: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float):
    """Generalized advantage estimation over a (T, N) rollout.

    The value bootstraps to zero across termination boundaries; the final
    step bootstraps from ``bootstrap_value``.  Returns raw (unnormalized)
    advantages and returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must share a (T, N) shape")
    T = rewards.shape[0]
    bootstrap_value = np.asarray(bootstrap_value, dtype=np.float64)
    if bootstrap_value.shape != rewards.shape[1:]:
        raise ValueError("bootstrap value shape mismatch")

    adv = np.zeros_like(rewards)
    gae = np.zeros_like(bootstrap_value)
    next_value = bootstrap_value
    for t in range(T - 1, -1, -1):
        nonterminal = ~dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
        next_value = values[t]
    return adv, adv + values


def _first_nonfinite(named: dict[str, np.ndarray]) -> str | None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            return name
    return None


def _abort_if_nonfinite(named: dict[str, np.ndarray]) -> None:
    bad = _first_nonfinite(named)
    if bad is not None:
        raise TrainingError(f"non-finite value in tensor '{bad}'; aborting update")


def ppo_update(policy: nets.MlpPolicy, batch: dict, train: TrainParams,
               tb: ToolboxConfig, rng: np.random.Generator,
               adam: AdamState,
               obs_rule: MirrorRule | None = None,
               critic_rule: MirrorRule | None = None,
               action_rule: MirrorRule | None = None):
    """One PPO update (epochs x minibatches) over a flat batch.

    Batch keys: obs, critic_obs, actions, logp, advantages, returns, and for
    the Lipschitz regularizer also next_obs, next_critic_obs, nonterminal.
    Returns (updated policy, stats dict).
    """
    batch = dict(batch)
    adv = batch["advantages"]
    batch["advantages"] = (adv - adv.mean()) / (adv.std() + 1e-8)

    if tb.symmetry.enabled:
        if obs_rule is None or critic_rule is None or action_rule is None:
            raise TrainingError("symmetry augmentation requires mirror rules")
        batch = toolbox.symmetry_augment(batch, policy, obs_rule, critic_rule,
                                         action_rule)

    B = batch["obs"].shape[0]
    mb_size = B // train.minibatches
    if mb_size < 1:
        raise TrainingError("batch smaller than the number of minibatches")

    policy = policy.copy()
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "l2c2_loss": 0.0, "approx_kl": 0.0, "clip_fraction": 0.0,
             "total_loss": 0.0}
    n_updates = 0

    for _ in range(train.epochs):
        order = rng.permutation(B)
        for k in range(train.minibatches):
            idx = order[k * mb_size:(k + 1) * mb_size]
            obs = batch["obs"][idx]
            cobs = batch["critic_obs"][idx]
            actions = batch["actions"][idx]
            old_logp = batch["logp"][idx]
            mb_adv = batch["advantages"][idx]
            mb_ret = batch["returns"][idx]

            tensors = nets.param_tensors(policy)
            mean = nets.actor_mean_graph(policy, tensors, obs)
            logstd = nets.logstd_graph(tensors)
            logp = nets.gaussian_logp_graph(mean, logstd, actions)
            # clamp the log-ratio so a single bad minibatch cannot overflow
            ratio = (logp - as_tensor(old_logp)).clip(-20.0, 20.0).exp()
            clipped = ratio.clip(1.0 - train.clip_ratio, 1.0 + train.clip_ratio)
            surrogate = minimum(ratio * mb_adv, clipped * mb_adv)
            policy_loss = -surrogate.mean()

            value = nets.critic_value_graph(policy, tensors, cobs)
            value_loss = (value - as_tensor(mb_ret[:, None])).square().mean()

            entropy = nets.entropy_graph(logstd)
            loss = policy_loss + value_loss * train.value_coef \
                - entropy * train.entropy_coef

            l2c2_val = 0.0
            if tb.l2c2.enabled and "next_obs" in batch:
                keep = np.flatnonzero(batch["nonterminal"][idx])
                if keep.size:
                    sub = idx[keep]
                    alpha = rng.uniform(size=(sub.size, 1))
                    reg = toolbox.l2c2_loss(
                        policy, tensors, batch["obs"][sub],
                        batch["next_obs"][sub], batch["critic_obs"][sub],
                        batch["next_critic_obs"][sub], alpha, tb.l2c2)
                    loss = loss + reg
                    l2c2_val = float(reg.data)

            _abort_if_nonfinite({
                "policy_loss": policy_loss.data, "value_loss": value_loss.data,
                "entropy": entropy.data, "total_loss": loss.data,
            })
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in tensors.items()}
            _abort_if_nonfinite({f"grad:{k}": g for k, g in grads.items()})

            flat = nets.flatten_params(policy.params)
            gflat = nets.flatten_params(grads)
            if train.max_grad_norm > 0:
                gnorm = float(np.linalg.norm(gflat))
                if gnorm > train.max_grad_norm:
                    gflat = gflat * (train.max_grad_norm / gnorm)
            new_flat = adam.step(flat, gflat, train.lr)
            policy.params = nets.unflatten_params(policy.params, new_flat)
            policy.params["actor.logstd"] = np.clip(
                policy.params["actor.logstd"], nets.LOGSTD_MIN, nets.LOGSTD_MAX)

            with np.errstate(over="ignore"):
                ratio_d = np.exp(logp.data - old_logp)
            stats["policy_loss"] += float(policy_loss.data)
            stats["value_loss"] += float(value_loss.data)
            stats["entropy"] += float(entropy.data)
            stats["l2c2_loss"] += l2c2_val
            stats["total_loss"] += float(loss.data)
            stats["approx_kl"] += float(np.mean(old_logp - logp.data))
            stats["clip_fraction"] += float(
                np.mean(np.abs(ratio_d - 1.0) > train.clip_ratio))
            n_updates += 1

    for k in stats:
        stats[k] /= max(n_updates, 1)
    stats["batch_size"] = B
    stats["noise_std"] = float(np.exp(policy.logstd).mean())
    return policy, stats
