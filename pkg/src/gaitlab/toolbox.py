"""Independently toggleable training enhancements.

Each component is pure (or single-writer stateful) and usable on its own:
local-Lipschitz regularization of the actor/critic, online reward
normalization, value-bootstrapped terminations, the virtual harness with its
decay schedules, upper-body velocity profiles, and mirror augmentation of
rollout batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .autodiff import Tensor, as_tensor
from .robot import MirrorRule, mirror_vector

TERMINATION_CLASSES = ("bad", "good", "neutral")


# -- local Lipschitz regularization -------------------------------------------

@dataclass(frozen=True)
class L2C2Config:
    lambda_actor: float = 1.0
    lambda_critic: float = 0.1
    enabled: bool = False

    def __post_init__(self):
        if self.lambda_actor < 0 or self.lambda_critic < 0:
            raise ValueError("L2C2 lambdas must be >= 0")


def l2c2_loss(policy: nets.MlpPolicy, tensors: dict[str, Tensor],
              obs_t: np.ndarray, obs_t1: np.ndarray,
              priv_t: np.ndarray, priv_t1: np.ndarray,
              alpha: np.ndarray, config: L2C2Config) -> Tensor:
    """Penalize actor/critic output change under interpolated observations.

    ``alpha`` is a U(0,1) draw, scalar or (B, 1); interpolated inputs are
    o_t + alpha * (o_t+1 - o_t).  The actor term uses the mean action.
    Gradients flow into both networks.  Mean over the batch of per-sample
    squared-norm changes.
    """
    obs_t = np.asarray(obs_t, dtype=np.float64)
    obs_t1 = np.asarray(obs_t1, dtype=np.float64)
    if obs_t.shape != obs_t1.shape or np.shape(priv_t) != np.shape(priv_t1):
        raise ValueError("L2C2 observation pair shape mismatch")
    alpha = np.asarray(alpha, dtype=np.float64)
    obs_i = obs_t + alpha * (obs_t1 - obs_t)
    priv_i = priv_t + alpha * (priv_t1 - priv_t)

    n = obs_t.shape[0] if obs_t.ndim > 1 else 1
    d_pi = nets.actor_mean_graph(policy, tensors, obs_i) \
        - nets.actor_mean_graph(policy, tensors, obs_t)
    d_v = nets.critic_value_graph(policy, tensors, priv_i) \
        - nets.critic_value_graph(policy, tensors, priv_t)
    loss = d_pi.square().sum() * (config.lambda_actor / n) \
        + d_v.square().sum() * (config.lambda_critic / n)
    return loss


# -- online reward normalization ----------------------------------------------

@dataclass
class RewardNormalizerState:
    """Running scale estimate; one writer per training iteration.

    ewma_std is a bias-corrected EMA (see ``scale``): after the first batch
    the effective estimate already equals that batch's std, so the
    normalized stream is scale-linear from the start instead of spending
    ~1/(1-decay) updates forgetting an arbitrary initial value.
    """

    gamma: float
    ewma_std: float = 0.0
    ret_corr: float = 1.0
    decay: float = 0.999
    epsilon: float = 0.01
    updates: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.decay < 1.0 or self.epsilon <= 0:
            raise ValueError("bad normalizer parameters")

    @property
    def gamma_fac(self) -> float:
        return 1.0 / np.sqrt(1.0 - self.gamma ** 2)

    @property
    def scale(self) -> float:
        """Bias-corrected std estimate (exact batch std after one update)."""
        if self.updates == 0:
            return self.ewma_std
        return self.ewma_std / (1.0 - self.decay ** self.updates)

    @property
    def denominator(self) -> float:
        return self.scale * self.gamma_fac * self.ret_corr + self.epsilon

    def normalize(self, rewards: np.ndarray) -> np.ndarray:
        """Update the EMA std from the raw batch, then scale it."""
        rewards = np.asarray(rewards, dtype=np.float64)
        batch_std = float(rewards.std())
        self.ewma_std = self.decay * self.ewma_std + (1.0 - self.decay) * batch_std
        self.updates += 1
        return rewards / self.denominator

    def update_return_scale(self, sigma_g: float) -> None:
        """Apply the return-scale correction once per iteration, after GAE.

        Clamped: while the EMA std is still warming up, sigma_g can stay far
        from 1 for many iterations and the multiplicative update would
        otherwise run away to overflow and never recover.
        """
        corr = self.ret_corr * (self.decay + (1.0 - self.decay) * float(sigma_g))
        self.ret_corr = float(np.clip(corr, 1e-6, 1e6))


def normalize_rewards(state: RewardNormalizerState, rewards: np.ndarray,
                      gae_return_std: float | None = None):
    """One-shot form: normalize a batch and (optionally) fold in sigma_G."""
    out = state.normalize(rewards)
    if gae_return_std is not None:
        state.update_return_scale(gae_return_std)
    return out, state


# -- value-bootstrapped terminations -------------------------------------------

def termination_offset(cls, sigma_term: float):
    if isinstance(cls, str):
        if cls not in TERMINATION_CLASSES:
            raise ValueError(f"unknown termination class {cls!r}")
        return {"bad": -sigma_term, "good": sigma_term, "neutral": 0.0}[cls]
    cls = np.asarray(cls)
    return np.where(cls == 1, -sigma_term, np.where(cls == 2, sigma_term, 0.0))


def bootstrap_termination(r_terminal, v_terminal, cls, gamma: float,
                          sigma_term: float = 5.0):
    """Terminal-reward correction: r + gamma*V(o_T) + {-s, +s, 0}.

    ``cls`` is 'bad'/'good'/'neutral' (or the integer codes 1/2/3 batched).
    Applied to the normalized terminal reward before GAE; GAE itself still
    bootstraps zero at the termination.
    """
    return r_terminal + gamma * v_terminal + termination_offset(cls, sigma_term)


# -- virtual harness ------------------------------------------------------------

@dataclass(frozen=True)
class HarnessConfig:
    k_stiff: float = 200.0
    k_damp: float = 50.0
    target_height: float = 0.75
    torque_limit: float = 150.0
    force_limit: float = 300.0
    schedule: str = "exponential"   # linear | exponential | adaptive
    horizon: int = 400
    adaptive_threshold: float = 0.8
    adaptive_step: float = 0.05
    enabled: bool = False

    def __post_init__(self):
        if min(self.k_stiff, self.k_damp, self.torque_limit, self.force_limit) < 0:
            raise ValueError("harness gains and limits must be >= 0")


def harness_wrench(config: HarnessConfig, pitch, pitch_rate, h, h_dot,
                   scale) -> np.ndarray:
    """PD wrench on the base: (torque, vertical force), linear in the scale.

    Orientation error to upright in the plane is -pitch.  Outputs are
    clamped to the configured limits, both multiplied by the scale.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale < 0) or np.any(scale > 1):
        raise ValueError("harness scale must be in [0, 1]")
    torque = config.k_stiff * (-np.asarray(pitch)) - config.k_damp * np.asarray(pitch_rate)
    force = config.k_stiff * (config.target_height - np.asarray(h)) \
        - config.k_damp * np.asarray(h_dot)
    torque = scale * np.clip(torque, -config.torque_limit, config.torque_limit)
    force = scale * np.clip(force, -config.force_limit, config.force_limit)
    return np.stack([torque, force], axis=-1)


def harness_schedule(kind: str, t: int, horizon: int,
                     standing_ratio: float | None = None,
                     current_scale: float = 1.0,
                     threshold: float = 0.8, step: float = 0.05) -> float:
    """Curriculum scale s in [0, 1] at iteration ``t``.

    linear: 1 - t/T (floored at 0); exponential: e^{(t/T) ln 0.01}, 0 past T;
    adaptive: decrease the running scale by a fixed step only while the
    standing ratio exceeds the threshold, never increase.
    """
    if t < 0:
        raise ValueError("iteration must be >= 0")
    if kind == "linear":
        return max(0.0, 1.0 - t / horizon)
    if kind == "exponential":
        if t > horizon:
            return 0.0
        return float(np.exp((t / horizon) * np.log(0.01)))
    if kind == "adaptive":
        if standing_ratio is None:
            raise ValueError("adaptive harness schedule requires standing_ratio")
        if standing_ratio > threshold:
            return max(0.0, current_scale - step)
        return current_scale
    raise ValueError(f"unknown harness schedule {kind!r}")


# -- velocity profiles -----------------------------------------------------------

@dataclass
class VelocityProfileState:
    """Per-joint interpolation toward sampled targets.

    kinds: 'ema' (p += alpha (p* - p)), 'trapezoidal' (bounded accel/vel,
    exact arrival, optional joint synchronization), 'linear' (constant
    velocity, clamp at arrival).  Every emitted sample respects the per-joint
    position limits and per-step velocity limits.
    """

    kind: str
    pos: np.ndarray
    target: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    vel_limit: np.ndarray
    alpha: float = 0.2                      # ema
    a_max: float = 4.0                      # trapezoidal
    v_max: float = 2.0
    speed: float = 1.0                      # linear
    sync: bool = False
    elapsed: float = 0.0
    _plan: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).copy()
        self.target = np.asarray(self.target, dtype=np.float64).copy()
        if self.kind not in ("ema", "trapezoidal", "linear"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "trapezoidal" and (self.a_max <= 0 or self.v_max <= 0):
            raise ValueError("trapezoidal profile needs positive a_max and v_max")
        self._replan()

    def set_target(self, target: np.ndarray, alpha: float | None = None) -> None:
        self.target = np.clip(np.asarray(target, dtype=np.float64), self.lower, self.upper)
        if alpha is not None:
            self.alpha = float(alpha)
        self.elapsed = 0.0
        self._replan()

    def _replan(self) -> None:
        if self.kind != "trapezoidal":
            return
        start = self.pos.copy()
        dist = np.abs(self.target - start)
        v_cap = np.minimum(self.v_max, self.vel_limit)
        v_peak = np.minimum(v_cap, np.sqrt(self.a_max * np.maximum(dist, 0.0)))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_acc = np.where(v_peak > 0, v_peak / self.a_max, 0.0)
            d_cruise = np.maximum(dist - v_peak ** 2 / self.a_max, 0.0)
            t_cruise = np.where(v_peak > 0, d_cruise / v_peak, 0.0)
        total = 2 * t_acc + t_cruise
        if self.sync:
            t_final = float(total.max())
            with np.errstate(divide="ignore", invalid="ignore"):
                k = np.where(total > 0, t_final / np.maximum(total, 1e-12), 1.0)
            # time-stretch by k: same distance, accel / k^2, velocity / k
            t_acc, t_cruise, total = t_acc * k, t_cruise * k, np.where(total > 0, t_final, 0.0)
            v_peak = np.where(k > 0, v_peak / np.maximum(k, 1e-12), v_peak)
        self._plan = {
            "start": start,
            "dir": np.sign(self.target - start),
            "v_peak": v_peak,
            "t_acc": t_acc,
            "t_cruise": t_cruise,
            "total": total,
        }

    def _trapezoid_pos(self, t: float) -> np.ndarray:
        p = self._plan
        t_acc, t_cr, total = p["t_acc"], p["t_cruise"], p["total"]
        v = p["v_peak"]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(t_acc > 0, v / np.maximum(t_acc, 1e-300), 0.0)
        tt = np.minimum(t, total)
        # piecewise: accelerate, cruise, decelerate
        d1 = 0.5 * a * np.minimum(tt, t_acc) ** 2
        d2 = v * np.clip(tt - t_acc, 0.0, t_cr)
        t3 = np.clip(tt - t_acc - t_cr, 0.0, t_acc)
        d3 = v * t3 - 0.5 * a * t3 ** 2
        dist = d1 + d2 + d3
        out = p["start"] + p["dir"] * dist
        return np.where(t >= total, self.target, out)

    def step(self, dt: float):
        """Advance by dt; returns (next position sample, self)."""
        if dt <= 0:
            raise ValueError("dt must be > 0")
        max_step = self.vel_limit * dt
        if self.kind == "ema":
            delta = self.alpha * (self.target - self.pos)
        elif self.kind == "linear":
            delta = np.clip(self.target - self.pos, -self.speed * dt, self.speed * dt)
        else:
            self.elapsed += dt
            delta = self._trapezoid_pos(self.elapsed) - self.pos
        delta = np.clip(delta, -max_step, max_step)
        self.pos = np.clip(self.pos + delta, self.lower, self.upper)
        return self.pos.copy(), self


def profile_step(state: VelocityProfileState, dt: float):
    return state.step(dt)


# -- symmetry augmentation -------------------------------------------------------

def symmetry_augment(batch: dict[str, np.ndarray], policy: nets.MlpPolicy,
                     obs_rule: MirrorRule, critic_rule: MirrorRule,
                     action_rule: MirrorRule) -> dict[str, np.ndarray]:
    """Append mirrored samples; the batch size exactly doubles.

    Mirrored samples reuse the original advantages and returns; old log-probs
    are recomputed for the mirrored actions under the policy output at the
    mirrored observations.
    """
    obs_m = mirror_vector(obs_rule, batch["obs"])
    critic_m = mirror_vector(critic_rule, batch["critic_obs"])
    act_m = mirror_vector(action_rule, batch["actions"])
    mean_m = nets.actor_mean(policy, obs_m)
    logp_m = nets.gaussian_logp(mean_m, policy.logstd, act_m)

    out = {
        "obs": np.concatenate([batch["obs"], obs_m]),
        "critic_obs": np.concatenate([batch["critic_obs"], critic_m]),
        "actions": np.concatenate([batch["actions"], act_m]),
        "logp": np.concatenate([batch["logp"], logp_m]),
        "advantages": np.concatenate([batch["advantages"], batch["advantages"]]),
        "returns": np.concatenate([batch["returns"], batch["returns"]]),
    }
    for key, rule in (("next_obs", obs_rule), ("next_critic_obs", critic_rule)):
        if key in batch:
            out[key] = np.concatenate([batch[key], mirror_vector(rule, batch[key])])
    if "nonterminal" in batch:
        out["nonterminal"] = np.concatenate([batch["nonterminal"], batch["nonterminal"]])
    return out
