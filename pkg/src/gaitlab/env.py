"""Batched training/evaluation environment.

Wires the simulator, the MDP term lists and the training aids (harness,
arm-target profiles, domain randomization, push events, adaptive command
sampling) into a vectorized step loop.  All randomness flows through
independent generators spawned from one seed, so trajectories are
bit-reproducible regardless of how many envs run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mdp, toolbox
from .mdp import (AdaptiveCommandState, CommandScript, StateCache, TaskConfig,
                  check_terminations, compute_observations, compute_rewards,
                  sample_commands, sample_randomization_scales, standing_mask)
from .robot import ConfigError
from .sim import SimConfig, SimParams, SimState, sim_reset, sim_step


@dataclass
class StepResult:
    reward: np.ndarray               # (N,)
    reward_terms: dict               # name -> (N,)
    done: np.ndarray                 # (N,) bool
    term_class: np.ndarray           # (N,) 0 none / 1 bad / 2 good / 3 neutral
    reason: np.ndarray               # (N,) str
    terminal_critic_obs: np.ndarray  # (N, C); rows valid only where done


@dataclass
class EpisodeStats:
    """Completed-episode accumulators, drained by the training logger."""

    lengths: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    term_returns: dict = field(default_factory=dict)

    def drain(self) -> "EpisodeStats":
        out = EpisodeStats(self.lengths, self.returns, self.classes,
                           self.term_returns)
        self.lengths, self.returns, self.classes = [], [], []
        self.term_returns = {}
        return out


class ObsHistory:
    """Fixed-depth observation ring, flattened oldest-to-newest.

    A reset seeds the whole window with the first frame, so the flattened
    vector is always fully populated.
    """

    def __init__(self, n: int, width: int, depth: int):
        if depth < 1:
            raise ConfigError("history depth must be >= 1")
        self.depth = depth
        self.frames = np.zeros((n, depth, width))
        self._fresh = np.ones(n, dtype=bool)

    def push(self, obs: np.ndarray, reset_mask: np.ndarray | None = None) -> None:
        if reset_mask is not None:
            self._fresh |= np.asarray(reset_mask, dtype=bool)
        self.frames[self._fresh] = obs[self._fresh, None, :]
        keep = ~self._fresh
        self.frames[keep] = np.concatenate(
            [self.frames[keep, 1:], obs[keep, None, :]], axis=1)
        self._fresh[:] = False

    def flat(self) -> np.ndarray:
        return self.frames.reshape(self.frames.shape[0], -1)


class BipedEnv:
    """Vectorized environment over ``n_envs`` independent biped instances."""

    def __init__(self, task: TaskConfig, n_envs: int | None = None,
                 seed: int | np.random.SeedSequence = 0,
                 sim_config: SimConfig | None = None,
                 state_cache: StateCache | None = None,
                 command_script: CommandScript | None = None,
                 noise_multiplier: float | None = None):
        self.task = task
        self.model = task.robot
        self.sim_config = sim_config if sim_config is not None else task.sim
        self.n = int(n_envs if n_envs is not None else task.train.n_envs)
        if self.n < 1:
            raise ConfigError("n_envs must be >= 1")
        self.state_cache = state_cache
        if task.init_mode == "cache" and state_cache is None:
            raise ConfigError("task init mode 'cache' requires a state cache")
        self.command_script = command_script
        self.noise_multiplier = noise_multiplier

        ss = seed if isinstance(seed, np.random.SeedSequence) \
            else np.random.SeedSequence(seed)
        noise_ss, cmd_ss, event_ss, init_ss = ss.spawn(4)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.command_rng = np.random.default_rng(cmd_ss)
        self.event_rng = np.random.default_rng(event_ss)
        self.init_rng = np.random.default_rng(init_ss)

        self.adaptive_state = (AdaptiveCommandState(task.commands)
                               if task.commands.adaptive else None)
        self.harness_scale = 1.0 if task.toolbox.harness.enabled else 0.0

        J = self.model.n_joints
        self.state = sim_reset(self.model, self.sim_config, n=self.n)
        self.params = SimParams.identity(self.n)
        self.command = np.zeros((self.n, 2))
        self.last_action = np.zeros((self.n, J))
        self.standing_time = np.zeros(self.n)
        self.time_since_resample = np.zeros(self.n)
        self.arm_profile = self._make_arm_profile() if task.arm_profile.enabled else None
        self.time_since_arm_resample = np.zeros(self.n)

        self._ep_return = np.zeros(self.n)
        self._ep_len = np.zeros(self.n, dtype=np.int64)
        self._ep_term_return = {t.name: np.zeros(self.n) for t in task.rewards}
        self.stats = EpisodeStats(
            term_returns={t.name: [] for t in task.rewards})

        self.reset(np.ones(self.n, dtype=bool))

    # -- setup helpers ------------------------------------------------------

    @property
    def arm_indices(self) -> np.ndarray:
        names = self.model.joint_names
        return np.array([names.index("l_arm"), names.index("r_arm")])

    def _make_arm_profile(self) -> toolbox.VelocityProfileState:
        cfg = self.task.arm_profile
        idx = self.arm_indices
        lo = np.tile(self.model.lower_limits[idx], self.n)
        hi = np.tile(self.model.upper_limits[idx], self.n)
        vlim = np.tile(self.model.joint_array("velocity_limit")[idx], self.n)
        pose = np.tile(self.model.default_pose[idx], self.n)
        return toolbox.VelocityProfileState(
            kind=cfg.kind, pos=pose.copy(), target=pose.copy(),
            lower=lo, upper=hi, vel_limit=vlim,
            a_max=cfg.a_max, v_max=cfg.v_max)

    # -- resets -------------------------------------------------------------

    def _initial_rows(self, k: int) -> SimState:
        task = self.task
        if task.init_mode == "cache":
            return self.state_cache.sample(self.init_rng, k)
        st = sim_reset(self.model, self.sim_config, n=k)
        rn = task.reset_noise
        if rn.q_std > 0:
            q = st.q + self.init_rng.normal(0.0, rn.q_std, size=st.q.shape)
            st.q = np.clip(q, self.model.lower_limits, self.model.upper_limits)
            st.targets_filt = st.q.copy()
        if rn.pitch_std > 0:
            st.base[:, 2] += self.init_rng.normal(0.0, rn.pitch_std, size=k)
        return st

    def _script_command(self, times: np.ndarray) -> np.ndarray:
        return np.stack([self.command_script.command_at(float(t)) for t in times])

    def reset(self, mask: np.ndarray) -> None:
        """Re-initialize the selected envs in place."""
        mask = np.asarray(mask, dtype=bool)
        k = int(mask.sum())
        if k == 0:
            return
        rows = self._initial_rows(k)
        for name in self.state.__dict__:
            getattr(self.state, name)[mask] = getattr(rows, name)
        scales = sample_randomization_scales(self.task, self.event_rng, k)
        self.params.mass_scale[mask] = scales["mass"]
        self.params.kc_scale[mask] = scales["kc"]
        self.params.mu_scale[mask] = scales["mu"]
        self.params.lag_scale[mask] = scales["lag"]
        if self.command_script is not None:
            self.command[mask] = self._script_command(np.zeros(k))
        else:
            self.command[mask] = sample_commands(
                self.task, self.command_rng, k, self.adaptive_state)
        self.last_action[mask] = 0.0
        self.standing_time[mask] = 0.0
        self.time_since_resample[mask] = 0.0
        self.time_since_arm_resample[mask] = 0.0
        self._ep_return[mask] = 0.0
        self._ep_len[mask] = 0
        for v in self._ep_term_return.values():
            v[mask] = 0.0
        if self.arm_profile is not None:
            flat = np.repeat(mask, 2)
            pose = np.tile(self.model.default_pose[self.arm_indices], k)
            self.arm_profile.pos[flat] = pose
            tgt = self.arm_profile.target.copy()
            tgt[flat] = pose
            self.arm_profile.set_target(tgt)

    # -- observations ------------------------------------------------------

    def observe(self, noisy: bool = True):
        return compute_observations(
            self.task, self.state, self.command, self.last_action,
            rng=self.noise_rng if noisy else None,
            noise_multiplier=self.noise_multiplier)

    # -- stepping -----------------------------------------------------------

    def _targets_from_actions(self, actions: np.ndarray) -> np.ndarray:
        task = self.task
        a = np.clip(np.asarray(actions, dtype=np.float64),
                    -task.action_clip, task.action_clip)
        targets = self.model.default_pose + task.action_scale * a
        if self.arm_profile is not None:
            # arm targets ride on the scripted profile instead of the default pose
            prof = self.arm_profile.pos.reshape(self.n, 2)
            idx = self.arm_indices
            targets[:, idx] = prof + task.action_scale * a[:, idx]
        return np.clip(targets, self.model.lower_limits, self.model.upper_limits)

    def _harness(self) -> np.ndarray | None:
        cfg = self.task.toolbox.harness
        if not cfg.enabled or self.harness_scale <= 0.0:
            return None
        st = self.state
        return toolbox.harness_wrench(
            cfg, st.base[:, 2], st.base_vel[:, 2],
            st.base[:, 1], st.base_vel[:, 1], self.harness_scale)

    def step(self, actions: np.ndarray, iteration: int = 0) -> StepResult:
        task = self.task
        dt = self.sim_config.control_dt
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n, self.model.n_joints):
            raise ConfigError(
                f"actions shape {actions.shape} != {(self.n, self.model.n_joints)}")

        if self.arm_profile is not None:
            self.arm_profile.step(dt)
            self.time_since_arm_resample += dt
            due = self.time_since_arm_resample >= task.arm_profile.resample_interval
            if due.any():
                idx = self.arm_indices
                lo = np.tile(self.model.lower_limits[idx], self.n)
                hi = np.tile(self.model.upper_limits[idx], self.n)
                fresh = self.event_rng.uniform(lo, hi)
                flat = np.repeat(due, 2)
                tgt = self.arm_profile.target.copy()
                tgt[flat] = fresh[flat]
                self.arm_profile.set_target(tgt)
                self.time_since_arm_resample[due] = 0.0

        prev_state = self.state
        prev_action = self.last_action
        targets = self._targets_from_actions(actions)
        state = sim_step(self.model, self.sim_config, prev_state, targets,
                         harness_wrench=self._harness(), params=self.params)
        state = mdp.apply_push_events(task, state, self.event_rng, iteration)
        self.state = state

        standing = standing_mask(state)
        self.standing_time = np.where(standing, self.standing_time + dt, 0.0)

        reward, terms = compute_rewards(task, prev_state, state, actions,
                                        prev_action, self.command)
        if self.adaptive_state is not None:
            err = np.abs(state.base_vel[:, 0] - self.command[:, 0])
            self.adaptive_state.record(self.command[:, 0], err)

        done, cls, reason = check_terminations(task, state, state.time,
                                               self.standing_time)

        self._ep_return += reward
        self._ep_len += 1
        for name, v in terms.items():
            self._ep_term_return[name] += v

        self.last_action = actions.copy()
        # terminal critic observation, before any env is re-initialized
        _, terminal_critic = self.observe(noisy=False)

        if done.any():
            self.stats.lengths.extend(self._ep_len[done].tolist())
            self.stats.returns.extend(self._ep_return[done].tolist())
            self.stats.classes.extend(cls[done].tolist())
            for name, v in self._ep_term_return.items():
                self.stats.term_returns.setdefault(name, []).extend(v[done].tolist())
            self.reset(done)

        if self.command_script is not None:
            self.command = self._script_command(self.state.time)
        else:
            self.time_since_resample += dt
            due = (~done) & (self.time_since_resample >= task.commands.resample_interval)
            if due.any():
                self.command[due] = sample_commands(
                    task, self.command_rng, int(due.sum()), self.adaptive_state)
                self.time_since_resample[due] = 0.0

        return StepResult(reward=reward, reward_terms=terms, done=done,
                          term_class=cls, reason=reason,
                          terminal_critic_obs=terminal_critic)

    # -- introspection -------------------------------------------------------

    def standing_fraction(self) -> float:
        return float(standing_mask(self.state).mean())

    @property
    def actor_obs_width(self) -> int:
        return self.task.actor_obs_width

    @property
    def critic_obs_width(self) -> int:
        return self.task.critic_obs_width
