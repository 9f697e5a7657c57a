"""Scenario-driven policy evaluation and motion-quality metrics.

A scenario steps a batch of environments under scripted (deterministic) or
randomly resampled (stochastic) commands and records everything needed for
tracking and smoothness diagnostics.  Metric functions are pure and operate
on recorded trajectories only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .env import BipedEnv
from .mdp import (CommandScript, StateCache, TaskConfig, build_state_cache,
                  height_ramp, velocity_ladder)
from .robot import ConfigError, RobotModel
from .sim import SimConfig, make_variant_backend

LIMIT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Scenario:
    """One evaluation protocol: commands, duration, noise and init."""

    name: str
    duration: float
    script: CommandScript | None = None
    n_envs: int = 4
    deterministic: bool = True
    noise_multiplier: float = 0.0
    resample_interval: float = 2.0   # stochastic mode only
    init: str = "default"

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("scenario duration must be > 0")
        if self.deterministic and self.script is None:
            raise ConfigError("deterministic scenarios need a command script")


def builtin_scenario(name: str, duration: float | None = None,
                     n_envs: int = 4) -> Scenario:
    """Named evaluation protocols shared by the command-line tools."""
    if name in ("sweep", "velocity_ladder"):
        script = velocity_ladder()
        return Scenario(name="velocity_ladder", script=script,
                        duration=duration or script.total_duration,
                        n_envs=n_envs)
    if name == "height_ramp":
        script = height_ramp()
        return Scenario(name="height_ramp", script=script,
                        duration=duration or script.total_duration,
                        n_envs=n_envs)
    if name == "stand":
        from .mdp import play_command_script
        script = play_command_script(
            [{"duration": 10.0, "vx": 0.0, "height": 0.75}])
        return Scenario(name="stand", script=script,
                        duration=duration or 10.0, n_envs=n_envs)
    if name == "stochastic":
        return Scenario(name="stochastic", script=None,
                        duration=duration or 50.0, n_envs=n_envs,
                        deterministic=False, noise_multiplier=1.0)
    raise ConfigError(f"unknown scenario '{name}'")


def load_scenario(source: str) -> Scenario:
    """A built-in scenario name, or a YAML scenario file."""
    from pathlib import Path

    import yaml

    if "\n" not in source and not Path(source).exists():
        return builtin_scenario(source)
    text = Path(source).read_text() if Path(source).exists() else source
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or "scenario" not in doc:
        raise ConfigError("scenario file needs a top-level 'scenario' key")
    cfg = dict(doc["scenario"])
    entries = cfg.pop("script", None)
    if entries is not None:
        from .mdp import play_command_script
        cfg["script"] = play_command_script(entries)
    return Scenario(**cfg)


@dataclass
class Recording:
    """Control-rate trajectories from one scenario run."""

    scenario: str
    dt: float
    joint_names: tuple
    time: np.ndarray       # (T,)
    commands: np.ndarray   # (T, N, 2)  vx, height
    base: np.ndarray       # (T, N, 3)  x, z, pitch
    base_vel: np.ndarray   # (T, N, 3)
    q: np.ndarray          # (T, N, J)
    qd: np.ndarray         # (T, N, J)
    actions: np.ndarray    # (T, N, J)
    reward_terms: dict     # name -> (T, N)
    diverged: np.ndarray   # (N,) bool


def _backend_config(task: TaskConfig, backend: str) -> SimConfig:
    if backend == "reference":
        return task.sim
    if backend == "variant":
        return make_variant_backend(task.sim)
    raise ConfigError(f"unknown backend '{backend}'")


class PolicyActor:
    """Deterministic (mean-action) adapter around a trained network."""

    def __init__(self, policy: nets.MlpPolicy):
        self.policy = policy

    def reset(self, env: BipedEnv) -> None:
        if self.policy.obs_dim != env.actor_obs_width:
            raise ConfigError(
                f"policy expects obs width {self.policy.obs_dim}, "
                f"task produces {env.actor_obs_width}")

    def __call__(self, env: BipedEnv) -> np.ndarray:
        obs, _ = env.observe()
        return nets.actor_mean(self.policy, obs)


class HistoryPolicyActor:
    """Adapter for policies consuming stacked observation histories."""

    def __init__(self, policy: nets.MlpPolicy, depth: int):
        self.policy = policy
        self.depth = depth
        self.history = None

    def reset(self, env: BipedEnv) -> None:
        frame = env.actor_obs_width
        if self.policy.obs_dim != frame * self.depth:
            raise ConfigError(
                f"policy expects obs width {self.policy.obs_dim}, task "
                f"produces {frame} x depth {self.depth}")
        from .env import ObsHistory
        self.history = ObsHistory(env.n, frame, self.depth)

    def __call__(self, env: BipedEnv) -> np.ndarray:
        obs, _ = env.observe()
        self.history.push(obs)
        return nets.actor_mean(self.policy, self.history.flat())


def _as_actor(policy_or_actor):
    if isinstance(policy_or_actor, nets.MlpPolicy):
        return PolicyActor(policy_or_actor)
    return policy_or_actor


def run_scenario(policy_or_actor, task: TaskConfig, scenario: Scenario,
                 seed: int = 0, backend: str = "reference",
                 state_cache: StateCache | None = None) -> Recording:
    """Roll the policy through one scenario and record trajectories."""
    sim_config = _backend_config(task, backend)
    if not scenario.deterministic:
        task = dataclasses.replace(task, commands=dataclasses.replace(
            task.commands, resample_interval=scenario.resample_interval,
            adaptive=False))
    if scenario.init == "cache" or task.init_mode == "cache":
        if state_cache is None:
            state_cache = build_state_cache(
                task, 16, np.random.default_rng(seed))
    env = BipedEnv(task, n_envs=scenario.n_envs, seed=seed,
                   sim_config=sim_config, state_cache=state_cache,
                   command_script=scenario.script,
                   noise_multiplier=scenario.noise_multiplier)
    actor = _as_actor(policy_or_actor)
    if hasattr(actor, "reset"):
        actor.reset(env)

    dt = sim_config.control_dt
    T, N, J = int(round(scenario.duration / dt)), env.n, env.model.n_joints
    rec = Recording(
        scenario=scenario.name, dt=dt,
        joint_names=env.model.joint_names,
        time=np.zeros(T), commands=np.zeros((T, N, 2)),
        base=np.zeros((T, N, 3)), base_vel=np.zeros((T, N, 3)),
        q=np.zeros((T, N, J)), qd=np.zeros((T, N, J)),
        actions=np.zeros((T, N, J)), reward_terms={},
        diverged=np.zeros(N, dtype=bool),
    )
    for t in range(T):
        rec.time[t] = env.state.time[0]
        rec.commands[t] = env.command
        rec.base[t] = env.state.base
        rec.base_vel[t] = env.state.base_vel
        rec.q[t] = env.state.q
        rec.qd[t] = env.state.qd
        a = actor(env)
        rec.actions[t] = a
        res = env.step(a)
        for name, v in res.reward_terms.items():
            rec.reward_terms.setdefault(name, np.zeros((T, N)))[t] = v
        rec.diverged |= env.state.diverged
    return rec


# -- motion-quality metrics ---------------------------------------------------------


def rms_accel_jerk(q: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint RMS acceleration and jerk from a position trajectory.

    Acceleration uses second-order central differences, jerk the five-point
    central third difference; both RMS over interior samples only.
    """
    q = np.asarray(q)
    if q.ndim == 1:
        q = q[:, None]
    if q.shape[0] < 4:
        raise ConfigError("need at least 4 samples for jerk estimation")
    accel = (q[2:] - 2 * q[1:-1] + q[:-2]) / dt ** 2
    jerk = (q[4:] - 2 * q[3:-1] + 2 * q[1:-3] - q[:-4]) / (2 * dt ** 3)
    rms = lambda x: np.sqrt(np.mean(np.square(x), axis=0))
    return rms(accel), rms(jerk)


def limit_violation_fraction(q: np.ndarray, model: RobotModel) -> np.ndarray:
    """Fraction of samples at or beyond each joint's position limits.

    The simulator clamps exactly at the limit, so samples within
    ``LIMIT_TOLERANCE`` of a limit count as violations.
    """
    q = np.asarray(q)
    lo = model.lower_limits + LIMIT_TOLERANCE
    hi = model.upper_limits - LIMIT_TOLERANCE
    return np.mean((q <= lo) | (q >= hi), axis=0)


def hf_energy_ratio(signal: np.ndarray, dt: float,
                    cutoff_hz: float = 10.0) -> np.ndarray:
    """Fraction of spectral energy above the cutoff frequency.

    The signal is mean-removed and Hann-windowed; the ratio is taken over
    non-DC bins, so it is invariant to amplitude scaling and offsets.
    """
    x = np.asarray(signal, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n = x.shape[0]
    if n < 32:
        raise ConfigError("need at least 32 samples for the spectral ratio")
    nyquist = 0.5 / dt
    if cutoff_hz >= nyquist:
        raise ConfigError(
            f"cutoff {cutoff_hz} Hz must be below Nyquist {nyquist} Hz")
    x = x - x.mean(axis=0)
    window = np.hanning(n)[:, None]
    power = np.abs(np.fft.rfft(x * window, axis=0)) ** 2
    freqs = np.fft.rfftfreq(n, dt)
    total = power[1:].sum(axis=0)
    high = power[freqs > cutoff_hz].sum(axis=0)
    with np.errstate(invalid="ignore"):
        ratio = np.where(total > 0, high / np.maximum(total, 1e-300), 0.0)
    return ratio[0] if squeeze else ratio


@dataclass(frozen=True)
class MotionMetrics:
    """Per-joint smoothness diagnostics with aggregates over joints."""

    joint_names: tuple
    rms_accel: np.ndarray
    rms_jerk: np.ndarray
    limit_violation: np.ndarray
    hf_energy: np.ndarray

    def aggregates(self) -> dict:
        out = {}
        for name in ("rms_accel", "rms_jerk", "limit_violation", "hf_energy"):
            v = getattr(self, name)
            out[f"{name}_mean"] = float(np.mean(v))
            out[f"{name}_max"] = float(np.max(v))
        return out

    def as_dict(self) -> dict:
        per_joint = {
            name: {
                "rms_accel": float(self.rms_accel[j]),
                "rms_jerk": float(self.rms_jerk[j]),
                "limit_violation": float(self.limit_violation[j]),
                "hf_energy": float(self.hf_energy[j]),
            }
            for j, name in enumerate(self.joint_names)
        }
        return {"per_joint": per_joint, **self.aggregates()}


def motion_metrics(rec: Recording, model: RobotModel,
                   cutoff_hz: float = 10.0) -> MotionMetrics:
    """Smoothness metrics averaged over the recording's environments.

    The spectral ratio is computed on joint velocities so that slow posture
    offsets do not dominate the spectrum.
    """
    T, N, J = rec.q.shape
    accel = np.zeros((N, J))
    jerk = np.zeros((N, J))
    viol = np.zeros((N, J))
    hf = np.zeros((N, J))
    for i in range(N):
        accel[i], jerk[i] = rms_accel_jerk(rec.q[:, i], rec.dt)
        viol[i] = limit_violation_fraction(rec.q[:, i], model)
        hf[i] = hf_energy_ratio(rec.qd[:, i], rec.dt, cutoff_hz)
    return MotionMetrics(joint_names=tuple(rec.joint_names),
                         rms_accel=accel.mean(axis=0),
                         rms_jerk=jerk.mean(axis=0),
                         limit_violation=viol.mean(axis=0),
                         hf_energy=hf.mean(axis=0))


# -- tracking metrics ---------------------------------------------------------------


CHANNELS = ("vx", "height")


def tracking_rmse(rec: Recording) -> dict:
    """Per-channel RMSE of achieved versus commanded, over time and envs."""
    achieved = np.stack([rec.base_vel[..., 0], rec.base[..., 1]], axis=-1)
    err = achieved - rec.commands
    rmse = np.sqrt(np.mean(np.square(err), axis=(0, 1)))
    return {ch: float(rmse[i]) for i, ch in enumerate(CHANNELS)}


@dataclass(frozen=True)
class TrackingMetrics:
    """Per-channel RMSE with across-run statistics."""

    mean: dict
    std: dict
    runs: tuple = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std),
                "runs": [dict(r) for r in self.runs]}


def aggregate_tracking(per_run: list[dict]) -> TrackingMetrics:
    if not per_run:
        raise ConfigError("no tracking runs to aggregate")
    mean = {ch: float(np.mean([r[ch] for r in per_run])) for ch in CHANNELS}
    std = {ch: float(np.std([r[ch] for r in per_run])) for ch in CHANNELS}
    return TrackingMetrics(mean=mean, std=std, runs=tuple(per_run))


def evaluate_tracking(policy_or_actor, task: TaskConfig, scenario: Scenario,
                      runs: int = 1, seed: int = 0,
                      backend: str = "reference",
                      state_cache: StateCache | None = None
                      ) -> tuple[TrackingMetrics, list[Recording]]:
    """Tracking RMSE over one or more scenario runs.

    Deterministic scenarios reuse the same seed every run (and so have zero
    across-run spread); stochastic runs draw distinct seeds.
    """
    recs, per_run = [], []
    for r in range(runs):
        run_seed = seed if scenario.deterministic else seed + r
        rec = run_scenario(policy_or_actor, task, scenario, seed=run_seed,
                           backend=backend, state_cache=state_cache)
        recs.append(rec)
        per_run.append(tracking_rmse(rec))
    return aggregate_tracking(per_run), recs
