"""Manager-style MDP composition for the planar biped.

A task is one self-contained YAML file: robot reference, sim parameters,
observation/reward/termination term lists, command ranges, event and
curriculum settings, toolbox toggles and PPO hyperparameters.  Every numeric
parameter can be overridden with ``path.to.param=value`` strings.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .robot import ConfigError, MirrorRule, RobotModel, load_robot_model
from .sim import SimConfig, SimState, settle_under_gravity, sim_reset
from .toolbox import HarnessConfig, L2C2Config

# observation term name -> width
TERM_WIDTHS = {
    "pitch_rate": 1,
    "pitch_trig": 2,
    "command": 2,
    "q": 6,
    "qd": 6,
    "last_action": 6,
    "base_lin_vel": 2,
    "contact_forces": 4,
}

TERMINATION_CLASS_CODES = {"none": 0, "bad": 1, "good": 2, "neutral": 3}


@dataclass(frozen=True)
class ObsTerm:
    name: str
    scale: float = 1.0
    noise_std: float = 0.0

    @property
    def width(self) -> int:
        if self.name not in TERM_WIDTHS:
            raise ConfigError(f"unknown observation term '{self.name}'")
        return TERM_WIDTHS[self.name]


@dataclass(frozen=True)
class RewardTerm:
    name: str
    weight: float


@dataclass(frozen=True)
class TerminationTerm:
    name: str
    cls: str  # bad | good | neutral


@dataclass(frozen=True)
class CommandConfig:
    vx_range: tuple[float, float] = (-0.8, 0.8)
    height_range: tuple[float, float] = (0.6, 0.8)
    resample_interval: float = 4.0
    adaptive: bool = False
    bins: int = 8
    kappa: float = 2.0
    near_zero_mass: float = 0.2


@dataclass(frozen=True)
class PushConfig:
    enabled: bool = False
    prob: float = 0.0
    vel_min: float = 0.1
    vel_max: float = 0.5
    ramp_iters: int = 500


@dataclass(frozen=True)
class RandomizeConfig:
    enabled: bool = False
    low: float = 1.0
    high: float = 1.0


@dataclass(frozen=True)
class ResetNoiseConfig:
    q_std: float = 0.0
    pitch_std: float = 0.0


@dataclass(frozen=True)
class ArmProfileConfig:
    enabled: bool = False
    kind: str = "trapezoidal"
    a_max: float = 4.0
    v_max: float = 2.0
    resample_interval: float = 3.0


@dataclass(frozen=True)
class NormalizerConfig:
    enabled: bool = False
    beta: float = 0.999
    epsilon: float = 0.01


@dataclass(frozen=True)
class TerminationHandlingConfig:
    enabled: bool = False
    mode: str = "bootstrap"   # bootstrap | penalty
    sigma_term: float = 5.0
    penalty_bad: float = -2.0
    penalty_good: float = 2.0


@dataclass(frozen=True)
class SymmetryConfig:
    enabled: bool = False


@dataclass(frozen=True)
class ToolboxConfig:
    normalizer: NormalizerConfig = field(default_factory=NormalizerConfig)
    termination: TerminationHandlingConfig = field(default_factory=TerminationHandlingConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    l2c2: L2C2Config = field(default_factory=L2C2Config)
    symmetry: SymmetryConfig = field(default_factory=SymmetryConfig)


@dataclass(frozen=True)
class TrainParams:
    lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    minibatches: int = 4
    epochs: int = 5
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    n_envs: int = 256
    rollout_steps: int = 24
    iterations: int = 2000
    checkpoint_interval: int = 500
    hidden: tuple[int, ...] = (64, 64)
    init_std: float = 0.8
    max_grad_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must be in [0, 1]")


@dataclass
class TaskConfig:
    name: str
    robot: RobotModel
    sim: SimConfig
    actor_terms: tuple[ObsTerm, ...]
    critic_extra_terms: tuple[ObsTerm, ...]
    noise_multiplier: float
    action_scale: float
    action_clip: float
    rewards: tuple[RewardTerm, ...]
    terminations: tuple[TerminationTerm, ...]
    commands: CommandConfig
    push: PushConfig
    randomize: RandomizeConfig
    reset_noise: ResetNoiseConfig
    arm_profile: ArmProfileConfig
    init_mode: str              # default | cache
    cache_size: int
    toolbox: ToolboxConfig
    train: TrainParams
    episode_length: float
    history_depth: int
    standing_hold_time: float
    raw: dict                   # resolved dict, for snapshots

    def validate(self) -> None:
        if self.episode_length <= 0:
            raise ConfigError("episode_length must be > 0")
        if self.history_depth < 1:
            raise ConfigError("history_depth must be >= 1")
        names = [t.name for t in self.rewards]
        if len(set(names)) != len(names):
            raise ConfigError("reward term names must be unique")
        for t in self.rewards:
            if not np.isfinite(t.weight):
                raise ConfigError(f"reward term '{t.name}' has a non-finite weight")
            if t.name not in REWARD_FNS:
                raise ConfigError(f"unknown reward term '{t.name}'")
        for t in self.terminations:
            if t.cls not in ("bad", "good", "neutral"):
                raise ConfigError(f"termination '{t.name}' has unknown class '{t.cls}'")
            if t.name not in TERMINATION_FNS:
                raise ConfigError(f"unknown termination term '{t.name}'")
        for t in (*self.actor_terms, *self.critic_extra_terms):
            t.width  # raises on unknown names

    @property
    def actor_obs_width(self) -> int:
        return sum(t.width for t in self.actor_terms)

    @property
    def critic_obs_width(self) -> int:
        return self.actor_obs_width + sum(t.width for t in self.critic_extra_terms)


def set_by_path(d: dict, path: str, value) -> None:
    """Assign into a nested dict/list structure by dotted path."""
    keys = path.split(".")
    node = d
    for k in keys[:-1]:
        if isinstance(node, list):
            node = node[int(k)]
        elif k in node:
            node = node[k]
        else:
            raise ConfigError(f"unknown config path '{path}' (missing '{k}')")
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        if last not in node:
            raise ConfigError(f"unknown config path '{path}' (missing '{last}')")
        node[last] = value


def get_by_path(d, path: str):
    """Read from a nested dict/list structure by dotted path."""
    node = d
    for k in path.split("."):
        if isinstance(node, list):
            node = node[int(k)]
        elif isinstance(node, Mapping) and k in node:
            node = node[k]
        else:
            raise ConfigError(f"unknown config path '{path}' (missing '{k}')")
    return node


def expand_paths(d, path: str) -> list[str]:
    """Expand '*' wildcards over list indices, e.g. 'robot.joints.*.kp'."""
    parts = path.split(".")
    results = [[]]
    node_for = {(): d}
    for part in parts:
        new_results = []
        for prefix in results:
            node = node_for[tuple(prefix)]
            if part == "*":
                if not isinstance(node, list):
                    raise ConfigError(
                        f"wildcard in '{path}' applies only to lists")
                keys = [str(i) for i in range(len(node))]
            else:
                keys = [part]
            for k in keys:
                child = node[int(k)] if isinstance(node, list) else node.get(k)
                if child is None and not (isinstance(node, Mapping) and k in node):
                    raise ConfigError(f"unknown config path '{path}' (missing '{k}')")
                new_results.append(prefix + [k])
                node_for[tuple(prefix + [k])] = child
        results = new_results
    return [".".join(p) for p in results]


def apply_overrides(raw: dict, overrides: Sequence[str]) -> None:
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override '{ov}' must look like path=value")
        path, val = ov.split("=", 1)
        set_by_path(raw, path.strip(), yaml.safe_load(val))


def _pairs(seq) -> tuple[float, float]:
    lo, hi = float(seq[0]), float(seq[1])
    return (lo, hi)


def load_task_config(source: str | Path | Mapping,
                     overrides: Sequence[str] = ()) -> TaskConfig:
    """Load a task file (path, YAML text, or mapping), resolve the robot
    reference, apply ``--set`` overrides, and validate."""
    base_dir = Path(".")
    if isinstance(source, Mapping):
        raw = copy.deepcopy(dict(source))
    else:
        text = str(source)
        is_path = "\n" not in text and len(text) < 4096
        if is_path and Path(text).exists():
            p = Path(text)
            raw = yaml.safe_load(p.read_text())
            base_dir = p.parent
        elif is_path and text.endswith((".yaml", ".yml")):
            raise ConfigError(f"task config file not found: {text}")
        else:
            raw = yaml.safe_load(text)
    if not isinstance(raw, Mapping) or "task" not in raw:
        raise ConfigError("task config must have a top-level 'task' key")
    raw = copy.deepcopy(dict(raw))
    cfg = raw["task"]

    # inline the robot so overrides can reach robot parameters uniformly
    robot_ref = cfg.get("robot", "biped.yaml")
    if isinstance(robot_ref, str):
        rp = base_dir / robot_ref
        if not rp.exists():
            import importlib.resources as resources
            rtext = resources.files("gaitlab.configs").joinpath(robot_ref).read_text()
        else:
            rtext = rp.read_text()
        cfg["robot"] = yaml.safe_load(rtext)["robot"]

    if overrides:
        apply_overrides(raw, ["task." + ov if not ov.startswith("task.") else ov
                              for ov in overrides])

    robot = load_robot_model(cfg["robot"])
    obs = cfg.get("observations", {})
    tb = cfg.get("toolbox", {})
    ev = cfg.get("events", {})
    rand = ev.get("randomize", {})
    rand_range = rand.get("range", [1.0, 1.0])

    task = TaskConfig(
        name=str(cfg.get("name", "task")),
        robot=robot,
        sim=SimConfig(**cfg.get("sim", {})),
        actor_terms=tuple(ObsTerm(**t) for t in obs.get("actor", [])),
        critic_extra_terms=tuple(ObsTerm(**t) for t in obs.get("critic_extra", [])),
        noise_multiplier=float(obs.get("noise_multiplier", 1.0)),
        action_scale=float(cfg.get("action", {}).get("scale", 0.5)),
        action_clip=float(cfg.get("action", {}).get("clip", 4.0)),
        rewards=tuple(RewardTerm(**t) for t in cfg.get("rewards", [])),
        terminations=tuple(TerminationTerm(name=t["name"], cls=t["class"])
                           for t in cfg.get("terminations", [])),
        commands=CommandConfig(
            vx_range=_pairs(cfg.get("commands", {}).get("vx_range", [-0.8, 0.8])),
            height_range=_pairs(cfg.get("commands", {}).get("height_range", [0.6, 0.8])),
            resample_interval=float(cfg.get("commands", {}).get("resample_interval", 4.0)),
            adaptive=bool(cfg.get("commands", {}).get("adaptive", False)),
            bins=int(cfg.get("commands", {}).get("bins", 8)),
            kappa=float(cfg.get("commands", {}).get("kappa", 2.0)),
            near_zero_mass=float(cfg.get("commands", {}).get("near_zero_mass", 0.2)),
        ),
        push=PushConfig(**ev.get("push", {})),
        randomize=RandomizeConfig(enabled=bool(rand.get("enabled", False)),
                                  low=float(rand_range[0]), high=float(rand_range[1])),
        reset_noise=ResetNoiseConfig(**ev.get("reset_noise", {})),
        arm_profile=ArmProfileConfig(**cfg.get("arm_profile", {})),
        init_mode=str(cfg.get("init", {}).get("mode", "default")),
        cache_size=int(cfg.get("init", {}).get("cache_size", 100)),
        toolbox=ToolboxConfig(
            normalizer=NormalizerConfig(**tb.get("normalizer", {})),
            termination=TerminationHandlingConfig(**tb.get("termination", {})),
            harness=HarnessConfig(**tb.get("harness", {})),
            l2c2=L2C2Config(**tb.get("l2c2", {})),
            symmetry=SymmetryConfig(**tb.get("symmetry", {})),
        ),
        train=TrainParams(**{**cfg.get("train", {}),
                             "hidden": tuple(cfg.get("train", {}).get("hidden", (64, 64)))}),
        episode_length=float(cfg.get("episode_length", 10.0)),
        history_depth=int(cfg.get("history_depth", 1)),
        standing_hold_time=float(cfg.get("standing_hold_time", 2.0)),
        raw=raw,
    )
    task.validate()
    return task


# -- observations ----------------------------------------------------------------

# hard clip on every scaled observation channel; contact bounces and limit
# impacts can spike velocities, and unbounded inputs blow up the policy update
OBS_CLIP = 100.0


def _term_values(name: str, model: RobotModel, state: SimState,
                 command: np.ndarray, last_action: np.ndarray) -> np.ndarray:
    if name == "pitch_rate":
        return state.base_vel[:, 2:3]
    if name == "pitch_trig":
        pitch = state.base[:, 2]
        return np.stack([np.sin(pitch), np.cos(pitch)], axis=-1)
    if name == "command":
        return command
    if name == "q":
        return state.q
    if name == "qd":
        return state.qd
    if name == "last_action":
        return last_action
    if name == "base_lin_vel":
        return state.base_vel[:, :2]
    if name == "contact_forces":
        return state.contact_force.reshape(state.n, -1)
    raise ConfigError(f"unknown observation term '{name}'")


def compute_observations(task: TaskConfig, state: SimState, command: np.ndarray,
                         last_action: np.ndarray,
                         rng: np.random.Generator | None = None,
                         noise_multiplier: float | None = None):
    """Actor (scaled + noised) and critic (noiseless + privileged) observations.

    Term order and sizes are exactly the configured lists; this layout is the
    exported descriptor's ground truth.
    """
    mult = task.noise_multiplier if noise_multiplier is None else noise_multiplier
    clean = []
    noisy = []
    for term in task.actor_terms:
        v = _term_values(term.name, task.robot, state, command, last_action) * term.scale
        clean.append(v)
        std = term.noise_std * mult
        if std > 0 and rng is not None:
            v = v + rng.normal(0.0, std, size=v.shape)
        noisy.append(v)
    priv = [
        _term_values(t.name, task.robot, state, command, last_action) * t.scale
        for t in task.critic_extra_terms
    ]
    actor_obs = np.clip(np.concatenate(noisy, axis=-1), -OBS_CLIP, OBS_CLIP)
    critic_obs = np.clip(np.concatenate(clean + priv, axis=-1), -OBS_CLIP, OBS_CLIP)
    return actor_obs, critic_obs


def build_obs_mirror(task: TaskConfig, terms: Sequence[ObsTerm]) -> MirrorRule:
    """Concatenate per-term mirror rules into one rule over the full vector.

    Raises if any term has no configured rule coverage (unknown term name).
    """
    sym = task.robot.symmetry
    perms, signs = [], []
    offset = 0
    for t in terms:
        if t.name == "contact_forces":
            # swap the two feet, keep (normal, tangential) component order
            rule = MirrorRule(np.array([2, 3, 0, 1]), np.ones(4))
        else:
            rule = sym.rule_for_term(t.name, t.width)
        perms.append(rule.permutation + offset)
        signs.append(rule.signs)
        offset += t.width
    return MirrorRule(np.concatenate(perms), np.concatenate(signs))


def actor_mirror_rule(task: TaskConfig) -> MirrorRule:
    return build_obs_mirror(task, task.actor_terms)


def critic_mirror_rule(task: TaskConfig) -> MirrorRule:
    return build_obs_mirror(task, (*task.actor_terms, *task.critic_extra_terms))


# -- rewards ------------------------------------------------------------------------

def _rw_track_vx(task, prev, state, a, pa, cmd):
    return np.exp(-((state.base_vel[:, 0] - cmd[:, 0]) ** 2) / 0.25)


def _rw_track_height(task, prev, state, a, pa, cmd):
    return np.exp(-((state.base[:, 1] - cmd[:, 1]) ** 2) / 0.01)


def _rw_upright(task, prev, state, a, pa, cmd):
    return np.exp(-(state.base[:, 2] ** 2) / 0.1)


def _rw_alive(task, prev, state, a, pa, cmd):
    return np.ones(state.n)


def _rw_action_rate(task, prev, state, a, pa, cmd):
    return -((a - pa) ** 2).sum(axis=-1)


def _rw_joint_accel(task, prev, state, a, pa, cmd):
    return -(state.qdd_last ** 2).sum(axis=-1)


def _rw_torque(task, prev, state, a, pa, cmd):
    return -(state.tau ** 2).sum(axis=-1)


def _rw_limit_violation(task, prev, state, a, pa, cmd):
    lo = task.robot.lower_limits
    hi = task.robot.upper_limits
    at_limit = (state.q <= lo + 1e-6) | (state.q >= hi - 1e-6)
    return -at_limit.sum(axis=-1).astype(np.float64)


def standing_mask(state: SimState) -> np.ndarray:
    return (state.base[:, 1] > 0.6) & (np.abs(state.base[:, 2]) < 0.25)


def _rw_standing(task, prev, state, a, pa, cmd):
    return standing_mask(state).astype(np.float64)


REWARD_FNS = {
    "track_vx": _rw_track_vx,
    "track_height": _rw_track_height,
    "upright": _rw_upright,
    "alive": _rw_alive,
    "action_rate": _rw_action_rate,
    "joint_accel": _rw_joint_accel,
    "torque": _rw_torque,
    "limit_violation": _rw_limit_violation,
    "standing": _rw_standing,
}


def compute_rewards(task: TaskConfig, prev_state: SimState, state: SimState,
                    action: np.ndarray, prev_action: np.ndarray,
                    command: np.ndarray):
    """Weighted per-term rewards; total is the exact sum of weighted terms."""
    per_term = {}
    total = np.zeros(state.n)
    for term in task.rewards:
        value = REWARD_FNS[term.name](task, prev_state, state, action,
                                      prev_action, command) * term.weight
        per_term[term.name] = value
        total = total + value
    return total, per_term


# -- terminations ----------------------------------------------------------------------

def _tm_fallen(task, state, time, standing_time):
    return (np.abs(state.base[:, 2]) > 1.0) | (state.base[:, 1] < 0.4)


def _tm_tumbled(task, state, time, standing_time):
    # past a full inversion there is no way back without spinning
    return np.abs(state.base[:, 2]) > 4.0


def _tm_standing_held(task, state, time, standing_time):
    if standing_time is None:
        return np.zeros(state.n, dtype=bool)
    return standing_time >= task.standing_hold_time


def _tm_timeout(task, state, time, standing_time):
    return np.asarray(time) >= task.episode_length - 1e-9


TERMINATION_FNS = {
    "fallen": _tm_fallen,
    "tumbled": _tm_tumbled,
    "standing_held": _tm_standing_held,
    "timeout": _tm_timeout,
}


def check_terminations(task: TaskConfig, state: SimState, time: np.ndarray,
                       standing_time: np.ndarray | None = None):
    """Evaluate configured termination terms plus the implicit divergence term.

    Returns (terminated, class codes, reason index) where classes are
    0 none / 1 bad / 2 good / 3 neutral; bad takes precedence over good,
    good over neutral.
    """
    n = state.n
    cls = np.zeros(n, dtype=np.int64)
    reason = np.full(n, "", dtype=object)
    ordered = sorted(task.terminations,
                     key=lambda t: {"bad": 0, "good": 1, "neutral": 2}[t.cls])
    # implicit: sim divergence is always a bad termination
    hit = state.diverged.copy()
    cls[hit] = TERMINATION_CLASS_CODES["bad"]
    reason[hit] = "sim-diverged"
    for term in ordered:
        mask = TERMINATION_FNS[term.name](task, state, time, standing_time)
        new = mask & (cls == 0)
        cls[new] = TERMINATION_CLASS_CODES[term.cls]
        reason[new] = term.name
    return cls > 0, cls, reason


# -- commands -----------------------------------------------------------------------------

@dataclass
class AdaptiveCommandState:
    """Per-bin running tracking error; single writer between rollout phases."""

    cfg: CommandConfig
    err_sum: np.ndarray = None
    err_count: np.ndarray = None

    def __post_init__(self):
        if self.err_sum is None:
            self.err_sum = np.zeros(self.cfg.bins)
        if self.err_count is None:
            self.err_count = np.zeros(self.cfg.bins)

    def bin_of(self, vx: np.ndarray) -> np.ndarray:
        lo, hi = self.cfg.vx_range
        idx = np.floor((vx - lo) / (hi - lo) * self.cfg.bins).astype(int)
        return np.clip(idx, 0, self.cfg.bins - 1)

    def record(self, vx_cmd: np.ndarray, tracking_err: np.ndarray) -> None:
        bins = self.bin_of(vx_cmd)
        np.add.at(self.err_sum, bins, tracking_err)
        np.add.at(self.err_count, bins, 1.0)

    def mean_errors(self) -> np.ndarray:
        return self.err_sum / np.maximum(self.err_count, 1.0)

    def bin_weights(self) -> np.ndarray:
        cfg = self.cfg
        w = 1.0 + cfg.kappa * self.mean_errors()
        w = w / w.sum()
        # fixed probability floor on the two bins nearest zero command
        lo, hi = cfg.vx_range
        centers = lo + (np.arange(cfg.bins) + 0.5) * (hi - lo) / cfg.bins
        near = np.argsort(np.abs(centers))[:2]
        w = (1.0 - cfg.near_zero_mass) * w
        w[near] += cfg.near_zero_mass / 2.0
        return w


def sample_commands(task: TaskConfig, rng: np.random.Generator, n: int,
                    adaptive_state: AdaptiveCommandState | None = None) -> np.ndarray:
    cfg = task.commands
    lo, hi = cfg.vx_range
    if cfg.adaptive and adaptive_state is not None:
        w = adaptive_state.bin_weights()
        bins = rng.choice(cfg.bins, size=n, p=w)
        width = (hi - lo) / cfg.bins
        vx = lo + (bins + rng.uniform(0.0, 1.0, size=n)) * width
    else:
        vx = rng.uniform(lo, hi, size=n)
    h = rng.uniform(cfg.height_range[0], cfg.height_range[1], size=n)
    return np.stack([vx, h], axis=-1)


# -- events -------------------------------------------------------------------------------

def sample_randomization_scales(task: TaskConfig, rng: np.random.Generator,
                                n: int) -> dict[str, np.ndarray]:
    """Episode-start multiplicative randomization of dynamics parameters."""
    r = task.randomize
    if not r.enabled or (r.low == 1.0 and r.high == 1.0):
        one = np.ones(n)
        return {k: one.copy() for k in ("mass", "kc", "mu", "lag")}
    return {k: rng.uniform(r.low, r.high, size=n) for k in ("mass", "kc", "mu", "lag")}


def push_magnitude(push: PushConfig, iteration: int) -> float:
    frac = min(1.0, iteration / max(push.ramp_iters, 1))
    return push.vel_min + (push.vel_max - push.vel_min) * frac


def apply_push_events(task: TaskConfig, state: SimState, rng: np.random.Generator,
                      iteration: int) -> SimState:
    """With per-step probability, kick the base horizontal velocity."""
    push = task.push
    if not push.enabled or push.prob <= 0:
        return state
    hit = rng.uniform(size=state.n) < push.prob
    # draw for every env to keep the stream length state-independent
    mag = push_magnitude(push, iteration)
    kick = rng.uniform(-mag, mag, size=state.n)
    state.base_vel[:, 0] += np.where(hit, kick, 0.0)
    return state


# -- state caching -----------------------------------------------------------------------

@dataclass
class StateCache:
    states: SimState            # batched, one row per cached state
    provenance: list[str]
    seed: int

    def __len__(self) -> int:
        return self.states.n

    def sample(self, rng: np.random.Generator, n: int) -> SimState:
        if len(self) == 0:
            raise ConfigError("state cache is empty")
        idx = rng.integers(0, len(self), size=n)
        return SimState(**{k: np.asarray(v)[idx].copy()
                           for k, v in self.states.__dict__.items()})


def build_state_cache(task: TaskConfig, n_states: int, rng: np.random.Generator,
                      settle_duration: float = 3.0,
                      max_retries: int = 10) -> StateCache:
    """Drop the robot from randomized poses and collect settled states."""
    if n_states <= 0:
        raise ConfigError("n_states must be > 0")
    model, cfg = task.robot, task.sim
    seed = int(rng.integers(0, 2 ** 31))
    # roughly even mix: upright drops settle standing, tumbled drops settle
    # into non-standing rest states (a slow settler, so oversample them)
    quota = {"settled-standing": n_states // 2,
             "settled-fallen": n_states - n_states // 2}
    collected: list[SimState] = []
    provenance: list[str] = []

    def _drop(k: int, upright: bool) -> SimState:
        st = sim_reset(model, cfg, n=k)
        st.base[:, 1] = rng.uniform(0.8, 1.5, size=k)
        if not upright:
            st.base[:, 2] = rng.uniform(-np.pi, np.pi, size=k)
            st.q = rng.uniform(model.lower_limits, model.upper_limits,
                               size=(k, model.n_joints))
            st.targets_filt = st.q.copy()
        return st

    for attempt in range(max_retries):
        if max(quota.values()) <= 0:
            break
        for kind, upright in (("settled-standing", True),
                              ("settled-fallen", False)):
            need = quota[kind]
            if need <= 0:
                continue
            st = _drop(max(need * 8, 16) if not upright else need, upright)
            settled, _ = settle_under_gravity(model, cfg, st, settle_duration)
            speed = np.linalg.norm(settled.base_vel[:, :2], axis=1)
            ok = (~settled.diverged) & (speed < 0.05) & \
                np.isfinite(settled.base).all(axis=1)
            ok &= standing_mask(settled) == (kind == "settled-standing")
            idx = np.flatnonzero(ok)[:need]
            if idx.size:
                keep = SimState(**{k: np.asarray(v)[idx].copy()
                                   for k, v in settled.__dict__.items()})
                keep.time[:] = 0.0
                collected.append(keep)
                provenance.extend([kind] * idx.size)
                quota[kind] -= idx.size
    if max(quota.values()) > 0:
        total = sum(s.n for s in collected)
        raise ConfigError(
            f"state cache: only {total}/{n_states} states settled after "
            f"{max_retries} retries"
        )
    merged = SimState(**{
        k: np.concatenate([np.asarray(getattr(s, k)) for s in collected])[:n_states]
        for k in collected[0].__dict__
    })
    return StateCache(states=merged, provenance=provenance[:n_states], seed=seed)


def save_state_cache(cache: StateCache, path) -> Path:
    from .serialization import write_blob
    arrays = {k: np.asarray(v, dtype=np.float64)
              for k, v in cache.states.__dict__.items()}
    return write_blob(path, "state_cache",
                      {"provenance": list(cache.provenance),
                       "seed": cache.seed}, arrays)


def load_state_cache(path) -> StateCache:
    from .serialization import read_blob
    meta, arrays = read_blob(path, expected_kind="state_cache")
    arrays = dict(arrays)
    arrays["diverged"] = arrays["diverged"].astype(bool)
    return StateCache(states=SimState(**arrays),
                      provenance=list(meta["provenance"]),
                      seed=int(meta["seed"]))


# -- command scripts ----------------------------------------------------------------------

@dataclass(frozen=True)
class ScriptEntry:
    duration: float
    vx: float
    height: float
    ramp: bool = False


class CommandScript:
    """Piecewise-constant (or per-entry linearly ramped) command of time.

    Beyond the script end the last command holds.  Exact and deterministic.
    """

    def __init__(self, entries: Sequence[ScriptEntry]):
        if not entries:
            raise ConfigError("command script must not be empty")
        for e in entries:
            if e.duration <= 0:
                raise ConfigError("script entry durations must be > 0")
        self.entries = tuple(entries)
        self.starts = np.concatenate([[0.0], np.cumsum([e.duration for e in entries])])

    @property
    def total_duration(self) -> float:
        return float(self.starts[-1])

    def command_at(self, t: float) -> np.ndarray:
        entries = self.entries
        if t >= self.starts[-1]:
            e = entries[-1]
            return np.array([e.vx, e.height])
        i = int(np.searchsorted(self.starts, t, side="right") - 1)
        i = max(0, min(i, len(entries) - 1))
        e = entries[i]
        if not e.ramp:
            return np.array([e.vx, e.height])
        # ramp from the previous entry's end command (or from itself if first)
        prev = entries[i - 1] if i > 0 else e
        frac = (t - self.starts[i]) / e.duration
        return np.array([
            prev.vx + (e.vx - prev.vx) * frac,
            prev.height + (e.height - prev.height) * frac,
        ])


def play_command_script(script: Sequence[ScriptEntry] | Sequence[Mapping]) -> CommandScript:
    entries = [e if isinstance(e, ScriptEntry) else ScriptEntry(**e) for e in script]
    return CommandScript(entries)


def velocity_ladder(vx_lo=-0.8, vx_hi=0.8, step=0.2, hold=5.0,
                    height=0.75) -> CommandScript:
    values = np.arange(vx_lo, vx_hi + step / 2, step)
    return CommandScript([ScriptEntry(hold, float(v), height) for v in values])


def height_ramp(h_hi=0.75, h_lo=0.55, ramp=10.0, hold=5.0, vx=0.0) -> CommandScript:
    return CommandScript([
        ScriptEntry(hold, vx, h_hi),
        ScriptEntry(ramp, vx, h_lo, ramp=True),
        ScriptEntry(hold, vx, h_lo),
        ScriptEntry(ramp, vx, h_hi, ramp=True),
        ScriptEntry(hold, vx, h_hi),
    ])
