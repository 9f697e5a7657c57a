"""Policy export and descriptor-driven inference.

The exported descriptor freezes the complete I/O contract: joint order,
observation layout and scaling, history depth, and action mapping.  The
inference runtime is reconstructed from the descriptor and weights alone,
never from the task config, and assembles observations independently of the
training code so that descriptor errors surface as trajectory divergence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import nets
from .env import BipedEnv
from .evaluation import (PolicyActor, Scenario, builtin_scenario,
                         evaluate_tracking, motion_metrics, run_scenario)
from .mdp import TERM_WIDTHS, TaskConfig
from .report import metrics_json, render_report
from .robot import ConfigError
from .serialization import read_blob, write_blob

SCHEMA_VERSION = 1
CONSISTENCY_TOLERANCE = 1e-9


class DeployError(Exception):
    """Raised for invalid or inconsistent deployment artifacts."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export_policy(policy: nets.MlpPolicy, task: TaskConfig,
                  out_dir: str | Path, history_depth: int | None = None
                  ) -> tuple[Path, Path]:
    """Write the descriptor and weights files for a trained policy.

    The history depth is inferred from the network input width when not
    given; a width that is not a whole multiple of the per-frame
    observation width is rejected.
    """
    frame = task.actor_obs_width
    if history_depth is None:
        if policy.obs_dim % frame != 0:
            raise DeployError(
                f"network input width {policy.obs_dim} is not a multiple "
                f"of the observation frame width {frame}")
        history_depth = policy.obs_dim // frame
    if policy.obs_dim != frame * history_depth:
        raise DeployError(
            f"network input width {policy.obs_dim} != frame width {frame} "
            f"x history depth {history_depth}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / "weights.bin"
    write_blob(weights_path, "policy_weights",
               {"obs_dim": policy.obs_dim,
                "critic_obs_dim": policy.critic_obs_dim,
                "act_dim": policy.act_dim, "hidden": list(policy.hidden)},
               policy.params)

    model = task.robot
    tb = task.toolbox
    doc = {
        "descriptor": {
            "schema_version": SCHEMA_VERSION,
            "task": task.name,
            "control_dt": float(task.sim.control_dt),
            "joints": [
                {"name": n,
                 "lower": float(model.lower_limits[j]),
                 "upper": float(model.upper_limits[j]),
                 "default": float(model.default_pose[j])}
                for j, n in enumerate(model.joint_names)
            ],
            "observation": {
                "history_depth": int(history_depth),
                "terms": [
                    {"name": t.name, "width": int(t.width),
                     "scale": float(t.scale),
                     "noise_free": t.noise_std == 0.0}
                    for t in task.actor_terms
                ],
            },
            "action": {
                "width": int(policy.act_dim),
                "scale": float(task.action_scale),
                "offset": [float(v) for v in model.default_pose],
                "clip": float(task.action_clip),
            },
            "weights": {"file": weights_path.name,
                        "sha256": _sha256(weights_path)},
            "toolbox": {
                "l2c2": bool(tb.l2c2.enabled),
                "symmetry_augmentation": bool(tb.symmetry.enabled),
                "reward_normalizer": bool(tb.normalizer.enabled),
                "harness": bool(tb.harness.enabled),
                "termination_mode": tb.termination.mode,
            },
        }
    }
    descriptor_path = out_dir / "descriptor.yaml"
    descriptor_path.write_text(
        yaml.safe_dump(doc, sort_keys=True, default_flow_style=False))
    return descriptor_path, weights_path


@dataclass
class InferenceRuntime:
    """Stateful single-robot inference from exported artifacts only."""

    descriptor: dict
    policy: nets.MlpPolicy
    history_depth: int
    frame_width: int
    last_action: np.ndarray = field(init=False)
    _ring: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self):
        self.last_action = np.zeros(self.policy.act_dim)

    def reset(self) -> None:
        self._ring = None
        self.last_action = np.zeros(self.policy.act_dim)

    def fresh(self) -> "InferenceRuntime":
        return InferenceRuntime(self.descriptor, self.policy,
                                self.history_depth, self.frame_width)


def load_runtime(descriptor_path: str | Path,
                 weights_path: str | Path | None = None) -> InferenceRuntime:
    """Reconstruct an inference runtime from a descriptor/weights pair."""
    descriptor_path = Path(descriptor_path)
    doc = yaml.safe_load(descriptor_path.read_text())
    if not isinstance(doc, dict) or "descriptor" not in doc:
        raise DeployError("missing top-level 'descriptor' key")
    d = doc["descriptor"]
    if d.get("schema_version") != SCHEMA_VERSION:
        raise DeployError(
            f"unsupported descriptor schema version {d.get('schema_version')}")

    if weights_path is None:
        weights_path = descriptor_path.parent / d["weights"]["file"]
    weights_path = Path(weights_path)
    digest = _sha256(weights_path)
    if digest != d["weights"]["sha256"]:
        raise DeployError(
            f"weights digest mismatch: descriptor expects "
            f"{d['weights']['sha256']}, file has {digest}")

    meta, arrays = read_blob(weights_path, expected_kind="policy_weights")
    policy = nets.MlpPolicy(meta["obs_dim"], meta["critic_obs_dim"],
                            meta["act_dim"], tuple(meta["hidden"]), arrays)

    frame = 0
    for t in d["observation"]["terms"]:
        if t["name"] not in TERM_WIDTHS:
            raise DeployError(f"unknown observation term '{t['name']}'")
        if t["width"] != TERM_WIDTHS[t["name"]]:
            raise DeployError(
                f"term '{t['name']}' declares width {t['width']}, "
                f"expected {TERM_WIDTHS[t['name']]}")
        frame += t["width"]
    depth = int(d["observation"]["history_depth"])
    if frame * depth != policy.obs_dim:
        raise DeployError(
            f"descriptor obs width {frame} x depth {depth} != network "
            f"input width {policy.obs_dim}")
    if len(d["joints"]) != d["action"]["width"]:
        raise DeployError("joint list and action width disagree")
    return InferenceRuntime(descriptor=d, policy=policy,
                            history_depth=depth, frame_width=frame)


def _raw_term(name: str, snapshot: dict, command, last_action) -> np.ndarray:
    if name == "command":
        return np.asarray(command, dtype=float)
    if name == "last_action":
        return np.asarray(last_action, dtype=float)
    if name == "pitch_trig":
        if "pitch" not in snapshot:
            raise DeployError("snapshot missing named quantity 'pitch'")
        pitch = float(snapshot["pitch"])
        return np.array([np.sin(pitch), np.cos(pitch)])
    if name not in snapshot:
        raise DeployError(f"snapshot missing named quantity '{name}'")
    return np.atleast_1d(np.asarray(snapshot[name], dtype=float))


def assemble_observation(runtime: InferenceRuntime, snapshot: dict,
                         command, last_action=None) -> np.ndarray:
    """Scale and concatenate raw named quantities per the descriptor.

    The frame is pushed into the history ring; the first frame seeds the
    whole ring.  Output is the ring flattened oldest-to-newest.
    """
    if last_action is None:
        last_action = runtime.last_action
    parts = []
    for t in runtime.descriptor["observation"]["terms"]:
        v = _raw_term(t["name"], snapshot, command, last_action) * t["scale"]
        if v.shape != (t["width"],):
            raise DeployError(
                f"term '{t['name']}' produced width {v.size}, descriptor "
                f"says {t['width']}")
        parts.append(v)
    frame = np.concatenate(parts)
    if runtime._ring is None:
        runtime._ring = np.tile(frame, (runtime.history_depth, 1))
    else:
        runtime._ring = np.vstack([runtime._ring[1:], frame[None]])
    return runtime._ring.reshape(-1)


def infer(runtime: InferenceRuntime, obs: np.ndarray) -> np.ndarray:
    """Deterministic joint targets from an assembled observation vector."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (runtime.policy.obs_dim,):
        raise DeployError(
            f"observation width {obs.size} != network input width "
            f"{runtime.policy.obs_dim}")
    mean = nets.actor_mean(runtime.policy, obs[None])[0]
    runtime.last_action = mean.copy()
    spec = runtime.descriptor["action"]
    a = np.clip(mean, -spec["clip"], spec["clip"])
    targets = np.asarray(spec["offset"]) + spec["scale"] * a
    lo = np.array([j["lower"] for j in runtime.descriptor["joints"]])
    hi = np.array([j["upper"] for j in runtime.descriptor["joints"]])
    return np.clip(targets, lo, hi)


class RuntimeActor:
    """Scenario adapter that observes through the runtime path only.

    Raw simulator quantities are read off as a hardware interface would and
    passed through descriptor-driven observation assembly; joint targets
    come from the descriptor's action mapping, so a wrong descriptor shows
    up as trajectory divergence.
    """

    def __init__(self, runtime: InferenceRuntime):
        self.template = runtime
        self.runtimes: list[InferenceRuntime] = []
        self._offset = None
        self._scale = None

    def reset(self, env: BipedEnv) -> None:
        self.runtimes = [self.template.fresh() for _ in range(env.n)]
        # the env speaks normalized actions; convert the runtime's target
        # radians back through the env's own mapping, so descriptor errors
        # stay visible in the resulting trajectory
        self._offset = env.model.default_pose.copy()
        self._scale = env.task.action_scale

    def __call__(self, env: BipedEnv) -> np.ndarray:
        st = env.state
        actions = np.zeros((env.n, env.model.n_joints))
        for i, rt in enumerate(self.runtimes):
            snapshot = {
                "pitch": st.base[i, 2],
                "pitch_rate": st.base_vel[i, 2:3],
                "q": st.q[i],
                "qd": st.qd[i],
            }
            obs = assemble_observation(rt, snapshot, env.command[i])
            targets = infer(rt, obs)
            actions[i] = (targets - self._offset) / self._scale
        return actions


def sim2sim_validate(descriptor_path: str | Path, task: TaskConfig,
                     out_dir: str | Path, scenario: Scenario | None = None,
                     seed: int = 0,
                     weights_path: str | Path | None = None) -> dict:
    """Validate exported artifacts by cross-backend scenario evaluation.

    First proves runtime/training-path agreement on the reference backend
    (catching descriptor faults as trajectory divergence), then runs the
    scenario on both backends through the runtime and writes the standard
    HTML/JSON report.
    """
    runtime = load_runtime(descriptor_path, weights_path)
    task_like = runtime.history_depth == 1 and \
        runtime.frame_width == task.actor_obs_width
    if runtime.frame_width * runtime.history_depth != \
            runtime.policy.obs_dim:
        raise DeployError("descriptor layout inconsistent")
    scenario = scenario or builtin_scenario("sweep")

    # consistency check: runtime path must reproduce the training path
    if task_like:
        probe = Scenario(name="consistency", script=scenario.script,
                         duration=min(2.0, scenario.duration), n_envs=1)
        ref_runtime = run_scenario(RuntimeActor(runtime), task, probe,
                                   seed=seed)
        ref_training = run_scenario(PolicyActor(runtime.policy), task, probe,
                                    seed=seed)
        deviation = float(np.max(np.abs(ref_runtime.q - ref_training.q)))
        if deviation > CONSISTENCY_TOLERANCE:
            raise DeployError(
                f"runtime trajectory diverges from the training path by "
                f"{deviation:.3e}; descriptor does not match the task")
    else:
        deviation = None

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sections, results = [], {}
    for backend in ("reference", "variant"):
        tracking, recs = evaluate_tracking(
            RuntimeActor(runtime), task, scenario, runs=1, seed=seed,
            backend=backend)
        rec = recs[0]
        sections.append({"recording": rec,
                         "motion": motion_metrics(rec, task.robot),
                         "tracking": tracking})
        sections[-1]["recording"].scenario = f"{scenario.name} ({backend})"
        results[backend] = {
            "tracking": tracking.as_dict(),
            "diverged_envs": int(rec.diverged.sum()),
        }
    metadata = {"task": task.name, "seed": seed,
                "descriptor": str(descriptor_path),
                "consistency_deviation": deviation}
    report_path = render_report(sections, metadata, out_dir / "report.html")
    (out_dir / "metrics.json").write_text(metrics_json(sections, metadata))
    results["report"] = str(report_path)
    results["consistency_deviation"] = deviation
    return results
