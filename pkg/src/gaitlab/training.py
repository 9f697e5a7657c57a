"""Rollout/update training loop, distillation and parameter sweeps.

Artifacts per run: a snapshot written before iteration 0 (resolved config,
seed, code version, timestamp), an append-only JSONL metrics log (one object
per iteration, byte-identical across same-seed runs), and periodic
checkpoints.  All randomness derives from the single run seed.
"""

from __future__ import annotations

import copy
import itertools
import json
import subprocess
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import mdp, nets, toolbox
from .env import BipedEnv, ObsHistory
from .mdp import StateCache, TaskConfig, build_state_cache, load_task_config
from .ppo import AdamState, TrainingError, compute_gae, ppo_update
from .robot import ConfigError, MirrorRule, mirror_vector
from .serialization import read_blob, write_blob

DIVERGENCE_ABORT_FRACTION = 0.10


def code_version() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unversioned"


def save_checkpoint(path: str | Path, policy: nets.MlpPolicy,
                    meta: dict) -> Path:
    meta = {**meta, "obs_dim": policy.obs_dim,
            "critic_obs_dim": policy.critic_obs_dim,
            "act_dim": policy.act_dim, "hidden": list(policy.hidden)}
    return write_blob(path, "checkpoint", meta, policy.params)


def load_checkpoint(path: str | Path):
    meta, arrays = read_blob(path, expected_kind="checkpoint")
    policy = nets.MlpPolicy(meta["obs_dim"], meta["critic_obs_dim"],
                            meta["act_dim"], tuple(meta["hidden"]), arrays)
    return policy, meta


def write_snapshot(out_dir: Path, task: TaskConfig, seed: int,
                   extra: dict | None = None) -> Path:
    snap = {
        "config": task.raw,
        "seed": seed,
        "code_version": code_version(),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "metrics_path": "metrics.jsonl",
    }
    if extra:
        snap.update(extra)
    path = out_dir / "snapshot.json"
    path.write_text(json.dumps(snap, indent=2, sort_keys=True, default=str))
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


@dataclass
class Rollout:
    batch: dict            # flat arrays over T*N samples
    raw_reward_mean: float
    term_means: dict       # per reward-term batch means (weighted)
    done_classes: np.ndarray
    diverged_fraction: float


def collect_rollout(env: BipedEnv, policy: nets.MlpPolicy, horizon: int,
                    act_rng: np.random.Generator, iteration: int,
                    norm: toolbox.RewardNormalizerState | None,
                    tcfg, gamma: float = 0.99) -> Rollout:
    """Gather one on-policy rollout with rewards fully post-processed."""
    T, N = horizon, env.n
    O, C = env.actor_obs_width, env.critic_obs_width
    J = env.model.n_joints
    obs_seq = np.zeros((T + 1, N, O))
    cobs_seq = np.zeros((T + 1, N, C))
    actions = np.zeros((T, N, J))
    logps = np.zeros((T, N))
    values = np.zeros((T, N))
    rewards = np.zeros((T, N))
    dones = np.zeros((T, N), dtype=bool)
    classes = np.zeros((T, N), dtype=np.int64)
    terminal_cobs = np.zeros((T, N, C))
    term_sums: dict[str, float] = {}
    diverged = 0

    obs, cobs = env.observe()
    for t in range(T):
        obs_seq[t], cobs_seq[t] = obs, cobs
        a, logp, _ = nets.sample_actions(policy, obs, act_rng)
        values[t] = nets.critic_value(policy, cobs)
        res = env.step(a, iteration=iteration)
        actions[t], logps[t] = a, logp
        rewards[t] = res.reward
        dones[t], classes[t] = res.done, res.term_class
        terminal_cobs[t] = res.terminal_critic_obs
        diverged += int(np.sum(res.reason == "sim-diverged"))
        for name, v in res.reward_terms.items():
            term_sums[name] = term_sums.get(name, 0.0) + float(v.mean())
        obs, cobs = env.observe()
    obs_seq[T], cobs_seq[T] = obs, cobs

    raw_mean = float(rewards.mean())
    r = norm.normalize(rewards) if norm is not None else rewards.copy()

    if tcfg.enabled and dones.any():
        mask = dones
        v_term = np.zeros((T, N))
        v_term[mask] = nets.critic_value(policy, terminal_cobs[mask])
        if tcfg.mode == "bootstrap":
            r[mask] = toolbox.bootstrap_termination(
                r[mask], v_term[mask], classes[mask], gamma, tcfg.sigma_term)
        elif tcfg.mode == "penalty":
            # fixed terminal penalties/bonuses; timeouts still bootstrap
            r[mask & (classes == 1)] += tcfg.penalty_bad
            r[mask & (classes == 2)] += tcfg.penalty_good
            neutral = mask & (classes == 3)
            r[neutral] += gamma * v_term[neutral]
        else:
            raise ConfigError(f"unknown termination mode '{tcfg.mode}'")

    batch = {
        "obs": obs_seq[:T].reshape(T * N, O),
        "critic_obs": cobs_seq[:T].reshape(T * N, C),
        "next_obs": obs_seq[1:].reshape(T * N, O),
        "next_critic_obs": cobs_seq[1:].reshape(T * N, C),
        "actions": actions.reshape(T * N, J),
        "logp": logps.reshape(T * N),
        "nonterminal": (~dones).reshape(T * N),
        "rewards": r,          # (T, N), consumed by GAE
        "values": values,      # (T, N)
        "dones": dones,
        "bootstrap_value": nets.critic_value(policy, cobs),
    }
    return Rollout(batch=batch, raw_reward_mean=raw_mean,
                   term_means=term_sums and
                   {k: v / T for k, v in term_sums.items()},
                   done_classes=classes[dones],
                   diverged_fraction=diverged / N)


@dataclass
class TrainResult:
    policy: nets.MlpPolicy
    metrics: list
    out_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    snapshot_path: Path


def train(task: TaskConfig, out_dir: str | Path, seed: int | None = None,
          state_cache: StateCache | None = None,
          iterations: int | None = None,
          n_envs: int | None = None,
          progress: bool = False) -> TrainResult:
    """Full PPO run; a pure function of (task config, seed) up to wall clock."""
    tp = task.train
    seed = tp.seed if seed is None else int(seed)
    iterations = tp.iterations if iterations is None else int(iterations)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ss = np.random.SeedSequence(seed)
    env_ss, init_ss, act_ss, update_ss, cache_ss = ss.spawn(5)
    if task.init_mode == "cache" and state_cache is None:
        state_cache = build_state_cache(
            task, task.cache_size, np.random.default_rng(cache_ss))
    env = BipedEnv(task, n_envs=n_envs, seed=env_ss, state_cache=state_cache)
    policy = nets.init_policy(env.actor_obs_width, env.critic_obs_width,
                              env.model.n_joints,
                              np.random.default_rng(init_ss),
                              hidden=tp.hidden, init_std=tp.init_std)
    act_rng = np.random.default_rng(act_ss)
    update_rng = np.random.default_rng(update_ss)
    adam = AdamState.for_params(nets.flatten_params(policy.params))

    tb = task.toolbox
    norm = toolbox.RewardNormalizerState(
        gamma=tp.gamma, decay=tb.normalizer.beta,
        epsilon=tb.normalizer.epsilon) if tb.normalizer.enabled else None
    obs_rule = mdp.actor_mirror_rule(task)
    critic_rule = mdp.critic_mirror_rule(task)
    action_rule = task.robot.symmetry.action_rule

    metrics_path = out_dir / "metrics.jsonl"
    snapshot_path = write_snapshot(out_dir, task, seed,
                                   {"iterations": iterations,
                                    "n_envs": env.n})
    metrics: list[dict] = []
    harness_scale = 1.0 if tb.harness.enabled else 0.0

    with open(metrics_path, "w") as log:
        for it in range(iterations):
            if tb.harness.enabled:
                harness_scale = toolbox.harness_schedule(
                    tb.harness.schedule, it, tb.harness.horizon,
                    standing_ratio=env.standing_fraction(),
                    current_scale=harness_scale,
                    threshold=tb.harness.adaptive_threshold,
                    step=tb.harness.adaptive_step)
                env.harness_scale = harness_scale

            ro = collect_rollout(env, policy, tp.rollout_steps, act_rng, it,
                                 norm, tb.termination, gamma=tp.gamma)
            if ro.diverged_fraction > DIVERGENCE_ABORT_FRACTION:
                write_snapshot(out_dir, task, seed, {
                    "aborted_at_iteration": it,
                    "diverged_fraction": ro.diverged_fraction})
                save_checkpoint(out_dir / "ckpt_abort.bin", policy,
                                {"task": task.name, "iteration": it,
                                 "seed": seed})
                raise TrainingError(
                    f"{ro.diverged_fraction:.0%} of envs diverged at "
                    f"iteration {it}; aborting")

            batch = ro.batch
            adv, ret = compute_gae(batch.pop("rewards"), batch.pop("values"),
                                   batch.pop("bootstrap_value"),
                                   batch.pop("dones"), tp.gamma,
                                   tp.gae_lambda)
            if norm is not None:
                norm.update_return_scale(float(ret.std()))
            batch["advantages"] = adv.reshape(-1)
            batch["returns"] = ret.reshape(-1)

            policy, stats = ppo_update(policy, batch, tp, tb, update_rng,
                                       adam, obs_rule, critic_rule,
                                       action_rule)

            ep = env.stats.drain()
            n_done = len(ep.classes)
            row = {
                "iteration": it,
                "reward_mean": ro.raw_reward_mean,
                "episode_length_mean":
                    float(np.mean(ep.lengths)) if ep.lengths else None,
                "episode_return_mean":
                    float(np.mean(ep.returns)) if ep.returns else None,
                "episodes_done": n_done,
                "bad_ratio": ep.classes.count(1) / n_done if n_done else None,
                "good_ratio": ep.classes.count(2) / n_done if n_done else None,
                "timeout_ratio":
                    ep.classes.count(3) / n_done if n_done else None,
                "harness_scale": harness_scale,
                "standing_fraction": env.standing_fraction(),
                "diverged_fraction": ro.diverged_fraction,
            }
            for name, v in ro.term_means.items():
                row[f"reward/{name}"] = v
            for k in ("policy_loss", "value_loss", "entropy", "l2c2_loss",
                      "approx_kl", "clip_fraction", "noise_std"):
                row[k] = stats[k]
            metrics.append(row)
            log.write(json.dumps({k: _jsonable(v) for k, v in row.items()},
                                 sort_keys=True) + "\n")
            if progress and (it % 50 == 0 or it == iterations - 1):
                print(f"iter {it}: reward {row['reward_mean']:.4f} "
                      f"ep_len {row['episode_length_mean']}")

            if (it + 1) % tp.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"ckpt_{it + 1:06d}.bin", policy,
                                {"task": task.name, "iteration": it + 1,
                                 "seed": seed})

    final_path = save_checkpoint(out_dir / "ckpt_final.bin", policy,
                                 {"task": task.name, "iteration": iterations,
                                  "seed": seed})
    return TrainResult(policy=policy, metrics=metrics, out_dir=out_dir,
                       checkpoint_path=final_path, metrics_path=metrics_path,
                       snapshot_path=snapshot_path)


# -- distillation -----------------------------------------------------------------


def history_mirror_rule(rule: MirrorRule, depth: int) -> MirrorRule:
    """Apply a per-frame rule independently to each frame of a history."""
    w = rule.width
    perms = [rule.permutation + i * w for i in range(depth)]
    signs = [rule.signs] * depth
    return MirrorRule(np.concatenate(perms), np.concatenate(signs))


def _mirror_matrix(rule: MirrorRule) -> np.ndarray:
    m = np.zeros((rule.width, rule.width))
    m[rule.permutation, np.arange(rule.width)] = rule.signs
    return m


def distill_student(teacher: nets.MlpPolicy, task: TaskConfig,
                    history_depth: int = 5, iterations: int = 300,
                    out_dir: str | Path | None = None, seed: int = 0,
                    n_envs: int | None = None, horizon: int = 24,
                    mirror_weight: float = 1.0, lr: float = 1e-3,
                    state_cache: StateCache | None = None):
    """On-policy regression of a history-input student onto the teacher.

    The student sees only the H-frame actor-observation history (no
    privileged terms) and additionally matches its own mirrored outputs.
    Returns (student policy, per-iteration loss log).
    """
    O = task.actor_obs_width
    if teacher.obs_dim != O:
        raise ConfigError(
            f"teacher expects obs width {teacher.obs_dim}, task has {O}")
    ss = np.random.SeedSequence(seed)
    env_ss, init_ss, update_ss = ss.spawn(3)
    env = BipedEnv(task, n_envs=n_envs, seed=env_ss, state_cache=state_cache)
    student = nets.init_policy(O * history_depth, O * history_depth,
                               teacher.act_dim,
                               np.random.default_rng(init_ss),
                               hidden=teacher.hidden)
    hist = ObsHistory(env.n, O, history_depth)
    obs_rule = history_mirror_rule(mdp.actor_mirror_rule(task), history_depth)
    act_rule = task.robot.symmetry.action_rule
    act_mirror = _mirror_matrix(act_rule)
    adam = AdamState.for_params(nets.flatten_params(student.params))
    log = []

    obs, _ = env.observe()
    hist.push(obs)
    for it in range(iterations):
        xs = np.zeros((horizon, env.n, O * history_depth))
        targets = np.zeros((horizon, env.n, teacher.act_dim))
        for t in range(horizon):
            x = hist.flat()
            xs[t] = x
            targets[t] = nets.actor_mean(teacher, obs)
            a = nets.actor_mean(student, x)
            res = env.step(a, iteration=it)
            obs, _ = env.observe()
            hist.push(obs, reset_mask=res.done)

        X = xs.reshape(-1, O * history_depth)
        Y = targets.reshape(-1, teacher.act_dim)
        Xm = mirror_vector(obs_rule, X)

        tensors = nets.param_tensors(student)
        a_s = nets.actor_mean_graph(student, tensors, X)
        a_sm = nets.actor_mean_graph(student, tensors, Xm)
        from .autodiff import as_tensor
        match = (a_s - as_tensor(Y)).square().sum(axis=-1).mean()
        mirrored = a_s @ as_tensor(act_mirror)
        mirror_term = (mirrored - a_sm).square().sum(axis=-1).mean()
        loss = match + mirror_term * mirror_weight
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in tensors.items()}
        flat = adam.step(nets.flatten_params(student.params),
                         nets.flatten_params(grads), lr)
        student.params = nets.unflatten_params(student.params, flat)
        log.append({"iteration": it, "distill_loss": float(match.data),
                    "mirror_loss": float(mirror_term.data)})

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "student.bin", student,
                        {"task": task.name, "seed": seed,
                         "history_depth": history_depth,
                         "distilled": True})
        (out_dir / "distill_log.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    return student, log


# -- sweeps -----------------------------------------------------------------------


def _sweep_points(raw: dict, entries: list[dict]):
    """Cartesian product of sweep entries; yields (label dict, override fn)."""
    def _abs(p: str) -> str:
        # sweep paths use the same root-relative form as --set overrides
        return p if p.startswith("task.") else "task." + p

    axes = []
    for e in entries:
        if "path" in e:
            axes.append([("set", _abs(e["path"]), v) for v in e["values"]])
        elif "scale" in e:
            paths = []
            for p in e["scale"]:
                paths.extend(mdp.expand_paths(raw, _abs(p)))
            axes.append([("scale", tuple(paths), v) for v in e["values"]])
        else:
            raise ConfigError("sweep entry needs 'path' or 'scale'")
    return itertools.product(*axes)


def apply_sweep_point(raw: dict, point) -> tuple[dict, dict]:
    """Returns (modified raw config, label dict) for one grid point."""
    out = copy.deepcopy(raw)
    label = {}
    for kind, target, value in point:
        if kind == "set":
            mdp.set_by_path(out, target, value)
            label[target] = value
        else:
            # scaled dict: one multiplier over a named parameter group,
            # preserving the group's relative structure
            for p in target:
                mdp.set_by_path(out, p, mdp.get_by_path(raw, p) * value)
            label[f"scale({target[0]}...x{len(target)})"] = value
    return out, label


def sweep(task_source, sweep_entries: list[dict], out_dir: str | Path,
          seed: int = 0, iterations: int | None = None,
          n_envs: int | None = None) -> list[dict]:
    """Grid sweep; one training run and summary row per grid point."""
    base = load_task_config(task_source)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, point in enumerate(_sweep_points(base.raw, sweep_entries)):
        raw, label = apply_sweep_point(base.raw, point)
        task = load_task_config(raw)
        res = train(task, out_dir / f"point_{i:03d}", seed=seed,
                    iterations=iterations, n_envs=n_envs)
        tail = res.metrics[-min(len(res.metrics), 10):]
        final_reward = float(np.mean([r["reward_mean"] for r in tail]))
        rows.append({"point": i, "params": label,
                     "final_reward": final_reward,
                     "final_tracking_rmse": _quick_tracking_rmse(task, res.policy, seed)})
    (out_dir / "summary.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True))
    return rows


def _quick_tracking_rmse(task: TaskConfig, policy: nets.MlpPolicy,
                         seed: int, steps: int = 150) -> float:
    """Deterministic fixed-command rollout, velocity tracking RMSE."""
    script = mdp.play_command_script([
        {"duration": 60.0, "vx": 0.4, "height": 0.75}])
    env = BipedEnv(task, n_envs=1, seed=seed, command_script=script,
                   noise_multiplier=0.0,
                   state_cache=None if task.init_mode != "cache" else
                   build_state_cache(task, 4, np.random.default_rng(seed)))
    errs = []
    obs, _ = env.observe()
    for _ in range(steps):
        a = nets.actor_mean(policy, obs)
        env.step(a)
        errs.append(env.state.base_vel[0, 0] - env.command[0, 0])
        obs, _ = env.observe()
    return float(np.sqrt(np.mean(np.square(errs))))
