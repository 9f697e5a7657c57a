"""Command-line entry point covering the whole workflow.

One binary ties together environment checks, the interactive debug
service, training, sweeps, evaluation, export and sim-to-sim validation.
Every subcommand honors --seed and --set overrides, and confines its
outputs to the chosen run directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .deploy import DeployError, RuntimeActor, export_policy, load_runtime, \
    sim2sim_validate
from .evaluation import (HistoryPolicyActor, PolicyActor, evaluate_tracking,
                         load_scenario, motion_metrics)
from .mdp import (build_state_cache, load_state_cache, load_task_config,
                  save_state_cache)
from .ppo import TrainingError
from .report import (load_recordings, metrics_json, render_report,
                     save_recordings)
from .robot import ConfigError
from .sim import SimError, settle_under_gravity, sim_reset
from .training import load_checkpoint, sweep, train


def _resolve_task_source(name_or_path: str) -> str:
    """Bare names refer to the packaged task configs."""
    if "\n" in name_or_path or Path(name_or_path).exists():
        return name_or_path
    import importlib.resources as resources
    candidate = resources.files("gaitlab.configs").joinpath(
        f"{name_or_path}.yaml")
    if candidate.is_file():
        return candidate.read_text()
    return name_or_path


def _load_task(args):
    return load_task_config(_resolve_task_source(args.task),
                            overrides=args.set)


def _run_dir(args, task_name: str) -> Path:
    if args.out:
        return Path(args.out)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    return Path(args.out_root) / f"{task_name}_{stamp}_{args.seed}"


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_cache(args):
    return load_state_cache(args.cache) if getattr(args, "cache", None) \
        else None


# -- subcommands --------------------------------------------------------------------


def cmd_check(args) -> int:
    failures = 0

    def report(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        tag = "PASS" if ok else "FAIL"
        print(f"[{tag}] {name}" + (f": {detail}" if detail else ""))
        failures += 0 if ok else 1

    try:
        task = _load_task(args)
    except (ConfigError, SimError, FileNotFoundError) as exc:
        report("config", False, str(exc))
        return 1
    report("config", True, f"task '{task.name}' loads and validates")

    model = task.robot
    for j, name in enumerate(model.joint_names):
        d = model.default_pose[j]
        ok = model.lower_limits[j] <= d <= model.upper_limits[j]
        if not ok:
            report("default-pose", False,
                   f"joint '{name}' default {d} outside limits")
    if failures == 0:
        report("default-pose", True, "all defaults within joint limits")

    state = sim_reset(model, task.sim, n=1)
    settled, peak = settle_under_gravity(model, task.sim, state, 2.0)
    ok = (not settled.diverged[0]) and abs(settled.base_vel[0, 1]) < 0.01
    report("settle", ok,
           f"peak base speed {peak[0]:.3f} m/s, "
           f"final vertical speed {settled.base_vel[0, 1]:.4f} m/s")

    from .env import BipedEnv
    env = BipedEnv(task, n_envs=1, seed=args.seed, noise_multiplier=0.0,
                   state_cache=_build_or_load_cache(args, task, quiet=True))
    ended = 0
    for _ in range(int(round(2.0 / task.sim.control_dt))):
        res = env.step(np.zeros((1, model.n_joints)))
        ended += int(res.done[0] and res.term_class[0] == 1)
    report("zero-action", ended == 0,
           "stands for 2 s without a failure termination" if ended == 0
           else f"{ended} failure terminations in 2 s")
    return 1 if failures else 0


def _build_or_load_cache(args, task, quiet=False):
    cache = _load_cache(args)
    if cache is None and task.init_mode == "cache":
        if not quiet:
            print("building initial-state cache...")
        cache = build_state_cache(task, task.cache_size,
                                  np.random.default_rng(args.seed))
    return cache


def cmd_serve(args) -> int:
    from .service import serve
    task = _load_task(args)
    serve(task, host=args.host, port=args.port, seed=args.seed,
          state_cache=_load_cache(args))
    return 0


def cmd_train(args) -> int:
    task = _load_task(args)
    out = _run_dir(args, task.name)
    res = train(task, out, seed=args.seed, iterations=args.iterations,
                n_envs=args.n_envs, progress=not args.quiet,
                state_cache=_build_or_load_cache(args, task))
    print(f"checkpoint {res.checkpoint_path} "
          f"sha256={_digest(res.checkpoint_path)}")
    print(f"metrics    {res.metrics_path} "
          f"sha256={_digest(res.metrics_path)}")
    return 0


def cmd_sweep(args) -> int:
    task = _load_task(args)
    grid_text = Path(args.grid).read_text() if Path(args.grid).exists() \
        else args.grid
    entries = yaml.safe_load(grid_text)
    if not isinstance(entries, list):
        raise ConfigError("sweep grid must be a list of entries")
    out = _run_dir(args, f"{task.name}_sweep")
    rows = sweep(task.raw, entries, out, seed=args.seed,
                 iterations=args.iterations, n_envs=args.n_envs)
    for row in rows:
        print(f"point {row['point']}: {row['params']} -> "
              f"reward {row['final_reward']:.4f}, "
              f"tracking rmse {row['final_tracking_rmse']:.4f}")
    print(f"summary written to {out / 'summary.json'}")
    return 0


def _actor_for(policy, task):
    frame = task.actor_obs_width
    if policy.obs_dim == frame:
        return PolicyActor(policy)
    if policy.obs_dim % frame == 0:
        return HistoryPolicyActor(policy, policy.obs_dim // frame)
    raise ConfigError(
        f"checkpoint obs width {policy.obs_dim} does not match the task's "
        f"observation width {frame}")


def cmd_eval(args) -> int:
    task = _load_task(args)
    policy, _ = load_checkpoint(args.checkpoint)
    actor = _actor_for(policy, task)
    scenario = load_scenario(args.scenario)
    out = _run_dir(args, f"{task.name}_eval")
    out.mkdir(parents=True, exist_ok=True)
    cache = _build_or_load_cache(args, task)

    tracking, recs = evaluate_tracking(actor, task, scenario,
                                       runs=args.runs, seed=args.seed,
                                       backend=args.backend,
                                       state_cache=cache)
    section = {"recording": recs[0],
               "motion": motion_metrics(recs[0], task.robot),
               "tracking": tracking}
    metadata = {"task": task.name, "seed": args.seed,
                "checkpoint": args.checkpoint, "backend": args.backend,
                "scenario": scenario.name, "runs": args.runs}
    report_path = render_report([section], metadata, out / args.report)
    (out / "metrics.json").write_text(metrics_json([section], metadata))
    save_recordings(recs, out / "recordings.bin")
    print(f"report {report_path}")
    for ch, v in tracking.mean.items():
        print(f"tracking rmse {ch}: {v:.4f} (std {tracking.std[ch]:.4f})")
    return 0


def cmd_export(args) -> int:
    task = _load_task(args)
    policy, _ = load_checkpoint(args.checkpoint)
    out = _run_dir(args, f"{task.name}_export")
    desc, weights = export_policy(policy, task, out)
    print(f"descriptor {desc}")
    print(f"weights    {weights} sha256={_digest(weights)}")
    return 0


def cmd_sim2sim(args) -> int:
    task = _load_task(args)
    scenario = load_scenario(args.scenario)
    out = _run_dir(args, f"{task.name}_sim2sim")
    res = sim2sim_validate(args.descriptor, task, out, scenario=scenario,
                           seed=args.seed, weights_path=args.weights)
    for backend in ("reference", "variant"):
        rmse = res[backend]["tracking"]["mean"]
        print(f"{backend}: rmse vx {rmse['vx']:.4f} "
              f"height {rmse['height']:.4f} "
              f"diverged {res[backend]['diverged_envs']}")
        if not all(np.isfinite(v) for v in rmse.values()):
            print("non-finite tracking error", file=sys.stderr)
            return 1
    print(f"report {res['report']}")
    return 0


def cmd_report(args) -> int:
    task = _load_task(args)
    recs = load_recordings(args.recordings)
    sections = []
    from .evaluation import aggregate_tracking, tracking_rmse
    for rec in recs:
        sections.append({
            "recording": rec,
            "motion": motion_metrics(rec, task.robot),
            "tracking": aggregate_tracking([tracking_rmse(rec)]),
        })
    metadata = {"task": task.name, "source": args.recordings,
                "rerendered": True}
    path = render_report(sections, metadata, args.report)
    print(f"report {path}")
    return 0


def cmd_cache_states(args) -> int:
    task = _load_task(args)
    cache = build_state_cache(task, args.count,
                              np.random.default_rng(args.seed))
    path = save_state_cache(cache, args.out_file)
    kinds = {k: cache.provenance.count(k) for k in set(cache.provenance)}
    print(f"cached {len(cache)} states ({kinds}) to {path}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaitlab",
        description="planar-biped RL workflow: check, train, evaluate, "
                    "export, validate")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--task", default="locomotion",
                        help="task name, config path, or YAML text")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--set", action="append", default=[],
                        metavar="PATH=VALUE",
                        help="config override, repeatable")
    common.add_argument("--out", default=None,
                        help="output directory (default: auto-named)")
    common.add_argument("--out-root", default="runs")
    common.add_argument("--cache", default=None,
                        help="initial-state cache file")

    p = sub.add_parser("check", parents=[common],
                       help="model validation, settle and stand checks")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("serve", parents=[common],
                       help="interactive debug session")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("train", parents=[common], help="PPO training run")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--n-envs", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", parents=[common],
                       help="grid sweep over config parameters")
    p.add_argument("--grid", required=True,
                   help="YAML/JSON list of sweep entries, file or literal")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--n-envs", type=int, default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", parents=[common],
                       help="scenario evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", default="sweep")
    p.add_argument("--backend", choices=("reference", "variant"),
                   default="reference")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--report", default="report.html")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", parents=[common],
                       help="write descriptor and weights artifacts")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("sim2sim", parents=[common],
                       help="validate exported artifacts across backends")
    p.add_argument("--descriptor", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--scenario", default="sweep")
    p.set_defaults(fn=cmd_sim2sim)

    p = sub.add_parser("report", parents=[common],
                       help="re-render an HTML report from recordings")
    p.add_argument("--recordings", required=True)
    p.add_argument("--report", default="report.html")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("cache-states", parents=[common],
                       help="collect settled initial states")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out-file", default="state_cache.bin")
    p.set_defaults(fn=cmd_cache_states)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SimError, TrainingError, DeployError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
