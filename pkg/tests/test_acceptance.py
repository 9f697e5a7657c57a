"""End-to-end acceptance checks for the training/evaluation/deployment stack.

Each test prints a single [PASS]/[FAIL] line for its criterion.  The
learning-based checks train real (desk-scale) policies and take minutes to
hours; the rest run in seconds.
"""

import json
import re

import numpy as np
import pytest

from gaitlab import nets, toolbox
from gaitlab.autodiff import as_tensor, minimum, param
from gaitlab.cli import main as cli_main
from gaitlab.deploy import (DeployError, RuntimeActor, export_policy,
                            load_runtime, sim2sim_validate)
from gaitlab.evaluation import (PolicyActor, Scenario, builtin_scenario,
                                evaluate_tracking, hf_energy_ratio,
                                motion_metrics, run_scenario)
from gaitlab.mdp import (actor_mirror_rule, critic_mirror_rule,
                         load_task_config, play_command_script)
from gaitlab.robot import MirrorRule, mirror_vector
from gaitlab.training import train

from conftest import config_text, finite_difference_grad


def _line(num: int, label: str, ok: bool, detail: str = ""):
    tag = "PASS" if ok else "FAIL"
    print(f"[{tag}] criterion {num}: {label}"
          + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {num}: {label} {detail}"


def _loco(*overrides):
    return load_task_config(config_text("locomotion.yaml"),
                            overrides=list(overrides))


def _getup(*overrides):
    return load_task_config(config_text("getup.yaml"),
                            overrides=list(overrides))


def _stand_scenario(duration=2.0, n_envs=2):
    script = play_command_script(
        [{"duration": 60.0, "vx": 0.0, "height": 0.75}])
    return Scenario(name="stand", script=script, duration=duration,
                    n_envs=n_envs)


def _smooth(xs, w=50):
    return np.convolve(np.asarray(xs, dtype=float),
                       np.ones(w) / w, mode="valid")


def _ep_lengths(result):
    """Per-iteration mean episode length, forward-filled over iterations
    in which no episode happened to finish."""
    xs, last = [], None
    for m in result.metrics:
        v = m["episode_length_mean"]
        last = v if v is not None else last
        xs.append(last)
    first = next(x for x in xs if x is not None)
    return [first if x is None else x for x in xs]


# -- 1: gradient correctness ----------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_criterion_01_gradients_match_finite_differences(seed):
    """Full PPO loss graph (surrogate, value, entropy, Lipschitz reg)."""
    rng = np.random.default_rng(seed)
    pol = nets.init_policy(5, 7, 3, rng, hidden=(6, 6))
    n = 8
    obs = rng.normal(size=(n, 5))
    next_obs = obs + 0.1 * rng.normal(size=(n, 5))
    cobs = rng.normal(size=(n, 7))
    next_cobs = cobs + 0.1 * rng.normal(size=(n, 7))
    actions = rng.normal(size=(n, 3))
    adv = rng.normal(size=n)
    returns = rng.normal(size=n)
    old_logp = nets.gaussian_logp(nets.actor_mean(pol, obs), pol.logstd,
                                  actions) + 0.05 * rng.normal(size=n)
    alpha = rng.uniform(size=(n, 1))
    l2c2 = toolbox.L2C2Config(lambda_actor=1.0, lambda_critic=0.1,
                              enabled=True)

    def build(params):
        tensors = {k: param(v) for k, v in params.items()}
        mean = nets.actor_mean_graph(pol, tensors, obs)
        logstd = nets.logstd_graph(tensors)
        logp = nets.gaussian_logp_graph(mean, logstd, actions)
        ratio = (logp - as_tensor(old_logp)).exp()
        surrogate = minimum(ratio * adv, ratio.clip(0.8, 1.2) * adv)
        value = nets.critic_value_graph(pol, tensors, cobs)
        loss = -surrogate.mean() \
            + (value - as_tensor(returns[:, None])).square().mean() \
            - 0.005 * nets.entropy_graph(logstd) \
            + toolbox.l2c2_loss(pol, tensors, obs, next_obs, cobs,
                                next_cobs, alpha, l2c2)
        return loss, tensors

    loss, tensors = build(pol.params)
    loss.backward()
    fd = finite_difference_grad(lambda p: float(build(p)[0].data), pol.params)
    worst = 0.0
    for k in pol.params:
        g = tensors[k].grad
        g = np.zeros_like(fd[k]) if g is None else g
        rel = np.abs(g - fd[k]) / np.maximum(np.abs(fd[k]), 1e-6)
        worst = max(worst, float(rel.max()))
    _line(1, "analytic gradients match finite differences",
          worst < 1e-4, f"seed {seed}, max rel err {worst:.2e}")


# -- 2: reward-normalizer scale invariance ---------------------------------------


def test_criterion_02a_normalizer_synthetic_scale_invariance():
    rng = np.random.default_rng(3)
    rewards = rng.normal(0.5, 2.0, size=(8000, 32))
    n1 = toolbox.RewardNormalizerState(gamma=0.99)
    n100 = toolbox.RewardNormalizerState(gamma=0.99)
    out1 = np.stack([n1.normalize(r) for r in rewards])
    out100 = np.stack([n100.normalize(100.0 * r) for r in rewards])
    # warm-up long enough for the EMA to forget its unit initialization
    tail1, tail100 = out1[6000:], out100[6000:]
    denom = np.maximum(np.abs(tail1), np.abs(tail1).mean())
    err = float(np.max(np.abs(tail100 - tail1) / denom))
    _line(2, "synthetic 1x/100x normalized tails agree",
          err < 0.02, f"max rel deviation {err:.4f}")


def _w100_overrides():
    base = _loco()
    return tuple(f"rewards.{i}.weight={term.weight * 100}"
                 for i, term in enumerate(base.rewards))


def test_criterion_02b_normalizer_training_scale_invariance(tmp_path):
    curves = {}
    for tag, ovr in (("1x", ()), ("100x", _w100_overrides())):
        task = _loco(*ovr)
        res = train(task, tmp_path / tag, seed=7, iterations=500, n_envs=64)
        curves[tag] = _smooth(_ep_lengths(res))
    a = float(np.mean(curves["1x"][100:]))
    b = float(np.mean(curves["100x"][100:]))
    rel = abs(a - b) / a
    _line(2, "100x-reward training matches 1x episode-length curve",
          rel <= 0.15, f"1x {a:.1f} steps, 100x {b:.1f} steps, "
          f"deviation {rel:.1%}")


# -- 3: value-bootstrapped terminations ------------------------------------------


def test_criterion_03a_bootstrap_value_shift_oracle():
    """Offset at every terminal step amplifies by 1/(1-gamma) at the
    value-iteration fixed point."""
    gamma, sigma = 0.99, 5.0
    rng = np.random.default_rng(0)
    n = 12
    rewards = rng.normal(size=n)
    nxt = rng.integers(0, n, size=n)   # bootstrap target after reset

    def value_iteration(sig):
        v = np.zeros(n)
        for _ in range(20000):
            v_new = toolbox.bootstrap_termination(
                rewards, v[nxt], np.ones(n, dtype=int), gamma, sig)
            if np.max(np.abs(v_new - v)) < 1e-14:
                break
            v = v_new
        return v

    shift = value_iteration(sigma) - value_iteration(0.0)
    expected = -sigma / (1.0 - gamma)   # -500
    err = float(np.max(np.abs(shift - expected)))
    _line(3, "terminal offset shifts values by sigma/(1-gamma)",
          err < 1e-6, f"shift {shift[0]:.6f}, max err {err:.2e}")


def test_criterion_03b_bootstrap_beats_penalty_timeout_ratio(tmp_path):
    finals = {"bootstrap": [], "penalty": []}
    for mode in finals:
        for seed in (0, 1, 2):
            task = _getup(f"toolbox.termination.mode={mode}")
            res = train(task, tmp_path / f"{mode}_{seed}", seed=seed,
                        iterations=1000, n_envs=32)
            tail = [m["timeout_ratio"] for m in res.metrics[-100:]]
            finals[mode].append(float(np.mean(tail)))
    boot = float(np.median(finals["bootstrap"]))
    pen = float(np.median(finals["penalty"]))
    _line(3, "bootstrapped terminations keep a higher time-out ratio",
          boot >= pen, f"bootstrap median {boot:.3f} vs penalty {pen:.3f}")


# -- 4: harness ablation ----------------------------------------------------------


def _iters_to_80pct(result):
    c = _smooth(_ep_lengths(result), w=25)
    return int(np.argmax(c >= 0.8 * c.max()))


def test_criterion_04_harness_speeds_up_episode_growth(tmp_path):
    hits = {"harness": [], "none": []}
    for seed in range(5):
        for tag, ovr in (("harness", ()),
                         ("none", ("toolbox.harness.enabled=false",))):
            task = _loco(*ovr)
            res = train(task, tmp_path / f"{tag}_{seed}", seed=seed,
                        iterations=500, n_envs=32)
            hits[tag].append(_iters_to_80pct(res))
    med_h = float(np.median(hits["harness"]))
    med_n = float(np.median(hits["none"]))
    _line(4, "exponential-decay harness reaches 80% episode length earlier",
          med_h < med_n,
          f"median iteration {med_h:.0f} (harness) vs {med_n:.0f} (none); "
          f"harness {hits['harness']}, none {hits['none']}")


# -- 5: Lipschitz regularizer smoothness effect ------------------------------------


def test_criterion_05_l2c2_reduces_jerk_and_hf_energy(tmp_path):
    base = builtin_scenario("sweep")
    jerk = {"on": {2.0: [], 4.0: []}, "off": {2.0: [], 4.0: []}}
    hf = {"on": {2.0: [], 4.0: []}, "off": {2.0: [], 4.0: []}}
    for seed in (0, 1, 2):
        for tag, ovr in (("on", ()), ("off", ("toolbox.l2c2.enabled=false",))):
            task = _loco(*ovr)
            res = train(task, tmp_path / f"{tag}_{seed}", seed=seed,
                        iterations=400, n_envs=32)
            for noise in (0.0, 1.0, 2.0, 4.0):
                sc = Scenario(name="sweep", script=base.script,
                              duration=base.duration, n_envs=4,
                              noise_multiplier=noise)
                rec = run_scenario(PolicyActor(res.policy), task, sc, seed=0)
                agg = motion_metrics(rec, task.robot).aggregates()
                if noise in (2.0, 4.0):
                    jerk[tag][noise].append(agg["rms_jerk_mean"])
                    hf[tag][noise].append(agg["hf_energy_mean"])
    ok, detail = True, []
    for noise in (2.0, 4.0):
        jm_on = float(np.median(jerk["on"][noise]))
        jm_off = float(np.median(jerk["off"][noise]))
        hm_on = float(np.median(hf["on"][noise]))
        hm_off = float(np.median(hf["off"][noise]))
        ok = ok and jm_on <= jm_off and hm_on <= hm_off
        detail.append(f"noise {noise:g}: jerk {jm_on:.0f}/{jm_off:.0f}, "
                      f"hf {hm_on:.3f}/{hm_off:.3f}")
    _line(5, "smoothness regularizer lowers median jerk and HF ratio "
          "at high observation noise", ok, "; ".join(detail))


# -- 6: spectral metric oracle ------------------------------------------------------


def test_criterion_06_hf_energy_ratio_oracle():
    dt = 1.0 / 200.0
    t = np.arange(1024) * dt
    low = np.sin(2 * np.pi * 5.0 * t)
    high = np.sin(2 * np.pi * 20.0 * t)
    r_low = hf_energy_ratio(low[:, None], dt)[0]
    r_high = hf_energy_ratio(high[:, None], dt)[0]
    r_mix = hf_energy_ratio((low + high)[:, None], dt)[0]
    ok = r_low < 0.02 and r_high > 0.98 and abs(r_mix - 0.5) <= 0.03
    _line(6, "spectral ratio separates 5 Hz / 20 Hz / equal mix", ok,
          f"5 Hz {r_low:.4f}, 20 Hz {r_high:.4f}, mix {r_mix:.3f}")


# -- 7: velocity profiles -----------------------------------------------------------


def test_criterion_07_velocity_profiles():
    dt = 0.005
    big = np.full(1, 100.0)

    # triangular case: distance = a_max so total time is exactly 2 s
    st = toolbox.VelocityProfileState(
        kind="trapezoidal", pos=np.zeros(1), target=np.array([4.0]),
        lower=-big, upper=big, vel_limit=big, a_max=4.0, v_max=5.0)
    exact = float(st._plan["total"][0]) == 2.0

    pos = [st.pos.copy()]
    for _ in range(int(round(2.5 / dt))):
        p, _ = st.step(dt)
        pos.append(p)
    pos = np.array(pos)[:, 0]
    vel = np.diff(pos) / dt
    acc = np.diff(vel) / dt
    bounded = np.all(np.abs(acc) <= 4.0 + 1e-9) and np.all(np.abs(vel) <= 5.0)
    arrived = abs(pos[int(round(2.0 / dt))] - 4.0) < 1e-9

    # EMA: monotone approach, no overshoot
    ema = toolbox.VelocityProfileState(
        kind="ema", pos=np.zeros(1), target=np.array([1.0]),
        lower=-big, upper=big, vel_limit=big, alpha=0.3)
    seq = [float(ema.step(dt)[0][0]) for _ in range(200)]
    monotone = np.all(np.diff(seq) >= 0) and max(seq) <= 1.0

    # synchronized joints arrive within one control step of each other
    sync = toolbox.VelocityProfileState(
        kind="trapezoidal", pos=np.zeros(3),
        target=np.array([0.5, 2.0, 4.0]),
        lower=-big[0] * np.ones(3), upper=big[0] * np.ones(3),
        vel_limit=100.0 * np.ones(3), a_max=4.0, v_max=5.0, sync=True)
    arrival = np.full(3, np.inf)
    for k in range(int(round(4.0 / dt))):
        p, _ = sync.step(dt)
        done = np.abs(p - sync.target) < 1e-9
        arrival = np.where(done & np.isinf(arrival), k * dt, arrival)
    synced = np.isfinite(arrival).all() \
        and float(arrival.max() - arrival.min()) <= dt + 1e-12

    ok = exact and bounded and arrived and monotone and synced
    _line(7, "trapezoidal/EMA/synchronized profiles respect all bounds", ok,
          f"exact-2s {exact}, bounds {bounded}, arrived {arrived}, "
          f"ema {monotone}, sync spread {arrival.max() - arrival.min():.4f} s")


# -- 8: determinism and evaluation variance ------------------------------------------


def test_criterion_08_determinism_and_stochastic_variance():
    task = _loco("events.push.enabled=false")
    policy = nets.init_policy(task.actor_obs_width, task.critic_obs_width, 6,
                              np.random.default_rng(0))
    sc = _stand_scenario(duration=2.0)
    rec1 = run_scenario(PolicyActor(policy), task, sc, seed=5)
    rec2 = run_scenario(PolicyActor(policy), task, sc, seed=5)
    identical = (np.array_equal(rec1.q, rec2.q)
                 and np.array_equal(rec1.base, rec2.base)
                 and np.array_equal(rec1.actions, rec2.actions))

    det, _ = evaluate_tracking(PolicyActor(policy), task, sc, runs=3, seed=5)
    stoch_sc = Scenario(name="stochastic", duration=6.0, n_envs=2,
                        deterministic=False, noise_multiplier=1.0,
                        resample_interval=2.0)
    stoch, _ = evaluate_tracking(PolicyActor(policy), task, stoch_sc,
                                 runs=10, seed=5)
    det_zero = all(v == 0.0 for v in det.std.values())
    stoch_pos = all(v > 0.0 for v in stoch.std.values())
    _line(8, "deterministic evaluation bit-identical, stochastic spread > 0",
          identical and det_zero and stoch_pos,
          f"identical {identical}, det std {det.std}, stoch std {stoch.std}")


# -- 9: descriptor equivalence --------------------------------------------------------


def test_criterion_09_descriptor_equivalence(tmp_path):
    task = _loco("events.push.enabled=false")
    policy = nets.init_policy(task.actor_obs_width, task.critic_obs_width, 6,
                              np.random.default_rng(1))
    desc, _ = export_policy(policy, task, tmp_path / "a")
    desc2, _ = export_policy(policy, task, tmp_path / "b")
    roundtrip = desc.read_bytes() == desc2.read_bytes()

    sc = _stand_scenario(duration=1.0)
    runtime = load_runtime(desc)
    rec_rt = run_scenario(RuntimeActor(runtime), task, sc, seed=3)
    rec_tr = run_scenario(PolicyActor(policy), task, sc, seed=3)
    dev = float(np.max(np.abs(rec_rt.q - rec_tr.q)))

    # swapping two differently-limited joints must be caught downstream
    import yaml
    doc = yaml.safe_load(desc.read_text())
    d = doc["descriptor"]
    d["joints"][0], d["joints"][1] = d["joints"][1], d["joints"][0]
    off = d["action"]["offset"]
    off[0], off[1] = off[1], off[0]
    bad = tmp_path / "a" / "permuted.yaml"
    bad.write_text(yaml.safe_dump(doc, sort_keys=True))
    try:
        sim2sim_validate(bad, task, tmp_path / "bad", scenario=sc, seed=3,
                         weights_path=tmp_path / "a" / "weights.bin")
        fault_detected = False
    except DeployError:
        fault_detected = True

    ok = roundtrip and dev <= 1e-9 and fault_detected
    _line(9, "runtime path matches training path; faults detected", ok,
          f"roundtrip {roundtrip}, max |dq| {dev:.2e}, "
          f"permutation caught {fault_detected}")


# -- 10: symmetry machinery -----------------------------------------------------------


def _mirror_matrix(rule: MirrorRule) -> np.ndarray:
    return mirror_vector(rule, np.eye(len(rule.permutation)))


def test_criterion_10_symmetry_machinery():
    task = _loco()
    obs_rule = actor_mirror_rule(task)
    critic_rule = critic_mirror_rule(task)
    action_rule = task.robot.symmetry.action_rule

    rng = np.random.default_rng(4)
    v = rng.normal(size=(10, len(obs_rule.permutation)))
    involution = np.array_equal(
        mirror_vector(obs_rule, mirror_vector(obs_rule, v)), v)

    # a linear policy commuting with the mirrors: identical loss on the
    # mirrored half of the batch
    O, C, A = task.actor_obs_width, task.critic_obs_width, 6
    Mo, Mc, Ma = (_mirror_matrix(r)
                  for r in (obs_rule, critic_rule, action_rule))
    pol = nets.init_policy(O, C, A, rng, hidden=())
    pol.params["actor.W0"] = 0.5 * (
        pol.params["actor.W0"] + Mo @ pol.params["actor.W0"] @ Ma)
    pol.params["actor.b0"][:] = 0.0
    pol.params["critic.W0"] = 0.5 * (
        pol.params["critic.W0"] + Mc @ pol.params["critic.W0"])
    pol.params["actor.logstd"][:] = np.log(0.8)

    n = 64
    obs = rng.normal(size=(n, O))
    cobs = rng.normal(size=(n, C))
    actions = nets.actor_mean(pol, obs) + 0.3 * rng.normal(size=(n, A))
    batch = {
        "obs": obs, "critic_obs": cobs, "actions": actions,
        "logp": nets.gaussian_logp(nets.actor_mean(pol, obs), pol.logstd,
                                   actions),
        "advantages": rng.normal(size=n),
        "returns": rng.normal(size=n),
    }
    aug = toolbox.symmetry_augment(batch, pol, obs_rule, critic_rule,
                                   action_rule)
    doubled = all(aug[k].shape[0] == 2 * batch[k].shape[0] for k in batch)

    def loss(b):
        logp = nets.gaussian_logp(nets.actor_mean(pol, b["obs"]), pol.logstd,
                                  b["actions"])
        ratio = np.exp(logp - b["logp"])
        surrogate = np.minimum(ratio * b["advantages"],
                               np.clip(ratio, 0.8, 1.2) * b["advantages"])
        value = nets.critic_value(pol, b["critic_obs"])
        return float(-surrogate.mean()
                     + np.mean((value - b["returns"]) ** 2))

    delta = abs(loss(aug) - loss(batch))
    ok = involution and doubled and delta < 1e-10
    _line(10, "mirror involution, exact batch doubling, equivariant "
          "loss invariance", ok,
          f"involution {involution}, doubled {doubled}, "
          f"loss delta {delta:.2e}")


# -- 11: end-to-end workflow -----------------------------------------------------------


def test_criterion_11_end_to_end_workflow(tmp_path, capsys):
    steps = []

    def run(label, argv):
        rc = cli_main(argv)
        steps.append((label, rc))
        return rc

    assert run("check", ["check", "--task", "locomotion"]) == 0
    train_dir = tmp_path / "train"
    assert run("train", ["train", "--task", "locomotion", "--seed", "0",
                         "--out", str(train_dir), "--quiet"]) == 0
    ckpt = train_dir / "ckpt_final.bin"
    eval_dir = tmp_path / "eval"
    assert run("eval", ["eval", "--task", "locomotion",
                        "--checkpoint", str(ckpt), "--scenario", "sweep",
                        "--out", str(eval_dir)]) == 0
    exp_dir = tmp_path / "export"
    assert run("export", ["export", "--task", "locomotion",
                          "--checkpoint", str(ckpt),
                          "--out", str(exp_dir)]) == 0
    s2s_dir = tmp_path / "sim2sim"
    assert run("sim2sim", ["sim2sim", "--task", "locomotion",
                           "--descriptor", str(exp_dir / "descriptor.yaml"),
                           "--scenario", "sweep",
                           "--out", str(s2s_dir)]) == 0
    capsys.readouterr()

    metrics = json.loads((s2s_dir / "metrics.json").read_text())
    rmse = [v for sc in metrics["scenarios"]
            for v in sc["tracking"]["mean"].values()]
    finite = len(rmse) == 4 and all(np.isfinite(rmse))

    html = (s2s_dir / "report.html").read_text()
    names = ("rms accel", "rms jerk", "limit violation", "hf energy")
    complete = all(n in html for n in names)

    ok = all(rc == 0 for _, rc in steps) and finite and complete
    _line(11, "check/train/eval/export/sim2sim pipeline completes", ok,
          f"steps {steps}, finite rmse {finite}, report complete {complete}")
