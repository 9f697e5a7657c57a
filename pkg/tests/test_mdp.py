import numpy as np
import pytest

from gaitlab import mdp
from gaitlab.mdp import (AdaptiveCommandState, ScriptEntry, build_state_cache,
                         check_terminations, compute_observations,
                         compute_rewards, load_task_config,
                         play_command_script, sample_commands,
                         sample_randomization_scales, velocity_ladder,
                         height_ramp)
from gaitlab.robot import ConfigError, mirror_vector
from gaitlab.sim import SimState, sim_reset

from conftest import config_text


@pytest.fixture(scope="module")
def task():
    return load_task_config(config_text("locomotion.yaml"))


@pytest.fixture(scope="module")
def getup_task():
    return load_task_config(config_text("getup.yaml"))


def _zero_state(n=1, J=6):
    return SimState(
        base=np.zeros((n, 3)), base_vel=np.zeros((n, 3)),
        q=np.zeros((n, J)), qd=np.zeros((n, J)),
        qdd_last=np.zeros((n, J)), tau=np.zeros((n, J)),
        targets_filt=np.zeros((n, J)), contact_force=np.zeros((n, 2, 2)),
        time=np.zeros(n), diverged=np.zeros(n, dtype=bool),
    )


# -- config loading ---------------------------------------------------------------

def test_obs_widths(task):
    assert task.actor_obs_width == 23
    assert task.critic_obs_width == 29


def test_override_applies(task):
    t2 = load_task_config(config_text("locomotion.yaml"),
                          overrides=["train.lr=0.002", "rewards.0.weight=2.0"])
    assert t2.train.lr == pytest.approx(0.002)
    assert t2.rewards[0].weight == pytest.approx(2.0)
    assert task.train.lr == pytest.approx(1e-3)  # original untouched


def test_override_unknown_path_rejected():
    with pytest.raises(ConfigError, match="no_such"):
        load_task_config(config_text("locomotion.yaml"),
                         overrides=["train.no_such=1"])


def test_unknown_reward_term_rejected():
    import yaml
    raw = yaml.safe_load(config_text("locomotion.yaml"))
    raw["task"]["robot"] = yaml.safe_load(config_text("biped.yaml"))["robot"]
    raw["task"]["rewards"].append({"name": "mystery", "weight": 1.0})
    with pytest.raises(ConfigError, match="mystery"):
        load_task_config(raw)


def test_bad_gamma_rejected():
    with pytest.raises(ConfigError):
        load_task_config(config_text("locomotion.yaml"),
                         overrides=["train.gamma=1.0"])


# -- observations -----------------------------------------------------------------

def test_zero_state_observation(task):
    st = _zero_state()
    actor, critic = compute_observations(task, st, np.zeros((1, 2)),
                                         np.zeros((1, 6)), rng=None)
    expected = np.zeros(23)
    expected[2] = 1.0  # cos(pitch) at pitch 0
    assert np.allclose(actor[0], expected)
    assert np.allclose(critic[0, :23], expected)
    assert np.allclose(critic[0, 23:], 0.0)


def test_noise_multiplier_zero_matches_clean(task):
    st = sim_reset(task.robot, task.sim, n=3)
    st.qd = np.random.default_rng(0).normal(size=(3, 6))
    cmd = np.array([[0.5, 0.7]] * 3)
    la = np.full((3, 6), 0.1)
    rng = np.random.default_rng(1)
    actor, critic = compute_observations(task, st, cmd, la, rng=rng,
                                         noise_multiplier=0.0)
    assert np.array_equal(actor, critic[:, :23])


def test_noise_reproducible(task):
    st = sim_reset(task.robot, task.sim, n=4)
    cmd = np.zeros((4, 2))
    la = np.zeros((4, 6))
    a1, _ = compute_observations(task, st, cmd, la,
                                 rng=np.random.default_rng(7))
    a2, _ = compute_observations(task, st, cmd, la,
                                 rng=np.random.default_rng(7))
    assert np.array_equal(a1, a2)


def test_obs_scales_applied(task):
    st = _zero_state()
    st.base_vel[0, 2] = 2.0  # pitch rate, configured scale 0.25
    st.qd[0, :] = 1.0        # scale 0.05
    actor, _ = compute_observations(task, st, np.zeros((1, 2)),
                                    np.zeros((1, 6)), rng=None)
    assert actor[0, 0] == pytest.approx(2.0 * 0.25)
    assert np.allclose(actor[0, 11:17], 0.05)


def test_obs_mirror_matches_mirrored_state(task):
    """Mirroring the observation equals observing the mirrored state."""
    rng = np.random.default_rng(3)
    st = _zero_state()
    st.base = rng.normal(size=(1, 3))
    st.base_vel = rng.normal(size=(1, 3))
    st.q = rng.normal(size=(1, 6))
    st.qd = rng.normal(size=(1, 6))
    st.contact_force = rng.normal(size=(1, 2, 2))
    cmd = rng.normal(size=(1, 2))
    la = rng.normal(size=(1, 6))

    jr = task.robot.symmetry.joint_rule
    stm = st.copy()
    stm.q = mirror_vector(jr, st.q)
    stm.qd = mirror_vector(jr, st.qd)
    stm.contact_force = st.contact_force[:, ::-1, :].copy()
    lam = mirror_vector(jr, la)

    _, critic = compute_observations(task, st, cmd, la, rng=None)
    _, critic_m = compute_observations(task, stm, cmd, lam, rng=None)
    rule = mdp.critic_mirror_rule(task)
    assert np.allclose(mirror_vector(rule, critic), critic_m)


def test_actor_mirror_is_involution(task):
    rule = mdp.actor_mirror_rule(task)
    v = np.random.default_rng(0).normal(size=23)
    assert np.allclose(mirror_vector(rule, mirror_vector(rule, v)), v)


# -- rewards ----------------------------------------------------------------------

def test_tracking_rewards_peak_at_target(task):
    st = _zero_state()
    st.base[0, 1] = 0.7
    st.base_vel[0, 0] = 0.5
    cmd = np.array([[0.5, 0.7]])
    _, terms = compute_rewards(task, st, st, np.zeros((1, 6)),
                               np.zeros((1, 6)), cmd)
    assert terms["track_vx"][0] == pytest.approx(1.0)
    assert terms["track_height"][0] == pytest.approx(0.5)  # weight 0.5
    assert terms["upright"][0] == pytest.approx(0.3)


def test_tracking_kernel_values(task):
    st = _zero_state()
    st.base_vel[0, 0] = 0.2
    cmd = np.array([[0.7, 0.0]])
    _, terms = compute_rewards(task, st, st, np.zeros((1, 6)),
                               np.zeros((1, 6)), cmd)
    assert terms["track_vx"][0] == pytest.approx(np.exp(-0.25 / 0.25))


def test_action_rate_and_penalties(task):
    st = _zero_state()
    a = np.full((1, 6), 0.3)
    pa = np.full((1, 6), 0.1)
    st.tau[0, :] = 2.0
    st.qdd_last[0, :] = 1.5
    _, terms = compute_rewards(task, st, st, a, pa, np.zeros((1, 2)))
    assert terms["action_rate"][0] == pytest.approx(-0.01 * 6 * 0.04)
    assert terms["torque"][0] == pytest.approx(-1e-5 * 6 * 4.0)
    assert terms["joint_accel"][0] == pytest.approx(-2.5e-7 * 6 * 2.25)


def test_limit_violation_counts(task):
    st = _zero_state()
    st.q[0, 0] = task.robot.lower_limits[0]
    st.q[0, 3] = task.robot.upper_limits[3]
    _, terms = compute_rewards(task, st, st, np.zeros((1, 6)),
                               np.zeros((1, 6)), np.zeros((1, 2)))
    # l_knee default lower limit is 0, so q=0 also counts there
    assert terms["limit_violation"][0] == pytest.approx(-0.1 * 3)


def test_total_is_sum_of_weighted_terms(task):
    rng = np.random.default_rng(5)
    st = _zero_state(3)
    st.base = rng.normal(size=(3, 3))
    st.base_vel = rng.normal(size=(3, 3))
    total, terms = compute_rewards(task, st, st, rng.normal(size=(3, 6)),
                                   rng.normal(size=(3, 6)),
                                   rng.normal(size=(3, 2)))
    assert np.allclose(total, sum(terms.values()))


def test_standing_bonus(getup_task):
    st = _zero_state(2)
    st.base[0] = [0.0, 0.75, 0.1]   # standing
    st.base[1] = [0.0, 0.3, 1.5]    # fallen
    _, terms = compute_rewards(getup_task, st, st, np.zeros((2, 6)),
                               np.zeros((2, 6)), np.zeros((2, 2)))
    assert terms["standing"][0] == pytest.approx(1.0)
    assert terms["standing"][1] == pytest.approx(0.0)


# -- terminations -----------------------------------------------------------------

def test_fallen_termination(task):
    st = _zero_state(3)
    st.base[:, 1] = [0.75, 0.3, 0.75]
    st.base[:, 2] = [0.0, 0.0, 1.2]
    done, cls, reason = check_terminations(task, st, np.zeros(3))
    assert done.tolist() == [False, True, True]
    assert cls.tolist() == [0, 1, 1]
    assert reason[1] == "fallen"


def test_timeout_is_neutral(task):
    st = _zero_state(1)
    st.base[0, 1] = 0.75
    done, cls, _ = check_terminations(task, st, np.array([task.episode_length]))
    assert done[0] and cls[0] == 3


def test_bad_takes_precedence_over_neutral(task):
    st = _zero_state(1)
    st.base[0, 1] = 0.2  # fallen at the same step as timeout
    done, cls, reason = check_terminations(
        task, st, np.array([task.episode_length]))
    assert cls[0] == 1 and reason[0] == "fallen"


def test_diverged_is_bad(task):
    st = _zero_state(1)
    st.base[0, 1] = 0.75
    st.diverged[0] = True
    _, cls, reason = check_terminations(task, st, np.zeros(1))
    assert cls[0] == 1 and reason[0] == "sim-diverged"


def test_getup_low_height_not_terminal(getup_task):
    st = _zero_state(1)
    st.base[0] = [0.0, 0.1, 1.5]  # fallen flat, mid-recovery
    done, _, _ = check_terminations(getup_task, st, np.zeros(1))
    assert not done[0]


def test_getup_tumbled_and_standing_held(getup_task):
    st = _zero_state(3)
    st.base[0] = [0.0, 0.2, 4.5]
    st.base[1] = [0.0, 0.75, 0.0]
    st.base[2] = [0.0, 0.75, 0.0]
    standing_time = np.array([0.0, 2.5, 1.0])
    done, cls, reason = check_terminations(getup_task, st, np.zeros(3),
                                           standing_time)
    assert cls.tolist() == [1, 2, 0]
    assert reason[0] == "tumbled" and reason[1] == "standing_held"


def test_getup_inverted_hang_not_terminal(getup_task):
    st = _zero_state(1)
    st.base[0] = [0.0, -0.75, 3.14]  # resting upside down on the feet springs
    done, _, _ = check_terminations(getup_task, st, np.zeros(1))
    assert not done[0]


# -- commands ---------------------------------------------------------------------

def test_sample_commands_in_range(task):
    rng = np.random.default_rng(0)
    cmd = sample_commands(task, rng, 500)
    lo, hi = task.commands.vx_range
    assert np.all(cmd[:, 0] >= lo) and np.all(cmd[:, 0] <= hi)
    h0, h1 = task.commands.height_range
    assert np.all(cmd[:, 1] >= h0) and np.all(cmd[:, 1] <= h1)


def test_adaptive_weights_floor_and_bias(task):
    st = AdaptiveCommandState(task.commands)
    # heavy error in the top bin
    st.record(np.full(100, 0.79), np.full(100, 2.0))
    st.record(np.full(100, -0.5), np.full(100, 0.0))
    w = st.bin_weights()
    assert w.sum() == pytest.approx(1.0)
    # two bins straddling zero carry at least the configured floor
    centers = np.argsort(np.abs(-0.8 + (np.arange(8) + 0.5) * 0.2))[:2]
    assert w[centers].sum() >= task.commands.near_zero_mass - 1e-12
    assert w[-1] > w[0]  # high-error bin upweighted


def test_adaptive_sampling_prefers_hard_bins(task):
    st = AdaptiveCommandState(task.commands)
    st.record(np.full(100, 0.79), np.full(100, 5.0))
    rng = np.random.default_rng(2)
    cmd = sample_commands(task, rng, 4000, st)
    top = (cmd[:, 0] > 0.6).mean()
    assert top > 1.5 / 8  # clearly above the uniform share


# -- events -----------------------------------------------------------------------

def test_randomization_scales_range(task):
    rng = np.random.default_rng(0)
    scales = sample_randomization_scales(task, rng, 200)
    for v in scales.values():
        assert np.all(v >= task.randomize.low) and np.all(v <= task.randomize.high)


def test_randomization_disabled_identity(getup_task):
    t = load_task_config(config_text("locomotion.yaml"),
                         overrides=["events.randomize.enabled=false"])
    scales = sample_randomization_scales(t, np.random.default_rng(0), 5)
    for v in scales.values():
        assert np.all(v == 1.0)


def test_push_magnitude_ramps(task):
    p = task.push
    assert mdp.push_magnitude(p, 0) == pytest.approx(p.vel_min)
    assert mdp.push_magnitude(p, p.ramp_iters) == pytest.approx(p.vel_max)
    assert mdp.push_magnitude(p, 10 * p.ramp_iters) == pytest.approx(p.vel_max)


def test_push_events_deterministic(task):
    st1 = _zero_state(2000)
    st2 = _zero_state(2000)
    mdp.apply_push_events(task, st1, np.random.default_rng(9), 100)
    mdp.apply_push_events(task, st2, np.random.default_rng(9), 100)
    assert np.array_equal(st1.base_vel, st2.base_vel)
    assert np.any(st1.base_vel != 0)


# -- state cache ------------------------------------------------------------------

def test_state_cache_settled(getup_task):
    cache = build_state_cache(getup_task, 6, np.random.default_rng(0))
    assert len(cache) == 6
    speed = np.linalg.norm(cache.states.base_vel[:, :2], axis=1)
    assert np.all(speed < 0.05)
    assert np.all(cache.states.time == 0.0)
    assert not cache.states.diverged.any()
    assert all(p in ("settled-standing", "settled-fallen")
               for p in cache.provenance)
    assert len(set(cache.provenance)) == 2  # both kinds collected


def test_state_cache_sample_copies(getup_task):
    cache = build_state_cache(getup_task, 4, np.random.default_rng(1))
    s = cache.sample(np.random.default_rng(0), 3)
    s.base[:] = 99.0
    assert not np.any(cache.states.base == 99.0)


def test_state_cache_deterministic(getup_task):
    c1 = build_state_cache(getup_task, 4, np.random.default_rng(7))
    c2 = build_state_cache(getup_task, 4, np.random.default_rng(7))
    assert np.array_equal(c1.states.base, c2.states.base)
    assert np.array_equal(c1.states.q, c2.states.q)
    assert c1.provenance == c2.provenance


def test_state_cache_bad_size(getup_task):
    with pytest.raises(ConfigError):
        build_state_cache(getup_task, 0, np.random.default_rng(0))


# -- command scripts --------------------------------------------------------------

def test_script_piecewise_and_hold():
    script = play_command_script([
        {"duration": 2.0, "vx": 0.2, "height": 0.75},
        {"duration": 3.0, "vx": 0.6, "height": 0.7},
    ])
    assert np.allclose(script.command_at(0.0), [0.2, 0.75])
    assert np.allclose(script.command_at(1.99), [0.2, 0.75])
    assert np.allclose(script.command_at(2.0), [0.6, 0.7])
    assert np.allclose(script.command_at(100.0), [0.6, 0.7])  # holds last


def test_script_ramp_midpoint():
    script = play_command_script([
        ScriptEntry(1.0, 0.0, 0.75),
        ScriptEntry(10.0, 0.0, 0.55, ramp=True),
    ])
    cmd = script.command_at(1.0 + 5.0)
    assert cmd[1] == pytest.approx(0.65)


def test_script_validation():
    with pytest.raises(ConfigError):
        play_command_script([])
    with pytest.raises(ConfigError):
        play_command_script([ScriptEntry(0.0, 0.0, 0.75)])


def test_script_helpers():
    lad = velocity_ladder()
    assert lad.command_at(0.0)[0] == pytest.approx(-0.8)
    assert lad.command_at(lad.total_duration - 0.01)[0] == pytest.approx(0.8)
    hr = height_ramp()
    assert hr.command_at(5.0 + 5.0)[1] == pytest.approx(0.65)
