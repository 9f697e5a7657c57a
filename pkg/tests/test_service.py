import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from gaitlab.mdp import load_task_config
from gaitlab.service import DebugSession, build_app

from conftest import config_text


@pytest.fixture()
def task():
    return load_task_config(config_text("locomotion.yaml"))


@pytest.fixture()
def session(task):
    return DebugSession(task, seed=0)


# -- session logic ------------------------------------------------------------------


def test_snapshot_schema(session):
    snap = session.snapshot()
    for key in ("time", "base", "q", "q_targets", "torques", "contacts",
                "reward_terms", "reward_total", "command", "harness_scale"):
        assert key in snap
    assert snap["type"] == "snapshot"
    assert len(snap["q"]) == 6 and len(snap["torques"]) == 6
    json.dumps(snap)  # must be wire-serializable


def test_reward_breakdown_sums_exactly(session):
    for _ in range(5):
        session.step()
    snap = session.snapshot()
    total = sum(t["weighted"] for t in snap["reward_terms"])
    assert total == snap["reward_total"]
    for t in snap["reward_terms"]:
        assert t["weighted"] == t["weight"] * t["value"]


def test_torque_readout_matches_sim(session):
    session.step()
    assert session.snapshot()["torques"] == session.state.tau[0].tolist()


def test_set_joint_target_and_clamp(session):
    ack = session.handle_command(
        {"type": "set_joint_target", "name": "l_knee", "value": 0.5})
    assert ack["ok"] and "warning" not in ack
    assert session.snapshot()["q_targets"][1] == 0.5

    ack = session.handle_command(
        {"type": "set_joint_target", "name": "l_knee", "value": 9.0})
    assert ack["ok"] and "clamped" in ack["warning"]
    assert ack["value"] == 2.4

    ack = session.handle_command(
        {"type": "set_joint_target", "name": "tail", "value": 0.0})
    assert not ack["ok"] and "tail" in ack["error"]


def test_pause_freezes_time(session):
    session.step()
    t = session.state.time[0]
    session.handle_command({"type": "pause"})
    session.step()
    assert session.state.time[0] == t
    assert session.snapshot()["paused"]
    session.handle_command({"type": "resume"})
    session.step()
    assert session.state.time[0] > t


def test_harness_toggle_and_hold(session):
    ack = session.handle_command({"type": "toggle_harness", "scale": 1.0})
    assert ack["ok"] and ack["scale"] == 1.0
    session.handle_command(
        {"type": "set_base_pose", "pitch": 0.5, "z": 0.9})
    for _ in range(150):  # 3 s
        session.step()
    assert abs(session.state.base[0, 2]) < 0.1  # harness rights the robot

    ack = session.handle_command({"type": "toggle_harness"})
    assert ack["scale"] == 0.0

    ack = session.handle_command({"type": "toggle_harness", "scale": 7.0})
    assert not ack["ok"]


def test_reset_modes(session):
    session.handle_command({"type": "set_base_pose", "pitch": 1.0})
    session.handle_command({"type": "reset"})
    assert session.state.base[0, 2] == 0.0
    ack = session.handle_command({"type": "reset", "mode": "cached"})
    assert not ack["ok"]  # no cache loaded
    ack = session.handle_command({"type": "reset", "mode": "bogus"})
    assert not ack["ok"]


def test_mirror_pose(session):
    session.handle_command(
        {"type": "set_joint_target", "name": "l_hip", "value": 0.3})
    session.q_targets[:] = session.model.default_pose
    session.state.q[0, :] = 0.0
    session.state.q[0, 0] = 0.3  # only l_hip displaced
    ack = session.handle_command({"type": "request_mirror_pose"})
    assert ack["ok"]
    q = ack["q"]
    assert q[2] == pytest.approx(0.3) and q[0] == pytest.approx(0.0)


def test_set_command(session):
    session.handle_command({"type": "set_command", "vx": 0.4, "height": 0.7})
    assert session.snapshot()["command"] == [0.4, 0.7]


def test_unknown_command(session):
    ack = session.handle_command({"type": "dance"})
    assert not ack["ok"]


# -- service endpoints ---------------------------------------------------------------


def test_model_endpoint(task):
    client = TestClient(build_app(task, realtime=False))
    info = client.get("/api/model").json()
    assert [j["name"] for j in info["joints"]] == list(task.robot.joint_names)
    assert info["joints"][1]["upper"] == 2.4
    assert {t["name"] for t in info["reward_terms"]} == \
        {t.name for t in task.rewards}
    assert "thigh" in info["links"]


def test_websocket_stream_and_commands(task):
    client = TestClient(build_app(task, realtime=False))
    with client.websocket_connect("/ws") as ws:
        first = ws.receive_json()
        assert first["type"] == "snapshot"
        second = ws.receive_json()
        assert second["time"] > first["time"]

        ws.send_text(json.dumps(
            {"type": "set_joint_target", "name": "r_hip", "value": -0.9}))
        saw_target = False
        for _ in range(20):
            msg = ws.receive_json()
            if msg["type"] == "ack":
                assert msg["ok"]
            elif msg["q_targets"][2] == -0.9:
                saw_target = True
                break
        assert saw_target


def test_websocket_pause_freezes_stream_time(task):
    client = TestClient(build_app(task, realtime=False))
    with client.websocket_connect("/ws") as ws:
        ws.send_text(json.dumps({"type": "pause"}))
        msgs = [ws.receive_json() for _ in range(12)]
        snaps = [m for m in msgs if m["type"] == "snapshot"]
        paused = [s for s in snaps if s["paused"]]
        assert len(paused) >= 2
        assert paused[-1]["time"] == paused[0]["time"]


def test_index_without_bundle(task):
    client = TestClient(build_app(task, realtime=False))
    page = client.get("/")
    assert page.status_code == 200 and "debug service" in page.text
