"""Interactive debug session over WebSocket.

Hosts a single live environment: joint sliders drive PD targets, the
harness can hold the base, and every snapshot carries the applied torques
and the per-term reward breakdown so reward shaping can be inspected
without running a training loop.
"""

from __future__ import annotations

import asyncio
import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse
from fastapi.staticfiles import StaticFiles

from . import toolbox
from .mdp import (REWARD_FNS, StateCache, TaskConfig, standing_mask)
from .robot import ConfigError, mirror_vector
from .sim import sim_reset, sim_step

SNAPSHOT_HZ = 20.0
PROTOCOL_VERSION = 1

COMMANDS = ("set_joint_target", "set_base_pose", "toggle_harness", "reset",
            "pause", "resume", "set_command", "request_mirror_pose")


class DebugSession:
    """One live robot: slider targets in, state and reward breakdown out."""

    def __init__(self, task: TaskConfig, seed: int = 0,
                 state_cache: StateCache | None = None):
        self.task = task
        self.model = task.robot
        self.sim_config = task.sim
        self.state_cache = state_cache
        self.rng = np.random.default_rng(seed)
        self.paused = False
        self.harness_scale = 0.0
        self.command = np.array([0.0, float(task.robot.nominal_height)])
        self.q_targets = self.model.default_pose.copy()
        self._prev_targets = self.q_targets.copy()
        self.state = sim_reset(self.model, self.sim_config, n=1)
        self.last_total = 0.0
        self.last_terms: list[dict] = []
        self._compute_rewards(self.state)

    # -- stepping -------------------------------------------------------------

    def step(self) -> None:
        """One control step, unless paused (pausing freezes sim time)."""
        if self.paused:
            return
        prev = self.state
        wrench = None
        if self.harness_scale > 0.0:
            st = self.state
            wrench = toolbox.harness_wrench(
                self.task.toolbox.harness, st.base[:, 2], st.base_vel[:, 2],
                st.base[:, 1], st.base_vel[:, 1], self.harness_scale)
        self.state = sim_step(self.model, self.sim_config, self.state,
                              self.q_targets[None], harness_wrench=wrench)
        self._compute_rewards(prev)
        self._prev_targets = self.q_targets.copy()

    def _compute_rewards(self, prev_state) -> None:
        # sliders stand in for policy actions in the shaping terms
        scale = self.task.action_scale
        a = ((self.q_targets - self.model.default_pose) / scale)[None]
        pa = ((self._prev_targets - self.model.default_pose) / scale)[None]
        total = 0.0
        terms = []
        for term in self.task.rewards:
            value = float(REWARD_FNS[term.name](
                self.task, prev_state, self.state, a, pa,
                self.command[None])[0])
            weighted = term.weight * value
            total += weighted
            terms.append({"name": term.name, "weight": term.weight,
                          "value": value, "weighted": weighted})
        self.last_total = total
        self.last_terms = terms

    # -- commands -------------------------------------------------------------

    def handle_command(self, cmd: dict) -> dict:
        kind = cmd.get("type")
        ack = {"type": "ack", "cmd": kind, "ok": True}
        try:
            if kind == "set_joint_target":
                name = cmd["name"]
                names = self.model.joint_names
                if name not in names:
                    raise ConfigError(f"unknown joint '{name}'")
                j = names.index(name)
                lo, hi = self.model.lower_limits[j], self.model.upper_limits[j]
                value = float(cmd["value"])
                clamped = float(np.clip(value, lo, hi))
                if clamped != value:
                    ack["warning"] = (f"target {value:.3f} outside "
                                      f"[{lo:.3f}, {hi:.3f}], clamped")
                self.q_targets[j] = clamped
                ack["value"] = clamped
            elif kind == "set_base_pose":
                st = self.state
                st.base[0] = [float(cmd.get("x", st.base[0, 0])),
                              float(cmd.get("z", st.base[0, 1])),
                              float(cmd.get("pitch", st.base[0, 2]))]
                st.base_vel[0] = 0.0
            elif kind == "toggle_harness":
                if self.harness_scale > 0.0:
                    self.harness_scale = 0.0
                else:
                    self.harness_scale = float(cmd.get("scale", 1.0))
                    if not 0.0 <= self.harness_scale <= 1.0:
                        self.harness_scale = 0.0
                        raise ConfigError("harness scale must be in [0, 1]")
                ack["scale"] = self.harness_scale
            elif kind == "reset":
                mode = cmd.get("mode", "default")
                if mode == "cached":
                    if self.state_cache is None:
                        raise ConfigError("no state cache loaded")
                    self.state = self.state_cache.sample(self.rng, 1)
                elif mode == "default":
                    self.state = sim_reset(self.model, self.sim_config, n=1)
                else:
                    raise ConfigError(f"unknown reset mode '{mode}'")
                self.q_targets = self.model.default_pose.copy()
                self._prev_targets = self.q_targets.copy()
            elif kind == "pause":
                self.paused = True
            elif kind == "resume":
                self.paused = False
            elif kind == "set_command":
                self.command = np.array([
                    float(cmd.get("vx", self.command[0])),
                    float(cmd.get("height", self.command[1]))])
            elif kind == "request_mirror_pose":
                rule = self.model.symmetry.action_rule
                ack["q"] = mirror_vector(rule, self.state.q[0]).tolist()
                ack["q_targets"] = mirror_vector(rule, self.q_targets).tolist()
                ack["base"] = [-self.state.base[0, 0], self.state.base[0, 1],
                               -self.state.base[0, 2]]
            else:
                raise ConfigError(f"unknown command '{kind}'")
        except (ConfigError, KeyError, TypeError, ValueError) as exc:
            return {"type": "ack", "cmd": kind, "ok": False,
                    "error": str(exc)}
        return ack

    # -- output ---------------------------------------------------------------

    def snapshot(self) -> dict:
        st = self.state
        return {
            "type": "snapshot",
            "version": PROTOCOL_VERSION,
            "time": float(st.time[0]),
            "paused": self.paused,
            "base": st.base[0].tolist(),
            "base_vel": st.base_vel[0].tolist(),
            "q": st.q[0].tolist(),
            "qd": st.qd[0].tolist(),
            "q_targets": self.q_targets.tolist(),
            "torques": st.tau[0].tolist(),
            "contacts": st.contact_force[0].tolist(),
            "command": self.command.tolist(),
            "harness_scale": self.harness_scale,
            "standing": bool(standing_mask(st)[0]),
            "reward_total": self.last_total,
            "reward_terms": self.last_terms,
        }

    def model_info(self) -> dict:
        m = self.model
        return {
            "version": PROTOCOL_VERSION,
            "task": self.task.name,
            "control_dt": float(self.sim_config.control_dt),
            "nominal_height": float(m.nominal_height),
            "joints": [
                {"name": n,
                 "lower": float(m.lower_limits[j]),
                 "upper": float(m.upper_limits[j]),
                 "default": float(m.default_pose[j])}
                for j, n in enumerate(m.joint_names)
            ],
            "links": {k: float(v) for k, v in m.link_lengths.items()},
            "reward_terms": [
                {"name": t.name, "weight": t.weight} for t in self.task.rewards
            ],
        }


def build_app(task: TaskConfig, seed: int = 0,
              state_cache: StateCache | None = None,
              frontend_dir: str | Path | None = None,
              realtime: bool = True):
    """FastAPI app around one debug session.

    With ``realtime`` off the loop skips wall-clock sleeps (used in tests).
    """
    app = FastAPI(title="gaitlab debug service")
    session = DebugSession(task, seed=seed, state_cache=state_cache)
    app.state.session = session

    @app.get("/api/model")
    def model_info():
        return session.model_info()

    @app.websocket("/ws")
    async def ws(socket: WebSocket):
        await socket.accept()
        dt = task.sim.control_dt
        steps_per_snapshot = max(1, round(1.0 / (SNAPSHOT_HZ * dt)))

        async def recv_commands():
            try:
                while True:
                    msg = json.loads(await socket.receive_text())
                    await socket.send_text(
                        json.dumps(session.handle_command(msg)))
            except (WebSocketDisconnect, RuntimeError):
                pass

        recv_task = asyncio.create_task(recv_commands())
        try:
            while not recv_task.done():
                for _ in range(steps_per_snapshot):
                    session.step()
                await socket.send_text(json.dumps(session.snapshot()))
                if realtime:
                    await asyncio.sleep(1.0 / SNAPSHOT_HZ)
                else:
                    await asyncio.sleep(0)
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            recv_task.cancel()
        return

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True),
                  name="ui")
    else:
        @app.get("/")
        def index():
            return HTMLResponse(
                "<html><body><h1>gaitlab debug service</h1>"
                "<p>No UI bundle found; the WebSocket endpoint is at "
                "<code>/ws</code>, model metadata at "
                "<code>/api/model</code>.</p></body></html>")

    return app


def serve(task: TaskConfig, host: str = "127.0.0.1", port: int = 8000,
          seed: int = 0, state_cache: StateCache | None = None,
          frontend_dir: str | Path | None = None) -> None:
    """Run the debug service until interrupted."""
    import uvicorn

    if frontend_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        frontend_dir = candidate if candidate.is_dir() else None
    app = build_app(task, seed=seed, state_cache=state_cache,
                    frontend_dir=frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
