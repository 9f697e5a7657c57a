/** Entry point: one socket, slider panel, canvases, reward table. */

import { drawRobot, renderRewardTable, renderStatus,
         renderTorqueBars } from "./render.js";
import { applyMessage, initialView, sliderCommand,
         type SessionView } from "./state.js";
import type { ModelInfo, ServerMessage } from "./types.js";

const RECONNECT_MS = 1000;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function boot(): Promise<void> {
  const model: ModelInfo = await (await fetch("/api/model")).json();
  let view: SessionView = initialView(model.joints);
  let socket: WebSocket | null = null;
  let dirty = false;

  const banner = el<HTMLElement>("banner");
  const robotCanvas = el<HTMLCanvasElement>("robot");
  const mirrorCanvas = el<HTMLCanvasElement>("mirror");
  const mirrorPanel = el<HTMLElement>("mirror-panel");
  const sliderPanel = el<HTMLElement>("sliders");
  const torquePanel = el<HTMLElement>("torques");
  const rewardBody = el<HTMLElement>("reward-body");
  const rewardTotal = el<HTMLElement>("reward-total");
  const status = el<HTMLElement>("status");

  const send = (cmd: object) => {
    if (socket && socket.readyState === WebSocket.OPEN) {
      socket.send(JSON.stringify(cmd));
    }
  };

  // one slider + torque bar per joint, limits straight from the metadata
  model.joints.forEach((joint, j) => {
    const row = document.createElement("div");
    row.className = "slider-row";
    row.innerHTML =
      `<label>${joint.name}</label>` +
      `<input type="range" min="${joint.lower}" max="${joint.upper}" ` +
      `step="0.01" value="${joint.default}">` +
      `<span class="slider-value">${joint.default.toFixed(2)}</span>`;
    const input = row.querySelector("input")!;
    input.addEventListener("input", () => {
      const cmd = sliderCommand(joint, Number(input.value));
      view.sliders[j] = cmd.value;
      row.querySelector(".slider-value")!.textContent =
        cmd.value.toFixed(2);
      send(cmd);
    });
    sliderPanel.appendChild(row);

    const bar = document.createElement("div");
    bar.className = "torque-row";
    bar.innerHTML =
      `<label>${joint.name}</label>` +
      `<div class="torque-track"><div class="torque-fill"></div></div>` +
      `<span class="torque-value">0.0</span>`;
    torquePanel.appendChild(bar);
  });

  el<HTMLButtonElement>("btn-pause").addEventListener("click", () =>
    send({ type: view.snapshot?.paused ? "resume" : "pause" }));
  el<HTMLButtonElement>("btn-reset").addEventListener("click", () =>
    send({ type: "reset", mode: "default" }));
  el<HTMLButtonElement>("btn-harness").addEventListener("click", () =>
    send({ type: "toggle_harness", scale: 1.0 }));
  el<HTMLInputElement>("cmd-vx").addEventListener("change", (e) =>
    send({ type: "set_command",
           vx: Number((e.target as HTMLInputElement).value) }));
  el<HTMLInputElement>("cmd-height").addEventListener("change", (e) =>
    send({ type: "set_command",
           height: Number((e.target as HTMLInputElement).value) }));
  el<HTMLInputElement>("mirror-toggle").addEventListener("change", (e) => {
    view = { ...view, mirrorOn: (e.target as HTMLInputElement).checked };
    mirrorPanel.style.display = view.mirrorOn ? "" : "none";
  });

  function connect(): void {
    const proto = location.protocol === "https:" ? "wss" : "ws";
    socket = new WebSocket(`${proto}://${location.host}/ws`);
    socket.onopen = () => {
      view = { ...view, connected: true };
      banner.style.display = "none";
    };
    socket.onmessage = (ev) => {
      view = applyMessage(view, JSON.parse(ev.data) as ServerMessage);
      dirty = true;
      if (view.mirrorOn && view.snapshot && !view.snapshot.paused) {
        send({ type: "request_mirror_pose" });
      }
    };
    socket.onclose = () => {
      view = { ...view, connected: false };
      banner.style.display = "";
      setTimeout(connect, RECONNECT_MS);
    };
  }
  connect();

  // render at display refresh from the latest snapshot only
  function frame(): void {
    if (dirty && view.snapshot) {
      dirty = false;
      const snap = view.snapshot;
      drawRobot(robotCanvas, model, snap.base, snap.q, "#26c");
      renderTorqueBars(torquePanel, model, snap.torques);
      renderRewardTable(rewardBody, rewardTotal, snap.reward_terms,
                        snap.reward_total);
      renderStatus(status, snap);
      if (view.mirrorOn && view.mirror) {
        drawRobot(mirrorCanvas, model, view.mirror.base, view.mirror.q,
                  "#c62");
      }
    }
    requestAnimationFrame(frame);
  }
  requestAnimationFrame(frame);
}

boot().catch((err) => {
  document.body.innerHTML = `<pre>failed to start: ${err}</pre>`;
});
