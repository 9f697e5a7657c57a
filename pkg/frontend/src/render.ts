/** Canvas and DOM rendering; reads view state, writes pixels and cells. */

import { robotFigure } from "./fk.js";
import { rewardTableTotal } from "./state.js";
import type { ModelInfo, RewardTerm, Snapshot } from "./types.js";

const SCALE = 180;             // pixels per meter
const GROUND_Y = 0.86;         // ground line, fraction of canvas height

function toPx(canvas: HTMLCanvasElement, p: [number, number],
              xCenter: number): [number, number] {
  return [
    canvas.width / 2 + (p[0] - xCenter) * SCALE,
    canvas.height * GROUND_Y - p[1] * SCALE,
  ];
}

export function drawRobot(canvas: HTMLCanvasElement, model: ModelInfo,
                          base: [number, number, number], q: number[],
                          color: string): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);

  ctx.strokeStyle = "#999";
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(0, canvas.height * GROUND_Y);
  ctx.lineTo(canvas.width, canvas.height * GROUND_Y);
  ctx.stroke();

  const fig = robotFigure(model, base, q);
  const segments = [fig.torso, ...fig.legs.flat(), ...fig.arms];
  ctx.strokeStyle = color;
  ctx.lineWidth = 4;
  ctx.lineCap = "round";
  for (const [a, b] of segments) {
    ctx.beginPath();
    ctx.moveTo(...toPx(canvas, a, base[0]));
    ctx.lineTo(...toPx(canvas, b, base[0]));
    ctx.stroke();
  }
  ctx.fillStyle = color;
  const [bx, by] = toPx(canvas, fig.base, base[0]);
  ctx.beginPath();
  ctx.arc(bx, by, 6, 0, 2 * Math.PI);
  ctx.fill();
}

export function renderTorqueBars(container: HTMLElement, model: ModelInfo,
                                 torques: number[]): void {
  const rows = container.querySelectorAll<HTMLElement>(".torque-fill");
  const labels = container.querySelectorAll<HTMLElement>(".torque-value");
  torques.forEach((tau, j) => {
    const bar = rows[j];
    const label = labels[j];
    if (!bar || !label) return;
    const limit = 60;  // display range only; bars saturate, values do not
    const frac = Math.min(1, Math.abs(tau) / limit);
    bar.style.width = `${(frac * 50).toFixed(1)}%`;
    bar.style.left = tau >= 0 ? "50%" : `${(50 - frac * 50).toFixed(1)}%`;
    label.textContent = `${tau.toFixed(1)} N·m`;
    void model;
  });
}

export function renderRewardTable(tbody: HTMLElement,
                                  totalCell: HTMLElement,
                                  terms: RewardTerm[],
                                  reportedTotal: number): void {
  tbody.innerHTML = terms
    .map((t) =>
      `<tr><td>${t.name}</td><td>${t.weight}</td>` +
      `<td>${t.value.toFixed(4)}</td><td>${t.weighted.toFixed(4)}</td></tr>`)
    .join("");
  const sum = rewardTableTotal(terms);
  totalCell.textContent =
    `${reportedTotal.toFixed(4)} (column sum ${sum.toFixed(4)})`;
}

export function renderStatus(el: HTMLElement, snap: Snapshot): void {
  el.textContent =
    `t=${snap.time.toFixed(2)}s  ` +
    `vx=${snap.base_vel[0].toFixed(2)}  h=${snap.base[1].toFixed(2)}  ` +
    `pitch=${snap.base[2].toFixed(2)}  ` +
    (snap.paused ? "paused" : "running") +
    (snap.harness_scale > 0
      ? `  harness ${snap.harness_scale.toFixed(2)}` : "") +
    (snap.standing ? "  standing" : "");
}
