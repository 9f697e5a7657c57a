/** Pure view-state logic: everything here is testable without a DOM. */

import type { JointInfo, MirrorPose, RewardTerm, ServerMessage,
              Snapshot } from "./types.js";

export interface SessionView {
  connected: boolean;
  snapshot: Snapshot | null;
  sliders: number[];
  mirrorOn: boolean;
  mirror: MirrorPose | null;
  lastError: string | null;
}

export function initialView(joints: JointInfo[]): SessionView {
  return {
    connected: false,
    snapshot: null,
    sliders: joints.map((j) => j.default),
    mirrorOn: false,
    mirror: null,
    lastError: null,
  };
}

/** Clamp a requested slider value to the joint's limits. */
export function clampSlider(joint: JointInfo, value: number): number {
  return Math.min(joint.upper, Math.max(joint.lower, value));
}

/** The outgoing command for a slider move; never exceeds the limits. */
export function sliderCommand(joint: JointInfo, value: number) {
  return {
    type: "set_joint_target",
    name: joint.name,
    value: clampSlider(joint, value),
  };
}

/** Sum of the weighted column; must equal the service's reported total. */
export function rewardTableTotal(terms: RewardTerm[]): number {
  return terms.reduce((acc, t) => acc + t.weighted, 0);
}

/** Fold one server message into the view; pure, idempotent per message. */
export function applyMessage(view: SessionView,
                             msg: ServerMessage): SessionView {
  if (msg.type === "snapshot") {
    return { ...view, snapshot: msg };
  }
  if (!msg.ok) {
    return { ...view, lastError: msg.error ?? "command failed" };
  }
  if (msg.cmd === "request_mirror_pose" && msg.q && msg.q_targets
      && msg.base) {
    return {
      ...view,
      mirror: { q: msg.q, qTargets: msg.q_targets, base: msg.base },
    };
  }
  return view;
}

export function setConnected(view: SessionView,
                             connected: boolean): SessionView {
  return connected
    ? { ...view, connected: true }
    : { ...view, connected: false, snapshot: view.snapshot };
}
