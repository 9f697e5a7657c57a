/** Wire types mirrored from the debug service protocol (version 1). */

export interface JointInfo {
  name: string;
  lower: number;
  upper: number;
  default: number;
}

export interface ModelInfo {
  version: number;
  task: string;
  control_dt: number;
  nominal_height: number;
  joints: JointInfo[];
  links: Record<string, number>;
  reward_terms: { name: string; weight: number }[];
}

export interface RewardTerm {
  name: string;
  weight: number;
  value: number;
  weighted: number;
}

export interface Snapshot {
  type: "snapshot";
  version: number;
  time: number;
  paused: boolean;
  base: [number, number, number];
  base_vel: [number, number, number];
  q: number[];
  qd: number[];
  q_targets: number[];
  torques: number[];
  contacts: number[];
  command: [number, number];
  harness_scale: number;
  standing: boolean;
  reward_total: number;
  reward_terms: RewardTerm[];
}

export interface Ack {
  type: "ack";
  cmd: string;
  ok: boolean;
  error?: string;
  warning?: string;
  value?: number;
  scale?: number;
  q?: number[];
  q_targets?: number[];
  base?: [number, number, number];
}

export type ServerMessage = Snapshot | Ack;

export interface MirrorPose {
  q: number[];
  qTargets: number[];
  base: [number, number, number];
}
