/** Planar forward kinematics for drawing, matching the simulator:
 *  leg segment angle is pitch + accumulated joint angles, measured from
 *  straight down. */

import type { ModelInfo } from "./types.js";

export type Segment = [[number, number], [number, number]];

export interface RobotFigure {
  torso: Segment;
  legs: Segment[][];   // [leg][thigh, shank]
  arms: Segment[];
  base: [number, number];
}

const TORSO_DRAW_HEIGHT = 0.3;

export function robotFigure(model: ModelInfo,
                            base: [number, number, number],
                            q: number[]): RobotFigure {
  const [x, z, pitch] = base;
  const lt = model.links["thigh"] ?? 0.4;
  const ls = model.links["shank"] ?? 0.4;
  const la = model.links["arm"] ?? 0.3;

  const legs: Segment[][] = [];
  for (const [ihip, iknee] of [[0, 1], [2, 3]] as const) {
    const a1 = pitch + q[ihip];
    const a2 = a1 + q[iknee];
    const knee: [number, number] =
      [x + lt * Math.sin(a1), z - lt * Math.cos(a1)];
    const foot: [number, number] =
      [knee[0] + ls * Math.sin(a2), knee[1] - ls * Math.cos(a2)];
    legs.push([[[x, z], knee], [knee, foot]]);
  }

  const top: [number, number] = [
    x - TORSO_DRAW_HEIGHT * Math.sin(pitch),
    z + TORSO_DRAW_HEIGHT * Math.cos(pitch),
  ];
  const arms: Segment[] = [];
  for (const iarm of [4, 5]) {
    const a = pitch + q[iarm];
    arms.push([top, [top[0] + la * Math.sin(a), top[1] - la * Math.cos(a)]]);
  }

  return { torso: [[x, z], top], legs, arms, base: [x, z] };
}
