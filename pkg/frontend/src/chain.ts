/** Skeleton topology mirrored from the annotation service's default chain.
 *
 * Joint order matters: keypoints_2d and depth_rel rows are indexed by it,
 * and the service's violation list names bones as "parent:child" using
 * these joint names.
 */

export const JOINTS = [
  "pelvis",
  "r_hip",
  "r_knee",
  "r_ankle",
  "l_hip",
  "l_knee",
  "l_ankle",
  "spine",
  "thorax",
  "neck",
  "head",
  "head_top",
  "l_shoulder",
  "l_elbow",
  "l_wrist",
  "r_shoulder",
  "r_elbow",
  "r_wrist",
] as const;

export const NUM_JOINTS = JOINTS.length;
export const PELVIS = 0;

/** [parent, child] joint index pairs, one per bone. */
export const BONES: ReadonlyArray<readonly [number, number]> = [
  [0, 1],
  [1, 2],
  [2, 3],
  [0, 4],
  [4, 5],
  [5, 6],
  [0, 7],
  [7, 8],
  [8, 9],
  [9, 10],
  [10, 11],
  [8, 12],
  [12, 13],
  [13, 14],
  [8, 15],
  [15, 16],
  [16, 17],
];

export function boneName(boneIndex: number): string {
  const bone = BONES[boneIndex];
  if (!bone) throw new Error(`no bone ${boneIndex}`);
  return `${JOINTS[bone[0]]}:${JOINTS[bone[1]]}`;
}

export function jointIndex(name: string): number {
  const i = (JOINTS as readonly string[]).indexOf(name);
  if (i < 0) throw new Error(`unknown joint ${name}`);
  return i;
}
