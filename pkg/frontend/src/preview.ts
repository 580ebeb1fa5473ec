/** Skeletal preview geometry.
 *
 * Both views are pure functions of the record: the 2D overlay uses the
 * stored keypoints directly, and the 3D view is an orthographic projection
 * of (x, y, depth) after a yaw rotation about the vertical axis through
 * the pelvis. Neither mutates the record; rotation is view state only.
 * Violation flags are a passthrough of the service's angle_violations
 * list, matched by bone name.
 */
import { BONES, boneName } from "./chain.js";
import type { AngleViolation, AnnotationRecord } from "./types.js";

export interface Segment {
  bone: string;
  from: readonly [number, number];
  to: readonly [number, number];
  violated: boolean;
}

export function violatedBones(
  violations: ReadonlyArray<AngleViolation>,
): Set<string> {
  return new Set(violations.map((v) => v.bone));
}

export function overlaySegments(
  record: AnnotationRecord,
  violations: ReadonlyArray<AngleViolation> = [],
): Segment[] {
  const bad = violatedBones(violations);
  return BONES.map(([p, c], i) => {
    const a = record.keypoints_2d[p];
    const b = record.keypoints_2d[c];
    if (!a || !b) throw new Error(`record missing joint row ${p} or ${c}`);
    const name = boneName(i);
    return {
      bone: name,
      from: [a[0] ?? 0, a[1] ?? 0] as const,
      to: [b[0] ?? 0, b[1] ?? 0] as const,
      violated: bad.has(name),
    };
  });
}

/** Rotate joints about the vertical axis through the pelvis by yaw
 * radians, then drop the rotated depth. yaw = 0 reproduces the 2D pose
 * whenever all depths are zero. */
export function orthographicSegments(
  record: AnnotationRecord,
  violations: ReadonlyArray<AngleViolation> = [],
  yaw = 0,
): Segment[] {
  const pelvis = record.keypoints_2d[0];
  if (!pelvis) throw new Error("record missing pelvis row");
  const cx = pelvis[0] ?? 0;
  const cos = Math.cos(yaw);
  const sin = Math.sin(yaw);
  const project = (j: number): readonly [number, number] => {
    const kp = record.keypoints_2d[j];
    if (!kp) throw new Error(`record missing joint row ${j}`);
    const x = (kp[0] ?? 0) - cx;
    const z = record.depth_rel[j] ?? 0;
    return [cx + cos * x + sin * z, kp[1] ?? 0] as const;
  };
  const bad = violatedBones(violations);
  return BONES.map(([p, c], i) => {
    const name = boneName(i);
    return {
      bone: name,
      from: project(p),
      to: project(c),
      violated: bad.has(name),
    };
  });
}
