/** Wire types for the annotation service JSON API. */

export type Status = "todo" | "in_progress" | "done";

/** One annotation record as the service serializes it. keypoints_2d rows
 * are [x, y, visible]; depth_rel is one relative depth per joint with the
 * pelvis pinned at 0. */
export interface AnnotationRecord {
  image_id: string;
  image_path: string;
  keypoints_2d: number[][];
  depth_rel: number[];
  head_box: [number, number, number, number];
  status: Status;
  version: number;
  annotator: string | null;
  created_at: string | null;
  updated_at: string | null;
}

export interface TaskResponse {
  task: AnnotationRecord | null;
  image: string | null;
  matching: number;
}

export interface RecordResponse {
  record: AnnotationRecord;
  image: string;
}

export interface FieldError {
  field: string;
  message: string;
}

export interface AngleViolation {
  bone: string;
  angle: number;
  interval: [number, number];
}

export interface ValidateResponse {
  projection_ok: boolean;
  changed_2d: boolean;
  angle_violations: AngleViolation[];
  indeterminate: string[];
}

export interface LiftResponse {
  image_id: string;
  depth_rel: number[];
  source: "zeros" | "model";
}

export type SaveResult =
  | { kind: "saved"; version: number }
  | { kind: "conflict"; currentVersion: number; message: string }
  | { kind: "invalid"; errors: FieldError[] };

export function cloneRecord(r: AnnotationRecord): AnnotationRecord {
  return JSON.parse(JSON.stringify(r)) as AnnotationRecord;
}
