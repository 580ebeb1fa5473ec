/** Editor state machine and save/validate/conflict flows.
 *
 * Invariants enforced here:
 *  - the local record's version is exactly the version the server handed
 *    out; edits never advance it (only a successful save + refetch does),
 *  - submit is disabled while a validation round-trip is pending,
 *  - depth edits touch depth_rel only; 2D coordinates are written solely
 *    by explicit 2D moves,
 *  - a version conflict always raises a prompt; there is no code path
 *    that overwrites the server copy without the user choosing one.
 */
import type { ApiClient } from "./api.js";
import { NUM_JOINTS, PELVIS } from "./chain.js";
import type {
  AnnotationRecord,
  FieldError,
  SaveResult,
  Status,
  ValidateResponse,
} from "./types.js";
import { cloneRecord } from "./types.js";

export interface Conflict {
  currentVersion: number;
  message: string;
}

/** Minimal Storage surface so drafts work in tests without a browser. */
export interface DraftStore {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

/** Overlay the fields local edits changed (relative to the record as it
 * was loaded) onto a freshly fetched server copy. Unedited fields keep the
 * server's values, so a retry after a conflict preserves the other
 * client's work. */
export function mergeEdits(
  base: AnnotationRecord,
  local: AnnotationRecord,
  server: AnnotationRecord,
): AnnotationRecord {
  const merged = cloneRecord(server);
  local.keypoints_2d.forEach((row, j) => {
    if (JSON.stringify(row) !== JSON.stringify(base.keypoints_2d[j]))
      merged.keypoints_2d[j] = [...row];
  });
  local.depth_rel.forEach((z, j) => {
    if (z !== base.depth_rel[j]) merged.depth_rel[j] = z;
  });
  if (local.status !== base.status) merged.status = local.status;
  if (JSON.stringify(local.head_box) !== JSON.stringify(base.head_box))
    merged.head_box = [...local.head_box];
  if (local.annotator !== base.annotator) merged.annotator = local.annotator;
  return merged;
}

export class EditorState {
  record: AnnotationRecord | null = null;
  /** The record exactly as last loaded from the server; edits diff
   * against it for conflict merging. */
  baseline: AnnotationRecord | null = null;
  serverVersion = 0;
  dirty = false;
  selectedJoint = 0;
  pendingValidation = false;
  validation: ValidateResponse | null = null;
  conflict: Conflict | null = null;
  fieldErrors: FieldError[] = [];

  loadRecord(record: AnnotationRecord): void {
    this.record = cloneRecord(record);
    this.baseline = cloneRecord(record);
    this.serverVersion = record.version;
    this.dirty = false;
    this.validation = null;
    this.conflict = null;
    this.fieldErrors = [];
  }

  /** Submit stays disabled while a validation of edited state is in
   * flight, and of course without a record. */
  canSubmit(): boolean {
    return this.record !== null && !this.pendingValidation;
  }

  localVersion(): number {
    return this.record ? this.record.version : 0;
  }

  selectJoint(j: number): void {
    if (j < 0 || j >= NUM_JOINTS) throw new Error(`joint ${j} out of range`);
    this.selectedJoint = j;
  }

  cycleJoint(step: 1 | -1): void {
    this.selectedJoint =
      (this.selectedJoint + step + NUM_JOINTS) % NUM_JOINTS;
  }

  moveJoint(j: number, x: number, y: number): void {
    if (!this.record) throw new Error("no record loaded");
    const row = this.record.keypoints_2d[j];
    if (!row) throw new Error(`joint ${j} out of range`);
    row[0] = x;
    row[1] = y;
    this.dirty = true;
    this.validation = null;
  }

  /** Depth edit. The pelvis is the depth origin; edits to it are ignored
   * rather than an error so a locked slider can stay wired up. */
  setDepth(j: number, z: number): void {
    if (!this.record) throw new Error("no record loaded");
    if (j === PELVIS) return;
    if (j < 0 || j >= this.record.depth_rel.length)
      throw new Error(`joint ${j} out of range`);
    this.record.depth_rel[j] = z;
    this.dirty = true;
    this.validation = null;
  }

  setStatus(status: Status): void {
    if (!this.record) throw new Error("no record loaded");
    this.record.status = status;
    this.dirty = true;
  }
}

export type SaveOutcome = "saved" | "conflict" | "invalid";

export class Editor {
  readonly state = new EditorState();

  constructor(
    private api: ApiClient,
    private drafts: DraftStore | null = null,
  ) {}

  private draftKey(imageId: string): string {
    return `napa-draft:${imageId}`;
  }

  async open(imageId: string): Promise<void> {
    const { record } = await this.api.record(imageId);
    this.state.loadRecord(record);
    this.restoreDraft();
  }

  async openNext(status?: string): Promise<boolean> {
    const res = await this.api.task(status);
    if (!res.task) return false;
    this.state.loadRecord(res.task);
    this.restoreDraft();
    return true;
  }

  /** Persist local edits so a tab crash loses nothing. Drafts are keyed
   * by image and stamped with the version they forked from; a draft from
   * another version is stale and ignored. */
  saveDraft(): void {
    const rec = this.state.record;
    if (!this.drafts || !rec) return;
    this.drafts.setItem(this.draftKey(rec.image_id), JSON.stringify(rec));
  }

  restoreDraft(): void {
    const rec = this.state.record;
    if (!this.drafts || !rec) return;
    const raw = this.drafts.getItem(this.draftKey(rec.image_id));
    if (!raw) return;
    const draft = JSON.parse(raw) as AnnotationRecord;
    if (draft.version !== rec.version) return;
    this.state.record = draft;
    this.state.dirty = true;
  }

  private clearDraft(imageId: string): void {
    this.drafts?.removeItem(this.draftKey(imageId));
  }

  async validateNow(): Promise<ValidateResponse | null> {
    const rec = this.state.record;
    if (!rec) return null;
    this.state.pendingValidation = true;
    try {
      const res = await this.api.validate(rec);
      this.state.validation = res;
      return res;
    } finally {
      this.state.pendingValidation = false;
    }
  }

  /** Optimistic save. On success the editor refetches the stored record
   * so the local copy is exactly what the server now holds. On conflict
   * the local record is kept untouched and state.conflict drives the
   * refetch prompt. */
  async save(): Promise<SaveOutcome> {
    const rec = this.state.record;
    if (!rec) throw new Error("no record loaded");
    if (!this.state.canSubmit()) throw new Error("submit is disabled");
    const result: SaveResult = await this.api.save(
      rec.image_id,
      rec,
      rec.version,
    );
    if (result.kind === "conflict") {
      this.state.conflict = {
        currentVersion: result.currentVersion,
        message: result.message,
      };
      return "conflict";
    }
    if (result.kind === "invalid") {
      this.state.fieldErrors = result.errors;
      return "invalid";
    }
    const { record } = await this.api.record(rec.image_id);
    this.state.loadRecord(record);
    this.clearDraft(record.image_id);
    return "saved";
  }

  /** Conflict prompt, choice 1: drop local edits, adopt the server copy. */
  async resolveConflictDiscard(): Promise<void> {
    const rec = this.state.record;
    if (!rec || !this.state.conflict) throw new Error("no conflict pending");
    const { record } = await this.api.record(rec.image_id);
    this.state.loadRecord(record);
    this.clearDraft(record.image_id);
  }

  /** Conflict prompt, choice 2: refetch the current copy, re-apply the
   * local edits on top of it (fields untouched locally keep the other
   * client's values), and submit. Still optimistic: a racing third write
   * surfaces as a fresh conflict. */
  async resolveConflictRetry(): Promise<SaveOutcome> {
    const rec = this.state.record;
    const base = this.state.baseline;
    if (!rec || !base || !this.state.conflict)
      throw new Error("no conflict pending");
    const { record: current } = await this.api.record(rec.image_id);
    this.state.record = mergeEdits(base, rec, current);
    this.state.serverVersion = current.version;
    this.state.conflict = null;
    return this.save();
  }
}
