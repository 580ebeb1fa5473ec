/** Thin fetch client for the annotation service.
 *
 * The fetch implementation is injectable so tests can script the server
 * side; the URL paths and body shapes here are the whole coupling surface
 * between the browser client and the backend.
 */
import type {
  AnnotationRecord,
  FieldError,
  LiftResponse,
  RecordResponse,
  SaveResult,
  TaskResponse,
  ValidateResponse,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike,
  ) {}

  private async json<T>(res: Response): Promise<T> {
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as T;
  }

  async task(status?: string): Promise<TaskResponse> {
    const q = status ? `?status=${encodeURIComponent(status)}` : "";
    return this.json(await this.fetchImpl(`${this.baseUrl}/api/tasks${q}`));
  }

  async record(imageId: string): Promise<RecordResponse> {
    return this.json(
      await this.fetchImpl(`${this.baseUrl}/api/tasks/${imageId}`),
    );
  }

  /** Optimistic save. Conflicts and validation failures are results, not
   * exceptions: the editor has a UI path for each. */
  async save(
    imageId: string,
    record: AnnotationRecord,
    expectedVersion: number,
  ): Promise<SaveResult> {
    const res = await this.fetchImpl(`${this.baseUrl}/api/tasks/${imageId}`, {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ record, expected_version: expectedVersion }),
    });
    if (res.status === 409) {
      const body = (await res.json()) as {
        detail: { message: string; current_version: number };
      };
      return {
        kind: "conflict",
        currentVersion: body.detail.current_version,
        message: body.detail.message,
      };
    }
    if (res.status === 422) {
      const body = (await res.json()) as { detail: FieldError[] };
      return { kind: "invalid", errors: body.detail };
    }
    const ok = await this.json<{ image_id: string; version: number }>(res);
    return { kind: "saved", version: ok.version };
  }

  async validate(record: AnnotationRecord): Promise<ValidateResponse> {
    const res = await this.fetchImpl(`${this.baseUrl}/api/validate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(record),
    });
    return this.json(res);
  }

  async lift(imageId: string): Promise<LiftResponse> {
    const res = await this.fetchImpl(`${this.baseUrl}/api/lift/${imageId}`, {
      method: "POST",
    });
    return this.json(res);
  }

  imageUrl(imageId: string): string {
    return `${this.baseUrl}/api/images/${imageId}`;
  }
}
