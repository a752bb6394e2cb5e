/** Typed client for the annotation service HTTP API. */

export interface TaskInstance {
  id: string;
  goal: string;
  resources: string[];
  reference_steps: string[];
}

export interface TaskPayload {
  task_id: string;
  instance: TaskInstance;
  generated_steps: string[];
  attention_tokens: string[];
  issued_at: number;
  min_elapsed_seconds: number;
}

export interface TaskStatePayload {
  task_id: string;
  acknowledged_tokens: string[];
  submitted: boolean;
}

export interface FailurePayload {
  description: string;
  reference_step_refs: number[];
  generated_step_refs: number[];
}

export interface SubmissionPayload {
  task_id: string;
  annotator_id: string;
  verdict: 'has_failure' | 'no_failure';
  failures: FailurePayload[];
  client_elapsed_seconds: number;
}

export interface SubmitResult {
  accepted: boolean;
  reason: string | null;
  elapsed_seconds: number | null;
}

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number | null = null,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

type FetchLike = typeof fetch;

export class AnnotationApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new ApiError(`network failure: ${String(err)}`);
    }
    return response;
  }

  private async postJson(path: string, body: unknown): Promise<Response> {
    return this.request(path, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  async openSession(annotatorId: string): Promise<void> {
    const response = await this.postJson('/v1/session', { annotator_id: annotatorId });
    if (!response.ok) {
      throw new ApiError(`session failed (${response.status})`, response.status);
    }
  }

  /** Next task for this annotator, or null when the pool is exhausted. */
  async fetchTask(annotatorId: string): Promise<TaskPayload | null> {
    const response = await this.request(
      `/v1/task?annotator_id=${encodeURIComponent(annotatorId)}`,
    );
    if (response.status === 204) return null;
    if (!response.ok) {
      throw new ApiError(`task fetch failed (${response.status})`, response.status);
    }
    return (await response.json()) as TaskPayload;
  }

  /** Server-side acknowledged-token log, for resyncing after a reload. */
  async taskState(taskId: string): Promise<TaskStatePayload> {
    const response = await this.request(`/v1/task/${encodeURIComponent(taskId)}/state`);
    if (!response.ok) {
      throw new ApiError(`task state failed (${response.status})`, response.status);
    }
    return (await response.json()) as TaskStatePayload;
  }

  async postAttention(taskId: string, token: string): Promise<void> {
    const response = await this.postJson('/v1/attention', {
      task_id: taskId,
      token,
    });
    if (!response.ok) {
      throw new ApiError(`attention post failed (${response.status})`, response.status);
    }
  }

  /** Submit; a 409 carries the server's named rejection reason. */
  async submit(payload: SubmissionPayload): Promise<SubmitResult> {
    const response = await this.postJson('/v1/submit', payload);
    if (response.status !== 200 && response.status !== 409) {
      throw new ApiError(`submit failed (${response.status})`, response.status);
    }
    return (await response.json()) as SubmitResult;
  }
}
