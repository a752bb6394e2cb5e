/** Wires the API client, the task state, and the DOM together.
 *
 * The controller owns one active task per browser session. The current
 * task id and start time persist in sessionStorage, so a reload resumes
 * the same task and restores the acknowledged-token set from the
 * server's log instead of trusting the client.
 */

import { AnnotationApi, ApiError, type SubmitResult, type TaskPayload } from './api.js';
import {
  acknowledge,
  buildSubmission,
  composeFailure,
  newTaskState,
  removeFailure,
  restoreAcknowledged,
  setVerdict,
  type TaskViewState,
} from './state.js';
import {
  markAcknowledged,
  renderTask,
  showRetry,
  showStatus,
  updateSubmitGate,
} from './view.js';

const STORAGE_KEY = 'how2-annotation-task';

interface StoredTask {
  task: TaskPayload;
  startedAt: number;
}

export interface ControllerOptions {
  now?: () => number;
  storage?: Pick<Storage, 'getItem' | 'setItem' | 'removeItem'>;
  tickMs?: number | null; // null disables the interval (tests drive tick())
}

export class TaskController {
  readonly api: AnnotationApi;
  state: TaskViewState | null = null;
  lastSubmit: SubmitResult | null = null;

  private readonly now: () => number;
  private readonly storage: Pick<Storage, 'getItem' | 'setItem' | 'removeItem'> | null;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly annotatorId: string,
    api: AnnotationApi,
    options: ControllerOptions = {},
  ) {
    this.api = api;
    this.now = options.now ?? (() => Date.now());
    this.storage = options.storage ?? null;
    if (options.tickMs !== null) {
      this.timer = setInterval(() => this.tick(), options.tickMs ?? 1000);
    }
  }

  dispose(): void {
    if (this.timer !== null) clearInterval(this.timer);
  }

  async start(): Promise<void> {
    await this.api.openSession(this.annotatorId);
    const resumed = await this.tryResume();
    if (!resumed) {
      await this.nextTask();
    }
  }

  private async tryResume(): Promise<boolean> {
    const raw = this.storage?.getItem(STORAGE_KEY);
    if (!raw) return false;
    let stored: StoredTask;
    try {
      stored = JSON.parse(raw) as StoredTask;
    } catch {
      this.storage?.removeItem(STORAGE_KEY);
      return false;
    }
    let serverState;
    try {
      serverState = await this.api.taskState(stored.task.task_id);
    } catch {
      this.storage?.removeItem(STORAGE_KEY);
      return false;
    }
    if (serverState.submitted) {
      this.storage?.removeItem(STORAGE_KEY);
      return false;
    }
    this.state = newTaskState(stored.task, stored.startedAt);
    restoreAcknowledged(this.state, serverState.acknowledged_tokens);
    this.render();
    return true;
  }

  async nextTask(): Promise<void> {
    const task = await this.api.fetchTask(this.annotatorId);
    if (task === null) {
      this.state = null;
      this.root.textContent = 'No tasks remain for this annotator. Thank you!';
      this.storage?.removeItem(STORAGE_KEY);
      return;
    }
    this.state = newTaskState(task, this.now());
    this.storage?.setItem(
      STORAGE_KEY,
      JSON.stringify({ task, startedAt: this.state.startedAt } satisfies StoredTask),
    );
    this.render();
  }

  render(): void {
    if (!this.state) return;
    const state = this.state;
    renderTask(this.root, state, {
      onAcknowledge: (token, button) => void this.handleAcknowledge(token, button),
      onVerdictChange: (verdict) => {
        setVerdict(state, verdict);
        this.render();
      },
      onComposeFailure: (description, refSteps, genSteps) => {
        const result = composeFailure(state, description, refSteps, genSteps);
        if (result.ok) {
          this.render();
          return null;
        }
        return result.error;
      },
      onRemoveFailure: (index) => {
        removeFailure(state, index);
        this.render();
      },
      onSubmit: () => void this.handleSubmit(),
    });
    this.tick();
  }

  tick(): void {
    if (!this.state) return;
    updateSubmitGate(this.root, this.state, this.now());
  }

  private async handleAcknowledge(token: string, button: HTMLButtonElement): Promise<void> {
    if (!this.state) return;
    const state = this.state;
    try {
      // server first; only a confirmed post flips the local state
      await this.api.postAttention(state.task.task_id, token);
    } catch (err) {
      showRetry(this.root, describeError(err), () =>
        void this.handleAcknowledge(token, button),
      );
      return;
    }
    acknowledge(state, token);
    markAcknowledged(button);
    this.tick();
  }

  private async handleSubmit(): Promise<void> {
    if (!this.state) return;
    const payload = buildSubmission(this.state, this.annotatorId, this.now());
    let result: SubmitResult;
    try {
      result = await this.api.submit(payload);
    } catch (err) {
      showRetry(this.root, describeError(err), () => void this.handleSubmit());
      return;
    }
    this.lastSubmit = result;
    if (result.accepted) {
      this.storage?.removeItem(STORAGE_KEY);
      showStatus(this.root, 'Submission accepted. Loading the next task…');
      await this.nextTask();
    } else {
      showStatus(this.root, `Submission rejected: ${result.reason}`, true);
      this.tick();
    }
  }
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) return err.message;
  return String(err);
}
