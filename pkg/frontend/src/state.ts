/** Task view state and the submission gate.
 *
 * Everything enforced here is re-validated by the server; the point of
 * the client-side checks is that this module can never assemble a
 * payload that violates the submission invariants (verdict consistent
 * with the failure list, every step reference in range), and the submit
 * control stays locked until all attention tokens are acknowledged and
 * the minimum time has elapsed on the client clock.
 */

import type { FailurePayload, SubmissionPayload, TaskPayload } from './api.js';

export type Verdict = 'has_failure' | 'no_failure';

export interface TaskViewState {
  task: TaskPayload;
  acknowledged: Set<string>;
  startedAt: number; // client clock, milliseconds
  verdict: Verdict;
  draftFailures: FailurePayload[];
}

export function newTaskState(task: TaskPayload, nowMs: number): TaskViewState {
  return {
    task,
    acknowledged: new Set<string>(),
    startedAt: nowMs,
    verdict: 'no_failure',
    draftFailures: [],
  };
}

/** Restore the acknowledged set from the server's log (reload resync). */
export function restoreAcknowledged(state: TaskViewState, tokens: string[]): void {
  for (const token of tokens) {
    if (state.task.attention_tokens.includes(token)) {
      state.acknowledged.add(token);
    }
  }
}

export function acknowledge(state: TaskViewState, token: string): void {
  if (!state.task.attention_tokens.includes(token)) {
    throw new Error(`token does not belong to this task`);
  }
  state.acknowledged.add(token);
}

export function allAcknowledged(state: TaskViewState): boolean {
  return state.task.attention_tokens.every((t) => state.acknowledged.has(t));
}

export function elapsedSeconds(state: TaskViewState, nowMs: number): number {
  return (nowMs - state.startedAt) / 1000;
}

export function timeSatisfied(state: TaskViewState, nowMs: number): boolean {
  return elapsedSeconds(state, nowMs) >= state.task.min_elapsed_seconds;
}

export function verdictConsistent(state: TaskViewState): boolean {
  return (state.verdict === 'has_failure') === (state.draftFailures.length > 0);
}

export function canSubmit(state: TaskViewState, nowMs: number): boolean {
  return allAcknowledged(state) && timeSatisfied(state, nowMs) && verdictConsistent(state);
}

export type ComposeResult = { ok: true } | { ok: false; error: string };

/** Validate and append one draft failure entry. */
export function composeFailure(
  state: TaskViewState,
  description: string,
  referenceStepRefs: number[],
  generatedStepRefs: number[],
): ComposeResult {
  if (description.trim().length === 0) {
    return { ok: false, error: 'description must not be empty' };
  }
  const nRef = state.task.instance.reference_steps.length;
  const nGen = state.task.generated_steps.length;
  const badRef = referenceStepRefs.find((i) => !Number.isInteger(i) || i < 1 || i > nRef);
  if (badRef !== undefined) {
    return { ok: false, error: `reference step ${badRef} out of range 1..${nRef}` };
  }
  const badGen = generatedStepRefs.find((i) => !Number.isInteger(i) || i < 1 || i > nGen);
  if (badGen !== undefined) {
    return { ok: false, error: `generated step ${badGen} out of range 1..${nGen}` };
  }
  state.draftFailures.push({
    description: description.trim(),
    reference_step_refs: [...referenceStepRefs].sort((a, b) => a - b),
    generated_step_refs: [...generatedStepRefs].sort((a, b) => a - b),
  });
  state.verdict = 'has_failure';
  return { ok: true };
}

export function removeFailure(state: TaskViewState, index: number): void {
  state.draftFailures.splice(index, 1);
  if (state.draftFailures.length === 0) {
    state.verdict = 'no_failure';
  }
}

export function setVerdict(state: TaskViewState, verdict: Verdict): void {
  state.verdict = verdict;
  if (verdict === 'no_failure') {
    state.draftFailures = [];
  }
}

/** The submission payload; throws rather than emit an invalid one. */
export function buildSubmission(
  state: TaskViewState,
  annotatorId: string,
  nowMs: number,
): SubmissionPayload {
  if (!canSubmit(state, nowMs)) {
    throw new Error('submission gate is closed');
  }
  return {
    task_id: state.task.task_id,
    annotator_id: annotatorId,
    verdict: state.verdict,
    failures: state.draftFailures.map((f) => ({
      description: f.description,
      reference_step_refs: [...f.reference_step_refs],
      generated_step_refs: [...f.generated_step_refs],
    })),
    client_elapsed_seconds: elapsedSeconds(state, nowMs),
  };
}
