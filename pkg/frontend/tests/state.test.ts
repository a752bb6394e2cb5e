import { describe, expect, it } from 'vitest';

import type { TaskPayload } from '../src/api.js';
import {
  acknowledge,
  allAcknowledged,
  buildSubmission,
  canSubmit,
  composeFailure,
  newTaskState,
  removeFailure,
  restoreAcknowledged,
  setVerdict,
} from '../src/state.js';

function task(overrides: Partial<TaskPayload> = {}): TaskPayload {
  return {
    task_id: 'task-1',
    instance: {
      id: 'inst-1',
      goal: 'Fix the leaking tap',
      resources: ['wrench'],
      reference_steps: ['shut off water', 'open tap', 'replace washer', 'reassemble'],
    },
    generated_steps: ['turn off supply', 'swap washer', 'test'],
    attention_tokens: ['tok-goal', 'tok-s1', 'tok-s2', 'tok-s3'],
    issued_at: 0,
    min_elapsed_seconds: 90,
    ...overrides,
  };
}

const T0 = 1_000_000; // arbitrary client epoch, ms

describe('submission gate', () => {
  it('stays closed before the minimum time even with full click-through', () => {
    const state = newTaskState(task(), T0);
    for (const token of state.task.attention_tokens) acknowledge(state, token);
    expect(allAcknowledged(state)).toBe(true);
    expect(canSubmit(state, T0 + 89_000)).toBe(false);
    expect(canSubmit(state, T0 + 90_000)).toBe(true);
  });

  it('stays closed after the minimum time until every token is acknowledged', () => {
    const state = newTaskState(task(), T0);
    const late = T0 + 120_000;
    expect(canSubmit(state, late)).toBe(false);
    for (const token of state.task.attention_tokens.slice(0, -1)) {
      acknowledge(state, token);
    }
    expect(canSubmit(state, late)).toBe(false);
    acknowledge(state, state.task.attention_tokens.at(-1)!);
    expect(canSubmit(state, late)).toBe(true);
  });

  it('rejects tokens from another task', () => {
    const state = newTaskState(task(), T0);
    expect(() => acknowledge(state, 'foreign')).toThrow();
  });

  it('restores acknowledged tokens from the server log', () => {
    const state = newTaskState(task(), T0);
    restoreAcknowledged(state, ['tok-s1', 'tok-s2', 'not-ours']);
    expect(state.acknowledged).toEqual(new Set(['tok-s1', 'tok-s2']));
  });
});

describe('failure drafting', () => {
  it('appends valid entries and flips the verdict', () => {
    const state = newTaskState(task(), T0);
    const result = composeFailure(state, 'skips the washer swap', [3], [2]);
    expect(result.ok).toBe(true);
    expect(state.verdict).toBe('has_failure');
    expect(state.draftFailures).toEqual([
      {
        description: 'skips the washer swap',
        reference_step_refs: [3],
        generated_step_refs: [2],
      },
    ]);
  });

  it('allows multiple entries', () => {
    const state = newTaskState(task(), T0);
    expect(composeFailure(state, 'first problem', [1], []).ok).toBe(true);
    expect(composeFailure(state, 'second problem', [], [1, 3]).ok).toBe(true);
    expect(state.draftFailures).toHaveLength(2);
  });

  it('rejects empty descriptions inline', () => {
    const state = newTaskState(task(), T0);
    const result = composeFailure(state, '   ', [1], []);
    expect(result).toEqual({ ok: false, error: 'description must not be empty' });
    expect(state.draftFailures).toHaveLength(0);
  });

  it('rejects out-of-range step references', () => {
    const state = newTaskState(task(), T0);
    expect(composeFailure(state, 'bad', [5], []).ok).toBe(false); // 4 ref steps
    expect(composeFailure(state, 'bad', [], [4]).ok).toBe(false); // 3 gen steps
    expect(composeFailure(state, 'bad', [0], []).ok).toBe(false); // 1-based
    expect(state.draftFailures).toHaveLength(0);
  });

  it('clears failures when the verdict returns to no_failure', () => {
    const state = newTaskState(task(), T0);
    composeFailure(state, 'problem', [1], []);
    setVerdict(state, 'no_failure');
    expect(state.draftFailures).toHaveLength(0);
  });

  it('removing the last failure resets the verdict', () => {
    const state = newTaskState(task(), T0);
    composeFailure(state, 'problem', [1], []);
    removeFailure(state, 0);
    expect(state.verdict).toBe('no_failure');
  });
});

describe('buildSubmission', () => {
  function readyState() {
    const state = newTaskState(task(), T0);
    for (const token of state.task.attention_tokens) acknowledge(state, token);
    return state;
  }

  it('produces a consistent no-failure payload', () => {
    const state = readyState();
    const payload = buildSubmission(state, 'ann-1', T0 + 95_000);
    expect(payload.verdict).toBe('no_failure');
    expect(payload.failures).toEqual([]);
    expect(payload.client_elapsed_seconds).toBeCloseTo(95, 5);
  });

  it('never emits a has_failure verdict with an empty failure list', () => {
    const state = readyState();
    state.verdict = 'has_failure'; // bypass setVerdict to simulate a bug
    expect(() => buildSubmission(state, 'ann-1', T0 + 95_000)).toThrow();
  });

  it('throws while the gate is closed', () => {
    const state = readyState();
    expect(() => buildSubmission(state, 'ann-1', T0 + 10_000)).toThrow();
    const unclicked = newTaskState(task(), T0);
    expect(() => buildSubmission(unclicked, 'ann-1', T0 + 95_000)).toThrow();
  });

  it('copies drafts so later edits cannot mutate the payload', () => {
    const state = readyState();
    composeFailure(state, 'problem', [1, 2], []);
    const payload = buildSubmission(state, 'ann-1', T0 + 95_000);
    state.draftFailures[0].reference_step_refs.push(99);
    expect(payload.failures[0].reference_step_refs).toEqual([1, 2]);
  });
});
