/** DOM rendering for the single-task annotation flow.
 *
 * One task at a time: acknowledge the goal, click through every
 * model-generated step, pick a verdict, optionally compose failure
 * entries with step references, and submit once the gate opens.
 */

import type { TaskViewState } from './state.js';
import { allAcknowledged, canSubmit, elapsedSeconds } from './state.js';

export interface ViewHandlers {
  onAcknowledge(token: string, button: HTMLButtonElement): void;
  onVerdictChange(verdict: 'has_failure' | 'no_failure'): void;
  onComposeFailure(
    description: string,
    refSteps: number[],
    genSteps: number[],
  ): string | null; // error message or null
  onRemoveFailure(index: number): void;
  onSubmit(): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  if (text !== undefined) node.textContent = text;
  return node;
}

function stepChecklist(name: string, count: number): HTMLElement {
  const wrap = el('span', { class: `refs refs-${name}` });
  for (let i = 1; i <= count; i++) {
    const label = el('label', {}, ` ${i}`);
    const box = el('input', {
      type: 'checkbox',
      'data-kind': name,
      'data-index': String(i),
    });
    label.prepend(box);
    wrap.appendChild(label);
  }
  return wrap;
}

export function renderTask(
  root: HTMLElement,
  state: TaskViewState,
  handlers: ViewHandlers,
): void {
  root.textContent = '';
  const { task } = state;

  const goal = el('section', { class: 'goal' });
  goal.appendChild(el('h2', {}, 'Goal'));
  goal.appendChild(el('p', { class: 'goal-text' }, task.instance.goal));
  const resources = task.instance.resources.length
    ? task.instance.resources.join('; ')
    : 'none';
  goal.appendChild(el('p', { class: 'resources' }, `Resources: ${resources}`));
  const goalToken = task.attention_tokens[0];
  const goalButton = el(
    'button',
    { class: 'ack ack-goal', 'data-token': goalToken },
    'I have read and understood the goal',
  );
  if (state.acknowledged.has(goalToken)) markAcknowledged(goalButton);
  goalButton.addEventListener('click', () => handlers.onAcknowledge(goalToken, goalButton));
  goal.appendChild(goalButton);
  root.appendChild(goal);

  const reference = el('section', { class: 'reference-steps' });
  reference.appendChild(el('h2', {}, 'Reference steps'));
  const refList = el('ol');
  for (const step of task.instance.reference_steps) {
    refList.appendChild(el('li', {}, step));
  }
  reference.appendChild(refList);
  root.appendChild(reference);

  const generated = el('section', { class: 'generated-steps' });
  generated.appendChild(el('h2', {}, 'Model-generated steps'));
  const genList = el('ol');
  task.generated_steps.forEach((step, i) => {
    const item = el('li', {}, `${step} `);
    const token = task.attention_tokens[1 + i];
    const button = el('button', { class: 'ack ack-step', 'data-token': token }, 'Mark read');
    if (state.acknowledged.has(token)) markAcknowledged(button);
    button.addEventListener('click', () => handlers.onAcknowledge(token, button));
    item.appendChild(button);
    genList.appendChild(item);
  });
  generated.appendChild(genList);
  root.appendChild(generated);

  const verdict = el('section', { class: 'verdict' });
  verdict.appendChild(el('h2', {}, 'Verdict'));
  for (const value of ['no_failure', 'has_failure'] as const) {
    const label = el('label', {}, value === 'no_failure'
      ? ' No critical failure'
      : ' Has critical failure(s)');
    const radio = el('input', { type: 'radio', name: 'verdict', value });
    (radio as HTMLInputElement).checked = state.verdict === value;
    radio.addEventListener('change', () => handlers.onVerdictChange(value));
    label.prepend(radio);
    verdict.appendChild(label);
  }
  root.appendChild(verdict);

  const failures = el('section', { class: 'failures' });
  failures.appendChild(el('h2', {}, 'Critical failures'));
  const draftList = el('ul', { class: 'draft-failures' });
  state.draftFailures.forEach((failure, index) => {
    const refs =
      `ref: [${failure.reference_step_refs.join(', ')}] ` +
      `gen: [${failure.generated_step_refs.join(', ')}]`;
    const item = el('li', {}, `${failure.description} (${refs}) `);
    const remove = el('button', { class: 'remove-failure' }, 'Remove');
    remove.addEventListener('click', () => handlers.onRemoveFailure(index));
    item.appendChild(remove);
    draftList.appendChild(item);
  });
  failures.appendChild(draftList);

  const editor = el('div', { class: 'failure-editor' });
  const description = el('input', {
    type: 'text',
    class: 'failure-description',
    placeholder: 'Describe the critical failure',
  });
  editor.appendChild(description);
  editor.appendChild(el('span', {}, ' Reference steps:'));
  editor.appendChild(stepChecklist('ref', task.instance.reference_steps.length));
  editor.appendChild(el('span', {}, ' Generated steps:'));
  editor.appendChild(stepChecklist('gen', task.generated_steps.length));
  const addButton = el('button', { class: 'add-failure' }, 'Add failure');
  const editorError = el('span', { class: 'editor-error', role: 'alert' }, '');
  addButton.addEventListener('click', () => {
    const picked = (kind: string): number[] =>
      Array.from(
        editor.querySelectorAll<HTMLInputElement>(`input[data-kind="${kind}"]:checked`),
      ).map((box) => Number(box.dataset.index));
    const error = handlers.onComposeFailure(
      (description as HTMLInputElement).value,
      picked('ref'),
      picked('gen'),
    );
    editorError.textContent = error ?? '';
  });
  editor.appendChild(addButton);
  editor.appendChild(editorError);
  failures.appendChild(editor);
  root.appendChild(failures);

  const footer = el('section', { class: 'submit-area' });
  footer.appendChild(el('span', { class: 'timer' }, ''));
  const submit = el('button', { class: 'submit' }, 'Submit annotation');
  (submit as HTMLButtonElement).disabled = true;
  submit.addEventListener('click', () => handlers.onSubmit());
  footer.appendChild(submit);
  footer.appendChild(el('div', { class: 'status', role: 'status' }, ''));
  root.appendChild(footer);
}

export function markAcknowledged(button: HTMLButtonElement): void {
  button.disabled = true;
  button.classList.add('acknowledged');
  button.textContent = '✓ read';
}

/** Refresh the timer label and the submit control's disabled state. */
export function updateSubmitGate(
  root: HTMLElement,
  state: TaskViewState,
  nowMs: number,
): void {
  const submit = root.querySelector<HTMLButtonElement>('button.submit');
  const timer = root.querySelector<HTMLElement>('.timer');
  if (!submit || !timer) return;
  const elapsed = elapsedSeconds(state, nowMs);
  const remaining = Math.max(0, state.task.min_elapsed_seconds - elapsed);
  const pieces: string[] = [];
  if (remaining > 0) pieces.push(`${Math.ceil(remaining)}s until submissions open`);
  if (!allAcknowledged(state)) pieces.push('read-acknowledge every element');
  timer.textContent = pieces.join('; ');
  submit.disabled = !canSubmit(state, nowMs);
}

export function showStatus(root: HTMLElement, message: string, isError = false): void {
  const status = root.querySelector<HTMLElement>('.status');
  if (!status) return;
  status.textContent = message;
  status.classList.toggle('error', isError);
}

/** Error banner with a retry hook; the task state is untouched. */
export function showRetry(root: HTMLElement, message: string, retry: () => void): void {
  const status = root.querySelector<HTMLElement>('.status');
  if (!status) return;
  status.textContent = `${message} `;
  status.classList.add('error');
  const button = el('button', { class: 'retry' }, 'Retry');
  button.addEventListener('click', () => {
    status.textContent = '';
    status.classList.remove('error');
    retry();
  });
  status.appendChild(button);
}
