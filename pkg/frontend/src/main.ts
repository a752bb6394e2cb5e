import { AnnotationApi } from './api.js';
import { TaskController } from './controller.js';

function required(name: string, value: string | null): string {
  if (!value) throw new Error(`missing ?${name}= query parameter`);
  return value;
}

const params = new URLSearchParams(window.location.search);
const annotator = required('annotator', params.get('annotator'));
const server = params.get('server') ?? '';

const root = document.getElementById('app');
if (!root) throw new Error('missing #app container');

const controller = new TaskController(
  root,
  annotator,
  new AnnotationApi(server),
  { storage: window.sessionStorage },
);
controller.start().catch((err) => {
  root.textContent = `Failed to start: ${String(err)}`;
});
