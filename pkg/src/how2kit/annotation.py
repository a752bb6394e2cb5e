"""HTTP backend for human critical-failure annotation.

The server is the authority for both acceptance rules: at least 90
seconds on the server clock between task issue and submission, and every
attention token (one for the goal, one per generated step) acknowledged.
Client-reported timings are advisory only. Accepted submissions are
appended to an fsync-on-accept store and export losslessly as standard
annotation records.

The clock is injectable so tests (and the bundled UI's end-to-end suite)
can exercise the 90-second rule without waiting it out; exported
``elapsed_seconds`` always comes from the server clock.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from fastapi import FastAPI, Header, HTTPException, Response
from pydantic import BaseModel, Field

from .records import (
    HAS_FAILURE,
    NO_FAILURE,
    AnnotationRecord,
    FailureItem,
    GenerationRecord,
    ProcedureInstance,
    serialize,
)

logger = logging.getLogger(__name__)

MIN_ELAPSED_SECONDS = 90.0
DEFAULT_ANNOTATORS_PER_INSTANCE = 3
ADMIN_TOKEN_ENV = "HOW2_ADMIN_TOKEN"


@dataclass(frozen=True)
class TaskPair:
    instance: ProcedureInstance
    generation: GenerationRecord

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TaskPair":
        return cls(
            instance=ProcedureInstance.from_json_dict(obj["instance"]),
            generation=GenerationRecord.from_json_dict(obj["generation"]),
        )


def read_pairs(path: str | Path) -> list[TaskPair]:
    pairs = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                pairs.append(TaskPair.from_json_dict(json.loads(line)))
    return pairs


@dataclass
class TaskState:
    task_id: str
    pair_index: int
    annotator_id: str
    issued_at: float
    tokens: tuple[str, ...]  # [goal token, one per generated step]
    acknowledged: set[str] = field(default_factory=set)
    submitted: bool = False


class AnnotationStore:
    """Append-only JSONL, fsynced on every accepted submission."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self._lock = threading.Lock()

    def append(self, record: AnnotationRecord) -> None:
        line = serialize(record) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line)
                handle.flush()
                os.fsync(handle.fileno())

    def export_text(self) -> str:
        with self._lock:
            return self.path.read_text("utf-8")


@dataclass(frozen=True)
class SubmitOutcome:
    accepted: bool
    reason: str | None = None
    elapsed_seconds: float | None = None


class AnnotationService:
    """Task assignment, attention state, and submission rules.

    Each instance is labeled by ``annotators_per_instance`` distinct
    annotators; a task is one (pair, annotator-slot). The same annotator
    never receives the same instance twice. Per-task transitions are
    serialized under one lock; the store appender serializes itself.
    """

    def __init__(
        self,
        pairs: Sequence[TaskPair],
        store: AnnotationStore,
        annotators_per_instance: int = DEFAULT_ANNOTATORS_PER_INSTANCE,
        clock: Callable[[], float] = time.monotonic,
    ):
        if annotators_per_instance < 1:
            raise ValueError("annotators_per_instance must be >= 1")
        self.pairs = list(pairs)
        self.store = store
        self.clock = clock
        self._slots_left = [annotators_per_instance] * len(self.pairs)
        self._tasks: dict[str, TaskState] = {}
        self._token_owner: dict[str, str] = {}
        self._assigned: set[tuple[str, str]] = set()  # (annotator, instance_id)
        self._lock = threading.RLock()

    def fetch_task(self, annotator_id: str) -> dict | None:
        with self._lock:
            for index, pair in enumerate(self.pairs):
                if self._slots_left[index] <= 0:
                    continue
                key = (annotator_id, pair.instance.id)
                if key in self._assigned:
                    continue
                self._slots_left[index] -= 1
                self._assigned.add(key)
                task_id = uuid.uuid4().hex
                tokens = tuple(
                    uuid.uuid4().hex for _ in range(1 + len(pair.generation.steps))
                )
                state = TaskState(
                    task_id=task_id,
                    pair_index=index,
                    annotator_id=annotator_id,
                    issued_at=self.clock(),
                    tokens=tokens,
                )
                self._tasks[task_id] = state
                for token in tokens:
                    self._token_owner[token] = task_id
                return self._task_payload(state, pair)
            return None

    def _task_payload(self, state: TaskState, pair: TaskPair) -> dict:
        return {
            "task_id": state.task_id,
            "instance": {
                "id": pair.instance.id,
                "goal": pair.instance.goal,
                "resources": list(pair.instance.resources),
                "reference_steps": list(pair.instance.steps),
            },
            "generated_steps": list(pair.generation.steps),
            "attention_tokens": list(state.tokens),
            "issued_at": state.issued_at,
            "min_elapsed_seconds": MIN_ELAPSED_SECONDS,
        }

    def task_state(self, task_id: str) -> dict | None:
        """Acknowledged-token view, for clients resyncing after a reload."""
        with self._lock:
            state = self._tasks.get(task_id)
            if state is None:
                return None
            return {
                "task_id": task_id,
                "acknowledged_tokens": sorted(state.acknowledged),
                "submitted": state.submitted,
            }

    def record_attention(self, task_id: str, token: str) -> bool:
        with self._lock:
            owner = self._token_owner.get(token)
            if owner is None or owner != task_id:
                return False
            self._tasks[task_id].acknowledged.add(token)  # idempotent
            return True

    def submit(
        self,
        task_id: str,
        annotator_id: str,
        verdict: str,
        failures: Sequence[FailureItem],
        client_elapsed_seconds: float | None = None,
    ) -> SubmitOutcome:
        del client_elapsed_seconds  # advisory only; the server clock decides
        with self._lock:
            state = self._tasks.get(task_id)
            if state is None:
                return SubmitOutcome(False, "unknown_task")
            if state.annotator_id != annotator_id:
                return SubmitOutcome(False, "wrong_annotator")
            if state.submitted:
                return SubmitOutcome(False, "already_submitted")
            pair = self.pairs[state.pair_index]

            if verdict not in (HAS_FAILURE, NO_FAILURE):
                return SubmitOutcome(False, "bad_verdict")
            if (verdict == HAS_FAILURE) != bool(failures):
                return SubmitOutcome(False, "verdict_mismatch")
            reason = _check_failure_refs(
                failures, len(pair.instance.steps), len(pair.generation.steps)
            )
            if reason is not None:
                return SubmitOutcome(False, reason)

            elapsed = self.clock() - state.issued_at
            if elapsed < MIN_ELAPSED_SECONDS:
                return SubmitOutcome(False, "too_fast", elapsed_seconds=elapsed)
            if set(state.tokens) - state.acknowledged:
                return SubmitOutcome(False, "attention_incomplete", elapsed_seconds=elapsed)

            state.submitted = True
            record = AnnotationRecord(
                annotator_id=annotator_id,
                instance_id=pair.instance.id,
                failures=tuple(failures),
                elapsed_seconds=round(elapsed, 3),
                attention_complete=True,
            )
        # I/O outside the state lock; the store has its own.
        self.store.append(record)
        return SubmitOutcome(True, None, elapsed_seconds=record.elapsed_seconds)

    def export_text(self) -> str:
        return self.store.export_text()


def _check_failure_refs(
    failures: Sequence[FailureItem], n_reference: int, n_generated: int
) -> str | None:
    for item in failures:
        if not item.description.strip():
            return "bad_reference"
        if any(not 1 <= ref <= n_reference for ref in item.reference_step_refs):
            return "bad_reference"
        if any(not 1 <= ref <= n_generated for ref in item.generated_step_refs):
            return "bad_reference"
    return None


# -- HTTP surface -------------------------------------------------------------


class SessionRequest(BaseModel):
    annotator_id: str


class AttentionRequest(BaseModel):
    task_id: str
    token: str


class FailurePayload(BaseModel):
    description: str
    reference_step_refs: list[int] = Field(default_factory=list)
    generated_step_refs: list[int] = Field(default_factory=list)


class SubmitRequest(BaseModel):
    task_id: str
    annotator_id: str
    verdict: str
    failures: list[FailurePayload] = Field(default_factory=list)
    client_elapsed_seconds: float | None = None


def create_app(service: AnnotationService, admin_token: str | None = None) -> FastAPI:
    app = FastAPI(title="how2 annotation service")

    @app.post("/v1/session")
    def open_session(request: SessionRequest) -> dict:
        return {"annotator_id": request.annotator_id, "session": uuid.uuid4().hex}

    @app.get("/v1/task")
    def get_task(annotator_id: str) -> Response:
        payload = service.fetch_task(annotator_id)
        if payload is None:
            return Response(status_code=204)
        return Response(
            content=json.dumps(payload), media_type="application/json"
        )

    @app.get("/v1/task/{task_id}/state")
    def get_task_state(task_id: str) -> dict:
        payload = service.task_state(task_id)
        if payload is None:
            raise HTTPException(404, "unknown task")
        return payload

    @app.post("/v1/attention")
    def attention(request: AttentionRequest) -> dict:
        if not service.record_attention(request.task_id, request.token):
            raise HTTPException(422, "token does not belong to this task")
        return {"acknowledged": True}

    @app.post("/v1/submit")
    def submit(request: SubmitRequest, response: Response) -> dict:
        outcome = service.submit(
            task_id=request.task_id,
            annotator_id=request.annotator_id,
            verdict=request.verdict,
            failures=[
                FailureItem(
                    description=f.description,
                    reference_step_refs=tuple(f.reference_step_refs),
                    generated_step_refs=tuple(f.generated_step_refs),
                )
                for f in request.failures
            ],
            client_elapsed_seconds=request.client_elapsed_seconds,
        )
        if not outcome.accepted:
            response.status_code = 409
        return {
            "accepted": outcome.accepted,
            "reason": outcome.reason,
            "elapsed_seconds": outcome.elapsed_seconds,
        }

    @app.get("/v1/export")
    def export(authorization: str | None = Header(default=None)) -> Response:
        if admin_token is not None:
            if authorization != f"Bearer {admin_token}":
                raise HTTPException(401, "admin token required")
        return Response(
            content=service.export_text(), media_type="application/x-ndjson"
        )

    return app


def scaled_clock(scale: float) -> Callable[[], float]:
    """A clock that advances ``scale`` seconds per real second (test aid)."""
    start = time.monotonic()
    return lambda: start + (time.monotonic() - start) * scale
