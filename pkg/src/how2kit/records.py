"""Canonical record types and the line-delimited JSON interchange format.

Every record kind lives in its own ``*.jsonl`` file, one JSON object per
line, UTF-8, field names exactly matching the dataclass fields. Parsing is
pure; all types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

TOPICS: tuple[str, ...] = (
    "Art & Design",
    "Crime & Law",
    "Education & Jobs",
    "Electronics & Hardware",
    "Fashion & Beauty",
    "Food & Dining",
    "Health",
    "Home & Hobbies",
    "Industrial",
    "Religion",
    "Science, Math & Technology",
    "Sports & Fitness",
    "Transportation",
    "Travel & Tourism",
)

_TOPIC_SET = frozenset(TOPICS)

HAS_FAILURE = "has_failure"
NO_FAILURE = "no_failure"

# Step-count bounds that every heuristics-passed instance must satisfy.
MIN_STEPS = 5
MAX_STEPS = 15


class CorpusError(Exception):
    """Base class for record-level failures."""


class RecordParseError(CorpusError):
    """A record is malformed; ``field_name`` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"field '{field_name}': {message}")
        self.field_name = field_name


class UnknownTopicError(CorpusError):
    """A topic name outside the fixed 14-label set."""

    def __init__(self, topic: str):
        super().__init__(f"unknown topic: {topic!r}")
        self.topic = topic


def validate_topic(name: str) -> str:
    if name not in _TOPIC_SET:
        raise UnknownTopicError(name)
    return name


def _require(obj: Mapping[str, Any], key: str, kind: type) -> Any:
    if key not in obj:
        raise RecordParseError(key, "missing")
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise RecordParseError(key, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _str_tuple(obj: Mapping[str, Any], key: str) -> tuple[str, ...]:
    raw = _require(obj, key, list)
    for item in raw:
        if not isinstance(item, str):
            raise RecordParseError(key, "expected a list of strings")
    return tuple(raw)


def _int_tuple(obj: Mapping[str, Any], key: str) -> tuple[int, ...]:
    raw = _require(obj, key, list)
    for item in raw:
        if not isinstance(item, int) or isinstance(item, bool):
            raise RecordParseError(key, "expected a list of integers")
    return tuple(raw)


@dataclass(frozen=True)
class SourceDocument:
    """One web document in the mining pool, already topic-labeled."""

    id: str
    url: str
    topic: str
    body: str

    def to_json_dict(self) -> dict[str, Any]:
        return {"id": self.id, "url": self.url, "topic": self.topic, "body": self.body}

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "SourceDocument":
        doc = cls(
            id=_require(obj, "id", str),
            url=_require(obj, "url", str),
            topic=validate_topic(_require(obj, "topic", str)),
            body=_require(obj, "body", str),
        )
        if not doc.body:
            raise RecordParseError("body", "must be non-empty")
        return doc


@dataclass(frozen=True)
class ProcedureInstance:
    """A goal, optional resource list, and ordered reference steps."""

    id: str
    topic: str
    goal: str
    resources: tuple[str, ...]
    steps: tuple[str, ...]
    source_url: str
    provenance: tuple[tuple[str, str], ...] = ()

    @property
    def provenance_map(self) -> dict[str, str]:
        return dict(self.provenance)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "topic": self.topic,
            "goal": self.goal,
            "resources": list(self.resources),
            "steps": list(self.steps),
            "source_url": self.source_url,
            "provenance": {stage: verdict for stage, verdict in self.provenance},
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "ProcedureInstance":
        provenance_raw = _require(obj, "provenance", dict)
        for stage, verdict in provenance_raw.items():
            if not isinstance(stage, str) or not isinstance(verdict, str):
                raise RecordParseError("provenance", "expected a map of str -> str")
        inst = cls(
            id=_require(obj, "id", str),
            topic=validate_topic(_require(obj, "topic", str)),
            goal=_require(obj, "goal", str),
            resources=_str_tuple(obj, "resources"),
            steps=_str_tuple(obj, "steps"),
            source_url=_require(obj, "source_url", str),
            provenance=tuple(provenance_raw.items()),
        )
        if not inst.goal:
            raise RecordParseError("goal", "must be non-empty")
        if not inst.steps:
            raise RecordParseError("steps", "must be non-empty")
        if inst.provenance_map.get("heuristics") == "pass" and not (
            MIN_STEPS <= len(inst.steps) <= MAX_STEPS
        ):
            raise RecordParseError(
                "steps",
                f"heuristics-passed instance must have {MIN_STEPS}..{MAX_STEPS} steps, "
                f"got {len(inst.steps)}",
            )
        return inst


@dataclass(frozen=True)
class GenerationRecord:
    """A model's step sequence for one instance."""

    instance_id: str
    model_id: str
    prompt_variant: str
    raw_text: str
    steps: tuple[str, ...]
    gen_tokens: int
    ref_tokens: int

    VARIANTS = ("base", "instruct", "reasoning")

    @property
    def generation_id(self) -> str:
        # Derived, not stored: the interchange format carries only the
        # fields above.
        return f"{self.instance_id}/{self.model_id}/{self.prompt_variant}"

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "model_id": self.model_id,
            "prompt_variant": self.prompt_variant,
            "raw_text": self.raw_text,
            "steps": list(self.steps),
            "gen_tokens": self.gen_tokens,
            "ref_tokens": self.ref_tokens,
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "GenerationRecord":
        variant = _require(obj, "prompt_variant", str)
        if variant not in cls.VARIANTS:
            raise RecordParseError(
                "prompt_variant", f"expected one of {cls.VARIANTS}, got {variant!r}"
            )
        rec = cls(
            instance_id=_require(obj, "instance_id", str),
            model_id=_require(obj, "model_id", str),
            prompt_variant=variant,
            raw_text=_require(obj, "raw_text", str),
            steps=_str_tuple(obj, "steps"),
            gen_tokens=_require(obj, "gen_tokens", int),
            ref_tokens=_require(obj, "ref_tokens", int),
        )
        if rec.gen_tokens < 0:
            raise RecordParseError("gen_tokens", "must be >= 0")
        if rec.ref_tokens < 0:
            raise RecordParseError("ref_tokens", "must be >= 0")
        return rec


@dataclass(frozen=True)
class FailureItem:
    """One judge- or annotator-identified critical failure.

    Step references are 1-based indices into the reference and generated
    step lists respectively.
    """

    description: str
    reference_step_refs: tuple[int, ...] = ()
    generated_step_refs: tuple[int, ...] = ()

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "description": self.description,
            "reference_step_refs": list(self.reference_step_refs),
            "generated_step_refs": list(self.generated_step_refs),
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "FailureItem":
        return cls(
            description=_require(obj, "description", str),
            reference_step_refs=_int_tuple(obj, "reference_step_refs"),
            generated_step_refs=_int_tuple(obj, "generated_step_refs"),
        )


def binary_from_failures(failures: Iterable[FailureItem]) -> str:
    """The binary label is a pure function of failure-list emptiness."""
    return HAS_FAILURE if any(True for _ in failures) else NO_FAILURE


@dataclass(frozen=True)
class JudgmentRecord:
    instance_id: str
    generation_id: str
    judge_id: str
    failures: tuple[FailureItem, ...]
    binary: str

    @classmethod
    def from_failures(
        cls,
        instance_id: str,
        generation_id: str,
        judge_id: str,
        failures: Iterable[FailureItem],
    ) -> "JudgmentRecord":
        failures = tuple(failures)
        return cls(
            instance_id=instance_id,
            generation_id=generation_id,
            judge_id=judge_id,
            failures=failures,
            binary=binary_from_failures(failures),
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "generation_id": self.generation_id,
            "judge_id": self.judge_id,
            "failures": [f.to_json_dict() for f in self.failures],
            "binary": self.binary,
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "JudgmentRecord":
        failures = tuple(
            FailureItem.from_json_dict(item) for item in _require(obj, "failures", list)
        )
        binary = _require(obj, "binary", str)
        if binary not in (HAS_FAILURE, NO_FAILURE):
            raise RecordParseError("binary", f"expected has_failure|no_failure, got {binary!r}")
        if binary != binary_from_failures(failures):
            raise RecordParseError("binary", "inconsistent with failures list")
        return cls(
            instance_id=_require(obj, "instance_id", str),
            generation_id=_require(obj, "generation_id", str),
            judge_id=_require(obj, "judge_id", str),
            failures=failures,
            binary=binary,
        )


@dataclass(frozen=True)
class AnnotationRecord:
    """One accepted human annotation.

    Acceptance conditions (at least 90 seconds elapsed, all attention
    checks complete) are enforced both by the annotation service and here
    at parse time, so an annotations file never carries invalid records.
    """

    annotator_id: str
    instance_id: str
    failures: tuple[FailureItem, ...]
    elapsed_seconds: float
    attention_complete: bool

    MIN_ELAPSED_SECONDS = 90.0

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "annotator_id": self.annotator_id,
            "instance_id": self.instance_id,
            "failures": [f.to_json_dict() for f in self.failures],
            "elapsed_seconds": self.elapsed_seconds,
            "attention_complete": self.attention_complete,
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "AnnotationRecord":
        rec = cls(
            annotator_id=_require(obj, "annotator_id", str),
            instance_id=_require(obj, "instance_id", str),
            failures=tuple(
                FailureItem.from_json_dict(item) for item in _require(obj, "failures", list)
            ),
            elapsed_seconds=_require(obj, "elapsed_seconds", float),
            attention_complete=_require(obj, "attention_complete", bool),
        )
        if rec.elapsed_seconds < cls.MIN_ELAPSED_SECONDS:
            raise RecordParseError("elapsed_seconds", "accepted records require >= 90 seconds")
        if not rec.attention_complete:
            raise RecordParseError("attention_complete", "accepted records require true")
        return rec


def serialize(record: Any) -> str:
    """One canonical JSON line for a record (no trailing newline)."""
    return json.dumps(record.to_json_dict(), ensure_ascii=False)


def parse_instance(line: str) -> ProcedureInstance:
    return _parse_line(line, ProcedureInstance)


def _parse_line(line: str, cls: type) -> Any:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordParseError("<line>", f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise RecordParseError("<line>", "expected a JSON object")
    return cls.from_json_dict(obj)


def read_jsonl(path: str | Path, cls: type) -> Iterator[Any]:
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield _parse_line(line, cls)
            except CorpusError as exc:
                raise RecordParseError("<line>", f"{path}:{lineno}: {exc}") from exc


def write_jsonl(path: str | Path, records: Iterable[Any]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(serialize(record))
            handle.write("\n")
            count += 1
    return count


def read_instances(path: str | Path) -> list[ProcedureInstance]:
    return list(read_jsonl(path, ProcedureInstance))


def read_documents(path: str | Path) -> list[SourceDocument]:
    return list(read_jsonl(path, SourceDocument))


def read_generations(path: str | Path) -> list[GenerationRecord]:
    return list(read_jsonl(path, GenerationRecord))


def read_judgments(path: str | Path) -> list[JudgmentRecord]:
    return list(read_jsonl(path, JudgmentRecord))


def read_annotations(path: str | Path) -> list[AnnotationRecord]:
    return list(read_jsonl(path, AnnotationRecord))
