"""Five-stage mining pipeline: web documents in, procedure instances out.

Stages run in a fixed order -- extraction, heuristics, llm_filter,
postprocess, final -- and every document's fate is recorded per stage, so
the yield report telescopes exactly: each stage's input count equals the
previous stage's retained count, and rejection reasons partition the
rejected count.

Documents are processed independently (fan-out bounded by the gateway),
and the report is merged associatively, so processing order never changes
the output.
"""

from __future__ import annotations

import logging
import re
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .gateway import Gateway, GatewayError
from .records import MAX_STEPS, MIN_STEPS, ProcedureInstance, SourceDocument
from .templates import load_template, render

logger = logging.getLogger(__name__)

STAGES = ("extraction", "heuristics", "llm_filter", "postprocess", "final")

LLM_FILTER_CATEGORIES = (
    "named_entity",
    "pure_math",
    "ui_interaction",
    "creative",
    "non_sequential",
    "unreasonable",
)

_NGRAM_NAMES = {2: "bigram", 3: "trigram", 4: "fourgram"}
_NUMBERED_LINE = re.compile(r"^\s*(\d+)[.)]\s+(.*\S)\s*$")


class ReplyParseFailure(Exception):
    """A model reply did not follow the stage's reply contract."""


@dataclass(frozen=True)
class HeuristicsConfig:
    min_steps: int = MIN_STEPS
    max_steps: int = MAX_STEPS
    # reject when pooled repetition rate >= threshold (boundary rejects)
    rep_thresholds: Mapping[int, float] = field(
        default_factory=lambda: {2: 0.40, 3: 0.35, 4: 0.30}
    )

    def __post_init__(self):
        if self.min_steps < 1:
            raise ValueError("min_steps must be >= 1")
        for n, threshold in self.rep_thresholds.items():
            if not 0 < threshold <= 1:
                raise ValueError(f"threshold for n={n} must be in (0, 1]")


@dataclass(frozen=True)
class StageEvent:
    stage: str
    decision: str  # "pass" | "reject"
    reason: str = ""


@dataclass
class CandidateProcedure:
    document_id: str
    goal: str = ""
    steps: list[str] = field(default_factory=list)
    resources: list[str] = field(default_factory=list)
    stage_history: list[StageEvent] = field(default_factory=list)

    def record(self, stage: str, decision: str, reason: str = "") -> None:
        expected = STAGES[len(self.stage_history)]
        if stage != expected:
            raise ValueError(f"stage {stage!r} out of order; expected {expected!r}")
        self.stage_history.append(StageEvent(stage, decision, reason))


@dataclass
class StageCounts:
    input_count: int = 0
    retained_count: int = 0
    rejected_count: int = 0
    reject_reasons: Counter = field(default_factory=Counter)


class StageYieldReport:
    """Per-stage retained/rejected accounting for one pipeline run."""

    def __init__(self):
        self.stages: dict[str, StageCounts] = {stage: StageCounts() for stage in STAGES}

    def add_history(self, history: Sequence[StageEvent]) -> None:
        for event in history:
            counts = self.stages[event.stage]
            counts.input_count += 1
            if event.decision == "pass":
                counts.retained_count += 1
            else:
                counts.rejected_count += 1
                counts.reject_reasons[event.reason] += 1

    def merge(self, other: "StageYieldReport") -> "StageYieldReport":
        merged = StageYieldReport()
        for report in (self, other):
            for stage, counts in report.stages.items():
                target = merged.stages[stage]
                target.input_count += counts.input_count
                target.retained_count += counts.retained_count
                target.rejected_count += counts.rejected_count
                target.reject_reasons.update(counts.reject_reasons)
        return merged

    def validate(self) -> None:
        previous_retained = None
        for stage in STAGES:
            counts = self.stages[stage]
            if counts.input_count != counts.retained_count + counts.rejected_count:
                raise AssertionError(f"stage {stage}: input != retained + rejected")
            if sum(counts.reject_reasons.values()) != counts.rejected_count:
                raise AssertionError(f"stage {stage}: reasons do not partition rejects")
            if previous_retained is not None and counts.input_count != previous_retained:
                raise AssertionError(
                    f"stage {stage}: input {counts.input_count} != "
                    f"previous retained {previous_retained}"
                )
            previous_retained = counts.retained_count

    def to_json_dict(self) -> dict:
        return {
            stage: {
                "input_count": counts.input_count,
                "retained_count": counts.retained_count,
                "rejected_count": counts.rejected_count,
                "reject_reasons": dict(sorted(counts.reject_reasons.items())),
            }
            for stage, counts in self.stages.items()
        }


def normalize_step(step: str) -> str:
    """Lowercase, strip Unicode punctuation, collapse whitespace runs."""
    lowered = step.lower()
    no_punct = "".join(
        ch for ch in lowered if not unicodedata.category(ch).startswith("P")
    )
    return " ".join(no_punct.split())


def _ngrams(tokens: Sequence[str], n: int) -> Iterable[tuple[str, ...]]:
    return (tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def pooled_repetition_rate(steps: Sequence[str], n: int) -> float:
    """Fraction of per-step n-grams repeated beyond their first occurrence.

    N-grams are formed within each normalized step (never across steps)
    and their counts are pooled; the rate is sum(max(0, c - 1)) over the
    pool size. An empty pool yields 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pool: Counter = Counter()
    total = 0
    for step in steps:
        tokens = normalize_step(step).split()
        for gram in _ngrams(tokens, n):
            pool[gram] += 1
            total += 1
    if total == 0:
        return 0.0
    repeated = sum(count - 1 for count in pool.values() if count > 1)
    return repeated / total


def heuristic_filter(cand: CandidateProcedure, cfg: HeuristicsConfig) -> str | None:
    """First violated rule name, or None when the candidate passes.

    Rules apply in a fixed order (step count, then ascending n) so reports
    are deterministic; threshold comparisons reject at the boundary.
    """
    if not cfg.min_steps <= len(cand.steps) <= cfg.max_steps:
        return "step_count"
    for n in sorted(cfg.rep_thresholds):
        if pooled_repetition_rate(cand.steps, n) >= cfg.rep_thresholds[n]:
            return f"{_NGRAM_NAMES.get(n, f'{n}gram')}_repetition"
    return None


# -- model-reply parsing ---------------------------------------------------


def parse_numbered_block(text: str) -> list[str]:
    """Steps from strictly consecutive '1. ...' lines; raises on any gap."""
    steps: list[str] = []
    for line in text.splitlines():
        match = _NUMBERED_LINE.match(line)
        if match is None:
            continue
        number = int(match.group(1))
        if number != len(steps) + 1:
            raise ReplyParseFailure(f"expected step {len(steps) + 1}, saw {number}")
        steps.append(match.group(2))
    if not steps:
        raise ReplyParseFailure("no numbered steps in reply")
    return steps


def parse_extraction_reply(text: str) -> tuple[str, list[str]] | None:
    """(goal, steps) on success, None when the model reports no procedure."""
    stripped = text.strip()
    if stripped == "NO_PROCEDURE":
        return None
    goal = None
    for line in stripped.splitlines():
        if line.startswith("GOAL:"):
            goal = line[len("GOAL:") :].strip()
            break
    if not goal:
        raise ReplyParseFailure("missing GOAL line")
    return goal, parse_numbered_block(stripped)


def parse_llm_filter_reply(text: str) -> str:
    """The rejection category, or 'none' on PASS."""
    stripped = text.strip()
    if stripped == "PASS":
        return "none"
    if stripped.startswith("REJECT:"):
        category = stripped[len("REJECT:") :].strip()
        if category in LLM_FILTER_CATEGORIES:
            return category
    raise ReplyParseFailure(f"unrecognized filter reply: {stripped[:80]!r}")


def parse_resources_reply(text: str) -> list[str]:
    for line in text.strip().splitlines():
        if line.startswith("RESOURCES:"):
            body = line[len("RESOURCES:") :].strip()
            if body.lower() == "none" or not body:
                return []
            return [item.strip() for item in body.split(";") if item.strip()]
    raise ReplyParseFailure("missing RESOURCES line")


def parse_final_reply(text: str) -> bool:
    verdict = text.strip()
    if verdict == "VALID":
        return True
    if verdict == "INVALID":
        return False
    raise ReplyParseFailure(f"unrecognized final verdict: {verdict[:80]!r}")


# -- stages ----------------------------------------------------------------


def _steps_block(steps: Sequence[str]) -> str:
    return "\n".join(f"{i}. {step}" for i, step in enumerate(steps, start=1))


@dataclass(frozen=True)
class PipelineConfig:
    heuristics: HeuristicsConfig = field(default_factory=HeuristicsConfig)
    prompt_dir: str | None = None
    id_prefix: str = "proc"

    def template(self, stage: str) -> str:
        return load_template(stage, self.prompt_dir)


def extract_procedure(
    doc: SourceDocument, gateway: Gateway, cfg: PipelineConfig
) -> CandidateProcedure:
    cand = CandidateProcedure(document_id=doc.id)
    try:
        reply = gateway.complete(render(cfg.template("extract"), document=doc.body))
        parsed = parse_extraction_reply(reply.response_text)
    except GatewayError:
        cand.record("extraction", "reject", "gateway_error")
        return cand
    except ReplyParseFailure:
        cand.record("extraction", "reject", "parse_failure")
        return cand
    if parsed is None:
        cand.record("extraction", "reject", "no_procedure")
        return cand
    cand.goal, cand.steps = parsed[0], list(parsed[1])
    cand.record("extraction", "pass")
    return cand


def llm_filter(cand: CandidateProcedure, gateway: Gateway, cfg: PipelineConfig) -> None:
    try:
        reply = gateway.complete(
            render(
                cfg.template("llm_filter"), goal=cand.goal, steps=_steps_block(cand.steps)
            )
        )
        category = parse_llm_filter_reply(reply.response_text)
    except GatewayError:
        cand.record("llm_filter", "reject", "gateway_error")
        return
    except ReplyParseFailure:
        cand.record("llm_filter", "reject", "parse_failure")
        return
    if category == "none":
        cand.record("llm_filter", "pass")
    else:
        cand.record("llm_filter", "reject", category)


def postprocess(cand: CandidateProcedure, gateway: Gateway, cfg: PipelineConfig) -> None:
    """Rewrite goal/steps, then extract resources (two model calls).

    The rewrite reply is authoritative for the step list. If the rewrite
    changes the step count past the configured bounds, the candidate is
    rejected here rather than emitting an instance that the interchange
    format would refuse to re-parse.
    """
    try:
        rewrite = gateway.complete(
            render(
                cfg.template("postprocess_rewrite"),
                goal=cand.goal,
                steps=_steps_block(cand.steps),
            )
        )
        parsed = parse_extraction_reply(rewrite.response_text)
        if parsed is None:
            raise ReplyParseFailure("rewrite reply reported NO_PROCEDURE")
        goal, steps = parsed
        resources_reply = gateway.complete(
            render(
                cfg.template("postprocess_resources"),
                goal=goal,
                steps=_steps_block(steps),
            )
        )
        resources = parse_resources_reply(resources_reply.response_text)
    except GatewayError:
        cand.record("postprocess", "reject", "gateway_error")
        return
    except ReplyParseFailure:
        cand.record("postprocess", "reject", "parse_failure")
        return
    if not cfg.heuristics.min_steps <= len(steps) <= cfg.heuristics.max_steps:
        cand.record("postprocess", "reject", "rewrite_step_count")
        return
    cand.goal, cand.steps, cand.resources = goal, list(steps), list(resources)
    cand.record("postprocess", "pass")


def final_validate(cand: CandidateProcedure, gateway: Gateway, cfg: PipelineConfig) -> None:
    try:
        reply = gateway.complete(
            render(
                cfg.template("final_filter"),
                goal=cand.goal,
                resources="; ".join(cand.resources) if cand.resources else "none",
                steps=_steps_block(cand.steps),
            )
        )
        valid = parse_final_reply(reply.response_text)
    except GatewayError:
        cand.record("final", "reject", "gateway_error")
        return
    except ReplyParseFailure:
        cand.record("final", "reject", "parse_failure")
        return
    cand.record("final", "pass" if valid else "reject", "" if valid else "invalid")


def _process_document(
    doc: SourceDocument, gateway: Gateway, cfg: PipelineConfig
) -> tuple[CandidateProcedure, ProcedureInstance | None]:
    cand = extract_procedure(doc, gateway, cfg)
    if cand.stage_history[-1].decision != "pass":
        return cand, None

    reason = heuristic_filter(cand, cfg.heuristics)
    if reason is not None:
        cand.record("heuristics", "reject", reason)
        return cand, None
    cand.record("heuristics", "pass")

    for stage_fn in (llm_filter, postprocess, final_validate):
        stage_fn(cand, gateway, cfg)
        if cand.stage_history[-1].decision != "pass":
            return cand, None

    instance = ProcedureInstance(
        id=f"{cfg.id_prefix}-{doc.id}",
        topic=doc.topic,
        goal=cand.goal,
        resources=tuple(cand.resources),
        steps=tuple(cand.steps),
        source_url=doc.url,
        provenance=tuple((event.stage, "pass") for event in cand.stage_history),
    )
    return cand, instance


@dataclass
class PipelineResult:
    instances: list[ProcedureInstance]
    report: StageYieldReport
    candidates: list[CandidateProcedure]


def run_pipeline(
    docs: Sequence[SourceDocument],
    gateway: Gateway,
    cfg: PipelineConfig | None = None,
) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    report = StageYieldReport()
    instances: list[ProcedureInstance] = []
    candidates: list[CandidateProcedure] = []
    if docs:
        with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as pool:
            outcomes = list(pool.map(lambda d: _process_document(d, gateway, cfg), docs))
        for cand, instance in outcomes:
            candidates.append(cand)
            report.add_history(cand.stage_history)
            if instance is not None:
                instances.append(instance)
    report.validate()
    logger.info(
        "pipeline: %d documents in, %d instances out", len(docs), len(instances)
    )
    return PipelineResult(instances=instances, report=report, candidates=candidates)
