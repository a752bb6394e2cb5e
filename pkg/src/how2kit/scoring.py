"""Judge protocol, binary aggregation, and formatting proxy metrics.

The dataset score is the fraction of judged generations labeled
no_failure. Judge replies that cannot be parsed are excluded from
aggregation and reported separately -- imputing either label would bias
the score. All aggregations are associative folds, so judging order never
matters.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .gateway import Gateway, GatewayError, TokenLogprob
from .records import (
    NO_FAILURE,
    FailureItem,
    GenerationRecord,
    JudgmentRecord,
    ProcedureInstance,
)
from .templates import load_template, render

logger = logging.getLogger(__name__)

_JSON_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)\n\s*```", re.DOTALL)


class ScoringError(Exception):
    pass


class UndefinedScoreError(ScoringError):
    pass


class AlignmentError(ScoringError):
    pass


class JudgeReplyError(ScoringError):
    """The judge reply does not carry a parseable failure list."""


# -- judging ----------------------------------------------------------------


def _extract_json_object(text: str) -> dict:
    fence = _JSON_FENCE.search(text)
    if fence:
        text = fence.group(1)
    text = text.strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("{"), text.rfind("}")
        if start < 0 or end <= start:
            raise JudgeReplyError("no JSON object in judge reply") from None
        try:
            obj = json.loads(text[start : end + 1])
        except json.JSONDecodeError as exc:
            raise JudgeReplyError(f"malformed JSON in judge reply: {exc}") from exc
    if not isinstance(obj, dict):
        raise JudgeReplyError("judge reply is not a JSON object")
    return obj


def parse_judge_reply(text: str) -> tuple[FailureItem, ...]:
    obj = _extract_json_object(text)
    if "failures" not in obj or not isinstance(obj["failures"], list):
        raise JudgeReplyError("judge reply missing 'failures' list")
    failures = []
    for item in obj["failures"]:
        if not isinstance(item, dict) or not isinstance(item.get("description"), str):
            raise JudgeReplyError("failure entry missing text description")
        refs = item.get("reference_step_refs", [])
        gens = item.get("generated_step_refs", [])
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in refs + gens):
            raise JudgeReplyError("step references must be integers")
        failures.append(
            FailureItem(
                description=item["description"],
                reference_step_refs=tuple(refs),
                generated_step_refs=tuple(gens),
            )
        )
    return tuple(failures)


@dataclass(frozen=True)
class InvalidJudgment:
    instance_id: str
    generation_id: str
    judge_id: str
    error: str


def render_judge_prompt(
    goal: str,
    resources: Sequence[str],
    reference_steps: Sequence[str],
    generated_steps: Sequence[str],
    prompt_dir: str | None = None,
) -> str:
    def block(steps: Sequence[str]) -> str:
        if not steps:
            return "(none)"
        return "\n".join(f"{i}. {step}" for i, step in enumerate(steps, start=1))

    return render(
        load_template("judge", prompt_dir),
        goal=goal,
        resources="; ".join(resources) if resources else "none",
        reference_steps=block(reference_steps),
        generated_steps=block(generated_steps),
    )


def build_judge_prompt(
    inst: ProcedureInstance, gen: GenerationRecord, prompt_dir: str | None = None
) -> str:
    return render_judge_prompt(inst.goal, inst.resources, inst.steps, gen.steps, prompt_dir)


def judge_example(
    inst: ProcedureInstance,
    gen: GenerationRecord,
    gateway: Gateway,
    judge_id: str | None = None,
    prompt_dir: str | None = None,
    **decoding_overrides,
) -> JudgmentRecord | InvalidJudgment:
    judge_id = judge_id or gateway.config.model_name
    prompt = build_judge_prompt(inst, gen, prompt_dir)
    try:
        exchange = gateway.complete(prompt, **decoding_overrides)
        failures = parse_judge_reply(exchange.response_text)
    except (GatewayError, JudgeReplyError) as exc:
        logger.warning("judgment invalid for %s: %s", gen.generation_id, exc)
        return InvalidJudgment(
            instance_id=inst.id,
            generation_id=gen.generation_id,
            judge_id=judge_id,
            error=str(exc),
        )
    return JudgmentRecord.from_failures(
        instance_id=inst.id,
        generation_id=gen.generation_id,
        judge_id=judge_id,
        failures=failures,
    )


@dataclass
class JudgingRun:
    judgments: list[JudgmentRecord]
    invalid: list[InvalidJudgment]


def judge_many(
    pairs: Sequence[tuple[ProcedureInstance, GenerationRecord]],
    gateway: Gateway,
    judge_id: str | None = None,
    prompt_dir: str | None = None,
    **decoding_overrides,
) -> JudgingRun:
    if not pairs:
        return JudgingRun(judgments=[], invalid=[])
    with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as pool:
        outcomes = list(
            pool.map(
                lambda pair: judge_example(
                    pair[0], pair[1], gateway, judge_id, prompt_dir, **decoding_overrides
                ),
                pairs,
            )
        )
    run = JudgingRun(judgments=[], invalid=[])
    for outcome in outcomes:
        if isinstance(outcome, JudgmentRecord):
            run.judgments.append(outcome)
        else:
            run.invalid.append(outcome)
    return run


# -- aggregation ------------------------------------------------------------


@dataclass(frozen=True)
class ScoreSummary:
    overall: float
    per_topic: dict[str, float]
    n_examples: int
    avg_gen_tokens: float | None = None
    avg_gen_ref_ratio: float | None = None

    def to_json_dict(self) -> dict:
        out: dict = {
            "overall": self.overall,
            "per_topic": dict(sorted(self.per_topic.items())),
            "n_examples": self.n_examples,
        }
        if self.avg_gen_tokens is not None:
            out["avg_gen_tokens"] = self.avg_gen_tokens
        if self.avg_gen_ref_ratio is not None:
            out["avg_gen_ref_ratio"] = self.avg_gen_ref_ratio
        return out


def score(
    judgments: Sequence[JudgmentRecord],
    topic_by_instance: Mapping[str, str] | None = None,
    generations: Sequence[GenerationRecord] | None = None,
) -> ScoreSummary:
    """Success rate over the dataset, exactly: successes / judgments.

    The overall rate and the per-topic rates are computed as exact
    rationals before conversion, so the partition identity
    sum(count_t * rate_t) = n * overall holds to the last bit. When
    generations are supplied, the average generated token count and the
    mean per-example gen/ref token ratio (over examples with nonzero
    reference tokens) are attached.
    """
    if not judgments:
        raise UndefinedScoreError("score is undefined on an empty judgment set")
    successes = sum(1 for j in judgments if j.binary == NO_FAILURE)
    overall = Fraction(successes, len(judgments))

    per_topic: dict[str, float] = {}
    if topic_by_instance is not None:
        topic_totals: Counter = Counter()
        topic_successes: Counter = Counter()
        for judgment in judgments:
            topic = topic_by_instance[judgment.instance_id]
            topic_totals[topic] += 1
            if judgment.binary == NO_FAILURE:
                topic_successes[topic] += 1
        per_topic = {
            topic: float(Fraction(topic_successes[topic], total))
            for topic, total in topic_totals.items()
        }

    avg_gen_tokens = avg_ratio = None
    if generations:
        avg_gen_tokens = sum(g.gen_tokens for g in generations) / len(generations)
        ratios = [g.gen_tokens / g.ref_tokens for g in generations if g.ref_tokens > 0]
        avg_ratio = sum(ratios) / len(ratios) if ratios else None

    return ScoreSummary(
        overall=float(overall),
        per_topic=per_topic,
        n_examples=len(judgments),
        avg_gen_tokens=avg_gen_tokens,
        avg_gen_ref_ratio=avg_ratio,
    )


def consistency_filter(
    run_a: Sequence[JudgmentRecord], run_b: Sequence[JudgmentRecord]
) -> list[tuple[JudgmentRecord, JudgmentRecord]]:
    """Pairs whose binary labels agree across the two judging runs.

    Runs must cover the same (instance, generation) keys exactly once
    each; anything else is an alignment error, not a silent drop.
    """

    def index(run: Sequence[JudgmentRecord], name: str) -> dict:
        table: dict[tuple[str, str], JudgmentRecord] = {}
        for judgment in run:
            key = (judgment.instance_id, judgment.generation_id)
            if key in table:
                raise AlignmentError(f"duplicate key {key} in run {name}")
            table[key] = judgment
        return table

    table_a, table_b = index(run_a, "A"), index(run_b, "B")
    if set(table_a) != set(table_b):
        raise AlignmentError("runs cover different (instance, generation) keys")
    return [
        (table_a[key], table_b[key])
        for key in table_a
        if table_a[key].binary == table_b[key].binary
    ]


# -- formatting proxies ------------------------------------------------------


def step_count_mismatch(gen: GenerationRecord, inst: ProcedureInstance) -> bool:
    return len(gen.steps) != len(inst.steps)


def duplicate_steps(gen: GenerationRecord | Sequence[str]) -> bool:
    """True when any step string repeats verbatim (no normalization)."""
    steps = _steps_of(gen)
    return len(set(steps)) != len(steps)


def dup_ngram_rate(gen: GenerationRecord | Sequence[str], n: int) -> float:
    """Repeated-n-gram fraction over the concatenated steps.

    Steps are joined with single spaces and whitespace-tokenized, so
    n-grams cross step boundaries here (unlike the mining heuristic, which
    pools per-step n-grams). Empty pool yields 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = " ".join(_steps_of(gen)).split()
    total = len(tokens) - n + 1
    if total <= 0:
        return 0.0
    counts: Counter = Counter(tuple(tokens[i : i + n]) for i in range(total))
    repeated = sum(count - 1 for count in counts.values() if count > 1)
    return repeated / total


def mean_dup_ngram_rate(gen: GenerationRecord | Sequence[str]) -> float:
    """Unweighted mean of the dup n-gram rate across n in 1..4."""
    return sum(dup_ngram_rate(gen, n) for n in (1, 2, 3, 4)) / 4


def _steps_of(gen: GenerationRecord | Sequence[str]) -> Sequence[str]:
    return gen.steps if isinstance(gen, GenerationRecord) else gen


@dataclass(frozen=True)
class FormatProxyReport:
    step_count_mismatch_rate: float
    duplicate_step_rate: float
    mean_dup_ngram_rate: float
    n_examples: int

    def to_json_dict(self) -> dict:
        return {
            "step_count_mismatch_rate": self.step_count_mismatch_rate,
            "duplicate_step_rate": self.duplicate_step_rate,
            "mean_dup_ngram_rate": self.mean_dup_ngram_rate,
            "n_examples": self.n_examples,
        }


def format_proxy_report(
    generations: Sequence[GenerationRecord],
    instances_by_id: Mapping[str, ProcedureInstance],
) -> FormatProxyReport:
    if not generations:
        raise UndefinedScoreError("format proxies are undefined on an empty set")
    mismatches = sum(
        1 for g in generations if step_count_mismatch(g, instances_by_id[g.instance_id])
    )
    duplicates = sum(1 for g in generations if duplicate_steps(g))
    mean_rate = sum(mean_dup_ngram_rate(g) for g in generations) / len(generations)
    return FormatProxyReport(
        step_count_mismatch_rate=mismatches / len(generations),
        duplicate_step_rate=duplicates / len(generations),
        mean_dup_ngram_rate=mean_rate,
        n_examples=len(generations),
    )


# -- conditional perplexity ---------------------------------------------------


def conditional_perplexity(logprobs: Sequence[TokenLogprob] | Sequence[float]) -> float:
    """exp(-mean natural-log prob) over the reference-step tokens."""
    values = [
        entry.logprob if isinstance(entry, TokenLogprob) else float(entry)
        for entry in logprobs
    ]
    if not values:
        raise UndefinedScoreError("perplexity is undefined on an empty token sequence")
    return math.exp(-sum(values) / len(values))
