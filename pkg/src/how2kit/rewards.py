"""The three rollout reward components and their sum.

judge: 1 when the judged answer carries no critical failure.
format: 1 when the answer ends in a numbered list 1..k with no gaps (and
    k matches the expected count when one is given).
length: full credit while the gen/ref token ratio stays within a
    tolerance band around 1.0, exponential decay outside it.

Invalid judge replies yield reward 0 with a diagnostic instead of an
exception, so RL rollouts never stall on a flaky judge.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

from .gateway import Gateway, GatewayError
from .harness import extract_final_run, parse_generation
from .records import FailureItem, ProcedureInstance
from .scoring import JudgeReplyError, parse_judge_reply, render_judge_prompt
from .tokens import DEFAULT_SCHEME, count_tokens

logger = logging.getLogger(__name__)


class RewardError(Exception):
    pass


class UndefinedRatioError(RewardError):
    """ref_tokens = 0 leaves the length ratio undefined."""


@dataclass(frozen=True)
class LengthRewardConfig:
    tolerance: float = 0.2
    decay: float = 5.0

    def __post_init__(self):
        if not 0 < self.tolerance < 1:
            raise ValueError("tolerance must be in (0, 1)")
        if self.decay <= 0:
            raise ValueError("decay must be > 0")


@dataclass(frozen=True)
class RewardWeights:
    judge: float = 1.0
    format: float = 1.0
    length: float = 1.0


@dataclass(frozen=True)
class RewardBreakdown:
    judge: int
    format: int
    length: float
    total: float

    def to_json_dict(self) -> dict:
        return {
            "judge": self.judge,
            "format": self.format,
            "length": self.length,
            "total": self.total,
        }


@dataclass(frozen=True)
class ReferenceTask:
    """The slice of an instance the reward components need."""

    goal: str
    resources: tuple[str, ...]
    reference_steps: tuple[str, ...]

    @classmethod
    def from_instance(cls, inst: ProcedureInstance) -> "ReferenceTask":
        return cls(goal=inst.goal, resources=inst.resources, reference_steps=inst.steps)


def format_reward(answer: str, expected_n: int | None = None) -> int:
    """1 iff the answer's final numbered content is a gap-free list 1..k.

    A numbering break (e.g. "1. ... 3. ...") leaves numbered lines after
    the consecutive run, which fails the check; so does a count mismatch
    when ``expected_n`` is given.
    """
    run = extract_final_run(answer)
    if not run.steps or not run.terminal:
        return 0
    if expected_n is not None and len(run.steps) != expected_n:
        return 0
    return 1


def length_reward(
    gen_tokens: int, ref_tokens: int, cfg: LengthRewardConfig | None = None
) -> float:
    """Reference-calibrated length reward on the ratio r = gen/ref.

    1 while |r - 1| <= tolerance, exp(-decay * (|r - 1| - tolerance) /
    (1 - tolerance)) outside; continuous at the boundary.
    """
    cfg = cfg or LengthRewardConfig()
    if ref_tokens <= 0:
        raise UndefinedRatioError("ref_tokens must be >= 1")
    ratio = gen_tokens / ref_tokens
    deviation = abs(ratio - 1.0)
    if deviation <= cfg.tolerance:
        return 1.0
    return math.exp(-cfg.decay * (deviation - cfg.tolerance) / (1.0 - cfg.tolerance))


@dataclass(frozen=True)
class JudgeOutcome:
    reward: int
    failures: tuple[FailureItem, ...]
    diagnostic: str | None


def judge_reward(
    task: ReferenceTask | ProcedureInstance,
    answer: str,
    gateway: Gateway,
    prompt_dir: str | None = None,
    **decoding_overrides,
) -> JudgeOutcome:
    """1 iff the judge finds no critical failure.

    Invalid judge replies (or transport failure past retries) produce
    reward 0 plus a diagnostic; the training loop keeps moving and the
    diagnostic stream preserves auditability.
    """
    if isinstance(task, ProcedureInstance):
        task = ReferenceTask.from_instance(task)
    answer_steps = parse_generation(answer)
    prompt = render_judge_prompt(
        task.goal, task.resources, task.reference_steps, answer_steps, prompt_dir
    )
    try:
        exchange = gateway.complete(prompt, **decoding_overrides)
        failures = parse_judge_reply(exchange.response_text)
    except (GatewayError, JudgeReplyError) as exc:
        logger.warning("judge reward defaulted to 0: %s", exc)
        return JudgeOutcome(reward=0, failures=(), diagnostic=str(exc))
    return JudgeOutcome(
        reward=1 if not failures else 0, failures=failures, diagnostic=None
    )


@dataclass(frozen=True)
class RewardResult:
    breakdown: RewardBreakdown
    failures: tuple[FailureItem, ...]
    diagnostic: str | None
    token_source: str


def resolve_token_counts(
    task: ReferenceTask,
    answer: str,
    gen_tokens: int | None,
    ref_tokens: int | None,
    scheme: str = DEFAULT_SCHEME,
) -> tuple[int, int, str]:
    """(gen, ref, source): caller-provided counts win, otherwise the
    configured scheme measures the parsed answer steps and reference steps."""
    provided = (gen_tokens is not None, ref_tokens is not None)
    if gen_tokens is None:
        gen_tokens = sum(count_tokens(step, scheme) for step in parse_generation(answer))
    if ref_tokens is None:
        ref_tokens = sum(count_tokens(step, scheme) for step in task.reference_steps)
    if all(provided):
        source = "caller"
    elif not any(provided):
        source = f"computed:{scheme}"
    else:
        source = f"mixed:caller+computed:{scheme}"
    return gen_tokens, ref_tokens, source


def total_reward(
    task: ReferenceTask | ProcedureInstance,
    answer: str,
    gateway: Gateway,
    expected_n: int | None = None,
    gen_tokens: int | None = None,
    ref_tokens: int | None = None,
    length_cfg: LengthRewardConfig | None = None,
    weights: RewardWeights | None = None,
    scheme: str = DEFAULT_SCHEME,
    prompt_dir: str | None = None,
) -> RewardResult:
    """All three components for one rollout; total is their weighted sum
    (weights default to the plain sum)."""
    if isinstance(task, ProcedureInstance):
        task = ReferenceTask.from_instance(task)
    weights = weights or RewardWeights()
    if expected_n is None:
        expected_n = len(task.reference_steps)
    gen_count, ref_count, token_source = resolve_token_counts(
        task, answer, gen_tokens, ref_tokens, scheme
    )
    judge = judge_reward(task, answer, gateway, prompt_dir)
    fmt = format_reward(answer, expected_n)
    length = length_reward(gen_count, ref_count, length_cfg)
    total = weights.judge * judge.reward + weights.format * fmt + weights.length * length
    return RewardResult(
        breakdown=RewardBreakdown(
            judge=judge.reward, format=fmt, length=length, total=total
        ),
        failures=judge.failures,
        diagnostic=judge.diagnostic,
        token_source=token_source,
    )
