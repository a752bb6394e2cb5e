"""Controlled 3-shot generation: prompt building, decoding policy, parsing.

Prompts are byte-deterministic functions of (instance, variant, shots,
template), so identical runs produce identical requests and hit the
gateway cache. Generated text is parsed back into steps by a numbered-
list scan that tolerates leading reasoning text: runs of consecutive
numbering starting at 1 are collected, and the final run wins.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .gateway import Gateway, GatewayError
from .records import GenerationRecord, ProcedureInstance
from .templates import load_template, render
from .tokens import DEFAULT_SCHEME, count_tokens

logger = logging.getLogger(__name__)

_STEP_LINE = re.compile(r"^\s*(\d+)[.)]\s+(.*\S)\s*$")

SHOTS_REQUIRED = 3


@dataclass(frozen=True)
class ExemplarShot:
    goal: str
    resources: tuple[str, ...]
    steps: tuple[str, ...]


@dataclass(frozen=True)
class DecodingPolicy:
    kind: str
    temperature: float
    stop_sequences: tuple[str, ...]
    max_tokens: int

    @classmethod
    def for_kind(cls, kind: str, max_tokens: int = 1024) -> "DecodingPolicy":
        # Non-reasoning endpoints decode greedily with a blank-line stop;
        # reasoning endpoints sample at 0.6 and keep their thinking budget.
        if kind in ("base", "instruct"):
            return cls(kind=kind, temperature=0.0, stop_sequences=("\n\n",),
                       max_tokens=max_tokens)
        if kind == "reasoning":
            return cls(kind=kind, temperature=0.6, stop_sequences=(), max_tokens=max_tokens)
        raise ValueError(f"unknown endpoint kind {kind!r}")


def load_exemplar_shots(path: str | Path | None = None) -> tuple[ExemplarShot, ...]:
    """The fixed 3-shot exemplar set (bundled unless a path is given)."""
    if path is None:
        raw = resources.files("how2kit.data").joinpath("exemplar_shots.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    shots = tuple(
        ExemplarShot(
            goal=entry["goal"],
            resources=tuple(entry["resources"]),
            steps=tuple(entry["steps"]),
        )
        for entry in json.loads(raw)
    )
    if len(shots) != SHOTS_REQUIRED:
        raise ValueError(f"expected exactly {SHOTS_REQUIRED} exemplar shots, got {len(shots)}")
    return shots


def _resources_line(resources: Sequence[str]) -> str:
    return "; ".join(resources) if resources else "none"


def _shot_block(shot: ExemplarShot) -> str:
    lines = [
        f"Goal: {shot.goal}",
        f"Resources: {_resources_line(shot.resources)}",
        f"Required number of steps: {len(shot.steps)}",
        "Steps:",
    ]
    lines.extend(f"{i}. {step}" for i, step in enumerate(shot.steps, start=1))
    return "\n".join(lines)


def build_prompt(
    inst: ProcedureInstance,
    variant: str,
    shots: Sequence[ExemplarShot],
    prompt_dir: str | Path | None = None,
) -> str:
    if variant not in ("base", "instruct"):
        raise ValueError(f"prompt variant must be base|instruct, got {variant!r}")
    if len(shots) != SHOTS_REQUIRED:
        raise ValueError(f"expected exactly {SHOTS_REQUIRED} shots, got {len(shots)}")
    template = load_template(f"generation_{variant}", prompt_dir)
    return render(
        template,
        examples="\n\n".join(_shot_block(shot) for shot in shots),
        goal=inst.goal,
        resources=_resources_line(inst.resources),
        n=str(len(inst.steps)),
    )


@dataclass(frozen=True)
class FinalRun:
    steps: tuple[str, ...]
    # True when no numbered line follows the run, i.e. the run is the
    # answer's final numbered content (the format verifier needs this).
    terminal: bool


def extract_final_run(raw: str) -> FinalRun:
    numbered: list[tuple[int, str]] = []
    for line in raw.splitlines():
        match = _STEP_LINE.match(line)
        if match is not None:
            numbered.append((int(match.group(1)), match.group(2)))
    runs: list[tuple[list[str], int]] = []  # (texts, index of last numbered line)
    current: list[str] | None = None
    for idx, (number, text) in enumerate(numbered):
        if number == 1:
            current = [text]
            runs.append((current, idx))
        elif current is not None and number == len(current) + 1:
            current.append(text)
            runs[-1] = (current, idx)
        else:
            current = None
    if not runs:
        return FinalRun(steps=(), terminal=False)
    steps, last_idx = runs[-1]
    return FinalRun(steps=tuple(steps), terminal=last_idx == len(numbered) - 1)


def parse_generation(raw: str) -> list[str]:
    """Steps from the final numbered run; empty when none exists.

    Anything before the final run (reasoning text, earlier partial lists)
    is ignored; within a run, parsing stops at the first numbering break.
    """
    return list(extract_final_run(raw).steps)


@dataclass
class GenerationRun:
    records: list[GenerationRecord]
    failed_instance_ids: list[str]


def run_generation(
    instances: Sequence[ProcedureInstance],
    gateway: Gateway,
    model_id: str,
    variant: str = "instruct",
    scheme: str = DEFAULT_SCHEME,
    shots: Sequence[ExemplarShot] | None = None,
    prompt_dir: str | Path | None = None,
    max_tokens: int | None = None,
) -> GenerationRun:
    """One GenerationRecord per instance; gateway failures are flagged,
    recorded with empty steps, and never abort the run."""
    shots = shots if shots is not None else load_exemplar_shots()
    policy = DecodingPolicy.for_kind(
        variant, max_tokens if max_tokens is not None else gateway.config.max_tokens
    )
    template_variant = "base" if variant == "base" else "instruct"

    def generate(inst: ProcedureInstance) -> tuple[GenerationRecord, bool]:
        prompt = build_prompt(inst, template_variant, shots, prompt_dir)
        ref_tokens = sum(count_tokens(step, scheme) for step in inst.steps)
        try:
            exchange = gateway.complete(
                prompt,
                temperature=policy.temperature,
                stop=policy.stop_sequences,
                max_tokens=policy.max_tokens,
            )
        except GatewayError as exc:
            logger.warning("generation failed for %s: %s", inst.id, exc)
            record = GenerationRecord(
                instance_id=inst.id,
                model_id=model_id,
                prompt_variant=variant,
                raw_text="",
                steps=(),
                gen_tokens=0,
                ref_tokens=ref_tokens,
            )
            return record, True
        steps = tuple(parse_generation(exchange.response_text))
        record = GenerationRecord(
            instance_id=inst.id,
            model_id=model_id,
            prompt_variant=variant,
            raw_text=exchange.response_text,
            steps=steps,
            gen_tokens=sum(count_tokens(step, scheme) for step in steps),
            ref_tokens=ref_tokens,
        )
        return record, False

    if not instances:
        return GenerationRun(records=[], failed_instance_ids=[])
    with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as pool:
        outcomes = list(pool.map(generate, instances))
    return GenerationRun(
        records=[record for record, _ in outcomes],
        failed_instance_ids=[rec.instance_id for rec, failed in outcomes if failed],
    )
