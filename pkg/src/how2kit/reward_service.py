"""HTTP scoring endpoint for external RL trainers.

POST /v1/reward takes either a benchmark instance id or an inline task
(goal, resources, reference steps) plus the rollout's answer text, and
returns the reward breakdown together with the judge's failure list. Each
request is independent; judge traffic respects the gateway's fan-out
bound.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .gateway import Gateway
from .records import ProcedureInstance
from .rewards import (
    LengthRewardConfig,
    ReferenceTask,
    RewardWeights,
    UndefinedRatioError,
    total_reward,
)
from .tokens import DEFAULT_SCHEME

logger = logging.getLogger(__name__)


class InlineTask(BaseModel):
    goal: str
    resources: list[str] = Field(default_factory=list)
    reference_steps: list[str]


class RewardRequest(BaseModel):
    instance_id: str | None = None
    inline: InlineTask | None = None
    answer_text: str
    expected_n: int | None = None
    gen_tokens: int | None = None
    ref_tokens: int | None = None


class FailurePayload(BaseModel):
    description: str
    reference_step_refs: list[int]
    generated_step_refs: list[int]


class RewardResponse(BaseModel):
    judge: int
    format: int
    length: float
    total: float
    failures: list[FailurePayload]
    token_source: str
    diagnostic: str | None = None


def create_app(
    instances: dict[str, ProcedureInstance],
    judge_gateway: Gateway,
    length_cfg: LengthRewardConfig | None = None,
    weights: RewardWeights | None = None,
    scheme: str = DEFAULT_SCHEME,
    prompt_dir: str | None = None,
) -> FastAPI:
    app = FastAPI(title="how2 reward service")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "instances": len(instances)}

    @app.post("/v1/reward", response_model=RewardResponse)
    def reward(request: RewardRequest) -> RewardResponse:
        if request.instance_id is not None:
            inst = instances.get(request.instance_id)
            if inst is None:
                raise HTTPException(404, f"unknown instance_id {request.instance_id!r}")
            task = ReferenceTask.from_instance(inst)
        elif request.inline is not None:
            task = ReferenceTask(
                goal=request.inline.goal,
                resources=tuple(request.inline.resources),
                reference_steps=tuple(request.inline.reference_steps),
            )
        else:
            raise HTTPException(422, "provide instance_id or inline task")
        try:
            result = total_reward(
                task,
                request.answer_text,
                judge_gateway,
                expected_n=request.expected_n,
                gen_tokens=request.gen_tokens,
                ref_tokens=request.ref_tokens,
                length_cfg=length_cfg,
                weights=weights,
                scheme=scheme,
                prompt_dir=prompt_dir,
            )
        except UndefinedRatioError as exc:
            raise HTTPException(422, str(exc)) from exc
        return RewardResponse(
            judge=result.breakdown.judge,
            format=result.breakdown.format,
            length=result.breakdown.length,
            total=result.breakdown.total,
            failures=[FailurePayload(**f.to_json_dict()) for f in result.failures],
            token_source=result.token_source,
            diagnostic=result.diagnostic,
        )

    return app
