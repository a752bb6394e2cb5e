from __future__ import annotations

import json
import random

import pytest
from fastapi.testclient import TestClient

from conftest import make_instance
from how2kit.records import TOPICS
from how2kit.reward_service import create_app
from how2kit.rewards import format_reward, length_reward

CLEAN = '{"failures": []}'
FLAWED = json.dumps({"failures": [{"description": "wrong order",
                                   "reference_step_refs": [2],
                                   "generated_step_refs": [1]}]})


@pytest.fixture
def service(mock_server, gateway_factory):
    instances = {
        f"bench-{k}": make_instance(
            ident=f"bench-{k}",
            topic=TOPICS[k % len(TOPICS)],
            goal=f"finish task {k}",
            steps=tuple(f"do part {i} of task {k}" for i in range(1, 6)),
        )
        for k in range(10)
    }
    gw = gateway_factory(mock_server, cache=False)
    app = create_app(instances, gw)
    return TestClient(app), mock_server


def _answer(n):
    return "\n".join(f"{i}. carefully perform part {i}" for i in range(1, n + 1))


def test_healthz(service):
    client, _ = service
    response = client.get("/healthz")
    assert response.status_code == 200
    assert response.json()["status"] == "ok"


def test_golden_round_trip(service):
    client, server = service
    server.reply_fn = lambda prompt: CLEAN
    response = client.post(
        "/v1/reward",
        json={
            "instance_id": "bench-0",
            "answer_text": _answer(5),
            "gen_tokens": 100,
            "ref_tokens": 100,
        },
    )
    assert response.status_code == 200
    body = response.json()
    assert body["judge"] == 1
    assert body["format"] == 1
    assert body["length"] == 1.0
    assert body["total"] == 3.0
    assert body["failures"] == []
    assert body["token_source"] == "caller"
    assert body["diagnostic"] is None


def test_judge_failures_round_trip(service):
    client, server = service
    server.reply_fn = lambda prompt: FLAWED
    body = client.post(
        "/v1/reward",
        json={"instance_id": "bench-1", "answer_text": _answer(5),
              "gen_tokens": 100, "ref_tokens": 100},
    ).json()
    assert body["judge"] == 0
    assert body["total"] == 2.0
    assert body["failures"][0]["reference_step_refs"] == [2]


def test_inline_task(service):
    client, server = service
    server.reply_fn = lambda prompt: CLEAN
    body = client.post(
        "/v1/reward",
        json={
            "inline": {"goal": "swap a tire",
                       "resources": ["jack", "wrench"],
                       "reference_steps": ["loosen", "lift", "swap", "tighten"]},
            "answer_text": _answer(4),
        },
    ).json()
    assert body["format"] == 1  # expected_n defaults to the 4 reference steps
    assert body["token_source"] == "computed:whitespace"


def test_unknown_instance_404(service):
    client, _ = service
    response = client.post(
        "/v1/reward", json={"instance_id": "nope", "answer_text": "1. a"}
    )
    assert response.status_code == 404


def test_missing_task_422(service):
    client, _ = service
    response = client.post("/v1/reward", json={"answer_text": "1. a"})
    assert response.status_code == 422


def test_zero_ref_tokens_422(service):
    client, server = service
    server.reply_fn = lambda prompt: CLEAN
    response = client.post(
        "/v1/reward",
        json={"instance_id": "bench-0", "answer_text": _answer(5),
              "gen_tokens": 10, "ref_tokens": 0},
    )
    assert response.status_code == 422


def test_component_sum_identity_randomized(service):
    client, server = service
    rng = random.Random(23)

    def scripted_judge(prompt):
        # deterministic scripting keyed off the generated steps block
        return FLAWED if "flaw" in prompt else CLEAN

    server.reply_fn = scripted_judge

    for trial in range(1000):
        n_steps = rng.randint(1, 8)
        flawed = rng.random() < 0.5
        break_format = rng.random() < 0.3
        word = "flaw" if flawed else "fine"
        lines = [f"{i}. {word} part {i}" for i in range(1, n_steps + 1)]
        if break_format and n_steps >= 2:
            lines[-1] = lines[-1].replace(f"{n_steps}. ", f"{n_steps + 5}. ")
        answer = "\n".join(lines)
        expected_n = rng.choice([None, n_steps, n_steps + 1])
        gen_tokens = rng.randint(1, 300)
        ref_tokens = rng.randint(1, 300)

        payload = {
            "instance_id": f"bench-{rng.randrange(10)}",
            "answer_text": answer,
            "gen_tokens": gen_tokens,
            "ref_tokens": ref_tokens,
        }
        if expected_n is not None:
            payload["expected_n"] = expected_n
        body = client.post("/v1/reward", json=payload).json()

        assert body["total"] == pytest.approx(
            body["judge"] + body["format"] + body["length"], abs=1e-12
        )
        assert body["judge"] == (0 if flawed else 1)
        assert body["format"] == format_reward(
            answer, expected_n if expected_n is not None else 5
        )
        assert body["length"] == pytest.approx(
            length_reward(gen_tokens, ref_tokens), abs=1e-12
        )
