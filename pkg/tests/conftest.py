from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mockserver import MockModelServer  # noqa: E402

from how2kit.gateway import Gateway, GatewayConfig, RetryPolicy  # noqa: E402
from how2kit.records import ProcedureInstance  # noqa: E402


def make_instance(
    ident: str = "inst-1",
    topic: str = "Food & Dining",
    goal: str = "Prepare spiced glazed nuts with a crisp candy glaze.",
    steps: tuple[str, ...] = (
        "Preheat the pot on high for 15 minutes.",
        "Add nuts to the pot.",
        "Pour melted butter over the nuts and stir.",
        "Add powdered sugar and stir until blended.",
        "Cook on high for 15 minutes.",
    ),
    resources: tuple[str, ...] = ("pot", "nuts", "butter"),
    heuristics_pass: bool = True,
) -> ProcedureInstance:
    provenance = (("extraction", "pass"), ("heuristics", "pass")) if heuristics_pass else ()
    return ProcedureInstance(
        id=ident,
        topic=topic,
        goal=goal,
        resources=resources,
        steps=steps,
        source_url="https://example.com/guide",
        provenance=provenance,
    )


@pytest.fixture
def instance() -> ProcedureInstance:
    return make_instance()


@pytest.fixture
def mock_server():
    server = MockModelServer().start()
    yield server
    server.stop()


@pytest.fixture
def gateway_factory(tmp_path):
    """Build gateways against a mock server, cache under tmp_path."""
    opened: list[Gateway] = []

    def build(server: MockModelServer, cache: bool = True, **kwargs) -> Gateway:
        config = GatewayConfig(
            endpoint_url=server.url,
            model_name=kwargs.pop("model_name", "mock-model"),
            cache_dir=str(tmp_path / "cache") if cache else None,
            retry=kwargs.pop("retry", RetryPolicy(max_attempts=3, backoff_base_ms=1)),
            **kwargs,
        )
        gw = Gateway(config)
        opened.append(gw)
        return gw

    yield build
    for gw in opened:
        gw.close()
