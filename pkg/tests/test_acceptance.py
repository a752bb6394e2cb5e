"""Acceptance suite: one test per release criterion, each printing one
PASS/FAIL line with its runtime (run with ``pytest tests/test_acceptance.py
-v -s`` to see the lines). Every tolerance is pinned here, not deferred.

The whole suite runs against mocks and synthetic data only; no network,
no model weights, and no secondary component are involved.
"""

from __future__ import annotations

import json
import math
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import make_instance
from mockserver import MockModelServer, hash_embedding
from pipeline_script import distinct_steps, make_document, scripted_reply_fn


@contextmanager
def criterion(name: str, max_seconds: float | None = None):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"FAIL  {name}")
        raise
    elapsed = time.monotonic() - start
    if max_seconds is not None:
        assert elapsed < max_seconds, f"{name}: {elapsed:.2f}s exceeds {max_seconds}s"
    print(f"PASS  {name}  ({elapsed:.2f}s)")


def test_length_reward_goldens():
    from how2kit.rewards import length_reward

    with criterion("length reward goldens (tau=0.2, alpha=5)", max_seconds=1.0):
        assert length_reward(1000, 1000) == 1.0
        assert length_reward(800, 1000) == 1.0
        assert length_reward(1200, 1000) == 1.0
        assert abs(length_reward(1600, 1000) - math.exp(-2.5)) <= 1e-9
        assert abs(length_reward(1600, 1000) - 0.0820850) <= 1e-7
        assert abs(length_reward(500, 1000) - math.exp(-1.875)) <= 1e-9
        assert abs(length_reward(500, 1000) - 0.1533550) <= 1e-7


def test_heuristics_filter_table():
    from how2kit.mining import (
        CandidateProcedure,
        HeuristicsConfig,
        heuristic_filter,
        pooled_repetition_rate,
    )

    with criterion("heuristics filter table + pooled repetition", max_seconds=1.0):
        cfg = HeuristicsConfig()

        def decide(steps):
            return heuristic_filter(
                CandidateProcedure(document_id="d", goal="g", steps=list(steps)), cfg
            )

        assert decide(distinct_steps(4)) == "step_count"
        assert decide(distinct_steps(5)) is None
        assert decide(distinct_steps(15)) is None
        assert decide(distinct_steps(16)) == "step_count"

        fixture = ["check the valve"] * 5
        assert pooled_repetition_rate(fixture, 2) == pytest.approx(0.8, abs=1e-12)
        assert decide(fixture) == "bigram_repetition"  # 0.8 >= 0.40


def test_dup_ngram_metric():
    from how2kit.scoring import dup_ngram_rate, mean_dup_ngram_rate

    with criterion("dup n-gram rates and their mean", max_seconds=1.0):
        steps = ["mix the flour", "mix the dough"]
        assert dup_ngram_rate(steps, 1) == pytest.approx(1 / 3, abs=1e-12)
        assert dup_ngram_rate(steps, 2) == pytest.approx(1 / 5, abs=1e-12)
        assert dup_ngram_rate(steps, 3) == 0.0
        assert dup_ngram_rate(steps, 4) == 0.0
        assert abs(mean_dup_ngram_rate(steps) - 0.13333) <= 1e-5
        assert mean_dup_ngram_rate(steps) == pytest.approx((1 / 3 + 1 / 5) / 4,
                                                           abs=1e-12)


def test_score_equivalence_ten_thousand():
    from how2kit.records import NO_FAILURE, HAS_FAILURE, FailureItem, JudgmentRecord
    from how2kit.records import TOPICS
    from how2kit.scoring import score

    with criterion("Score(D) equals brute force on 10,000 judgments"):
        rng = random.Random(101)
        judgments, topics = [], {}
        for k in range(10_000):
            topics[f"i{k}"] = TOPICS[rng.randrange(14)]
            clean = rng.random() < 0.42
            judgments.append(
                JudgmentRecord.from_failures(
                    f"i{k}", f"i{k}/m/base", "j",
                    () if clean else (FailureItem("flaw"),),
                )
            )
        summary = score(judgments, topics)
        brute = sum(1 for j in judgments if j.binary == NO_FAILURE) / len(judgments)
        assert summary.overall == brute  # exact equality
        counts: dict[str, int] = {}
        for j in judgments:
            counts[topics[j.instance_id]] = counts.get(topics[j.instance_id], 0) + 1
        recomposed = sum(counts[t] * summary.per_topic[t] for t in counts)
        assert abs(recomposed - len(judgments) * summary.overall) <= 1e-12


def test_krippendorff_alpha_criteria():
    from how2kit.agreement import krippendorff_alpha
    from test_agreement import alpha_oracle

    with criterion("Krippendorff alpha: hand case, brute force, perfect"):
        hand = [[0, 0], [1, 1], [0, 0], [0, 1]]
        assert abs(krippendorff_alpha(hand) - 0.533333) <= 1e-6

        rng = random.Random(103)
        checked = 0
        while checked < 100:
            matrix = [[rng.choice([0, 1]) for _ in range(3)] for _ in range(50)]
            if len({v for row in matrix for v in row}) < 2:
                continue
            assert abs(krippendorff_alpha(matrix) - alpha_oracle(matrix)) <= 1e-9
            checked += 1

        perfect = [[1, 1, 1], [0, 0, 0]] * 5
        assert krippendorff_alpha(perfect) == 1.0


def test_spearman_criteria():
    from how2kit.analysis import CheckpointRecord, rank_checkpoints, spearman
    from test_analysis import CHECKPOINT_TABLE_ROWS

    with criterion("Spearman: 9-checkpoint table rho=0.917, exact extremes",
                   max_seconds=1.0):
        records = [CheckpointRecord(*row) for row in CHECKPOINT_TABLE_ROWS]
        assert abs(rank_checkpoints(records).rho - 0.917) <= 1e-3

        xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        assert spearman(xs, xs) == pytest.approx(1.0, abs=1e-15)
        assert spearman(xs, xs[::-1]) == pytest.approx(-1.0, abs=1e-15)


def test_logistic_regression_criteria():
    from scipy import stats

    from how2kit.analysis import (
        RegressionSpec,
        design_matrix,
        fit_logistic,
        gradient,
        penalized_log_likelihood,
    )
    from how2kit.records import TOPICS
    from test_analysis import RegressionExample, simulate

    with criterion(
        "logistic regression: recovery, gradient check, CI coverage",
        max_seconds=120.0,
    ):
        # (a) recovery within 3 SE on 5,000 examples with 13 topic dummies
        rng = np.random.default_rng(211)
        effect_rng = np.random.default_rng(212)
        topic_effects = {
            t: (0.0 if i == 0 else float(effect_rng.uniform(-0.7, 0.7)))
            for i, t in enumerate(TOPICS)
        }
        true = {"intercept": 0.35, "steps": -0.2, "resources": 0.1, "ratio": 0.011}
        examples = simulate(rng, 5000, true["intercept"], true["steps"],
                            true["resources"], true["ratio"], topic_effects)
        fit = fit_logistic(examples)
        assert fit.converged and not fit.unreliable
        assert sum(1 for n in fit.coefficient_names if n.startswith("topic:")) == 13
        for i, name in enumerate(fit.coefficient_names):
            expected = (topic_effects[name.split(":", 1)[1]]
                        if name.startswith("topic:") else true[name])
            assert abs(fit.coefficients[i] - expected) <= 3 * fit.standard_errors[i]

        # (b) analytic gradient vs central finite differences at the optimum
        small = [
            RegressionExample(
                steps=int(rng.integers(5, 16)),
                resources=int(rng.integers(0, 5)),
                ratio=float(rng.uniform(0.5, 3.0)),
                topic=TOPICS[int(rng.integers(4))],
                label=int(rng.random() < 0.5),
            )
            for _ in range(300)
        ]
        spec = RegressionSpec()
        small_fit = fit_logistic(small, spec)
        X, y, _ = design_matrix(small, small_fit.baseline_topic)
        penalty = np.full(X.shape[1], spec.l2_lambda)
        penalty[0] = 0.0
        beta = small_fit.coefficients
        analytic = gradient(beta, X, y, penalty)
        h = 1e-6
        for i in range(len(beta)):
            bump = np.zeros_like(beta)
            bump[i] = h
            numeric = (
                penalized_log_likelihood(beta + bump, X, y, penalty)
                - penalized_log_likelihood(beta - bump, X, y, penalty)
            ) / (2 * h)
            assert abs(numeric - analytic[i]) <= 1e-6

        # (c) 95% Wald coverage within +/-3pp over 500 replications
        cover_rng = np.random.default_rng(213)
        cover_topics = {t: e for t, e in zip(TOPICS[:4], (0.0, 0.45, -0.35, 0.2))}
        z = stats.norm.ppf(0.975)
        covered = total = 0
        for _rep in range(500):
            rep = simulate(cover_rng, 1200, true["intercept"], true["steps"],
                           true["resources"], true["ratio"], cover_topics)
            rep_fit = fit_logistic(rep)
            if rep_fit.unreliable:
                continue
            for i, name in enumerate(rep_fit.coefficient_names):
                expected = (cover_topics[name.split(":", 1)[1]]
                            if name.startswith("topic:") else true[name])
                lo = rep_fit.coefficients[i] - z * rep_fit.standard_errors[i]
                hi = rep_fit.coefficients[i] + z * rep_fit.standard_errors[i]
                covered += int(lo <= expected <= hi)
                total += 1
        assert abs(covered / total - 0.95) <= 0.03


def test_pipeline_accounting_criteria(tmp_path):
    from how2kit.gateway import Gateway, GatewayConfig, RetryPolicy
    from how2kit.mining import run_pipeline
    from how2kit.records import serialize

    with criterion(
        "20-document scripted pipeline: telescoping + warm-cache rerun",
        max_seconds=10.0,
    ):
        scripts = {f"doc-{i:02d}": {} for i in range(20)}
        scripts["doc-10"] = {"extract": "none"}
        scripts["doc-11"] = {"extract": "garbage"}
        scripts["doc-12"] = {"n_steps": 4}
        scripts["doc-13"] = {"n_steps": 16}
        scripts["doc-14"] = {"steps": ["check the valve"] * 5}
        scripts["doc-15"] = {"llm_filter": "named_entity"}
        scripts["doc-16"] = {"llm_filter": "pure_math"}
        scripts["doc-17"] = {"rewrite": "garbage"}
        scripts["doc-18"] = {"final": "INVALID"}
        server = MockModelServer(reply_fn=scripted_reply_fn(scripts)).start()
        try:
            config = GatewayConfig(
                endpoint_url=server.url,
                model_name="mock-model",
                cache_dir=str(tmp_path / "cache"),
                retry=RetryPolicy(max_attempts=2, backoff_base_ms=1),
            )
            docs = [make_document(d) for d in scripts]
            with Gateway(config) as gateway:
                first = run_pipeline(docs, gateway)
                first.report.validate()  # telescoping identity
                report = first.report.stages
                assert report["extraction"].input_count == 20
                assert report["extraction"].rejected_count == 2
                assert report["heuristics"].input_count == 18
                assert report["heuristics"].rejected_count == 3
                assert report["llm_filter"].input_count == 15
                assert report["llm_filter"].rejected_count == 2
                assert report["postprocess"].input_count == 13
                assert report["postprocess"].rejected_count == 1
                assert report["final"].input_count == 12
                assert report["final"].rejected_count == 1
                assert len(first.instances) == 11

                requests = server.request_count
                second = run_pipeline(docs, gateway)
                assert server.request_count == requests  # fully warm
                first_bytes = "\n".join(serialize(i) for i in first.instances)
                second_bytes = "\n".join(serialize(i) for i in second.instances)
                assert first_bytes == second_bytes
                assert (
                    json.dumps(first.report.to_json_dict(), sort_keys=True)
                    == json.dumps(second.report.to_json_dict(), sort_keys=True)
                )
        finally:
            server.stop()


def test_dedup_criteria():
    from how2kit.dedup import dedup_filter, nearest_train_similarity

    with criterion(
        "dedup: planted duplicates removed, boundary kept, exact NN",
        max_seconds=5.0,
    ):
        # planted near-duplicates under the deterministic mock embedder
        train_texts = [f"assemble the bookshelf variant {i}" for i in range(20)]
        planted = [train_texts[3], train_texts[7], train_texts[11]]
        fresh = ["calibrate the telescope mount", "brew a pot of loose leaf tea"]
        eval_texts = planted + fresh
        report = nearest_train_similarity(
            [hash_embedding(t) for t in eval_texts],
            [hash_embedding(t) for t in train_texts],
            [f"e{i}" for i in range(len(eval_texts))],
            [f"t{i:02d}" for i in range(len(train_texts))],
        )
        retained = dedup_filter(report, 0.65)
        assert set(retained).isdisjoint({"e0", "e1", "e2"})  # all planted removed
        for record in report[:3]:
            assert record.cosine == pytest.approx(1.0, abs=1e-9)

        # boundary value: cosine exactly 0.65 is retained
        boundary_vec = [0.65, math.sqrt(1 - 0.65**2)]
        boundary = nearest_train_similarity(
            [boundary_vec], [[1.0, 0.0]], ["edge"], ["t"]
        )
        assert boundary[0].cosine == 0.65
        assert dedup_filter(boundary, 0.65) == ["edge"]

        # exact NN equals the brute-force double loop on 100 random vectors
        rng = random.Random(107)

        def random_unit(dim=12):
            vec = [rng.gauss(0, 1) for _ in range(dim)]
            norm = math.sqrt(sum(x * x for x in vec))
            return [x / norm for x in vec]

        eval_vecs = [random_unit() for _ in range(100)]
        train_vecs = [random_unit() for _ in range(100)]
        eval_ids = [f"e{i}" for i in range(100)]
        train_ids = [f"t{i:03d}" for i in range(100)]
        fast = nearest_train_similarity(eval_vecs, train_vecs, eval_ids, train_ids)
        for row, record in enumerate(fast):
            best_sim, best_id = -2.0, None
            for col in range(100):
                sim = sum(a * b for a, b in zip(eval_vecs[row], train_vecs[col]))
                if sim > best_sim:
                    best_sim, best_id = sim, train_ids[col]
            assert record.nearest_train_id == best_id  # identical neighbor choice
            assert abs(record.cosine - best_sim) <= 1e-12


def test_reward_service_criteria(tmp_path):
    from how2kit.gateway import Gateway, GatewayConfig, RetryPolicy
    from how2kit.records import TOPICS
    from how2kit.reward_service import create_app
    from how2kit.rewards import format_reward, length_reward

    with criterion(
        "reward service: golden round trip + 1,000 randomized sum identities"
    ):
        flawed_reply = json.dumps(
            {"failures": [{"description": "missing action",
                           "reference_step_refs": [1], "generated_step_refs": []}]}
        )
        server = MockModelServer(
            reply_fn=lambda p: flawed_reply if "flaw" in p else '{"failures": []}'
        ).start()
        try:
            instances = {
                f"b{k}": make_instance(
                    ident=f"b{k}",
                    topic=TOPICS[k % 14],
                    steps=tuple(f"do part {i} of {k}" for i in range(1, 6)),
                )
                for k in range(8)
            }
            config = GatewayConfig(
                endpoint_url=server.url,
                model_name="mock-judge",
                retry=RetryPolicy(max_attempts=2, backoff_base_ms=1),
            )
            with Gateway(config) as gateway:
                client = TestClient(create_app(instances, gateway))

                golden = client.post(
                    "/v1/reward",
                    json={"instance_id": "b0",
                          "answer_text": "1. fine a\n2. fine b\n3. fine c\n"
                                         "4. fine d\n5. fine e",
                          "gen_tokens": 100, "ref_tokens": 100},
                )
                assert golden.status_code == 200
                body = golden.json()
                assert body["judge"] == 1
                assert body["format"] == 1
                assert body["length"] == 1.0
                assert body["total"] == 3.0

                rng = random.Random(109)
                for _ in range(1000):
                    n = rng.randint(1, 7)
                    word = "flaw" if rng.random() < 0.5 else "fine"
                    lines = [f"{i}. {word} part {i}" for i in range(1, n + 1)]
                    if rng.random() < 0.3 and n >= 2:
                        lines[-1] = f"{n + 3}. {word} part {n}"
                    answer = "\n".join(lines)
                    gen_tokens = rng.randint(1, 250)
                    ref_tokens = rng.randint(1, 250)
                    reward = client.post(
                        "/v1/reward",
                        json={"instance_id": f"b{rng.randrange(8)}",
                              "answer_text": answer,
                              "gen_tokens": gen_tokens, "ref_tokens": ref_tokens},
                    ).json()
                    assert reward["total"] == pytest.approx(
                        reward["judge"] + reward["format"] + reward["length"],
                        abs=1e-12,
                    )
                    assert reward["judge"] == (0 if word == "flaw" else 1)
                    assert reward["format"] == format_reward(answer, 5)
                    assert reward["length"] == pytest.approx(
                        length_reward(gen_tokens, ref_tokens), abs=1e-12
                    )
        finally:
            server.stop()


def test_conditional_perplexity_criteria():
    from mpmath import exp as mp_exp
    from mpmath import mp, mpf

    from how2kit.scoring import conditional_perplexity

    with criterion("conditional perplexity: uniform 2.0, high-precision oracle"):
        assert abs(conditional_perplexity([math.log(0.5)] * 9) - 2.0) <= 1e-12

        mp.dps = 60
        rng = random.Random(113)
        for _ in range(25):
            logprobs = [-rng.uniform(0.001, 6.0) for _ in range(rng.randint(1, 40))]
            mean = sum(mpf(lp) for lp in logprobs) / len(logprobs)
            expected = float(mp_exp(-mean))
            assert abs(conditional_perplexity(logprobs) - expected) <= 1e-9


def test_annotation_service_criteria(tmp_path):
    from how2kit.annotation import AnnotationService, AnnotationStore, TaskPair
    from how2kit.records import (
        HAS_FAILURE,
        NO_FAILURE,
        FailureItem,
        GenerationRecord,
        read_annotations,
    )
    from test_annotation_service import FakeClock

    with criterion(
        "annotation service: too_fast, attention_incomplete, lossless export"
    ):
        clock = FakeClock()
        inst = make_instance(ident="inst-acc")
        pair = TaskPair(
            instance=inst,
            generation=GenerationRecord(
                "inst-acc", "m", "instruct", "", ("g1", "g2", "g3"), 3, 5
            ),
        )
        store_path = tmp_path / "annotations.jsonl"
        service = AnnotationService(
            [pair], AnnotationStore(store_path), annotators_per_instance=1,
            clock=clock,
        )
        task = service.fetch_task("ann-1")

        for token in task["attention_tokens"]:
            service.record_attention(task["task_id"], token)
        clock.advance(89.0)
        early = service.submit(task["task_id"], "ann-1", NO_FAILURE, [])
        assert not early.accepted and early.reason == "too_fast"

        clock.advance(31.0)  # now 120s, but poke a fresh task for attention
        service2 = AnnotationService(
            [pair], AnnotationStore(tmp_path / "second.jsonl"),
            annotators_per_instance=1, clock=clock,
        )
        task2 = service2.fetch_task("ann-2")
        for token in task2["attention_tokens"][:-1]:
            service2.record_attention(task2["task_id"], token)
        clock.advance(120.0)
        missing = service2.submit(task2["task_id"], "ann-2", NO_FAILURE, [])
        assert not missing.accepted and missing.reason == "attention_incomplete"

        # valid submission exports losslessly and re-parses
        failures = [FailureItem("omits the cooling step", (4,), (2, 3))]
        accepted = service.submit(task["task_id"], "ann-1", HAS_FAILURE, failures)
        assert accepted.accepted
        records = read_annotations(store_path)
        assert len(records) == 1
        assert records[0].failures == tuple(failures)
        assert records[0].elapsed_seconds >= 90.0
        assert records[0].attention_complete is True
        assert records[0].instance_id == "inst-acc"
        assert records[0].annotator_id == "ann-1"
