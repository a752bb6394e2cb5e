"""Embedding-based train/eval deduplication and benchmark assembly.

Nearest neighbors are exact (one dense dot-product sweep, O(N*M)); at
desk scale exactness is cheap and keeps the oracle trivial. The balanced
sampler uses an explicit Fisher-Yates shuffle over sorted ids with a
seeded Mersenne Twister so splits reproduce across runs and machines.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .records import ProcedureInstance

DEDUP_THRESHOLD = 0.65
PER_TOPIC_DEFAULT = 500


class DedupError(Exception):
    pass


@dataclass(frozen=True)
class SimilarityRecord:
    candidate_id: str
    nearest_train_id: str
    cosine: float

    def to_json_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "nearest_train_id": self.nearest_train_id,
            "cosine": self.cosine,
        }


def instance_embedding_text(inst: ProcedureInstance) -> str:
    """Embedding text: the goal, then the numbered steps, one per line."""
    lines = [inst.goal]
    lines.extend(f"{i}. {step}" for i, step in enumerate(inst.steps, start=1))
    return "\n".join(lines)


def nearest_train_similarity(
    eval_vecs: Sequence[Sequence[float]],
    train_vecs: Sequence[Sequence[float]],
    eval_ids: Sequence[str],
    train_ids: Sequence[str],
) -> list[SimilarityRecord]:
    """Exact max dot product per candidate; ties go to the lowest train id.

    All vectors must be unit-norm and share one dimension, so the dot
    product is the cosine.
    """
    if len(eval_vecs) != len(eval_ids) or len(train_vecs) != len(train_ids):
        raise DedupError("ids and vectors must align")
    if not train_vecs:
        raise DedupError("training set must be non-empty")
    eval_matrix = np.asarray(eval_vecs, dtype=np.float64)
    train_matrix = np.asarray(train_vecs, dtype=np.float64)
    if eval_matrix.ndim != 2 or train_matrix.ndim != 2:
        raise DedupError("vectors must form a 2-D matrix (equal dimensions)")
    if eval_matrix.shape[1] != train_matrix.shape[1]:
        raise DedupError(
            f"dimension mismatch: eval {eval_matrix.shape[1]} vs train {train_matrix.shape[1]}"
        )
    # Sorting train columns by id makes argmax's first-hit tie break equal
    # to "lowest train id".
    order = sorted(range(len(train_ids)), key=lambda i: train_ids[i])
    sorted_ids = [train_ids[i] for i in order]
    similarities = eval_matrix @ train_matrix[order].T
    best = np.argmax(similarities, axis=1)
    return [
        SimilarityRecord(
            candidate_id=eval_ids[row],
            nearest_train_id=sorted_ids[best[row]],
            cosine=float(similarities[row, best[row]]),
        )
        for row in range(len(eval_ids))
    ]


def dedup_filter(
    report: Iterable[SimilarityRecord], threshold: float = DEDUP_THRESHOLD
) -> list[str]:
    """Candidate ids whose max train similarity does not exceed the threshold.

    The boundary is kept: only strictly greater similarities are dropped.
    """
    return [record.candidate_id for record in report if record.cosine <= threshold]


@dataclass
class BenchmarkSplit:
    benchmark: list[ProcedureInstance]
    training_pool: list[ProcedureInstance]


def sample_balanced(
    instances: Sequence[ProcedureInstance],
    per_topic: int = PER_TOPIC_DEFAULT,
    seed: int = 0,
) -> BenchmarkSplit:
    """Up to ``per_topic`` instances per topic, without replacement.

    Topics are visited in sorted order, each with its own derived seed, so
    adding instances to one topic never perturbs another topic's draw.
    """
    seen_ids: set[str] = set()
    by_topic: dict[str, list[ProcedureInstance]] = {}
    for inst in instances:
        if inst.id in seen_ids:
            raise DedupError(f"duplicate instance id {inst.id!r} in pool")
        seen_ids.add(inst.id)
        by_topic.setdefault(inst.topic, []).append(inst)

    selected_ids: set[str] = set()
    benchmark: list[ProcedureInstance] = []
    for topic in sorted(by_topic):
        members = sorted(by_topic[topic], key=lambda inst: inst.id)
        _fisher_yates(members, random.Random(f"{seed}/{topic}"))
        for inst in members[:per_topic]:
            selected_ids.add(inst.id)
            benchmark.append(inst)
    training_pool = [inst for inst in instances if inst.id not in selected_ids]
    return BenchmarkSplit(benchmark=benchmark, training_pool=training_pool)


def _fisher_yates(items: list, rng: random.Random) -> None:
    for i in range(len(items) - 1, 0, -1):
        j = rng.randrange(i + 1)
        items[i], items[j] = items[j], items[i]


def write_similarity_report(path: str | Path, report: Iterable[SimilarityRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for record in report:
            handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False))
            handle.write("\n")
            count += 1
    return count


def read_similarity_report(path: str | Path) -> list[SimilarityRecord]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                SimilarityRecord(
                    candidate_id=obj["candidate_id"],
                    nearest_train_id=obj["nearest_train_id"],
                    cosine=float(obj["cosine"]),
                )
            )
    return records
