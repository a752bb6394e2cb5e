"""Single entry point wiring every stage: ``how2 <subcommand>``.

No subcommand mutates its inputs; every run writes its outputs as new
files plus a manifest (config digest, input digests, versions) beside the
first output, so a rerun with identical digests and a warm gateway cache
reproduces outputs byte-identically.

Config precedence everywhere: command-line flags > environment variables
> config file.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .gateway import Gateway, GatewayConfig, GatewayError, RetryPolicy, load_gateway_config
from .records import (
    CorpusError,
    read_annotations,
    read_generations,
    read_instances,
    read_judgments,
    read_documents,
    write_jsonl,
)
from .templates import TemplateError
from .tokens import DEFAULT_SCHEME, UnknownSchemeError

ENDPOINT_ENV = "HOW2_ENDPOINT_URL"
MODEL_ENV = "HOW2_MODEL_NAME"

_ERROR_CATEGORIES = (
    (CorpusError, "parse"),
    (GatewayError, "gateway"),
    (TemplateError, "config"),
    (UnknownSchemeError, "config"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "config"),
)


def _fail(category: str, message: str) -> "NoReturn":  # noqa: F821
    click.echo(json.dumps({"error": {"category": category, "message": message}}), err=True)
    sys.exit(1)


def _run(fn):
    try:
        fn()
    except click.ClickException:
        raise
    except Exception as exc:  # categorize for scripting callers
        for exc_type, category in _ERROR_CATEGORIES:
            if isinstance(exc, exc_type):
                _fail(category, str(exc))
        raise


def _sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(primary_output: str | Path, command: str, inputs: list[str],
                   config_blob: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config_digest": hashlib.sha256(
            json.dumps(config_blob or {}, sort_keys=True).encode()
        ).hexdigest(),
        "input_digests": {str(p): _sha256_file(p) for p in inputs if Path(p).exists()},
        "versions": {
            "how2kit": __version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = Path(f"{primary_output}.manifest.json")
    path.write_text(json.dumps(manifest, indent=2) + "\n", "utf-8")
    return path


def _resolve_gateway(config_path: str | None, endpoint: str | None,
                     model: str | None) -> GatewayConfig:
    if config_path:
        config = load_gateway_config(config_path)
    else:
        config = GatewayConfig(endpoint_url="http://localhost:8000", model_name="default")
    env_endpoint = os.environ.get(ENDPOINT_ENV)
    env_model = os.environ.get(MODEL_ENV)
    if env_endpoint:
        config = replace(config, endpoint_url=env_endpoint)
    if env_model:
        config = replace(config, model_name=env_model)
    if endpoint:
        config = replace(config, endpoint_url=endpoint)
    if model:
        config = replace(config, model_name=model)
    return config


def _config_blob(config: GatewayConfig) -> dict:
    blob = {
        "endpoint_url": config.endpoint_url,
        "model_name": config.model_name,
        "temperature": config.temperature,
        "stop_sequences": list(config.stop_sequences),
        "max_tokens": config.max_tokens,
        "seed": config.seed,
    }
    return blob


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Mine, benchmark, judge, and reward goal-conditioned procedures."""


# -- mine ---------------------------------------------------------------------


@main.command()
@click.option("--docs", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--report", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--endpoint", help=f"override endpoint (also {ENDPOINT_ENV})")
@click.option("--model", help=f"override model name (also {MODEL_ENV})")
def mine(docs, out, report, config_path, endpoint, model):
    """Run the five-stage pipeline over a document file."""

    def run():
        from .mining import HeuristicsConfig, PipelineConfig, run_pipeline

        gateway_config = _resolve_gateway(config_path, endpoint, model)
        pipeline_config = PipelineConfig()
        if config_path:
            raw = _read_toml(config_path)
            heur = raw.get("heuristics", {})
            thresholds = {int(k): float(v) for k, v in heur.get("rep_thresholds", {}).items()}
            pipeline_config = PipelineConfig(
                heuristics=HeuristicsConfig(
                    min_steps=heur.get("min_steps", 5),
                    max_steps=heur.get("max_steps", 15),
                    rep_thresholds=thresholds or {2: 0.40, 3: 0.35, 4: 0.30},
                ),
                prompt_dir=raw.get("pipeline", {}).get("prompt_dir"),
                id_prefix=raw.get("pipeline", {}).get("id_prefix", "proc"),
            )
        documents = read_documents(docs)
        with Gateway(gateway_config) as gateway:
            result = run_pipeline(documents, gateway, pipeline_config)
        write_jsonl(out, result.instances)
        Path(report).write_text(
            json.dumps(result.report.to_json_dict(), indent=2) + "\n", "utf-8"
        )
        write_manifest(out, "mine", [docs], _config_blob(gateway_config))
        click.echo(f"{len(documents)} documents -> {len(result.instances)} instances")

    _run(run)


def _read_toml(path: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(Path(path).read_text("utf-8"))


# -- dedup / bench --------------------------------------------------------------


@main.command()
@click.option("--eval", "eval_path", required=True, type=click.Path(exists=True))
@click.option("--train", "train_path", required=True, type=click.Path(exists=True))
@click.option("--tau", default=0.65, show_default=True, type=float)
@click.option("--report", required=True, type=click.Path())
@click.option("--out", type=click.Path(), help="write retained eval instances here")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--endpoint")
@click.option("--model")
def dedup(eval_path, train_path, tau, report, out, config_path, endpoint, model):
    """Nearest-train similarity report and threshold filter."""

    def run():
        from .dedup import (
            dedup_filter,
            instance_embedding_text,
            nearest_train_similarity,
            write_similarity_report,
        )

        gateway_config = _resolve_gateway(config_path, endpoint, model)
        eval_instances = read_instances(eval_path)
        train_instances = read_instances(train_path)
        with Gateway(gateway_config) as gateway:
            eval_vecs = gateway.embed([instance_embedding_text(i) for i in eval_instances])
            train_vecs = gateway.embed([instance_embedding_text(i) for i in train_instances])
        records = nearest_train_similarity(
            eval_vecs,
            train_vecs,
            [i.id for i in eval_instances],
            [i.id for i in train_instances],
        )
        write_similarity_report(report, records)
        retained = set(dedup_filter(records, tau))
        if out:
            write_jsonl(out, [i for i in eval_instances if i.id in retained])
        write_manifest(report, "dedup", [eval_path, train_path], _config_blob(gateway_config))
        click.echo(f"{len(retained)}/{len(eval_instances)} retained at tau={tau}")

    _run(run)


@main.command()
@click.option("--in", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--per-topic", default=500, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--rest", type=click.Path(), help="write the non-benchmark pool here")
def bench(pool_path, per_topic, seed, out, rest):
    """Topic-balanced benchmark split by seeded shuffle."""

    def run():
        from .dedup import sample_balanced

        instances = read_instances(pool_path)
        split = sample_balanced(instances, per_topic=per_topic, seed=seed)
        write_jsonl(out, split.benchmark)
        if rest:
            write_jsonl(rest, split.training_pool)
        write_manifest(out, "bench", [pool_path], {"per_topic": per_topic, "seed": seed})
        click.echo(f"benchmark {len(split.benchmark)}, pool {len(split.training_pool)}")

    _run(run)


# -- generate / judge / score / metrics -----------------------------------------


@main.command()
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True))
@click.option("--model", "config_path", required=True, type=click.Path(exists=True),
              help="gateway TOML for the generator endpoint")
@click.option("--variant", default="instruct", show_default=True,
              type=click.Choice(["base", "instruct", "reasoning"]))
@click.option("--out", required=True, type=click.Path())
@click.option("--scheme", default=DEFAULT_SCHEME, show_default=True)
@click.option("--shots", "shots_path", type=click.Path(exists=True))
def generate(bench_path, config_path, variant, out, scheme, shots_path):
    """Generate one procedure per benchmark instance."""

    def run():
        from .harness import load_exemplar_shots, run_generation

        gateway_config = _resolve_gateway(config_path, None, None)
        instances = read_instances(bench_path)
        shots = load_exemplar_shots(shots_path)
        with Gateway(gateway_config) as gateway:
            outcome = run_generation(
                instances,
                gateway,
                model_id=gateway_config.model_name,
                variant=variant,
                scheme=scheme,
                shots=shots,
            )
        write_jsonl(out, outcome.records)
        write_manifest(out, "generate", [bench_path], _config_blob(gateway_config))
        click.echo(
            f"{len(outcome.records)} records, {len(outcome.failed_instance_ids)} failed"
        )

    _run(run)


@main.command()
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True))
@click.option("--gens", "gens_path", required=True, type=click.Path(exists=True))
@click.option("--judge", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def judge(bench_path, gens_path, config_path, out):
    """Judge generations for critical failures."""

    def run():
        from .scoring import judge_many

        gateway_config = _resolve_gateway(config_path, None, None)
        instances = {i.id: i for i in read_instances(bench_path)}
        generations = read_generations(gens_path)
        pairs = []
        for gen in generations:
            inst = instances.get(gen.instance_id)
            if inst is None:
                _fail("parse", f"generation references unknown instance {gen.instance_id!r}")
            pairs.append((inst, gen))
        with Gateway(gateway_config) as gateway:
            run_result = judge_many(pairs, gateway)
        write_jsonl(out, run_result.judgments)
        write_manifest(out, "judge", [bench_path, gens_path], _config_blob(gateway_config))
        click.echo(
            f"{len(run_result.judgments)} judgments, {len(run_result.invalid)} invalid"
        )

    _run(run)


@main.command()
@click.option("--judgments", "judgments_path", required=True, type=click.Path(exists=True))
@click.option("--bench", "bench_path", type=click.Path(exists=True),
              help="attach per-topic breakdown")
@click.option("--gens", "gens_path", type=click.Path(exists=True),
              help="attach token averages")
@click.option("--report", "report_path", type=click.Path())
def score(judgments_path, bench_path, gens_path, report_path):
    """Aggregate judgments into the dataset success rate."""

    def run():
        from .scoring import score as score_fn

        judgments = read_judgments(judgments_path)
        topic_by_instance = None
        if bench_path:
            topic_by_instance = {i.id: i.topic for i in read_instances(bench_path)}
        generations = read_generations(gens_path) if gens_path else None
        summary = score_fn(judgments, topic_by_instance, generations)
        if report_path:
            Path(report_path).write_text(
                json.dumps(summary.to_json_dict(), indent=2) + "\n", "utf-8"
            )
            write_manifest(report_path, "score", [judgments_path])
        click.echo(f"{summary.overall:.4f}")

    _run(run)


@main.command()
@click.option("--gens", "gens_path", required=True, type=click.Path(exists=True))
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
def metrics(gens_path, bench_path, report_path):
    """Formatting proxy metrics over a generation file."""

    def run():
        from .scoring import format_proxy_report

        generations = read_generations(gens_path)
        instances = {i.id: i for i in read_instances(bench_path)}
        report = format_proxy_report(generations, instances)
        Path(report_path).write_text(
            json.dumps(report.to_json_dict(), indent=2) + "\n", "utf-8"
        )
        write_manifest(report_path, "metrics", [gens_path, bench_path])
        click.echo(json.dumps(report.to_json_dict()))

    _run(run)


# -- agree ----------------------------------------------------------------------


@main.command()
@click.option("--annotations", "annotations_path", required=True, type=click.Path(exists=True))
@click.option("--judgments", "judgments_path", type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
def agree(annotations_path, judgments_path, report_path):
    """Agreement statistics: alpha, leave-one-out, judge-vs-majority."""

    def run():
        from .agreement import (
            TIE,
            krippendorff_alpha,
            leave_one_out,
            majority_label,
            matrix_from_records,
            percent_agreement,
        )
        from .records import HAS_FAILURE, NO_FAILURE

        annotations = read_annotations(annotations_path)
        labels_by_item: dict[str, dict[str, str]] = {}
        for record in annotations:
            label = HAS_FAILURE if record.failures else NO_FAILURE
            labels_by_item.setdefault(record.instance_id, {})[record.annotator_id] = label
        matrix, item_ids, rater_ids = matrix_from_records(labels_by_item)
        out: dict = {
            "n_items": len(item_ids),
            "n_annotators": len(rater_ids),
            "krippendorff_alpha": krippendorff_alpha(matrix),
        }
        if len(rater_ids) >= 3:
            out["leave_one_out"] = {
                rater_ids[idx]: rate for idx, rate in leave_one_out(matrix).items()
            }
        if judgments_path:
            judgments = read_judgments(judgments_path)
            judge_label: dict[str, str] = {}
            for judgment in judgments:
                previous = judge_label.get(judgment.instance_id)
                if previous is not None and previous != judgment.binary:
                    _fail("parse", f"conflicting judgments for {judgment.instance_id!r}")
                judge_label[judgment.instance_id] = judgment.binary
            shared = [item for item in item_ids if item in judge_label]
            majorities = [
                majority_label([v for v in matrix[item_ids.index(item)] if v is not None])
                for item in shared
            ]
            candidate = [judge_label[item] for item in shared]
            agreement = percent_agreement(candidate, majorities, stratify=True)
            out["judge_agreement"] = agreement.to_json_dict()
        Path(report_path).write_text(json.dumps(out, indent=2) + "\n", "utf-8")
        write_manifest(
            report_path, "agree",
            [annotations_path] + ([judgments_path] if judgments_path else []),
        )
        click.echo(f"alpha={out['krippendorff_alpha']:.4f}")

    _run(run)


# -- analyze ---------------------------------------------------------------------


@main.group()
def analyze() -> None:
    """Regression and rank-correlation analyses."""


@analyze.command()
@click.option("--judgments", "judgments_path", required=True, type=click.Path(exists=True))
@click.option("--gens", "gens_path", required=True, type=click.Path(exists=True))
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--l2", "l2_lambda", default=1e-6, show_default=True, type=float)
def regress(judgments_path, gens_path, bench_path, report_path, l2_lambda):
    """Topic-fixed-effect logistic regression; CSV of OR and Wald CIs."""

    def run():
        import csv

        from .analysis import (
            RegressionSpec,
            examples_from_records,
            fit_logistic,
            odds_ratios,
        )

        judgments = read_judgments(judgments_path)
        generations = read_generations(gens_path)
        instances = {i.id: i for i in read_instances(bench_path)}
        examples, excluded = examples_from_records(judgments, generations, instances)
        fit = fit_logistic(examples, RegressionSpec(l2_lambda=l2_lambda), excluded)
        rows = odds_ratios(fit)
        with open(report_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["coefficient", "estimate", "se", "odds_ratio", "ci_low", "ci_high",
                 "unreliable"]
            )
            for row in rows:
                writer.writerow(
                    [row.name, f"{row.coefficient:.6f}", f"{row.standard_error:.6f}",
                     f"{row.odds_ratio:.6f}", f"{row.ci_low:.6f}", f"{row.ci_high:.6f}",
                     str(row.unreliable).lower()]
                )
        write_manifest(report_path, "analyze regress",
                       [judgments_path, gens_path, bench_path])
        click.echo(f"n_used={fit.n_used} n_excluded={fit.n_excluded} "
                   f"converged={fit.converged}")

    _run(run)


@analyze.command()
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True),
              help="JSON mapping checkpoint -> score")
@click.option("--ppls", "ppls_path", required=True, type=click.Path(exists=True),
              help="JSON mapping checkpoint -> perplexity")
@click.option("--report", "report_path", required=True, type=click.Path())
def rankcorr(scores_path, ppls_path, report_path):
    """Spearman correlation of checkpoint rankings by score vs perplexity."""

    def run():
        from .analysis import CheckpointRecord, rank_checkpoints

        scores = json.loads(Path(scores_path).read_text("utf-8"))
        ppls = json.loads(Path(ppls_path).read_text("utf-8"))
        if set(scores) != set(ppls):
            _fail("parse", "scores and ppls cover different checkpoints")
        records = [
            CheckpointRecord(checkpoint=name, score=float(scores[name]),
                             ppl=float(ppls[name]))
            for name in sorted(scores)
        ]
        result = rank_checkpoints(records)
        Path(report_path).write_text(
            json.dumps(result.to_json_dict(), indent=2) + "\n", "utf-8"
        )
        write_manifest(report_path, "analyze rankcorr", [scores_path, ppls_path])
        click.echo(f"rho={result.rho:.4f}")

    _run(run)


# -- services ---------------------------------------------------------------------


@main.command("reward-serve")
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True))
@click.option("--judge", "config_path", required=True, type=click.Path(exists=True))
@click.option("--port", default=8100, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--scheme", default=DEFAULT_SCHEME, show_default=True)
def reward_serve(bench_path, config_path, port, host, scheme):
    """Serve POST /v1/reward for RL trainers."""

    def run():
        import uvicorn

        from .reward_service import create_app

        gateway_config = _resolve_gateway(config_path, None, None)
        instances = {i.id: i for i in read_instances(bench_path)}
        gateway = Gateway(gateway_config)
        app = create_app(instances, gateway, scheme=scheme)
        uvicorn.run(app, host=host, port=port, log_level="warning")

    _run(run)


@main.command("annotate-serve")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=3, show_default=True, type=int,
              help="annotators per instance")
@click.option("--port", default=8200, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--store", "store_path", default="annotations.jsonl", show_default=True,
              type=click.Path())
@click.option("--clock-scale", default=1.0, show_default=True, type=float,
              help="server seconds per real second (testing aid)")
def annotate_serve(pool_path, k, port, host, store_path, clock_scale):
    """Serve the human annotation backend."""

    def run():
        import uvicorn

        from .annotation import (
            ADMIN_TOKEN_ENV,
            AnnotationService,
            AnnotationStore,
            create_app,
            read_pairs,
            scaled_clock,
        )

        pairs = read_pairs(pool_path)
        clock = scaled_clock(clock_scale) if clock_scale != 1.0 else time.monotonic
        service = AnnotationService(
            pairs,
            AnnotationStore(store_path),
            annotators_per_instance=k,
            clock=clock,
        )
        app = create_app(service, admin_token=os.environ.get(ADMIN_TOKEN_ENV))
        uvicorn.run(app, host=host, port=port, log_level="warning")

    _run(run)


if __name__ == "__main__":
    main()
