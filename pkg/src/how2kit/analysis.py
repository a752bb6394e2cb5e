"""Instance-level regression and rank-correlation analyses.

The logistic model predicts the per-example no_failure label from the
reference step count, the resource count, the gen/ref token ratio in
percentage points, and per-topic intercept offsets against a baseline
topic. The problem is small and dense (at most 17 coefficients), so a
damped Newton solver with the exact Hessian is both the optimizer and the
source of Wald standard errors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence  # noqa: F401

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

COVARIATE_NAMES = ("steps", "resources", "ratio")


class AnalysisError(Exception):
    pass


class UndefinedStatisticError(AnalysisError):
    pass


@dataclass(frozen=True)
class RegressionExample:
    steps: int
    resources: int
    ratio: float  # 100 * gen_tokens / ref_tokens
    topic: str
    label: int  # 1 = no_failure


@dataclass(frozen=True)
class RegressionSpec:
    l2_lambda: float = 1e-6  # non-intercept coefficients only
    baseline_topic: str | None = None  # default: lexicographically first
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")


@dataclass
class RegressionFit:
    coefficient_names: list[str]
    coefficients: np.ndarray
    covariance: np.ndarray
    n_used: int
    n_excluded: int
    baseline_topic: str
    log_likelihood: float
    converged: bool
    unreliable: bool = False
    ll_trace: list[float] = field(default_factory=list)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def design_matrix(
    examples: Sequence[RegressionExample], baseline_topic: str
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    topics = sorted({ex.topic for ex in examples})
    if baseline_topic not in topics:
        raise AnalysisError(f"baseline topic {baseline_topic!r} absent from data")
    dummy_topics = [t for t in topics if t != baseline_topic]
    names = ["intercept", *COVARIATE_NAMES, *[f"topic:{t}" for t in dummy_topics]]
    rows = np.zeros((len(examples), len(names)))
    y = np.zeros(len(examples))
    topic_col = {topic: 4 + i for i, topic in enumerate(dummy_topics)}
    for i, ex in enumerate(examples):
        rows[i, 0] = 1.0
        rows[i, 1] = ex.steps
        rows[i, 2] = ex.resources
        rows[i, 3] = ex.ratio
        if ex.topic != baseline_topic:
            rows[i, topic_col[ex.topic]] = 1.0
        y[i] = ex.label
    return rows, y, names


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def penalized_log_likelihood(
    beta: np.ndarray, X: np.ndarray, y: np.ndarray, penalty: np.ndarray
) -> float:
    z = X @ beta
    # log(sigma(z)) and log(1 - sigma(z)) in a stable form
    ll = float(np.sum(y * z - np.logaddexp(0.0, z)))
    return ll - 0.5 * float(beta @ (penalty * beta))


def gradient(
    beta: np.ndarray, X: np.ndarray, y: np.ndarray, penalty: np.ndarray
) -> np.ndarray:
    p = _sigmoid(X @ beta)
    return X.T @ (y - p) - penalty * beta


def newton_logistic(
    X: np.ndarray,
    y: np.ndarray,
    penalty: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> tuple[np.ndarray, np.ndarray, float, bool, list[float]]:
    """Damped-Newton maximizer of the penalized log-likelihood.

    Deterministic from a zero start; step-halving keeps the objective
    non-decreasing. Returns (beta, covariance, ll, converged, ll trace);
    the covariance is the inverse Hessian at the stopping point.
    """
    beta = np.zeros(X.shape[1])
    ll = penalized_log_likelihood(beta, X, y, penalty)
    trace = [ll]
    converged = False
    for _ in range(max_iter):
        grad = gradient(beta, X, y, penalty)
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        p = _sigmoid(X @ beta)
        w = p * (1.0 - p)
        hessian = X.T @ (X * w[:, None]) + np.diag(penalty)
        try:
            direction = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(hessian, grad, rcond=None)[0]
        step = 1.0
        for _halving in range(40):
            candidate = beta + step * direction
            candidate_ll = penalized_log_likelihood(candidate, X, y, penalty)
            if candidate_ll >= ll:
                break
            step *= 0.5
        else:
            break  # no ascent direction left; treat as stalled
        beta, ll = candidate, candidate_ll
        trace.append(ll)

    p = _sigmoid(X @ beta)
    w = np.maximum(p * (1.0 - p), 1e-12)
    hessian = X.T @ (X * w[:, None]) + np.diag(penalty)
    try:
        covariance = np.linalg.inv(hessian)
    except np.linalg.LinAlgError:
        # separation: Hessian singular at the boundary; callers see the
        # unreliable flag, but pseudo-inverse keeps the shape usable
        covariance = np.linalg.pinv(hessian)
    covariance = (covariance + covariance.T) / 2.0  # symmetrize rounding noise
    return beta, covariance, ll, converged, trace


def fit_logistic(
    examples: Sequence[RegressionExample],
    spec: RegressionSpec | None = None,
    n_excluded: int = 0,
) -> RegressionFit:
    """Fit the topic-fixed-effect model over usable examples.

    Coefficient blow-up (complete separation) or non-convergence flags
    the fit unreliable instead of raising, since the point estimates may
    still be inspected; the flag propagates into the odds-ratio rows.
    """
    spec = spec or RegressionSpec()
    if not examples:
        raise AnalysisError("no usable examples")
    labels = {ex.label for ex in examples}
    if labels - {0, 1}:
        raise AnalysisError("labels must be 0/1")
    if len(labels) < 2:
        raise AnalysisError("need at least one example of each class")

    baseline = spec.baseline_topic or min({ex.topic for ex in examples})
    X, y, names = design_matrix(examples, baseline)
    penalty = np.full(len(names), spec.l2_lambda)
    penalty[0] = 0.0  # intercept unpenalized

    beta, covariance, ll, converged, trace = newton_logistic(
        X, y, penalty, tol=spec.tol, max_iter=spec.max_iter
    )
    # |beta| past sigmoid saturation means the optimum ran to the boundary
    # (complete separation); a rank-deficient design leaves a null direction
    # with arbitrary coefficients. Wald intervals are meaningless either way.
    rank_deficient = np.linalg.matrix_rank(X) < X.shape[1]
    unreliable = bool(np.max(np.abs(beta)) > 100.0) or not converged or rank_deficient
    if unreliable:
        logger.warning(
            "logistic fit flagged unreliable (converged=%s, max|beta|=%.3g)",
            converged, float(np.max(np.abs(beta))),
        )
    return RegressionFit(
        coefficient_names=names,
        coefficients=beta,
        covariance=covariance,
        n_used=len(examples),
        n_excluded=n_excluded,
        baseline_topic=baseline,
        log_likelihood=ll,
        converged=converged,
        unreliable=unreliable,
        ll_trace=trace,
    )


@dataclass(frozen=True)
class OddsRatio:
    name: str
    coefficient: float
    standard_error: float
    odds_ratio: float
    ci_low: float
    ci_high: float
    unreliable: bool


def _safe_exp(x: float) -> float:
    # CI bounds on a degenerate fit can exceed the float exponent range
    return math.exp(x) if x < 709.0 else math.inf


def odds_ratios(fit: RegressionFit, level: float = 0.95) -> list[OddsRatio]:
    """exp(beta) with Wald intervals exp(beta +/- z * se) per coefficient."""
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    out = []
    errors = fit.standard_errors
    for i, name in enumerate(fit.coefficient_names):
        beta = float(fit.coefficients[i])
        se = float(errors[i])
        out.append(
            OddsRatio(
                name=name,
                coefficient=beta,
                standard_error=se,
                odds_ratio=_safe_exp(beta),
                ci_low=_safe_exp(beta - z * se),
                ci_high=_safe_exp(beta + z * se),
                unreliable=fit.unreliable,
            )
        )
    return out


# -- rank correlation --------------------------------------------------------


def _average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        shared = (i + j) / 2.0 + 1.0  # average of ranks i+1 .. j+1
        for k in range(i, j + 1):
            ranks[order[k]] = shared
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman's rho: Pearson correlation of average ranks."""
    if len(xs) != len(ys):
        raise AnalysisError("sequences must have equal length")
    if len(xs) < 2:
        raise AnalysisError("need at least two observations")
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        raise UndefinedStatisticError("rank correlation undefined for constant input")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    mean_x = sum(rx) / len(rx)
    mean_y = sum(ry) / len(ry)
    cov = sum((a - mean_x) * (b - mean_y) for a, b in zip(rx, ry))
    var_x = sum((a - mean_x) ** 2 for a in rx)
    var_y = sum((b - mean_y) ** 2 for b in ry)
    return cov / math.sqrt(var_x * var_y)


@dataclass(frozen=True)
class CheckpointRecord:
    checkpoint: str
    score: float
    ppl: float


@dataclass(frozen=True)
class RankCorrelation:
    checkpoints: list[str]
    score_ranks: list[float]
    ppl_ranks: list[float]
    rho: float

    def to_json_dict(self) -> dict:
        return {
            "checkpoints": self.checkpoints,
            "score_ranks": self.score_ranks,
            "ppl_ranks": self.ppl_ranks,
            "rho": self.rho,
        }


def rank_checkpoints(records: Sequence[CheckpointRecord]) -> RankCorrelation:
    """Rank checkpoints by score (higher better) and by perplexity (lower
    better), rank 1 = best on both axes, and correlate the two rankings."""
    if len(records) < 2:
        raise AnalysisError("need at least two checkpoints")
    score_ranks = _average_ranks([-r.score for r in records])
    ppl_ranks = _average_ranks([r.ppl for r in records])
    return RankCorrelation(
        checkpoints=[r.checkpoint for r in records],
        score_ranks=score_ranks,
        ppl_ranks=ppl_ranks,
        rho=spearman(score_ranks, ppl_ranks),
    )


# -- wiring from records -------------------------------------------------------


def examples_from_records(
    judgments: Sequence,
    generations: Sequence,
    instances_by_id: Mapping[str, object],
) -> tuple[list[RegressionExample], int]:
    """(usable examples, excluded count) joined on generation ids.

    Records with a missing instance or generation, or an undefined token
    ratio (ref_tokens = 0), are excluded and counted.
    """
    from .records import NO_FAILURE  # local import avoids a cycle

    gen_by_id = {gen.generation_id: gen for gen in generations}
    examples: list[RegressionExample] = []
    excluded = 0
    for judgment in judgments:
        gen = gen_by_id.get(judgment.generation_id)
        inst = instances_by_id.get(judgment.instance_id)
        if gen is None or inst is None or gen.ref_tokens <= 0:
            excluded += 1
            continue
        examples.append(
            RegressionExample(
                steps=len(inst.steps),
                resources=len(inst.resources),
                ratio=100.0 * gen.gen_tokens / gen.ref_tokens,
                topic=inst.topic,
                label=1 if judgment.binary == NO_FAILURE else 0,
            )
        )
    return examples, excluded
