"""Inter-annotator agreement statistics.

The label matrix is item-major: ``matrix[item][rater]`` is a hashable
label or None for missing. Everything here is pure and deterministic.
Ties in majority votes are surfaced as an explicit marker, never silently
broken -- silent tie-breaking would contaminate agreement numbers.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence


class AgreementError(Exception):
    pass


class UndefinedStatisticError(AgreementError):
    pass


class _Tie:
    """Singleton marker for an exactly tied vote."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "TIE"


TIE = _Tie()

Label = Hashable
LabelMatrix = Sequence[Sequence[Label | None]]


def _validate_matrix(matrix: LabelMatrix, min_raters: int = 2) -> None:
    if not matrix:
        raise AgreementError("empty label matrix")
    widths = {len(row) for row in matrix}
    if len(widths) != 1:
        raise AgreementError("ragged label matrix")
    if widths.pop() < min_raters:
        raise AgreementError(f"need at least {min_raters} raters")


def krippendorff_alpha(matrix: LabelMatrix) -> float:
    """Krippendorff's alpha for nominal data with missing values.

    Built on the coincidence-matrix formulation: each item with m >= 2
    labels contributes 1/(m-1) per ordered label pair, observed
    disagreement is the off-diagonal coincidence mass, and expected
    disagreement comes from the label margins. Perfect agreement yields
    exactly 1.0.
    """
    _validate_matrix(matrix)
    coincidences: Counter = Counter()
    for row in matrix:
        values = [value for value in row if value is not None]
        m = len(values)
        if m < 2:
            continue
        weight = 1.0 / (m - 1)
        for i, left in enumerate(values):
            for j, right in enumerate(values):
                if i != j:
                    coincidences[(left, right)] += weight
    if not coincidences:
        raise UndefinedStatisticError("no item carries two or more labels")

    margins: Counter = Counter()
    for (left, _right), mass in coincidences.items():
        margins[left] += mass
    n = sum(margins.values())

    observed = sum(mass for (left, right), mass in coincidences.items() if left != right)
    expected = sum(
        margins[left] * margins[right]
        for left in margins
        for right in margins
        if left != right
    ) / (n - 1)
    if expected == 0:
        raise UndefinedStatisticError("no label diversity; alpha undefined")
    if observed == 0:
        return 1.0
    return 1.0 - (observed / n) / (expected / n)


def majority_label(labels: Sequence[Label]) -> Label | _Tie:
    """The plurality label, or TIE when the top count is shared."""
    if not labels:
        raise AgreementError("majority of zero labels")
    counts = Counter(labels).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return TIE
    return counts[0][0]


@dataclass(frozen=True)
class AgreementReport:
    overall: float
    per_class: dict
    n_used: int
    n_ties_excluded: int

    def to_json_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_class": {str(label): rate for label, rate in sorted(
                self.per_class.items(), key=lambda kv: str(kv[0])
            )},
            "n_used": self.n_used,
            "n_ties_excluded": self.n_ties_excluded,
        }


def percent_agreement(
    candidate: Sequence[Label],
    reference: Sequence[Label | _Tie],
    stratify: bool = True,
) -> AgreementReport:
    """Match rate of candidate labels against reference labels.

    Items whose reference is TIE are excluded (and counted). With
    ``stratify``, per-class rates are computed over items whose reference
    is that class, so overall is their prevalence-weighted mean.
    """
    if len(candidate) != len(reference):
        raise AgreementError("candidate and reference labels must align")
    pairs = [(c, r) for c, r in zip(candidate, reference) if r is not TIE]
    ties = len(reference) - len(pairs)
    if not pairs:
        raise UndefinedStatisticError("no items remain after tie exclusion")
    matches = sum(1 for c, r in pairs if c == r)
    per_class: dict = {}
    if stratify:
        totals: Counter = Counter(r for _, r in pairs)
        hits: Counter = Counter(r for c, r in pairs if c == r)
        per_class = {label: hits[label] / total for label, total in totals.items()}
    return AgreementReport(
        overall=matches / len(pairs),
        per_class=per_class,
        n_used=len(pairs),
        n_ties_excluded=ties,
    )


def leave_one_out(matrix: LabelMatrix) -> dict[int, float | None]:
    """Per-rater agreement against the majority of the remaining raters.

    Items where the held-out rater is missing, or where the remaining
    raters' vote is empty or tied, are skipped. A rater with no eligible
    items maps to None.
    """
    _validate_matrix(matrix, min_raters=3)
    n_raters = len(matrix[0])
    out: dict[int, float | None] = {}
    for rater in range(n_raters):
        matches = eligible = 0
        for row in matrix:
            own = row[rater]
            if own is None:
                continue
            others = [row[i] for i in range(n_raters) if i != rater and row[i] is not None]
            if not others:
                continue
            consensus = majority_label(others)
            if consensus is TIE:
                continue
            eligible += 1
            if own == consensus:
                matches += 1
        out[rater] = matches / eligible if eligible else None
    return out


def matrix_from_records(
    labels_by_item: Mapping[str, Mapping[str, Label]],
    raters: Sequence[str] | None = None,
) -> tuple[LabelMatrix, list[str], list[str]]:
    """(matrix, item_ids, rater_ids) from nested item -> rater -> label maps."""
    item_ids = sorted(labels_by_item)
    if raters is None:
        seen: set[str] = set()
        for per_item in labels_by_item.values():
            seen.update(per_item)
        raters = sorted(seen)
    matrix = [
        [labels_by_item[item].get(rater) for rater in raters] for item in item_ids
    ]
    return matrix, item_ids, list(raters)
