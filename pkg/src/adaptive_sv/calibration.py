"""Per-group decision thresholds at a common false-acceptance target.

A group (gender, age group, ...) gets the smallest threshold at which its own
FAR meets the target. The "single" threshold shared by every group is the
largest of those, since it is the only one at which all groups meet the
target; comparing FRR at both shows what group-specific thresholds buy.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InvariantError
from .scoring import ScoreSet, cosine_similarity, eer, far_at, frr_at, frr_increase_pct, supremum

__all__ = [
    "GroupKey",
    "GroupThreshold",
    "GroupThresholdTable",
    "GroupComparison",
    "CalibrationReport",
    "EetGrouping",
    "Decision",
    "threshold_for_far",
    "interpolated_far_threshold",
    "calibrate_groups",
    "compare_single_vs_adaptive",
    "frr_reduction_pct",
    "group_by_eet",
    "verify",
]


@dataclass(frozen=True, order=True)
class GroupKey:
    dimension: str
    value: str

    def __post_init__(self):
        if not self.value:
            raise DataError("group value must be non-empty")

    def __str__(self):
        return f"{self.dimension}:{self.value}"

    @classmethod
    def coerce(cls, key, dimension="custom") -> "GroupKey":
        if isinstance(key, GroupKey):
            return key
        text = str(key)
        if ":" in text:
            dim, value = text.split(":", 1)
            return cls(dim, value)
        return cls(dimension, text)


@dataclass(frozen=True)
class GroupThreshold:
    key: GroupKey
    threshold: float
    far: float
    frr: float
    far_at_single: float
    frr_at_single: float


@dataclass(frozen=True)
class GroupThresholdTable:
    far_target: float
    rows: tuple[GroupThreshold, ...]
    single_threshold: float

    def row(self, key) -> GroupThreshold:
        for r in self.rows:
            if r.key == key:
                return r
        raise KeyError(key)

    def __contains__(self, key):
        return any(r.key == key for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "far_target": self.far_target,
            "groups": [
                {
                    "dimension": r.key.dimension,
                    "value": r.key.value,
                    "threshold": r.threshold,
                    "far": r.far,
                    "frr": r.frr,
                    "far_at_single": r.far_at_single,
                    "frr_at_single": r.frr_at_single,
                }
                for r in self.rows
            ],
            "single_threshold": self.single_threshold,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupThresholdTable":
        try:
            rows = tuple(
                GroupThreshold(
                    GroupKey(g["dimension"], g["value"]),
                    float(g["threshold"]),
                    float(g["far"]),
                    float(g["frr"]),
                    float(g.get("far_at_single", np.nan)),
                    float(g.get("frr_at_single", np.nan)),
                )
                for g in d["groups"]
            )
            return cls(float(d["far_target"]), rows, float(d["single_threshold"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed threshold table: {exc}") from exc


def _check_far_target(far_target):
    if not 0.0 < far_target <= 1.0:
        raise DataError(f"FAR target must lie in (0, 1], got {far_target}")


def threshold_for_far(scores: ScoreSet, far_target: float) -> float:
    """Smallest candidate threshold whose FAR does not exceed ``far_target``.

    Candidates are the distinct nontarget scores plus the float just above the
    largest one (where FAR is 0).
    """
    _check_far_target(far_target)
    non = scores.nontarget
    if non.size == 0:
        raise DataError("threshold_for_far needs nontarget scores")
    candidates = np.append(np.unique(non), supremum(non[-1]))
    far = (non.size - np.searchsorted(non, candidates, side="left")) / non.size
    # FAR is non-increasing over the ascending candidates
    return float(candidates[int(np.argmax(far <= far_target))])


def interpolated_far_threshold(scores: ScoreSet, far_target: float) -> float:
    """Threshold where the piecewise-linear FAR curve reaches ``far_target``.

    Reading thresholds off a plotted FAR curve gives this value; it is reported
    next to the discrete threshold for comparison with figures.
    """
    _check_far_target(far_target)
    non = scores.nontarget
    if non.size == 0:
        raise DataError("interpolated_far_threshold needs nontarget scores")
    thresholds = np.append(np.unique(non), supremum(non[-1]))
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    # np.interp wants increasing x; FAR decreases along the thresholds
    return float(np.interp(far_target, far[::-1], thresholds[::-1]))


def calibrate_groups(grouped: Mapping, far_target: float, dimension="custom") -> GroupThresholdTable:
    """Threshold table for ``grouped`` (GroupKey or tag -> ScoreSet).

    Rows are sorted by key so the table does not depend on input order.
    """
    _check_far_target(far_target)
    if not grouped:
        raise DataError("no groups to calibrate")
    keyed = {}
    for key, scores in grouped.items():
        key = GroupKey.coerce(key, dimension)
        if scores.target.size == 0 or scores.nontarget.size == 0:
            raise DataError(f"group {key} needs both target and nontarget scores; got sizes {scores.sizes}")
        keyed[key] = scores
    thresholds = {k: threshold_for_far(s, far_target) for k, s in keyed.items()}
    single = max(thresholds.values())
    rows = tuple(
        GroupThreshold(
            key,
            thresholds[key],
            far_at(keyed[key], thresholds[key]),
            frr_at(keyed[key], thresholds[key]),
            far_at(keyed[key], single),
            frr_at(keyed[key], single),
        )
        for key in sorted(keyed)
    )
    return GroupThresholdTable(far_target, rows, single)


def frr_reduction_pct(frr_single: float, frr_adaptive: float) -> float:
    """Percent of the single-threshold FRR removed by the adaptive threshold."""
    if frr_single == 0:
        raise DataError("undefined relative reduction: single-threshold FRR is zero")
    return 100.0 * (1.0 - frr_adaptive / frr_single)


@dataclass(frozen=True)
class GroupComparison:
    key: GroupKey
    threshold: float
    frr_adaptive: float
    frr_single: float
    increase_pct: float | None
    reduction_pct: float | None


@dataclass(frozen=True)
class CalibrationReport:
    table: GroupThresholdTable
    groups: tuple[GroupComparison, ...]

    def to_dict(self) -> dict:
        return {
            "far_target": self.table.far_target,
            "single_threshold": self.table.single_threshold,
            "groups": [
                {
                    "dimension": g.key.dimension,
                    "value": g.key.value,
                    "threshold": g.threshold,
                    "frr_adaptive": g.frr_adaptive,
                    "frr_single": g.frr_single,
                    "frr_increase_pct": g.increase_pct,
                    "frr_reduction_pct": g.reduction_pct,
                }
                for g in self.groups
            ],
        }


def compare_single_vs_adaptive(table: GroupThresholdTable) -> CalibrationReport:
    """FRR of every group at its own threshold versus at the single threshold.

    Raises:
      InvariantError: a group misses the FAR target at its own threshold, or
        its adaptive FRR exceeds the single-threshold FRR.
    """
    out = []
    for r in table.rows:
        if r.far > table.far_target:
            raise InvariantError(f"group {r.key}: FAR {r.far} exceeds target {table.far_target} at its own threshold")
        if r.threshold > table.single_threshold or r.frr > r.frr_at_single:
            raise InvariantError(f"group {r.key}: adaptive threshold is worse than the single threshold")
        increase = frr_increase_pct(r.frr, r.frr_at_single) if r.frr > 0 else None
        reduction = frr_reduction_pct(r.frr_at_single, r.frr) if r.frr_at_single > 0 else None
        out.append(GroupComparison(r.key, r.threshold, r.frr, r.frr_at_single, increase, reduction))
    return CalibrationReport(table, tuple(out))


@dataclass(frozen=True)
class EetGrouping:
    eets: dict
    tolerance: float
    groups: tuple[tuple, ...]

    def group_of(self, grade):
        for i, g in enumerate(self.groups):
            if grade in g:
                return i
        raise KeyError(grade)


def group_by_eet(per_grade: Mapping, tolerance: float = 0.05) -> EetGrouping:
    """Merge neighbouring grades whose EER thresholds lie within ``tolerance``.

    Grades are visited in sorted order; a grade joins the current group while
    the group's EET spread stays within ``tolerance``, otherwise it starts a
    new group.
    """
    if not per_grade:
        raise DataError("no grades to group")
    if tolerance < 0:
        raise DataError("tolerance must be non-negative")
    eets = {}
    for grade in sorted(per_grade):
        scores = per_grade[grade]
        if scores.target.size == 0 or scores.nontarget.size == 0:
            raise DataError(f"grade {grade!r} needs both target and nontarget scores")
        eets[grade] = eer(scores)[1]
    groups, current = [], []
    for grade, t in eets.items():
        values = [eets[g] for g in current] + [t]
        if current and max(values) - min(values) > tolerance:
            groups.append(tuple(current))
            current = []
        current.append(grade)
    groups.append(tuple(current))
    return EetGrouping(eets, tolerance, tuple(groups))


@dataclass(frozen=True)
class Decision:
    accept: bool
    score: float
    threshold: float
    context: GroupKey | None
    provenance: str  # "prior", "inferred" or "fallback"


def verify(
    test_emb,
    enrolled_emb,
    table: GroupThresholdTable,
    context: GroupKey | None = None,
    detector: Callable | None = None,
    fallback: str | None = "single",
) -> Decision:
    """Accept iff cosine(test, enrolled) >= threshold of the trial's context.

    The context comes from ``context`` when given (provenance "prior"), else
    from ``detector(test_emb)`` ("inferred"). A context missing from the table
    uses the single threshold when ``fallback == "single"``.
    """
    score = cosine_similarity(getattr(test_emb, "vector", test_emb), getattr(enrolled_emb, "vector", enrolled_emb))
    provenance = "prior"
    if context is None and detector is not None:
        context, provenance = detector(test_emb), "inferred"
    if context is not None and context in table:
        threshold = table.row(context).threshold
    elif fallback == "single":
        threshold, provenance = table.single_threshold, "fallback"
    else:
        raise DataError(f"no threshold for context {context} and no fallback configured")
    return Decision(score >= threshold, score, threshold, context, provenance)
