"""Trial scoring and verification error metrics.

Convention used everywhere: a trial is accepted iff ``score >= threshold``.
Thus ``FAR(t) = #{nontarget >= t} / #nontarget`` and
``FRR(t) = #{target < t} / #target``.
"""

from __future__ import annotations

import io
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = [
    "TrialPair",
    "ScoreSet",
    "DcfParams",
    "DetCurve",
    "cosine_similarity",
    "score_trials",
    "far_at",
    "frr_at",
    "det_sweep",
    "eer",
    "min_dcf",
    "frr_increase_pct",
]


@dataclass(frozen=True)
class TrialPair:
    target: bool
    enroll_id: str
    test_id: str
    group: str | None = None

    def __post_init__(self):
        if not self.enroll_id or not self.test_id:
            raise DataError("trial ids must be non-empty")


def _sorted_scores(values, name):
    arr = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} scores contain non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScoreSet:
    """Target and nontarget scores of a trial list, each sorted ascending."""

    target: np.ndarray
    nontarget: np.ndarray
    group: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "target", _sorted_scores(self.target, "target"))
        object.__setattr__(self, "nontarget", _sorted_scores(self.nontarget, "nontarget"))
        if self.target.size + self.nontarget.size == 0:
            raise DataError("a score set needs at least one score")

    @property
    def sizes(self) -> tuple[int, int]:
        return self.target.size, self.nontarget.size

    def require_both(self, what="operation"):
        if self.target.size == 0 or self.nontarget.size == 0:
            label = f" for group {self.group!r}" if self.group is not None else ""
            raise DataError(f"{what} needs both target and nontarget scores{label}; got sizes {self.sizes}")


@dataclass(frozen=True)
class DcfParams:
    p_target: float
    c_miss: float = 1.0
    c_fa: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise DataError(f"p_target must lie in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise DataError("detection costs must be positive")


@dataclass(frozen=True)
class DetCurve:
    """FAR/FRR at every distinct observed score plus one point past the maximum."""

    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    group: str | None = None

    def __len__(self):
        return self.thresholds.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("threshold,far,frr\n")
        for t, a, r in zip(self.thresholds, self.far, self.frr):
            buf.write(f"{t!r},{a!r},{r!r}\n")
        return buf.getvalue()


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("degenerate embedding: zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _vector(item):
    return getattr(item, "vector", item)


def score_trials(trials: Sequence[TrialPair], store: Mapping, by_group=False):
    """Cosine-score every trial against ``store`` (id -> vector or Embedding).

    Returns one :class:`ScoreSet`, or a dict ``group -> ScoreSet`` when
    ``by_group`` is set (groups ordered by first appearance).
    """
    missing = sorted({i for t in trials for i in (t.enroll_id, t.test_id) if i not in store})
    if missing:
        raise DataError(f"unresolved ids: {missing}")
    scores = np.array([cosine_similarity(_vector(store[t.enroll_id]), _vector(store[t.test_id])) for t in trials])
    labels = np.array([t.target for t in trials], dtype=bool)
    if not by_group:
        return ScoreSet(scores[labels], scores[~labels])
    groups = {}
    for i, t in enumerate(trials):
        groups.setdefault(t.group, []).append(i)
    out = {}
    for g, idx in groups.items():
        idx = np.array(idx)
        out[g] = ScoreSet(scores[idx][labels[idx]], scores[idx][~labels[idx]], group=g)
    return out


def _far(nontarget, thresholds):
    return (nontarget.size - np.searchsorted(nontarget, thresholds, side="left")) / nontarget.size


def _frr(target, thresholds):
    return np.searchsorted(target, thresholds, side="left") / target.size


def far_at(scores: ScoreSet, threshold) -> float:
    if scores.nontarget.size == 0:
        raise DataError("FAR needs nontarget scores")
    return float(_far(scores.nontarget, threshold))


def frr_at(scores: ScoreSet, threshold) -> float:
    if scores.target.size == 0:
        raise DataError("FRR needs target scores")
    return float(_frr(scores.target, threshold))


def supremum(x: float) -> float:
    """Smallest float strictly greater than ``x``; rejects everything <= x."""
    return float(np.nextafter(x, np.inf))


def det_sweep(scores: ScoreSet) -> DetCurve:
    scores.require_both("det_sweep")
    distinct = np.unique(np.concatenate([scores.target, scores.nontarget]))
    thresholds = np.append(distinct, supremum(distinct[-1]))
    return DetCurve(thresholds, _far(scores.nontarget, thresholds), _frr(scores.target, thresholds), scores.group)


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and the threshold where FAR and FRR cross.

    FAR - FRR starts at 1 - 0 and ends at 0 - FRR, so it changes sign on the
    sweep. An exact zero is returned as is; otherwise the two bracketing sweep
    points are joined linearly and the crossing of that segment is returned.
    """
    curve = det_sweep(scores)
    diff = curve.far - curve.frr
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(curve.far[i]), float(curve.thresholds[i])
    d0, d1 = diff[i - 1], diff[i]
    t = d0 / (d0 - d1)
    rate = curve.far[i - 1] + t * (curve.far[i] - curve.far[i - 1])
    threshold = curve.thresholds[i - 1] + t * (curve.thresholds[i] - curve.thresholds[i - 1])
    return float(rate), float(threshold)


def dcf_curve(curve: DetCurve, params: DcfParams) -> np.ndarray:
    cost = params.c_miss * params.p_target * curve.frr + params.c_fa * (1 - params.p_target) * curve.far
    if params.normalize:
        cost = cost / min(params.c_miss * params.p_target, params.c_fa * (1 - params.p_target))
    return cost


def min_dcf(scores: ScoreSet, params: DcfParams) -> float:
    return float(dcf_curve(det_sweep(scores), params).min())


def frr_increase_pct(frr_base: float, frr_other: float) -> float:
    """Relative change of ``frr_other`` over ``frr_base`` in percent."""
    if frr_base == 0:
        raise DataError("undefined relative increase: base FRR is zero")
    return 100.0 * (frr_other - frr_base) / frr_base
