"""Test-time metrics for a threshold: coverage, set size, fairness disparity.

Prediction sets are built from scores alone; group ids are read only to
compute the disparity.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .client_stats import filter_mask
from .domain import FairnessSpec

log = logging.getLogger(__name__)


def prediction_sets(scores: np.ndarray, lam: float) -> np.ndarray:
    """Boolean membership matrix ``scores <= lam``."""
    return np.asarray(scores) <= lam


def empirical_coverage(true_scores: np.ndarray, lam: float) -> float:
    true_scores = np.asarray(true_scores)
    if true_scores.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(true_scores <= lam))


def efficiency(scores: np.ndarray, lam: float) -> float:
    scores = np.asarray(scores)
    if scores.shape[0] == 0:
        return 0.0
    return float(prediction_sets(scores, lam).sum(axis=1).mean())


def conditional_coverages(
    scores: np.ndarray, labels: np.ndarray, groups: np.ndarray, lam: float, spec: FairnessSpec
) -> dict[tuple[int, int], float]:
    """Empirical ``Pr[y~ in C(x) | filter(g, y~)]`` for every supported pair."""
    member = prediction_sets(scores, lam)
    out = {}
    for y in spec.positive_labels:
        for g in spec.groups:
            mask = filter_mask(spec.metric, labels, groups, g, y)
            if mask.any():
                out[(g, y)] = float(member[mask, y].mean())
    return out


@dataclass(frozen=True)
class EvalReport:
    lam: float
    coverage: float
    efficiency: float
    disparity: float
    conditional: dict[tuple[int, int], float]
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "coverage": self.coverage,
            "efficiency": self.efficiency,
            "disparity": self.disparity,
            "conditional_coverage": {f"{g},{y}": v for (g, y), v in sorted(self.conditional.items())},
            "warnings": list(self.warnings),
        }


def worst_case_disparity(
    scores: np.ndarray,
    labels: np.ndarray,
    groups: np.ndarray,
    lam: float,
    spec: FairnessSpec,
) -> tuple[float, tuple[str, ...]]:
    """Largest absolute conditional-coverage difference over labels and group pairs.

    Pairs with no filtered test example are skipped and reported.
    """
    cond = conditional_coverages(scores, labels, groups, lam, spec)
    warnings = tuple(
        f"no test support for (g={g}, y~={y})"
        for y in spec.positive_labels
        for g in spec.groups
        if (g, y) not in cond
    )
    for w in warnings:
        log.warning(w)
    worst = 0.0
    for y in spec.positive_labels:
        values = [cond[(g, y)] for g in spec.groups if (g, y) in cond]
        for a, b in itertools.combinations(values, 2):
            worst = max(worst, abs(a - b))
    return worst, warnings


def evaluate(
    scores: np.ndarray, labels: np.ndarray, groups: np.ndarray, lam: float, spec: FairnessSpec
) -> EvalReport:
    labels = np.asarray(labels)
    true_scores = np.asarray(scores)[np.arange(len(labels)), labels]
    disparity, warnings = worst_case_disparity(scores, labels, groups, lam, spec)
    return EvalReport(
        lam=float(lam),
        coverage=empirical_coverage(true_scores, lam),
        efficiency=efficiency(scores, lam),
        disparity=disparity,
        conditional=conditional_coverages(scores, labels, groups, lam, spec),
        warnings=warnings,
    )
