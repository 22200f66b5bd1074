"""Client-local statistics for federated conformal fairness.

A client only ever reveals aggregates: per-(group, positive label) ratios for
the prior round, and per-group coverage bounds (or their pairwise
differences) for each threshold the server asks about.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .domain import ClientDataset, Example, FairnessMetric, FairnessSpec, passes_filter

if TYPE_CHECKING:
    from .server_agg import PriorEstimates

DEFAULT_WILSON_Z = 1.96


class Estimator(str, enum.Enum):
    INTERVAL = "interval"
    MLE = "mle"
    WILSON = "wilson"


class DegeneratePriorError(ValueError):
    pass


def apply_filter(metric: FairnessMetric, example: Example, g: int, tilde_y: int) -> bool:
    return passes_filter(FairnessMetric.parse(metric), example.true_label, example.group_id, g, tilde_y)


def filter_mask(metric: FairnessMetric, labels: np.ndarray, groups: np.ndarray, g: int, tilde_y: int) -> np.ndarray:
    """Vectorized :func:`apply_filter` over label/group columns."""
    in_group = groups == g
    if metric is FairnessMetric.DEMOGRAPHIC_PARITY:
        return in_group
    if metric is FairnessMetric.EQUAL_OPPORTUNITY:
        return in_group & (labels == tilde_y)
    return in_group & (labels != tilde_y)


@dataclass(frozen=True)
class GroupLabelCounts:
    n_k: int
    groups: tuple[int, ...]
    labels: tuple[int, ...]
    counts: np.ndarray  # (|G|, |Y+|)

    def n_gy(self, g: int, tilde_y: int) -> int:
        return int(self.counts[self.groups.index(g), self.labels.index(tilde_y)])


def group_label_counts(dataset: ClientDataset, spec: FairnessSpec) -> GroupLabelCounts:
    arr = dataset.calib_arrays
    counts = np.zeros((len(spec.groups), len(spec.positive_labels)), dtype=np.int64)
    for i, g in enumerate(spec.groups):
        for j, y in enumerate(spec.positive_labels):
            counts[i, j] = int(filter_mask(spec.metric, arr.labels, arr.groups, g, y).sum())
    return GroupLabelCounts(dataset.n_k, spec.groups, spec.positive_labels, counts)


def _label_scores(scores: np.ndarray, tilde_y: int) -> np.ndarray:
    scores = np.asarray(scores)
    return scores[:, tilde_y] if scores.ndim == 2 else scores


def alpha_count(
    dataset: ClientDataset,
    calib_scores: np.ndarray,
    spec: FairnessSpec,
    lam: float,
    g: int,
    tilde_y: int,
) -> int:
    """Filtered calibration examples whose score at the candidate label is <= lam.

    ``calib_scores`` is the (n_k, C) score matrix; the score is read at
    ``tilde_y``, not at the true label.
    """
    arr = dataset.calib_arrays
    mask = filter_mask(spec.metric, arr.labels, arr.groups, g, tilde_y)
    return int(np.count_nonzero(_label_scores(calib_scores, tilde_y)[mask] <= lam))


def alpha_counts(dataset: ClientDataset, calib_scores: np.ndarray, spec: FairnessSpec, lam: float, tilde_y: int) -> np.ndarray:
    arr = dataset.calib_arrays
    col = _label_scores(calib_scores, tilde_y) <= lam
    return np.array(
        [int(np.count_nonzero(col & filter_mask(spec.metric, arr.labels, arr.groups, g, tilde_y))) for g in spec.groups],
        dtype=np.int64,
    )


@dataclass(frozen=True)
class ClientPriorMessage:
    n_k: int
    lo_ratio: np.ndarray  # (|G|, |Y+|)
    hi_ratio: np.ndarray
    mle_ratio: np.ndarray


def prior_ratios(n_gy: np.ndarray, n_k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_gy = np.asarray(n_gy, dtype=np.float64)
    return n_gy / (n_k + 1), (n_gy + 1) / (n_k + 1), n_gy / n_k


def client_prior_message(dataset: ClientDataset, spec: FairnessSpec) -> ClientPriorMessage:
    counts = group_label_counts(dataset, spec)
    lo, hi, mle = prior_ratios(counts.counts, dataset.n_k)
    return ClientPriorMessage(dataset.n_k, lo, hi, mle)


def wilson_bounds(successes: int, trials: int, z: float = DEFAULT_WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for the proportion ``successes / trials``."""
    if trials <= 0:
        raise ValueError("wilson interval needs at least one trial")
    p = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (p + z2 / (2 * trials)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / trials + z2 / (4 * trials * trials))
    lo, hi = center - half, center + half
    if successes == 0:
        lo = 0.0
    if successes == trials:
        hi = 1.0
    return max(0.0, lo), min(1.0, hi)


@dataclass(frozen=True)
class CommEfficientMessage:
    """Per-group lower/upper terms for one positive label."""

    tilde_y: int
    estimator: Estimator
    l: np.ndarray
    u: np.ndarray
    n_k: int
    sigma_l: np.ndarray | None = None
    sigma_u: np.ndarray | None = None

    @property
    def num_reals(self) -> int:
        return self.l.size + self.u.size


@dataclass(frozen=True)
class EnhancedPrivacyMessage:
    """Pairwise gap matrix ``pw[a, b] = u'[a] - l'[b]`` for one positive label."""

    tilde_y: int
    estimator: Estimator
    pw: np.ndarray
    n_k: int
    sigma: np.ndarray | None = None

    @property
    def num_reals(self) -> int:
        return self.pw.size


ClientCgMessage = CommEfficientMessage | EnhancedPrivacyMessage


def comm_efficient_terms(
    alphas: np.ndarray,
    n_gy: np.ndarray,
    n_k: int,
    estimator: Estimator,
    tightened_lower: bool = True,
    z: float = DEFAULT_WILSON_Z,
) -> tuple[np.ndarray, np.ndarray]:
    """Client lower/upper terms from raw counts, one entry per group."""
    a = np.asarray(alphas, dtype=np.float64)
    m = np.asarray(n_gy, dtype=np.float64)
    estimator = Estimator(estimator)
    if estimator is Estimator.MLE:
        value = a / n_k
        return value, value.copy()
    if estimator is Estimator.INTERVAL:
        if tightened_lower:
            lower = a / (n_k + 1)
        else:
            lower = a * m / ((m + 1) * (n_k + 1))
        return lower, (a + 1) / (n_k + 1)
    lo_ratio, hi_ratio, _ = prior_ratios(m, n_k)
    lower = np.zeros_like(a)
    upper = hi_ratio.copy()
    for i, (ai, mi) in enumerate(zip(a.astype(int), m.astype(int))):
        if mi == 0:
            continue
        w_lo, w_hi = wilson_bounds(int(ai), int(mi), z)
        lower[i] = w_lo * lo_ratio[i]
        upper[i] = w_hi * hi_ratio[i]
    return lower, upper


def client_cg_comm_efficient(
    dataset: ClientDataset,
    calib_scores: np.ndarray,
    spec: FairnessSpec,
    lam: float,
    tilde_y: int,
    estimator: Estimator = Estimator.INTERVAL,
    tightened_lower: bool = True,
    z: float = DEFAULT_WILSON_Z,
) -> CommEfficientMessage:
    counts = group_label_counts(dataset, spec)
    n_gy = counts.counts[:, spec.positive_labels.index(tilde_y)]
    alphas = alpha_counts(dataset, calib_scores, spec, lam, tilde_y)
    lower, upper = comm_efficient_terms(alphas, n_gy, dataset.n_k, estimator, tightened_lower, z)
    return CommEfficientMessage(tilde_y, Estimator(estimator), lower, upper, dataset.n_k)


def prior_divisors(priors: "PriorEstimates", groups: Sequence[int], tilde_y: int, estimator: Estimator) -> tuple[np.ndarray, np.ndarray]:
    """Divisors applied to (lower, upper) terms: (U, L) for bounds, (pi, pi) for MLE."""
    if Estimator(estimator) is Estimator.MLE:
        pi = np.array([priors.pi_of(g, tilde_y) for g in groups])
        return pi, pi
    return (
        np.array([priors.upper_of(g, tilde_y) for g in groups]),
        np.array([priors.lower_of(g, tilde_y) for g in groups]),
    )


def client_cg_private(
    dataset: ClientDataset,
    calib_scores: np.ndarray,
    spec: FairnessSpec,
    lam: float,
    tilde_y: int,
    priors: "PriorEstimates",
    estimator: Estimator = Estimator.INTERVAL,
    tightened_lower: bool = True,
    z: float = DEFAULT_WILSON_Z,
    groups: Sequence[int] | None = None,
) -> EnhancedPrivacyMessage:
    """Pairwise message over ``groups`` (default: every group in ``spec``)."""
    groups = tuple(spec.groups if groups is None else groups)
    ce = client_cg_comm_efficient(dataset, calib_scores, spec, lam, tilde_y, estimator, tightened_lower, z)
    idx = [spec.groups.index(g) for g in groups]
    lower_div, upper_div = prior_divisors(priors, groups, tilde_y, estimator)
    if np.any(upper_div <= 0) or np.any(lower_div <= 0):
        raise DegeneratePriorError(f"degenerate prior for label {tilde_y}")
    u_prime = ce.u[idx] / upper_div
    l_prime = ce.l[idx] / lower_div
    return EnhancedPrivacyMessage(tilde_y, ce.estimator, pairwise_difference(u_prime, l_prime), dataset.n_k)


def pairwise_difference(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """``out[a, b] = upper[a] - lower[b]``."""
    return np.subtract.outer(np.asarray(upper, dtype=np.float64), np.asarray(lower, dtype=np.float64))
