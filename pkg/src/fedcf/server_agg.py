"""Server-side reduction of client messages into priors and coverage gaps.

All sums run through :func:`math.fsum`, which is exactly rounded, so results
do not depend on client order or thread scheduling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .client_stats import (
    ClientCgMessage,
    ClientPriorMessage,
    CommEfficientMessage,
    EnhancedPrivacyMessage,
    Estimator,
)


class AggregationError(ValueError):
    pass


class CgPath(str, enum.Enum):
    ALL_COMM_EFFICIENT = "all_comm_efficient"
    PAIRWISE = "pairwise"


def _fsum_arrays(arrays: Iterable[np.ndarray]) -> np.ndarray:
    stacked = np.stack([np.asarray(a, dtype=np.float64) for a in arrays])
    flat = stacked.reshape(stacked.shape[0], -1)
    out = np.array([math.fsum(flat[:, j]) for j in range(flat.shape[1])])
    return out.reshape(stacked.shape[1:])


def gamma_weights(n_list: Sequence[int]) -> np.ndarray:
    """Mixture weights ``(n_k + 1) / (N + K)``."""
    n = np.asarray(n_list, dtype=np.float64)
    if n.size == 0:
        raise AggregationError("no clients")
    return (n + 1.0) / (n.sum() + n.size)


def gamma_by_client(n_by_client: Mapping[int, int]) -> dict[int, float]:
    ids = sorted(n_by_client)
    return dict(zip(ids, gamma_weights([n_by_client[i] for i in ids]).tolist()))


@dataclass(frozen=True)
class PriorEstimates:
    """Federated bounds ``L <= Pr[filter] <= U`` and point estimate ``pi``.

    Arrays are indexed ``[group position, label position]``.
    """

    groups: tuple[int, ...]
    labels: tuple[int, ...]
    L: np.ndarray
    U: np.ndarray
    pi: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return (self.L <= 0) | (self.pi <= 0)

    def _at(self, arr: np.ndarray, g: int, tilde_y: int) -> float:
        return float(arr[self.groups.index(g), self.labels.index(tilde_y)])

    def lower_of(self, g: int, tilde_y: int) -> float:
        return self._at(self.L, g, tilde_y)

    def upper_of(self, g: int, tilde_y: int) -> float:
        return self._at(self.U, g, tilde_y)

    def pi_of(self, g: int, tilde_y: int) -> float:
        return self._at(self.pi, g, tilde_y)

    def is_degenerate(self, g: int, tilde_y: int) -> bool:
        return bool(self._at(self.degenerate.astype(float), g, tilde_y))

    def active_groups(self, tilde_y: int) -> tuple[int, ...]:
        return tuple(g for g in self.groups if not self.is_degenerate(g, tilde_y))

    def to_dict(self) -> dict:
        return {
            f"{g},{y}": {
                "L": self.lower_of(g, y),
                "U": self.upper_of(g, y),
                "pi": self.pi_of(g, y),
                "degenerate": self.is_degenerate(g, y),
            }
            for g in self.groups
            for y in self.labels
        }


def aggregate_priors(
    messages: Mapping[int, ClientPriorMessage],
    groups: Sequence[int],
    labels: Sequence[int],
) -> PriorEstimates:
    if not messages:
        raise AggregationError("no prior messages")
    ids = sorted(messages)
    gamma = gamma_weights([messages[k].n_k for k in ids])
    L = _fsum_arrays(gamma[i] * messages[k].lo_ratio for i, k in enumerate(ids))
    U = _fsum_arrays(gamma[i] * messages[k].hi_ratio for i, k in enumerate(ids))
    pi = _fsum_arrays(gamma[i] * messages[k].mle_ratio for i, k in enumerate(ids))
    return PriorEstimates(tuple(groups), tuple(labels), L, U, pi)


@dataclass(frozen=True)
class CoverageGapResult:
    tilde_y: int
    cg: float
    path: CgPath
    groups: tuple[int, ...]
    lower_cov: np.ndarray | None = None
    upper_cov: np.ndarray | None = None  # before the elementwise min with 1
    pw: np.ndarray | None = None
    clamped: bool = False
    argmax_pair: tuple[int, int] | None = None
    excluded_groups: tuple[int, ...] = ()
    warnings: tuple[str, ...] = field(default_factory=tuple)


def _estimator_of(messages: Mapping[int, ClientCgMessage]) -> Estimator:
    kinds = {m.estimator for m in messages.values()}
    if len(kinds) != 1:
        raise AggregationError(f"mixed estimator kinds across clients: {sorted(k.value for k in kinds)}")
    return kinds.pop()


def _divisors(priors: PriorEstimates, groups: Sequence[int], tilde_y: int, estimator: Estimator):
    """(lower divisor, upper divisor) per group: (U, L) for bounds, (pi, pi) for MLE."""
    if estimator is Estimator.MLE:
        pi = np.array([priors.pi_of(g, tilde_y) for g in groups])
        return pi, pi
    return (
        np.array([priors.upper_of(g, tilde_y) for g in groups]),
        np.array([priors.lower_of(g, tilde_y) for g in groups]),
    )


def theorem1_bounds(
    messages: Mapping[int, CommEfficientMessage],
    priors: PriorEstimates,
    gamma: Mapping[int, float],
    groups: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-group ``(L_cov, U_cov)`` from communication-efficient messages.

    Entries for degenerate (zero-support) groups are NaN. With the MLE
    estimator both arrays hold the point estimate.
    """
    ids = sorted(messages)
    if not ids:
        raise AggregationError("no coverage-gap messages")
    estimator = _estimator_of(messages)
    tilde_y = messages[ids[0]].tilde_y
    groups = tuple(priors.groups if groups is None else groups)
    positions = [priors.groups.index(g) for g in groups]
    lower_div, upper_div = _divisors(priors, groups, tilde_y, estimator)
    lower_sum = _fsum_arrays(gamma[k] * messages[k].l[positions] for k in ids)
    upper_sum = _fsum_arrays(gamma[k] * messages[k].u[positions] for k in ids)
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = np.where(lower_div > 0, lower_sum / lower_div, np.nan)
        upper = np.where(upper_div > 0, upper_sum / upper_div, np.nan)
    return lower, upper


def server_cg(
    messages: Mapping[int, ClientCgMessage],
    priors: PriorEstimates,
    expected_clients: Iterable[int] | None = None,
    n_by_client: Mapping[int, int] | None = None,
) -> CoverageGapResult:
    """Coverage gap for one positive label from a full round of client replies.

    Every client comm-efficient: clamp ``U_cov`` to 1 and take
    ``max U_cov - min L_cov``. Otherwise accumulate the pairwise matrix and
    clamp its maximum to 1. Enhanced-privacy matrices are indexed by the
    label's non-degenerate groups, in ``priors.groups`` order.
    """
    ids = sorted(messages)
    if expected_clients is not None:
        missing = sorted(set(expected_clients) - set(ids))
        if missing:
            raise AggregationError(f"missing coverage-gap messages from clients {missing}")
    if not ids:
        raise AggregationError("no coverage-gap messages")
    labels = {messages[k].tilde_y for k in ids}
    if len(labels) != 1:
        raise AggregationError(f"messages refer to different labels {sorted(labels)}")
    tilde_y = labels.pop()
    estimator = _estimator_of(messages)
    n_by_client = n_by_client or {k: messages[k].n_k for k in ids}
    gamma = gamma_by_client({k: n_by_client[k] for k in ids})

    active = priors.active_groups(tilde_y)
    excluded = tuple(g for g in priors.groups if g not in active)
    warnings = tuple(f"excluded degenerate pair (g={g}, y~={tilde_y})" for g in excluded)
    if not active:
        return CoverageGapResult(tilde_y, 0.0, CgPath.ALL_COMM_EFFICIENT, (), excluded_groups=excluded,
                                 warnings=warnings + (f"no supported groups for y~={tilde_y}",))

    if all(isinstance(messages[k], CommEfficientMessage) for k in ids):
        lower, upper = theorem1_bounds(messages, priors, gamma, active)  # type: ignore[arg-type]
        capped = np.minimum(upper, 1.0)
        a, b = int(np.argmax(capped)), int(np.argmin(lower))
        raw = float(capped[a] - lower[b])
        cg = min(max(raw, 0.0), 1.0)
        return CoverageGapResult(
            tilde_y, cg, CgPath.ALL_COMM_EFFICIENT, active, lower_cov=lower, upper_cov=upper,
            clamped=bool(np.any(upper > 1.0)) or cg != raw, argmax_pair=(active[a], active[b]),
            excluded_groups=excluded, warnings=warnings,
        )

    positions = [priors.groups.index(g) for g in active]
    lower_div, upper_div = _divisors(priors, active, tilde_y, estimator)
    terms = []
    for k in ids:
        msg = messages[k]
        if isinstance(msg, EnhancedPrivacyMessage):
            if msg.pw.shape != (len(active), len(active)):
                raise AggregationError(
                    f"client {k}: pairwise matrix shape {msg.pw.shape}, expected {(len(active),) * 2}"
                )
            terms.append(gamma[k] * msg.pw)
        else:
            upper_k = msg.u[positions] / upper_div
            lower_k = msg.l[positions] / lower_div
            terms.append(gamma[k] * np.subtract.outer(upper_k, lower_k))
    pw = _fsum_arrays(terms)
    a, b = np.unravel_index(int(np.argmax(pw)), pw.shape)
    raw = float(pw[a, b])
    cg = min(max(raw, 0.0), 1.0)
    return CoverageGapResult(
        tilde_y, cg, CgPath.PAIRWISE, active, pw=pw, clamped=cg != raw,
        argmax_pair=(active[a], active[b]), excluded_groups=excluded, warnings=warnings,
    )


def multi_label_cg(results: Sequence[CoverageGapResult]) -> float:
    """Worst-case gap over positive labels."""
    if not results:
        raise AggregationError("no per-label results")
    return max(r.cg for r in results)
