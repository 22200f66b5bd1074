"""Differential-privacy noise for coverage-gap messages.

Noise is expressed in coverage units (after the server divides by the
priors), so the aggregated gap carries ``sum_k gamma_k * X_k`` and its
variance is ``sum_k gamma_k^2 sigma_k^2``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .client_stats import CommEfficientMessage, EnhancedPrivacyMessage, Estimator
from .server_agg import PriorEstimates


class Mechanism(str, enum.Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


class Protocol(str, enum.Enum):
    COMM_EFFICIENT = "comm_efficient"
    ENHANCED_PRIVACY = "enhanced_privacy"


@dataclass(frozen=True)
class DpConfig:
    mechanism: Mechanism = Mechanism.NONE
    epsilon: float = 1.0
    delta: float = 1e-5
    beta: float = 0.95
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        if self.mechanism is Mechanism.NONE:
            return
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.mechanism is Mechanism.GAUSSIAN and not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def enabled(self) -> bool:
        return self.mechanism is not Mechanism.NONE


def sensitivity(protocol: Protocol | str, n_k: int, L: float, U: float, entry: str = "upper") -> float:
    """Sensitivity of one reported value, in coverage units.

    ``entry`` selects the upper or lower term for the comm-efficient protocol
    and is ignored for the pairwise protocol.
    """
    if n_k < 1:
        raise ValueError("n_k must be >= 1")
    if L <= 0 or U <= 0:
        raise ValueError("zero prior")
    if Protocol(protocol) is Protocol.ENHANCED_PRIVACY:
        return (1.0 / n_k) * (1.0 / L + 1.0 / U)
    if entry == "upper":
        return 1.0 / (n_k * L)
    if entry == "lower":
        return 1.0 / (n_k * U)
    raise ValueError(f"entry must be 'upper' or 'lower', got {entry!r}")


def gaussian_sigma(delta_h: float, epsilon: float, delta: float) -> float:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.25:
        raise ValueError("delta must lie in (0, 1.25)")
    return delta_h * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def exponential_scale(delta_h: float, epsilon: float) -> float:
    """Mean of the one-sided noise, i.e. the inverse of the rate epsilon / (2 delta_h)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return 2.0 * delta_h / epsilon


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def aggregated_variance(gamma: Sequence[float], sigmas: Sequence[float]) -> float:
    return math.fsum(g * g * s * s for g, s in zip(gamma, sigmas))


def pac_accept(cg_est: float, closeness: float, agg_variance: float, beta: float) -> bool:
    if agg_variance < 0:
        raise ValueError("variance must be non-negative")
    if agg_variance == 0:
        return cg_est <= closeness
    return normal_cdf((closeness - cg_est) / math.sqrt(agg_variance)) > beta


def client_rng(seed: int, client_id: int, round_id: int, tilde_y: int) -> np.random.Generator:
    """Independent stream per (client, round, label)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(client_id), int(round_id), int(tilde_y)])


def _scales(dp: DpConfig, delta_h: np.ndarray) -> np.ndarray:
    if dp.mechanism is Mechanism.GAUSSIAN:
        return np.array([gaussian_sigma(float(d), dp.epsilon, dp.delta) for d in np.ravel(delta_h)]).reshape(
            np.shape(delta_h)
        )
    return 2.0 * np.asarray(delta_h, dtype=np.float64) / dp.epsilon


def _draw(dp: DpConfig, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if dp.mechanism is Mechanism.GAUSSIAN:
        return rng.normal(0.0, 1.0, size=scale.shape) * scale
    return rng.exponential(1.0, size=scale.shape) * scale


def _prior_columns(priors: PriorEstimates, groups: Sequence[int], tilde_y: int, estimator: Estimator):
    if estimator is Estimator.MLE:
        pi = np.array([priors.pi_of(g, tilde_y) for g in groups])
        return pi, pi
    return (
        np.array([priors.lower_of(g, tilde_y) for g in groups]),
        np.array([priors.upper_of(g, tilde_y) for g in groups]),
    )


def add_noise(message, dp: DpConfig, priors: PriorEstimates, rng: np.random.Generator, groups: Sequence[int] | None = None):
    """Return a noised copy of ``message`` with per-entry noise scales attached.

    With no mechanism the message is returned untouched. Exponential noise
    always pushes the implied gap upward: it is added to upper terms and
    pairwise entries and subtracted from lower terms.
    """
    if not dp.enabled:
        return message
    groups = tuple(priors.groups if groups is None else groups)
    lower_prior, upper_prior = _prior_columns(priors, groups, message.tilde_y, message.estimator)
    if np.any(lower_prior <= 0) or np.any(upper_prior <= 0):
        raise ValueError("zero prior")
    n_k = message.n_k
    if isinstance(message, EnhancedPrivacyMessage):
        delta_h = np.add.outer(1.0 / lower_prior, 1.0 / upper_prior) / n_k
        scale = _scales(dp, delta_h)
        return replace(message, pw=message.pw + _draw(dp, scale, rng), sigma=scale)
    if not isinstance(message, CommEfficientMessage):
        raise TypeError(f"unsupported message type {type(message).__name__}")
    positions = [priors.groups.index(g) for g in groups]
    scale_u = np.full(len(priors.groups), np.nan)
    scale_l = np.full(len(priors.groups), np.nan)
    scale_u[positions] = _scales(dp, 1.0 / (n_k * lower_prior))
    scale_l[positions] = _scales(dp, 1.0 / (n_k * upper_prior))
    u = message.u.copy()
    l = message.l.copy()
    # Noise is drawn in coverage units; the server divides u by L and l by U.
    noise_u = _draw(dp, scale_u[positions], rng) * lower_prior
    noise_l = _draw(dp, scale_l[positions], rng) * upper_prior
    u[positions] += noise_u
    if dp.mechanism is Mechanism.EXPONENTIAL:
        l[positions] -= noise_l
    else:
        l[positions] += noise_l
    return replace(message, u=u, l=l, sigma_u=scale_u, sigma_l=scale_l)


def pair_variance(messages, gamma: dict[int, float], groups: Sequence[int], all_groups: Sequence[int], pair: tuple[int, int], mechanism: Mechanism) -> float:
    """Variance of the aggregated gap entry for ``pair`` (upper group, lower group).

    For the exponential mechanism the per-entry scale doubles as the standard
    deviation.
    """
    a, b = groups.index(pair[0]), groups.index(pair[1])
    terms = []
    for k in sorted(messages):
        msg = messages[k]
        if isinstance(msg, EnhancedPrivacyMessage):
            if msg.sigma is not None:
                terms.append(gamma[k] ** 2 * float(msg.sigma[a, b]) ** 2)
        elif msg.sigma_u is not None:
            pa, pb = all_groups.index(pair[0]), all_groups.index(pair[1])
            terms.append(gamma[k] ** 2 * (float(msg.sigma_u[pa]) ** 2 + float(msg.sigma_l[pb]) ** 2))
    return math.fsum(terms)
