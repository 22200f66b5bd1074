"""Conformal quantiles and a mergeable quantile sketch.

``split_cp_quantile`` and ``fcp_quantile`` implement the finite-sample
order-statistic rules. :class:`QuantileSketch` is a merging t-digest with the
arcsine (k1) scale function; clients can ship it instead of raw scores at the
cost of a small rank error.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_COMPRESSION = 100
# Guards ceil() against products like 9.000000000000002.
_RANK_EPS = 1e-9

_HEADER = struct.Struct("<IdddI")
_PAIR = struct.Struct("<dd")


class EmptyInputError(ValueError):
    pass


def conformal_rank(n_total: int, n_clients: int, alpha: float) -> int:
    """``ceil((N + K)(1 - alpha))``, the 1-based order statistic to select."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return max(1, math.ceil((n_total + n_clients) * (1.0 - alpha) - _RANK_EPS))


def is_vacuous(n_total: int, n_clients: int, alpha: float) -> bool:
    """True when the requested rank exceeds N and the threshold clamps to the max."""
    return conformal_rank(n_total, n_clients, alpha) > n_total


def split_cp_quantile(scores: Sequence[float], alpha: float) -> float:
    values = np.sort(np.asarray(scores, dtype=np.float64))
    if values.size == 0:
        raise EmptyInputError("empty score list")
    k = min(conformal_rank(values.size, 1, alpha), values.size)
    return float(values[k - 1])


@dataclass(frozen=True)
class QuantileSketch:
    means: tuple[float, ...]
    weights: tuple[float, ...]
    compression: int = DEFAULT_COMPRESSION
    min: float = math.inf
    max: float = -math.inf

    def __post_init__(self) -> None:
        if self.compression < 10:
            raise ValueError("compression must be at least 10")
        if len(self.means) != len(self.weights):
            raise ValueError("means and weights differ in length")

    @property
    def total_weight(self) -> float:
        return math.fsum(self.weights)

    @property
    def is_empty(self) -> bool:
        return not self.means

    @classmethod
    def empty(cls, compression: int = DEFAULT_COMPRESSION) -> "QuantileSketch":
        return cls((), (), compression)

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(self.compression, self.total_weight, self.min, self.max, len(self.means))]
        parts.extend(_PAIR.pack(m, w) for m, w in zip(self.means, self.weights))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuantileSketch":
        compression, total, lo, hi, count = _HEADER.unpack_from(blob, 0)
        expected = _HEADER.size + count * _PAIR.size
        if len(blob) != expected:
            raise ValueError(f"sketch payload has {len(blob)} bytes, expected {expected}")
        pairs = [_PAIR.unpack_from(blob, _HEADER.size + i * _PAIR.size) for i in range(count)]
        sketch = cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs), compression, lo, hi)
        if sketch.total_weight != total:
            raise ValueError("sketch header weight does not match centroids")
        return sketch


def _k1(q: np.ndarray | float, compression: float):
    return compression / (2.0 * math.pi) * np.arcsin(2.0 * np.asarray(q) - 1.0)


def _k1_inv(k: float, compression: float) -> float:
    return (math.sin(min(max(k * 2.0 * math.pi / compression, -math.pi / 2), math.pi / 2)) + 1.0) / 2.0


def _compress(means: np.ndarray, weights: np.ndarray, compression: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Greedy merge of centroids already sorted by mean."""
    total = float(weights.sum())
    out_means: list[float] = []
    out_weights: list[float] = []
    if total == 0:
        return (), ()
    q0 = 0.0
    q_limit = _k1_inv(float(_k1(q0, compression)) + 1.0, compression)
    cur_w = float(weights[0])
    cur_sum = float(means[0] * weights[0])
    cur_lo = cur_hi = float(means[0])
    for m, w in zip(means[1:].tolist(), weights[1:].tolist()):
        if q0 + (cur_w + w) / total <= q_limit:
            cur_w += w
            cur_sum += m * w
            cur_hi = m
            continue
        out_means.append(min(max(cur_sum / cur_w, cur_lo), cur_hi))
        out_weights.append(cur_w)
        q0 += cur_w / total
        q_limit = _k1_inv(float(_k1(min(q0, 1.0), compression)) + 1.0, compression)
        cur_w, cur_sum, cur_lo, cur_hi = w, m * w, m, m
    out_means.append(min(max(cur_sum / cur_w, cur_lo), cur_hi))
    out_weights.append(cur_w)
    return tuple(out_means), tuple(out_weights)


def sketch_build(scores: Iterable[float], compression: int = DEFAULT_COMPRESSION) -> QuantileSketch:
    values = np.sort(np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=np.float64))
    if values.size == 0:
        return QuantileSketch.empty(compression)
    means, weights = _compress(values, np.ones_like(values), compression)
    return QuantileSketch(means, weights, compression, float(values[0]), float(values[-1]))


def sketch_merge(a: QuantileSketch, b: QuantileSketch) -> QuantileSketch:
    if a.compression != b.compression:
        raise ValueError(f"compression mismatch: {a.compression} vs {b.compression}")
    if b.is_empty:
        return a
    if a.is_empty:
        return b
    means = np.array(a.means + b.means)
    weights = np.array(a.weights + b.weights)
    order = np.lexsort((weights, means))
    merged_means, merged_weights = _compress(means[order], weights[order], a.compression)
    return QuantileSketch(merged_means, merged_weights, a.compression, min(a.min, b.min), max(a.max, b.max))


def sketch_query(sketch: QuantileSketch, q: float) -> float:
    """Value at rank fraction ``q`` by linear interpolation between centroids."""
    if sketch.is_empty:
        raise EmptyInputError("query on an empty sketch")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if q == 0.0:
        return sketch.min
    if q == 1.0:
        return sketch.max
    weights = np.asarray(sketch.weights)
    total = float(weights.sum())
    centers = np.cumsum(weights) - weights / 2.0
    xs = np.concatenate(([0.0], centers, [total]))
    ys = np.concatenate(([sketch.min], sketch.means, [sketch.max]))
    return float(np.interp(q * total, xs, ys))


def sketch_rank(sketch: QuantileSketch, value: float) -> float:
    """Approximate fraction of sketched mass at or below ``value``."""
    if sketch.is_empty:
        raise EmptyInputError("rank on an empty sketch")
    if value < sketch.min:
        return 0.0
    if value >= sketch.max:
        return 1.0
    weights = np.asarray(sketch.weights)
    total = float(weights.sum())
    centers = np.cumsum(weights) - weights / 2.0
    xs = np.concatenate(([sketch.min], sketch.means, [sketch.max]))
    ys = np.concatenate(([0.0], centers, [total]))
    return float(np.interp(value, xs, ys)) / total


def fcp_quantile(client_scores: Sequence[Sequence[float]], alpha: float) -> float:
    """Pooled federated conformal quantile from per-client score multisets."""
    if not client_scores:
        raise EmptyInputError("empty federation")
    pooled = np.sort(np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in client_scores]))
    if pooled.size == 0:
        raise EmptyInputError("federation has no calibration scores")
    k = min(conformal_rank(pooled.size, len(client_scores), alpha), pooled.size)
    return float(pooled[k - 1])


def fcp_quantile_sketch(sketches: Sequence[QuantileSketch], alpha: float) -> float:
    """Federated quantile from per-client sketches, merged in the given order."""
    if not sketches:
        raise EmptyInputError("empty federation")
    merged = QuantileSketch.empty(sketches[0].compression)
    for s in sketches:
        merged = sketch_merge(merged, s)
    if merged.is_empty:
        raise EmptyInputError("federation has no calibration scores")
    n_total = int(round(merged.total_weight))
    k = conformal_rank(n_total, len(sketches), alpha)
    return sketch_query(merged, min(k / n_total, 1.0))
