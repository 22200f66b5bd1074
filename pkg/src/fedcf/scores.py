"""Non-conformity scores computed from class-probability vectors.

APS and RAPS are pointwise; DAPS diffuses a pointwise score over each
client's neighbor graph. Ties in probability are broken by ascending label
index so that rankings are platform independent.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .domain import ClientDataset, Example, ValidationError

_U64 = (1 << 64) - 1


class ScoreKind(str, enum.Enum):
    APS = "aps"
    RAPS = "raps"
    DAPS = "daps"


@dataclass(frozen=True)
class ScoreConfig:
    kind: ScoreKind = ScoreKind.APS
    nu: float = 0.1
    k_reg: int = 1
    diffusion: float = 0.5
    base_kind_for_daps: ScoreKind = ScoreKind.APS
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        object.__setattr__(self, "base_kind_for_daps", ScoreKind(self.base_kind_for_daps))
        if self.nu < 0:
            raise ValidationError("nu must be non-negative")
        if self.k_reg < 0 or int(self.k_reg) != self.k_reg:
            raise ValidationError("k_reg must be a non-negative integer")
        if not 0.0 <= self.diffusion <= 1.0:
            raise ValidationError("diffusion must lie in [0, 1]")
        if self.base_kind_for_daps is ScoreKind.DAPS:
            raise ValidationError("DAPS needs a pointwise base score")

    @property
    def pointwise_kind(self) -> ScoreKind:
        return self.base_kind_for_daps if self.kind is ScoreKind.DAPS else self.kind

    def upper_bound(self, num_classes: int) -> float:
        if self.pointwise_kind is ScoreKind.RAPS:
            return 1.0 + self.nu * max(num_classes - self.k_reg, 0)
        return 1.0


def descending_order(probs: np.ndarray) -> np.ndarray:
    """Label indices sorted by descending probability, ties by ascending label."""
    return np.argsort(-np.asarray(probs, dtype=np.float64), axis=-1, kind="stable")


def aps_matrix(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """APS scores for every candidate label; ``probs`` is (n, C), ``u`` is (n,)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    order = descending_order(probs)
    ordered = np.take_along_axis(probs, order, axis=1)
    ordered_scores = np.cumsum(ordered, axis=1) - u * ordered
    scores = np.empty_like(ordered_scores)
    np.put_along_axis(scores, order, ordered_scores, axis=1)
    return scores


def rank_matrix(probs: np.ndarray) -> np.ndarray:
    """1-based descending rank of each label under the ascending-label tie-break."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    order = descending_order(probs)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, probs.shape[1] + 1)[None, :].repeat(len(probs), 0), axis=1)
    return ranks


def raps_matrix(probs: np.ndarray, u: np.ndarray, nu: float, k_reg: int) -> np.ndarray:
    penalty = nu * np.maximum(rank_matrix(probs) - k_reg, 0)
    return aps_matrix(probs, u) + penalty


def _check_label(probs: Sequence[float], label: int) -> None:
    if not 0 <= label < len(probs):
        raise ValidationError(f"label {label} out of range for C={len(probs)}")


def aps_score(probs: Sequence[float], label: int, u: float) -> float:
    _check_label(probs, label)
    return float(aps_matrix(np.asarray(probs)[None, :], np.array([u]))[0, label])


def raps_score(probs: Sequence[float], label: int, u: float, nu: float, k_reg: int) -> float:
    _check_label(probs, label)
    return float(raps_matrix(np.asarray(probs)[None, :], np.array([u]), nu, k_reg)[0, label])


def keyed_uniform(seed: int, example_id: str) -> float:
    """Uniform draw in [0, 1) determined only by ``(seed, example_id)``."""
    digest = hashlib.blake2b(
        str(example_id).encode("utf-8"), digest_size=8, key=(int(seed) & _U64).to_bytes(8, "little")
    ).digest()
    return (int.from_bytes(digest, "little") >> 11) * 2.0**-53


def keyed_uniforms(seed: int, example_ids: Sequence[str]) -> np.ndarray:
    return np.fromiter((keyed_uniform(seed, i) for i in example_ids), dtype=np.float64, count=len(example_ids))


def pointwise_scores(probs: np.ndarray, u: np.ndarray, config: ScoreConfig) -> np.ndarray:
    if config.pointwise_kind is ScoreKind.RAPS:
        return raps_matrix(probs, u, config.nu, config.k_reg)
    return aps_matrix(probs, u)


def daps_scores(
    base: Mapping[str, np.ndarray],
    adjacency: Mapping[str, Sequence[str]],
    delta: float,
) -> dict[str, np.ndarray]:
    """One diffusion step of per-label scores over a neighbor graph.

    Nodes without neighbors keep their own scores.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValidationError("delta must lie in [0, 1]")
    out: dict[str, np.ndarray] = {}
    for node, own in base.items():
        nbrs = adjacency.get(node) or ()
        if not nbrs:
            out[node] = np.array(own, dtype=np.float64)
            continue
        missing = [n for n in nbrs if n not in base]
        if missing:
            raise ValidationError(f"node {node}: dangling neighbor reference {missing[0]}")
        mean = np.sum([base[n] for n in nbrs], axis=0) / len(nbrs)
        out[node] = (1.0 - delta) * np.asarray(own, dtype=np.float64) + delta * mean
    return out


@dataclass(frozen=True)
class ClientScores:
    """Score matrices (rows follow the dataset's example order)."""

    client_id: int
    calib: np.ndarray
    test: np.ndarray

    @property
    def max_calib_score(self) -> float:
        return float(self.calib.max())

    def calib_true(self, dataset: ClientDataset) -> np.ndarray:
        labels = dataset.calib_arrays.labels
        return self.calib[np.arange(len(labels)), labels]

    def test_true(self, dataset: ClientDataset) -> np.ndarray:
        labels = dataset.test_arrays.labels
        return self.test[np.arange(len(labels)), labels]


def _matrix(examples: Sequence[Example], num_classes: int) -> np.ndarray:
    probs = np.empty((len(examples), num_classes))
    for i, ex in enumerate(examples):
        probs[i] = ex.probs
    return probs


def score_client(dataset: ClientDataset, config: ScoreConfig) -> ClientScores:
    examples = dataset.all_examples()
    ids = [ex.example_id for ex in examples]
    u = keyed_uniforms(config.seed, ids)
    scores = pointwise_scores(_matrix(examples, dataset.num_classes), u, config)
    if config.kind is ScoreKind.DAPS:
        if not any(ex.neighbors is not None for ex in examples):
            raise ValidationError(f"client {dataset.client_id}: DAPS requested but no neighbor data")
        base = dict(zip(ids, scores))
        adjacency = {ex.example_id: ex.neighbors or () for ex in examples}
        diffused = daps_scores(base, adjacency, config.diffusion)
        scores = np.stack([diffused[i] for i in ids]) if ids else scores
    n_cal, n_test = len(dataset.calib), len(dataset.test)
    calib = scores[:n_cal].copy()
    test = scores[n_cal : n_cal + n_test].copy()
    if n_test == 0:
        test = np.empty((0, dataset.num_classes))
    calib.setflags(write=False)
    test.setflags(write=False)
    return ClientScores(dataset.client_id, calib, test)


def score_federation(datasets: Sequence[ClientDataset], config: ScoreConfig) -> dict[int, ClientScores]:
    """Score every client's calibration and test examples.

    The per-example uniform is keyed by ``(seed, example_id)``, so results do
    not depend on example or client order.
    """
    return {ds.client_id: score_client(ds, config) for ds in datasets}
