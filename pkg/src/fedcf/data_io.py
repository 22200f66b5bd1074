"""Synthetic federations, partitioning, splitting, and CSV persistence.

CSV schema (UTF-8, header row)::

    example_id,client_id,split,true_label,group_id,p_0,...,p_{C-1},neighbors

``neighbors`` is a semicolon-separated id list, empty when absent. A sidecar
``<file>.meta.json`` records C, the number of groups, and their names.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import SPLITS, ClientDataset, Example, Federation, ValidationError

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.30, 0.20, 0.25, 0.25)


class SchemaError(ValidationError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    num_groups: int = 2
    num_clients: int = 4
    examples_per_client: int = 400
    # group_bias[g][c]: multiplicative tilt of class c's prior in group g.
    group_bias: tuple[tuple[float, ...], ...] | None = None
    model_accuracy: float = 0.8
    # Optional per-group override of model_accuracy.
    group_accuracy: tuple[float, ...] | None = None
    concentration: float = 0.5
    temperature: float = 2.0
    signal: float = 3.0
    noise: float = 2.5
    fractions: tuple[float, float, float, float] = DEFAULT_FRACTIONS
    group_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2 or self.num_groups < 1 or self.num_clients < 1:
            raise ValidationError("need C >= 2, at least one group and one client")
        if self.examples_per_client < 1:
            raise ValidationError("examples_per_client must be positive")
        if not 0.0 < self.model_accuracy <= 1.0:
            raise ValidationError("model_accuracy must lie in (0, 1]")
        if self.concentration <= 0 or self.temperature <= 0:
            raise ValidationError("concentration and temperature must be positive")
        if self.noise >= self.signal:
            raise ValidationError("noise must stay below signal so the argmax is the predicted class")
        if self.group_bias is not None and np.shape(self.group_bias) != (self.num_groups, self.num_classes):
            raise ValidationError("group_bias must be num_groups x num_classes")
        if self.group_accuracy is not None and len(self.group_accuracy) != self.num_groups:
            raise ValidationError("group_accuracy needs one entry per group")

    def class_priors(self) -> np.ndarray:
        bias = np.ones((self.num_groups, self.num_classes)) if self.group_bias is None else np.asarray(self.group_bias, float)
        return bias / bias.sum(axis=1, keepdims=True)

    def accuracies(self) -> np.ndarray:
        if self.group_accuracy is None:
            return np.full(self.num_groups, self.model_accuracy)
        return np.asarray(self.group_accuracy, dtype=np.float64)


@dataclass(frozen=True)
class ExampleArrays:
    labels: np.ndarray
    groups: np.ndarray
    probs: np.ndarray


def draw_examples(config: SyntheticConfig, n: int, rng: np.random.Generator) -> ExampleArrays:
    """Sample ``n`` (label, group, probability vector) triples from the generative model.

    The predicted class equals the true label with the group's accuracy and
    is otherwise uniform over the remaining classes. Logits are a scaled
    one-hot of the predicted class plus uniform noise smaller than the
    signal, divided by the temperature.
    """
    C = config.num_classes
    weights = np.ones(config.num_groups) if config.group_weights is None else np.asarray(config.group_weights, float)
    groups = rng.choice(config.num_groups, size=n, p=weights / weights.sum())
    priors = config.class_priors()
    cdf = np.cumsum(priors[groups], axis=1)
    labels = np.minimum((rng.random(n)[:, None] > cdf).sum(axis=1), C - 1)
    correct = rng.random(n) < config.accuracies()[groups]
    shift = rng.integers(1, C, size=n)
    predicted = np.where(correct, labels, (labels + shift) % C)
    logits = config.signal * np.eye(C)[predicted] + rng.uniform(0.0, config.noise, size=(n, C))
    z = logits / config.temperature
    z -= z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    return ExampleArrays(labels.astype(np.int64), groups.astype(np.int64), probs)


def largest_remainder(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``, summing exactly."""
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    order = np.lexsort((np.arange(len(w)), -(raw - base)))
    base[order[:short]] += 1
    return base


def dirichlet_partition(labels: np.ndarray, num_clients: int, concentration: float, seed: int) -> np.ndarray:
    """Client index per example; per-class proportions drawn from Dirichlet(concentration)."""
    labels = np.asarray(labels)
    assignment = np.zeros(labels.size, dtype=np.int64)
    if num_clients == 1:
        return assignment
    rng = np.random.default_rng(seed)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, concentration))
        counts = largest_remainder(idx.size, props)
        assignment[idx] = np.repeat(np.arange(num_clients), counts)
    return assignment


def stratified_split(
    labels: np.ndarray,
    groups: np.ndarray,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> tuple[np.ndarray, ...]:
    """Indices for (train, valid, calib, test), stratified by (label, group)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 4 or abs(math.fsum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValidationError(f"fractions must be four non-negative numbers summing to 1, got {fractions}")
    labels, groups = np.asarray(labels), np.asarray(groups)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(4)]
    strata = sorted(set(zip(labels.tolist(), groups.tolist())))
    for y, g in strata:
        idx = np.flatnonzero((labels == y) & (groups == g))
        if idx.size < 4:
            log.warning("stratum (label=%d, group=%d) has %d examples; split is best-effort", y, g, idx.size)
        rng.shuffle(idx)
        counts = largest_remainder(idx.size, fractions)
        for part, chunk in zip(parts, np.split(idx, np.cumsum(counts)[:-1])):
            part.append(chunk)
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts)


def build_federation(
    arrays: ExampleArrays,
    client_of: np.ndarray,
    split_of: Sequence[str],
    num_groups: int,
    prefix: str = "ex",
) -> Federation:
    n_classes = arrays.probs.shape[1]
    buckets: dict[int, dict[str, list[Example]]] = {}
    for i in range(arrays.labels.size):
        k = int(client_of[i])
        ex = Example(
            example_id=f"{prefix}{i}",
            client_id=k,
            split=split_of[i],
            true_label=int(arrays.labels[i]),
            group_id=int(arrays.groups[i]),
            probs=tuple(arrays.probs[i].tolist()),
        )
        buckets.setdefault(k, {s: [] for s in SPLITS})[ex.split].append(ex)
    clients = []
    for k in sorted(buckets):
        b = buckets[k]
        if not b["calib"]:
            log.warning("client %d has no calibration examples and is dropped", k)
            continue
        clients.append(ClientDataset(k, tuple(b["calib"]), tuple(b["test"]), tuple(b["train"] + b["valid"])))
    return Federation(tuple(clients), n_classes, num_groups)


def generate_synthetic(config: SyntheticConfig) -> Federation:
    """Seed-deterministic federation: draw, stratify into splits, Dirichlet-partition clients."""
    rng = np.random.default_rng(config.seed)
    total = config.num_clients * config.examples_per_client
    arrays = draw_examples(config, total, rng)
    split_idx = stratified_split(arrays.labels, arrays.groups, config.fractions, seed=config.seed + 1)
    split_of = np.empty(total, dtype=object)
    for name, idx in zip(SPLITS, split_idx):
        split_of[idx] = name
    client_of = dirichlet_partition(arrays.labels, config.num_clients, config.concentration, seed=config.seed + 2)
    return build_federation(arrays, client_of, list(split_of), config.num_groups)


# -- persistence ---------------------------------------------------------------

def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_federation(federation: Federation, path: str | Path) -> None:
    path = Path(path)
    C = federation.num_classes
    header = ["example_id", "client_id", "split", "true_label", "group_id"] + [f"p_{i}" for i in range(C)] + ["neighbors"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for client in federation.clients:
            for ex in client.all_examples():
                neighbors = "" if ex.neighbors is None else ";".join(ex.neighbors)
                writer.writerow(
                    [ex.example_id, ex.client_id, ex.split, ex.true_label, ex.group_id]
                    + [repr(p) for p in ex.probs]
                    + [neighbors]
                )
    meta = {
        "num_classes": C,
        "num_groups": federation.num_groups,
        "class_names": list(federation.class_names),
        "group_names": list(federation.group_names),
        "has_neighbors": any(ex.neighbors is not None for c in federation.clients for ex in c.all_examples()),
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_federation(path: str | Path) -> Federation:
    path = Path(path)
    meta_file = _meta_path(path)
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        C = int(meta.get("num_classes", sum(1 for h in header if h.startswith("p_"))))
        expected = ["example_id", "client_id", "split", "true_label", "group_id"] + [f"p_{i}" for i in range(C)] + ["neighbors"]
        missing = [col for col in expected if col not in header]
        if missing:
            raise SchemaError(f"{path}: missing column {missing[0]!r}")
        col = {name: header.index(name) for name in expected}
        has_neighbors = bool(meta.get("has_neighbors", False))
        rows: list[Example] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                nb_field = row[col["neighbors"]]
                neighbors = tuple(nb_field.split(";")) if nb_field else (() if has_neighbors else None)
                rows.append(
                    Example(
                        example_id=row[col["example_id"]],
                        client_id=int(row[col["client_id"]]),
                        split=row[col["split"]],
                        true_label=int(row[col["true_label"]]),
                        group_id=int(row[col["group_id"]]),
                        probs=tuple(float(row[col[f"p_{i}"]]) for i in range(C)),
                        neighbors=neighbors,
                    )
                )
            except (ValueError, ValidationError) as exc:
                raise SchemaError(f"{path}:{line_no}: {exc}") from None

    owner = {ex.example_id: ex.client_id for ex in rows}
    for ex in rows:
        for nb in ex.neighbors or ():
            if owner.get(nb) != ex.client_id:
                raise SchemaError(f"example {ex.example_id}: neighbor {nb} belongs to another client or is unknown")
    num_groups = int(meta.get("num_groups", max((ex.group_id for ex in rows), default=0) + 1))
    for ex in rows:
        if ex.group_id >= num_groups:
            raise SchemaError(f"example {ex.example_id}: group {ex.group_id} >= num_groups {num_groups}")

    by_client: dict[int, dict[str, list[Example]]] = {}
    for ex in rows:
        by_client.setdefault(ex.client_id, {s: [] for s in SPLITS})[ex.split].append(ex)
    clients = []
    for k in sorted(by_client):
        b = by_client[k]
        others = [ex for ex in rows if ex.client_id == k and ex.split in ("train", "valid")]
        clients.append(ClientDataset(k, tuple(b["calib"]), tuple(b["test"]), tuple(others)))
    return Federation(
        tuple(clients),
        C,
        num_groups,
        tuple(meta.get("class_names", ())),
        tuple(meta.get("group_names", ())),
    )
