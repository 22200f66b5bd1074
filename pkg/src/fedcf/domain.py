"""Core value types: examples, fairness specifications, client datasets.

Everything here is immutable after construction. Group and label identifiers
are dense integer indices; human-readable names live on :class:`Federation`.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

PROB_TOLERANCE = 1e-6
# Sums this close to 1 are stored verbatim so that save/load is idempotent.
_EXACT_SUM_SLACK = 1e-12

SPLITS = ("train", "valid", "calib", "test")


class ValidationError(ValueError):
    """Raised when input data violates a type invariant."""


class FairnessMetric(str, enum.Enum):
    DEMOGRAPHIC_PARITY = "demographic_parity"
    EQUAL_OPPORTUNITY = "equal_opportunity"
    PREDICTIVE_EQUALITY = "predictive_equality"

    @classmethod
    def parse(cls, value: "str | FairnessMetric") -> "FairnessMetric":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"dp": "demographic_parity", "eo": "equal_opportunity", "pe": "predictive_equality"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValidationError(f"unknown fairness metric {value!r}") from None


def normalize_probs(values: Iterable[float]) -> tuple[float, ...]:
    """Validate a probability vector, renormalizing small rounding drift.

    Entries must lie in [0, 1] and sum to one within ``PROB_TOLERANCE``.
    """
    probs = tuple(float(v) for v in values)
    if not probs:
        raise ValidationError("probability vector is empty")
    for p in probs:
        if not (0.0 <= p <= 1.0) or math.isnan(p):
            raise ValidationError(f"probability {p!r} outside [0, 1]")
    total = math.fsum(probs)
    drift = abs(total - 1.0)
    if drift <= _EXACT_SUM_SLACK:
        return probs
    if drift <= PROB_TOLERANCE:
        return tuple(p / total for p in probs)
    raise ValidationError(f"probabilities sum to {total!r}, not 1")


@dataclass(frozen=True)
class Example:
    example_id: str
    client_id: int
    split: str
    true_label: int
    group_id: int
    probs: tuple[float, ...]
    neighbors: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"example {self.example_id}: unknown split {self.split!r}")
        object.__setattr__(self, "probs", normalize_probs(self.probs))
        if self.neighbors is not None:
            object.__setattr__(self, "neighbors", tuple(str(n) for n in self.neighbors))
        if not 0 <= self.true_label < len(self.probs):
            raise ValidationError(
                f"example {self.example_id}: label {self.true_label} out of range for C={len(self.probs)}"
            )
        if self.group_id < 0:
            raise ValidationError(f"example {self.example_id}: negative group id")

    @property
    def num_classes(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class FairnessSpec:
    metric: FairnessMetric
    groups: tuple[int, ...]
    positive_labels: tuple[int, ...]
    closeness: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", FairnessMetric.parse(self.metric))
        object.__setattr__(self, "groups", tuple(sorted(set(int(g) for g in self.groups))))
        object.__setattr__(self, "positive_labels", tuple(sorted(set(int(y) for y in self.positive_labels))))
        if len(self.groups) < 2:
            raise ValidationError("a fairness specification needs at least two groups")
        if not self.positive_labels:
            raise ValidationError("positive label set is empty")
        if not 0.0 < self.closeness <= 1.0:
            raise ValidationError(f"closeness {self.closeness} not in (0, 1]")


@dataclass(frozen=True)
class ClientArrays:
    """Column view of a sequence of examples."""

    ids: tuple[str, ...]
    labels: np.ndarray
    groups: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _to_arrays(examples: Sequence[Example], num_classes: int) -> ClientArrays:
    n = len(examples)
    probs = np.empty((n, num_classes), dtype=np.float64)
    for i, ex in enumerate(examples):
        probs[i] = ex.probs
    labels = np.fromiter((ex.true_label for ex in examples), dtype=np.int64, count=n)
    groups = np.fromiter((ex.group_id for ex in examples), dtype=np.int64, count=n)
    for arr in (probs, labels, groups):
        arr.setflags(write=False)
    return ClientArrays(tuple(ex.example_id for ex in examples), labels, groups, probs)


@dataclass(frozen=True)
class ClientDataset:
    """One client's examples.

    ``other`` keeps train/valid rows so files round-trip and graph neighbors
    can point at them; they never enter calibration.
    """

    client_id: int
    calib: tuple[Example, ...]
    test: tuple[Example, ...] = ()
    other: tuple[Example, ...] = ()

    def __post_init__(self) -> None:
        for name in ("calib", "test", "other"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.calib:
            raise ValidationError(f"client {self.client_id}: empty calibration set")
        for ex in self.all_examples():
            if ex.client_id != self.client_id:
                raise ValidationError(
                    f"example {ex.example_id} carries client {ex.client_id}, expected {self.client_id}"
                )
        widths = {ex.num_classes for ex in self.all_examples()}
        if len(widths) != 1:
            raise ValidationError(f"client {self.client_id}: inconsistent number of classes {sorted(widths)}")

    @property
    def n_k(self) -> int:
        return len(self.calib)

    @property
    def num_classes(self) -> int:
        return self.calib[0].num_classes

    def all_examples(self) -> tuple[Example, ...]:
        return self.calib + self.test + self.other

    @cached_property
    def calib_arrays(self) -> ClientArrays:
        return _to_arrays(self.calib, self.num_classes)

    @cached_property
    def test_arrays(self) -> ClientArrays:
        return _to_arrays(self.test, self.num_classes)


@dataclass(frozen=True)
class Federation:
    clients: tuple[ClientDataset, ...]
    num_classes: int
    num_groups: int
    class_names: tuple[str, ...] = ()
    group_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        clients = tuple(sorted(self.clients, key=lambda c: c.client_id))
        object.__setattr__(self, "clients", clients)
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class_{i}" for i in range(self.num_classes)))
        if not self.group_names:
            object.__setattr__(self, "group_names", tuple(f"group_{i}" for i in range(self.num_groups)))
        if len(self.class_names) != self.num_classes or len(self.group_names) != self.num_groups:
            raise ValidationError("name tables do not match num_classes / num_groups")

    @property
    def client_ids(self) -> tuple[int, ...]:
        return tuple(c.client_id for c in self.clients)

    def client(self, client_id: int) -> ClientDataset:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    def subset(self, client_ids: Iterable[int]) -> "Federation":
        wanted = set(client_ids)
        return Federation(
            tuple(c for c in self.clients if c.client_id in wanted),
            self.num_classes,
            self.num_groups,
            self.class_names,
            self.group_names,
        )


@dataclass(frozen=True)
class ValidationReport:
    client_sizes: dict[int, int]
    pair_counts: dict[tuple[int, int], dict[int, int]]
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.warnings


def passes_filter(metric: FairnessMetric, true_label: int, group_id: int, g: int, tilde_y: int) -> bool:
    if group_id != g:
        return False
    if metric is FairnessMetric.DEMOGRAPHIC_PARITY:
        return True
    if metric is FairnessMetric.EQUAL_OPPORTUNITY:
        return true_label == tilde_y
    return true_label != tilde_y


def validate_federation(datasets: Sequence[ClientDataset], spec: FairnessSpec) -> ValidationReport:
    """Check cross-client invariants and tally calibration support per (g, y~).

    Raises :class:`ValidationError` on structural problems; zero-support
    pairs only produce warnings.
    """
    if not datasets:
        raise ValidationError("federation has no clients")
    seen: Counter[str] = Counter()
    num_classes = datasets[0].num_classes
    for ds in datasets:
        if ds.n_k == 0:
            raise ValidationError(f"client {ds.client_id}: empty calibration set")
        if ds.num_classes != num_classes:
            raise ValidationError(f"client {ds.client_id}: C={ds.num_classes}, expected {num_classes}")
        seen.update(ex.example_id for ex in ds.all_examples())
    dupes = sorted(i for i, n in seen.items() if n > 1)
    if dupes:
        raise ValidationError(f"duplicate example ids: {dupes[:5]}")
    client_ids = [ds.client_id for ds in datasets]
    if len(set(client_ids)) != len(client_ids):
        raise ValidationError("duplicate client ids")

    max_group = max(spec.groups)
    for y in spec.positive_labels:
        if not 0 <= y < num_classes:
            raise ValidationError(f"positive label {y} out of range for C={num_classes}")
    members: dict[str, int] = {}
    for ds in datasets:
        for ex in ds.all_examples():
            members[ex.example_id] = ds.client_id
    for ds in datasets:
        for ex in ds.all_examples():
            if ex.group_id > max_group or ex.group_id not in spec.groups:
                raise ValidationError(f"example {ex.example_id}: group {ex.group_id} not in {spec.groups}")
            for nb in ex.neighbors or ():
                if members.get(nb) != ds.client_id:
                    raise ValidationError(
                        f"example {ex.example_id}: neighbor {nb} is not an example of client {ds.client_id}"
                    )

    pair_counts: dict[tuple[int, int], dict[int, int]] = {}
    warnings = []
    for g in spec.groups:
        for y in spec.positive_labels:
            per_client = {
                ds.client_id: sum(
                    passes_filter(spec.metric, ex.true_label, ex.group_id, g, y) for ex in ds.calib
                )
                for ds in datasets
            }
            pair_counts[(g, y)] = per_client
            if not any(per_client.values()):
                warnings.append(f"zero calibration support for (g={g}, y~={y})")
    return ValidationReport(
        client_sizes={ds.client_id: ds.n_k for ds in datasets},
        pair_counts=pair_counts,
        warnings=tuple(warnings),
    )
