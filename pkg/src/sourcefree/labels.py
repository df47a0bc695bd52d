"""Label sets, their shared/private partitions and the negative-class index table."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from math import comb
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sourcefree.errors import ConfigurationError, DataError

MANIFEST_VERSION = 1


def _ordered_unique(labels: Iterable[int]) -> tuple[int, ...]:
    seen = dict.fromkeys(int(x) for x in labels)
    return tuple(seen)


@dataclass(frozen=True)
class LabelSpace:
    """Source/target label sets with the derived shared and private partitions.

    ``target_labels`` may be empty when the target side is unknown (which is
    always the case during procurement and deployment).
    """

    source_labels: tuple[int, ...]
    target_labels: tuple[int, ...] = ()

    @property
    def shared(self) -> tuple[int, ...]:
        target = set(self.target_labels)
        return tuple(c for c in self.source_labels if c in target)

    @property
    def source_private(self) -> tuple[int, ...]:
        target = set(self.target_labels)
        return tuple(c for c in self.source_labels if c not in target)

    @property
    def target_private(self) -> tuple[int, ...]:
        source = set(self.source_labels)
        return tuple(c for c in self.target_labels if c not in source)

    @property
    def num_source(self) -> int:
        return len(self.source_labels)

    @property
    def relationship(self) -> str:
        if not self.target_labels:
            return "unknown"
        has_sp = bool(self.source_private)
        has_tp = bool(self.target_private)
        if not has_sp and not has_tp:
            return "closed"
        if has_sp and not has_tp:
            return "partial"
        if has_tp and not has_sp:
            return "open"
        return "universal"


def make_label_space(source_labels: Iterable[int], target_labels: Iterable[int] = ()) -> LabelSpace:
    source = _ordered_unique(source_labels)
    if not source:
        raise ConfigurationError("source label set must be non-empty")
    return LabelSpace(source, _ordered_unique(target_labels))


@dataclass(frozen=True)
class NegativeClassTable:
    """Bijection between unordered positive-class pairs and output indices.

    Entry ``r`` (0-based, pairs sorted lexicographically) owns output index
    ``num_positive + r``.
    """

    num_positive: int
    pairs: tuple[tuple[int, int], ...]
    seed: int | None = None
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for i, j in self.pairs:
            if not (0 <= i < j < self.num_positive):
                raise ConfigurationError(f"invalid negative pair ({i}, {j}) for {self.num_positive} classes")
        if len(set(self.pairs)) != len(self.pairs):
            raise ConfigurationError("negative pairs must be distinct")
        if list(self.pairs) != sorted(self.pairs):
            raise ConfigurationError("negative pairs must be in lexicographic order")
        index = {p: self.num_positive + r for r, p in enumerate(self.pairs)}
        object.__setattr__(self, "_index", index)

    @property
    def num_negative(self) -> int:
        return len(self.pairs)

    @property
    def num_outputs(self) -> int:
        return self.num_positive + self.num_negative

    def output_index(self, i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"pair {key} is not in the negative table") from None

    def pair_of(self, output_index: int) -> tuple[int, int]:
        r = output_index - self.num_positive
        if not 0 <= r < self.num_negative:
            raise KeyError(f"{output_index} is not a negative output index")
        return self.pairs[r]

    def entries(self) -> list[tuple[int, int, int]]:
        return [(i, j, self.num_positive + r) for r, (i, j) in enumerate(self.pairs)]


def build_negative_table(num_positive: int, num_negative_requested: int, seed: int = 0) -> NegativeClassTable:
    """All C(n, 2) pairs, or a seeded uniform subset of the requested size."""
    if num_positive < 2:
        raise ConfigurationError(f"need at least 2 positive classes for negative pairs, got {num_positive}")
    if num_negative_requested < 0:
        raise ConfigurationError("num_negative_requested must be non-negative")
    total = comb(num_positive, 2)
    rows, cols = np.triu_indices(num_positive, k=1)
    if num_negative_requested >= total:
        chosen = np.arange(total)
    else:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.permutation(total)[:num_negative_requested])
    pairs = tuple((int(rows[k]), int(cols[k])) for k in chosen)
    return NegativeClassTable(num_positive, pairs, seed)


class Role(str, Enum):
    SOURCE_SHARED = "source-shared"
    SOURCE_PRIVATE = "source-private"
    NEGATIVE_SOURCE = "negative-source"
    TARGET_SHARED = "target-shared"
    TARGET_PRIVATE = "target-private"
    TARGET_ALL = "target-all"

    @property
    def is_source(self) -> bool:
        return self in (Role.SOURCE_SHARED, Role.SOURCE_PRIVATE, Role.NEGATIVE_SOURCE)


@dataclass
class SamplePopulation:
    role: Role
    inputs: Sequence
    labels: Sequence[int] | None = None

    def __post_init__(self):
        self.role = Role(self.role)
        if self.role.is_source and self.labels is None:
            raise ConfigurationError(f"{self.role.value} population requires labels")
        if not self.role.is_source and self.labels is not None:
            raise ConfigurationError(f"{self.role.value} population must be unlabeled")
        if self.labels is not None and len(self.labels) != len(self.inputs):
            raise ConfigurationError("inputs and labels differ in length")

    def __len__(self):
        return len(self.inputs)


def write_manifest(
    path: str | Path,
    source_names: Sequence[str],
    table: NegativeClassTable,
    seed: int,
    target_names: Sequence[str] | None = None,
) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "source_classes": list(source_names),
        "target_classes": list(target_names) if target_names is not None else None,
        "negative_table": [list(e) for e in table.entries()],
        "seed": seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict:
    """Load a label manifest; returns the raw document plus a rebuilt ``table``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read label manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('version')!r} in {path}")
    num_positive = len(doc["source_classes"])
    entries = sorted(tuple(e) for e in doc["negative_table"])
    for r, (i, j, idx) in enumerate(entries):
        if idx != num_positive + r:
            raise DataError(f"non-contiguous negative index {idx} in {path}")
    doc["table"] = NegativeClassTable(num_positive, tuple((i, j) for i, j, _ in entries), doc.get("seed"))
    return doc
