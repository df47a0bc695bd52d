"""Negative-class synthesis by splitting image pairs along a random quadratic curve."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from sourcefree.errors import ConfigurationError, DataError, InvalidInputError
from sourcefree.labels import NegativeClassTable

MIN_SIZE = 8
COVERAGE_RANGE = (0.25, 0.75)
MAX_RETRIES = 20
_CURVE_SAMPLES = 1025


@dataclass(frozen=True)
class SplineMask:
    height: int
    width: int
    # (x, y) pixel coordinates: start border, central control, end border
    control_points: tuple[tuple[float, float], ...]
    vertical: bool  # endpoints on top/bottom borders; curve is rasterized row-wise
    mask: np.ndarray

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


def rasterize_bezier(height: int, width: int, control_points, vertical: bool = False, flip: bool = False) -> np.ndarray:
    """Binary mask of the pixels on one side of a quadratic Bezier curve.

    For a horizontal-ish curve (``vertical=False``) the endpoints sit on the
    left and right borders; a pixel at row ``r`` of column ``c`` is set when
    ``r`` lies above the curve at ``c``. ``flip`` selects the other side.
    """
    p = np.asarray(control_points, dtype=np.float64)
    t = np.linspace(0.0, 1.0, _CURVE_SAMPLES)[:, None]
    curve = (1 - t) ** 2 * p[0] + 2 * t * (1 - t) * p[1] + t**2 * p[2]
    if not vertical:
        order = np.argsort(curve[:, 0], kind="stable")
        boundary = np.interp(np.arange(width), curve[order, 0], curve[order, 1])
        mask = np.arange(height)[:, None] < boundary[None, :]
    else:
        order = np.argsort(curve[:, 1], kind="stable")
        boundary = np.interp(np.arange(height), curve[order, 1], curve[order, 0])
        mask = np.arange(width)[None, :] < boundary[:, None]
    if flip:
        mask = ~mask
    return mask.astype(np.uint8)


def _sample_controls(rng: np.random.Generator, height: int, width: int, vertical: bool):
    cx = rng.uniform(width / 4, 3 * width / 4)
    cy = rng.uniform(height / 4, 3 * height / 4)
    if vertical:
        start = (rng.uniform(0, width - 1), 0.0)
        end = (rng.uniform(0, width - 1), float(height - 1))
    else:
        start = (0.0, rng.uniform(0, height - 1))
        end = (float(width - 1), rng.uniform(0, height - 1))
    return (start, (cx, cy), end)


def generate_spline_mask(height: int, width: int, seed: int) -> SplineMask:
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ConfigurationError(f"image {height}x{width} too small for a spline mask (min {MIN_SIZE})")
    rng = np.random.default_rng(seed)
    lo, hi = COVERAGE_RANGE
    for _ in range(MAX_RETRIES):
        vertical = bool(rng.integers(2))
        flip = bool(rng.integers(2))
        controls = _sample_controls(rng, height, width, vertical)
        mask = rasterize_bezier(height, width, controls, vertical, flip)
        if lo <= mask.mean() <= hi:
            return SplineMask(height, width, controls, vertical, mask)
    mid = (height - 1) / 2
    controls = ((0.0, mid), ((width - 1) / 2, mid), (float(width - 1), mid))
    return SplineMask(height, width, controls, False, rasterize_bezier(height, width, controls))


def composite_pair(image_a: np.ndarray, image_b: np.ndarray, mask: SplineMask | np.ndarray) -> np.ndarray:
    """Take ``image_a`` where the mask is set and ``image_b`` elsewhere, across all channels."""
    m = mask.mask if isinstance(mask, SplineMask) else np.asarray(mask)
    a = np.asarray(image_a)
    b = np.asarray(image_b)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[:2] != m.shape:
        raise InvalidInputError(f"mask shape {m.shape} does not match image shape {a.shape[:2]}")
    sel = m.astype(bool)
    if a.ndim == 3:
        sel = sel[:, :, None]
    return np.where(sel, a, b)


@dataclass(frozen=True)
class CompositeSample:
    image: np.ndarray
    negative_label: int
    parent_classes: tuple[int, int]
    parent_ids: tuple[str, str]
    mask_seed: int


def build_negative_dataset(
    source: Mapping[int, Sequence[tuple[str, np.ndarray]]],
    table: NegativeClassTable,
    per_class: int,
    seed: int,
) -> list[CompositeSample]:
    """Composite ``per_class`` samples for every entry of ``table``.

    ``source`` maps a positive class id to its ``(image_id, image)`` list.
    Each negative class draws from its own ``(seed, index)`` stream, so
    classes can be built independently.
    """
    for i, j in table.pairs:
        for c in (i, j):
            if not source.get(c):
                raise DataError(f"positive class {c} has no images to composite")
    out: list[CompositeSample] = []
    seen: set[tuple[str, str, int]] = set()
    for i, j, neg_index in table.entries():
        rng = np.random.default_rng(np.random.SeedSequence([seed, neg_index]))
        pool_a, pool_b = source[i], source[j]
        for _ in range(per_class):
            id_a, img_a = pool_a[rng.integers(len(pool_a))]
            id_b, img_b = pool_b[rng.integers(len(pool_b))]
            mask_seed = int(rng.integers(2**31))
            while (id_a, id_b, mask_seed) in seen:
                mask_seed = int(rng.integers(2**31))
            seen.add((id_a, id_b, mask_seed))
            h, w = np.asarray(img_a).shape[:2]
            mask = generate_spline_mask(h, w, mask_seed)
            out.append(CompositeSample(composite_pair(img_a, img_b, mask), neg_index, (i, j), (id_a, id_b), mask_seed))
    return out


def write_negative_dataset(root: str | Path, samples: Sequence[CompositeSample]) -> Path:
    """Write ``negatives/<neg_index>/<n>.png`` plus ``manifest.csv``; returns the manifest path."""
    from PIL import Image

    root = Path(root)
    counters: dict[int, int] = {}
    rows = []
    for s in samples:
        n = counters.get(s.negative_label, 0)
        counters[s.negative_label] = n + 1
        d = root / str(s.negative_label)
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(s.image, dtype=np.uint8), mode="RGB").save(d / f"{n}.png")
        rows.append((s.negative_label, n, *s.parent_classes, *s.parent_ids, s.mask_seed))
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["neg_index", "n", "class_a", "class_b", "parent_a", "parent_b", "mask_seed"])
        writer.writerows(rows)
    return manifest


def read_negative_dataset(root: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load composites written by :func:`write_negative_dataset` as ``(images, labels)``."""
    from PIL import Image

    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"negative dataset manifest missing: {manifest}")
    images, labels = [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            path = root / row["neg_index"] / f"{row['n']}.png"
            try:
                images.append(np.asarray(Image.open(path).convert("RGB")))
            except OSError as exc:
                raise DataError(f"cannot read composite {path}: {exc}") from exc
            labels.append(int(row["neg_index"]))
    if not images:
        raise DataError(f"negative dataset at {root} is empty")
    return np.stack(images), np.asarray(labels, dtype=np.int64)
