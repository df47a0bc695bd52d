"""Procedural two-domain image task used for desk-scale experiments.

Every class is a pair of *parts* (a glyph shape with a colour) drawn from a
small shared vocabulary, so classes overlap in local parts the way natural
object categories do. An image scatters several instances of its class's two
parts over a noisy background. The target domain renders the same instances
and then applies a fixed hue rotation, blur and a small random affine jitter.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from sourcefree.errors import ConfigurationError

SHAPES = ("square", "disk", "triangle", "cross", "ring", "hbar", "vbar", "diamond")


@dataclass
class SyntheticTaskSpec:
    num_classes: int = 10
    images_per_class: int = 50
    image_size: int = 32
    num_parts: int = 0  # 0 picks the smallest vocabulary giving 1.5x more pairs than classes
    glyphs_per_image: int = 6
    glyph_size: tuple[int, int] = (7, 10)
    background_noise: float = 0.06
    hue_shift: float = 0.08  # fraction of the hue circle
    blur_sigma: float = 0.7
    jitter_px: float = 2.0
    jitter_deg: float = 10.0
    shift_magnitude: float = 1.0  # scales hue shift, blur and jitter together

    def validate(self) -> "SyntheticTaskSpec":
        if self.num_classes < 2:
            raise ConfigurationError("synthetic task needs at least 2 classes")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be at least 8")
        if self.images_per_class < 1:
            raise ConfigurationError("images_per_class must be positive")
        if self.shift_magnitude < 0:
            raise ConfigurationError("shift_magnitude must be non-negative")
        v = self.vocabulary_size
        if v > len(SHAPES):
            raise ConfigurationError(f"{self.num_classes} classes need {v} parts; at most {len(SHAPES)} shapes exist")
        if comb(v, 2) < self.num_classes:
            raise ConfigurationError(f"{v} parts cannot give {self.num_classes} distinct pairs")
        return self

    @property
    def vocabulary_size(self) -> int:
        if self.num_parts:
            return self.num_parts
        v = 3
        while comb(v, 2) < 1.5 * self.num_classes:
            v += 1
        return v

    def to_dict(self) -> dict:
        d = asdict(self)
        d["glyph_size"] = list(self.glyph_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        d = dict(d)
        if "glyph_size" in d:
            d["glyph_size"] = tuple(d["glyph_size"])
        return cls(**d)


@dataclass(frozen=True)
class Part:
    shape: str
    color: tuple[float, float, float]


def part_vocabulary(n: int, seed: int) -> list[Part]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    shapes = [SHAPES[k] for k in rng.permutation(len(SHAPES))[:n]]
    hues = (np.arange(n) / n + rng.uniform(0, 1 / n)) % 1.0
    hues = hues[rng.permutation(n)]
    return [Part(s, colorsys.hsv_to_rgb(h, 0.85, 0.95)) for s, h in zip(shapes, hues)]


def class_motifs(spec: SyntheticTaskSpec, seed: int) -> list[tuple[int, int]]:
    """Distinct part-index pairs, one per class."""
    spec.validate()
    pairs = list(combinations(range(spec.vocabulary_size), 2))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    order = rng.permutation(len(pairs))[: spec.num_classes]
    return [pairs[k] for k in order]


def _glyph(shape: str, size: int) -> np.ndarray:
    r = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size] - r
    if shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "disk":
        m = xx**2 + yy**2 <= r**2 + 0.5
    elif shape == "ring":
        d = xx**2 + yy**2
        m = (d <= r**2 + 0.5) & (d >= (r * 0.55) ** 2)
    elif shape == "triangle":
        m = (yy >= -r) & (np.abs(xx) <= (yy + r) / 2 + 0.5)
    elif shape == "cross":
        w = max(1.0, size / 6)
        m = (np.abs(xx) <= w) | (np.abs(yy) <= w)
    elif shape == "hbar":
        m = np.abs(yy) <= max(1.0, size / 5)
    elif shape == "vbar":
        m = np.abs(xx) <= max(1.0, size / 5)
    elif shape == "diamond":
        m = np.abs(xx) + np.abs(yy) <= r + 0.5
    else:
        raise ConfigurationError(f"unknown glyph shape {shape!r}")
    return m


def render_image(spec: SyntheticTaskSpec, vocab: Sequence[Part], motif: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """One float RGB image in [0, 1] of shape (S, S, 3)."""
    s = spec.image_size
    base = rng.uniform(0.25, 0.6)
    img = np.full((s, s, 3), base) + rng.normal(0, spec.background_noise, (s, s, 3))
    img += ndimage.gaussian_filter(rng.normal(0, 0.15, (s, s)), 3)[:, :, None]
    n = spec.glyphs_per_image
    which = np.array([0, 1] + list(rng.integers(0, 2, max(0, n - 2))))[:n]
    for k in which:
        part = vocab[motif[k]]
        size = int(rng.integers(spec.glyph_size[0], spec.glyph_size[1] + 1))
        m = _glyph(part.shape, size)
        y, x = rng.integers(0, s - size + 1, 2)
        shade = rng.uniform(0.85, 1.0)
        region = img[y : y + size, x : x + size]
        region[m] = np.asarray(part.color) * shade
    return np.clip(img, 0.0, 1.0)


def apply_shift(img: np.ndarray, spec: SyntheticTaskSpec, rng: np.random.Generator) -> np.ndarray:
    mag = spec.shift_magnitude
    if mag == 0:
        return img
    hsv = rgb_to_hsv(np.clip(img, 0, 1))
    hsv[..., 0] = (hsv[..., 0] + spec.hue_shift * mag) % 1.0
    out = hsv_to_rgb(hsv)
    sigma = spec.blur_sigma * mag
    if sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0))
    angle = np.deg2rad(rng.uniform(-1, 1) * spec.jitter_deg * mag)
    shift = rng.uniform(-1, 1, 2) * spec.jitter_px * mag
    c, s_ = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s_], [s_, c]])
    center = (np.array(img.shape[:2]) - 1) / 2
    offset = center - rot @ center - shift
    out = np.stack([ndimage.affine_transform(out[..., ch], rot, offset=offset, order=1, mode="nearest") for ch in range(3)], -1)
    return np.clip(out, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def render_domain(spec: SyntheticTaskSpec, classes: Iterable[int], seed: int, target: bool) -> tuple[np.ndarray, np.ndarray]:
    """Images (N, S, S, 3) uint8 and universe class ids for one domain.

    Image ``k`` of class ``c`` is rendered from the stream ``(seed, c, k)`` in
    both domains, so a zero-magnitude shift reproduces the source exactly.
    """
    spec.validate()
    vocab = part_vocabulary(spec.vocabulary_size, seed)
    motifs = class_motifs(spec, seed)
    images, labels = [], []
    for c in classes:
        if not 0 <= c < spec.num_classes:
            raise ConfigurationError(f"class {c} outside the {spec.num_classes}-class universe")
        for k in range(spec.images_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, k]))
            img = render_image(spec, vocab, motifs[c], rng)
            if target:
                img = apply_shift(img, spec, np.random.default_rng(np.random.SeedSequence([seed, c, k, 7])))
            images.append(to_uint8(img))
            labels.append(c)
    s = spec.image_size
    return (np.stack(images) if images else np.zeros((0, s, s, 3), np.uint8)), np.asarray(labels, dtype=np.int64)


def class_name(c: int) -> str:
    return f"class_{c:02d}"


def write_corpus(root: str | Path, images: np.ndarray, labels: np.ndarray, names: Sequence[str] | None = None) -> Path:
    """Write ``root/<class_name>/<k>.png``."""
    from PIL import Image

    root = Path(root)
    counters: dict[int, int] = {}
    for img, c in zip(images, labels):
        c = int(c)
        k = counters.get(c, 0)
        counters[c] = k + 1
        d = root / (names[c] if names is not None else class_name(c))
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img, mode="RGB").save(d / f"{k:04d}.png")
    return root


def generate_synthetic_task(
    spec: SyntheticTaskSpec,
    source_classes: Iterable[int],
    target_classes: Iterable[int],
    seed: int,
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Write the source and target corpora under ``out_dir``; returns both roots."""
    out_dir = Path(out_dir)
    src = render_domain(spec, list(source_classes), seed, target=False)
    tgt = render_domain(spec, list(target_classes), seed, target=True)
    return write_corpus(out_dir / "source", *src), write_corpus(out_dir / "target", *tgt)
