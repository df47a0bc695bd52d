"""Image-folder corpora (``root/<class_name>/<image>.png``) with an access audit.

Every read goes through :class:`ImageFolder`, which appends ``(role, kind)``
to a process-wide log. Adaptation must only ever produce
``("target", "images")`` entries; tests inspect the log to prove it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from sourcefree.errors import DataError

_ACCESS_LOG: list[tuple[str, str]] = []

PIXEL_MEAN = 0.5
PIXEL_SCALE = 0.25


def access_log() -> list[tuple[str, str]]:
    return list(_ACCESS_LOG)


def reset_access_log() -> None:
    _ACCESS_LOG.clear()


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, C) -> normalised float32 (N, C, H, W)."""
    x = torch.as_tensor(np.asarray(images)).permute(0, 3, 1, 2).float() / 255.0
    return (x - PIXEL_MEAN) / PIXEL_SCALE


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


class ImageFolder:
    def __init__(self, root: str | Path, role: str):
        self.root = Path(root)
        self.role = role
        if not self.root.is_dir():
            raise DataError(f"{role} corpus not found: {self.root}")

    def class_names(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def _files(self) -> list[tuple[str, Path]]:
        files = [(d.name, f) for d in sorted(self.root.iterdir()) if d.is_dir() for f in sorted(d.glob("*.png"))]
        if not files:
            raise DataError(f"{self.role} corpus {self.root} has no images")
        return files

    def load_images(self) -> np.ndarray:
        """All images, labels discarded."""
        _ACCESS_LOG.append((self.role, "images"))
        return np.stack([_read_png(f) for _, f in self._files()])

    def load_labeled(self, name_to_id: dict[str, int]) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Images, integer labels and relative paths; unknown class directories are a data error."""
        _ACCESS_LOG.append((self.role, "images"))
        _ACCESS_LOG.append((self.role, "labels"))
        images, labels, ids = [], [], []
        for name, f in self._files():
            if name not in name_to_id:
                raise DataError(f"{f}: class {name!r} is not in the declared label set")
            images.append(_read_png(f))
            labels.append(name_to_id[name])
            ids.append(f"{name}/{f.name}")
        return np.stack(images), np.asarray(labels, dtype=np.int64), ids


def class_index(source_names: Sequence[str], target_names: Sequence[str] = ()) -> dict[str, int]:
    """Dense ids: source classes first in their given order, then target-only classes."""
    index = {n: k for k, n in enumerate(source_names)}
    for n in target_names:
        if n not in index:
            index[n] = len(index)
    return index


def group_by_class(images: np.ndarray, labels: np.ndarray, ids: Sequence[str] | None = None) -> dict[int, list[tuple[str, np.ndarray]]]:
    out: dict[int, list] = {}
    for k, (img, c) in enumerate(zip(images, labels)):
        out.setdefault(int(c), []).append((ids[k] if ids is not None else f"{int(c)}/{k}", img))
    return out
