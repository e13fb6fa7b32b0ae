"""Omniglot ingestion: area-averaged resize and rotation-augmented classes."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .episodes import ClassSplit, RandomStream
from .errors import IngestionError

IMAGES_PER_CLASS = 20


def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` box-filter matrix.

    Entry ``(i, j)`` is the fraction of output cell ``i`` covered by input cell ``j``
    when both grids span the same interval.
    """
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    return np.clip(hi - lo, 0.0, None) * n_out


def area_resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    return area_weights(h, size) @ img @ area_weights(w, size).T


class OmniglotDataset:
    """Base character images plus rotated copies exposed as extra classes.

    Class ``c`` maps to ``(base_index, quarter_turns)`` through ``self.classes``.
    """

    def __init__(self, images: np.ndarray, classes: list[tuple[int, int]], names: list[str]):
        self.images = images
        self.classes = classes
        self.names = names

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (1,) + self.images.shape[2:]

    def count(self, c: int) -> int:
        return self.images.shape[1]

    def get(self, c: int, idx) -> np.ndarray:
        base, k = self.classes[c]
        x = np.asarray(self.images[base, idx], dtype=np.float64)
        if k:
            x = np.rot90(x, k, axes=(-2, -1))
        return np.ascontiguousarray(x)[..., None, :, :]


def _read_png(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"{path}: not a readable image ({exc})") from None
    return area_resize(arr, size) if arr.shape != (size, size) else arr


def discover(root) -> list[tuple[str, list[Path]]]:
    """``[(alphabet/character, sorted image paths), ...]`` sorted by class name."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset directory not found")
    found = []
    for alphabet in sorted(p for p in root.iterdir() if p.is_dir()):
        for char in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(p for p in char.iterdir() if p.is_file())
            found.append((f"{alphabet.name}/{char.name}", files))
    if not found:
        raise IngestionError(f"{root}: no <alphabet>/<character>/ directories")
    return found


def load_omniglot(root, resize: int = 28, augment_rotations: bool = True, *, seed: int = 0,
                  n_train: int = 1200, n_test: int = 423, n_val: int = 0,
                  images_per_class: int = IMAGES_PER_CLASS):
    """Load ``<root>/<alphabet>/<character>/*.png`` into memory.

    Base classes are shuffled with ``seed`` (after sorting by name) and split
    into ``n_train`` / ``n_val`` / ``n_test``. With ``augment_rotations`` each
    training class contributes four classes (0, 90, 180, 270 degrees).
    Pixels are scaled to [0, 1]. Returns ``(dataset, ClassSplit)``.
    """
    found = discover(root)
    if n_train + n_val + n_test > len(found):
        raise IngestionError(f"{root}: {len(found)} classes, split needs "
                             f"{n_train + n_val + n_test}")
    images = np.empty((len(found), images_per_class, resize, resize), dtype=np.float32)
    for b, (name, files) in enumerate(found):
        if len(files) != images_per_class:
            raise IngestionError(f"{Path(root) / name}: expected {images_per_class} images, "
                                 f"found {len(files)}")
        for i, f in enumerate(files):
            images[b, i] = _read_png(f, resize)

    order = [int(i) for i in RandomStream(seed, "omniglot-split").permutation(len(found))]
    train_base = order[:n_train]
    val_base = order[n_train:n_train + n_val]
    test_base = order[n_train + n_val:n_train + n_val + n_test]

    classes: list[tuple[int, int]] = []
    names: list[str] = []

    def add(bases, turns):
        ids = []
        for b in bases:
            for k in turns:
                ids.append(len(classes))
                classes.append((b, k))
                names.append(found[b][0] + (f"@rot{90 * k}" if k else ""))
        return tuple(ids)

    turns = (0, 1, 2, 3) if augment_rotations else (0,)
    split = ClassSplit(train_classes=add(train_base, turns),
                       test_classes=add(test_base, (0,)),
                       val_classes=add(val_base, (0,)))
    return OmniglotDataset(images, classes, names), split
