"""Loading the two-folder cell-image dataset, preprocessing, splitting, batching.

Layout expected on disk::

    root/<class_a>/*.png
    root/<class_b>/*.png

Class indices follow the lexicographic order of the two folder names, so
``Parasitized``/``Uninfected`` and ``Infected``/``Uninfected`` both map the
infected class to 0.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import DTYPE, Rng

log = logging.getLogger(__name__)

IMAGE_SIZE = 64


class DataError(Exception):
    """The dataset on disk cannot be used."""


class UnsupportedImageError(DataError):
    """A file is not a decodable PNG image."""


@dataclass
class LabeledImage:
    pixels: np.ndarray  # uint8 [H, W, 3]
    label: int
    source_path: str = ""


@dataclass
class DatasetSplit:
    train: list[LabeledImage]
    val: list[LabeledImage]
    test: list[LabeledImage]
    class_names: list[str] = field(default_factory=list)


@dataclass
class Batch:
    x: np.ndarray  # float32 [n, 64, 64, 3] in [0, 1]
    y: np.ndarray  # float32 [n, 2] one-hot
    labels: np.ndarray


# --------------------------------------------------------------------------
# decoding and preprocessing
# --------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Decode a PNG file to an RGB ``uint8`` array."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise UnsupportedImageError(
                    f"{path}: unsupported image format {im.format}, only PNG is accepted")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise UnsupportedImageError(f"{path}: cannot decode image ({exc})") from None


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped at the edges
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(pixels: np.ndarray, height: int = IMAGE_SIZE,
                    width: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of ``uint8 [H, W, C]`` with half-pixel sampling.

    Interpolation runs in float64; results are rounded half up
    (``floor(v + 0.5)``) and clipped to ``[0, 255]``.  No antialiasing is
    applied when shrinking.
    """
    if isinstance(pixels, LabeledImage):
        pixels = pixels.pixels
    h, w = pixels.shape[:2]
    if (h, w) == (height, width):
        return pixels.copy()
    y0, y1, fy = _axis_weights(h, height)
    x0, x1, fx = _axis_weights(w, width)
    img = pixels.astype(np.float64)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def normalize(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(DTYPE) / DTYPE(255.0)).astype(DTYPE, copy=False)


def _threads() -> int:
    env = os.environ.get("MICROCNN_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _load_one(path: Path, size):
    try:
        px = read_png(path)
    except UnsupportedImageError as exc:
        return None, str(exc)
    if size is not None:
        px = resize_bilinear(px, size, size)
    return px, None


def load_directory(root, size: int | None = IMAGE_SIZE):
    """Read ``root/<class>/*.png`` for exactly two class folders.

    Returns ``(images, class_names)``.  Images are resized to ``size`` x
    ``size`` on load unless ``size`` is ``None``.  Files that cannot be
    decoded as PNG are logged and skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist or is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) != 2:
        raise DataError(f"{root} must contain exactly 2 class folders, "
                        f"found {len(class_dirs)}: {[p.name for p in class_dirs]}")
    class_names = [p.name for p in class_dirs]
    images: list[LabeledImage] = []
    skipped = 0
    with ThreadPoolExecutor(_threads()) as pool:
        for label, d in enumerate(class_dirs):
            files = sorted(p for p in d.iterdir() if p.is_file())
            count = 0
            # map preserves submission order, so results stay deterministic
            for path, (px, err) in zip(files, pool.map(lambda p: _load_one(p, size), files)):
                if err is not None:
                    log.warning("skipping %s", err)
                    skipped += 1
                    continue
                images.append(LabeledImage(px, label, str(path)))
                count += 1
            if count == 0:
                raise DataError(f"class folder {d} contains no decodable PNG images")
    if skipped:
        log.warning("skipped %d unreadable file(s) under %s", skipped, root)
    return images, class_names


# --------------------------------------------------------------------------
# splitting and batching
# --------------------------------------------------------------------------

PARTITIONS = ("train", "val", "test")


def split(images: Sequence[LabeledImage], ratios=(0.8, 0.1, 0.1), seed: int = 0,
          class_names: Sequence[str] | None = None) -> DatasetSplit:
    """Stratified split: each class is shuffled with a seeded generator and
    sliced proportionally, so every partition holds both classes."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    rng = Rng(seed)
    labels = sorted({im.label for im in images})
    parts: dict[str, list[LabeledImage]] = {p: [] for p in PARTITIONS}
    for label in labels:
        members = [im for im in images if im.label == label]
        order = rng.permutation(len(members))
        n = len(members)
        n_train = int(round(n * ratios[0]))
        n_val = int(round(n * ratios[1]))
        n_test = n - n_train - n_val
        for part, count in zip(PARTITIONS, (n_train, n_val, n_test)):
            if count <= 0:
                name = class_names[label] if class_names else label
                raise DataError(f"{part} partition would get no images of class {name} "
                                f"({n} available)")
        cuts = [0, n_train, n_train + n_val, n]
        for i, part in enumerate(PARTITIONS):
            parts[part].extend(members[j] for j in order[cuts[i]:cuts[i + 1]])
    return DatasetSplit(parts["train"], parts["val"], parts["test"],
                        list(class_names) if class_names else [])


def one_hot(labels, classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((len(labels), classes), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def to_batch(images: Sequence[LabeledImage], classes: int = 2) -> Batch:
    x = np.stack([normalize(im.pixels) for im in images])
    labels = np.array([im.label for im in images], dtype=np.intp)
    return Batch(x, one_hot(labels, classes), labels)


def batches(images: Sequence[LabeledImage], batch_size: int, shuffle: bool = False,
            rng: Rng | None = None, classes: int = 2) -> Iterator[Batch]:
    """Yield every image exactly once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an Rng")
        order = rng.permutation(len(images))
    else:
        order = np.arange(len(images))
    for start in range(0, len(images), batch_size):
        yield to_batch([images[i] for i in order[start:start + batch_size]], classes)


def batch_count(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
