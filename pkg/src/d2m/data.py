"""Datasets: image-folder ingestion, the procedural toy set, batch sampling."""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import ImageBatch, ToySpec, fork_rng

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Labelled images in [-1, 1] with per-class index lists."""

    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    provenance: str = "toy"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("images must be [N, C, H, W] with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DatasetError("label outside [0, K-1]")
        if not torch.isfinite(self.images).all() or self.images.abs().max() > 1.0:
            raise DatasetError("pixels must be finite and within [-1, 1]")
        counts = torch.bincount(self.labels, minlength=self.class_count)
        missing = [c for c in range(self.class_count) if counts[c] == 0]
        if missing:
            raise DatasetError(f"classes without any image: {missing}")
        labels = self.labels.numpy()
        index = tuple(np.flatnonzero(labels == c) for c in range(self.class_count))
        object.__setattr__(self, "_class_index", index)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.images.shape[1:])

    @property
    def class_index(self) -> tuple[np.ndarray, ...]:
        return self._class_index

    def digest(self) -> str:
        h = hashlib.sha256(self.images.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        return h.hexdigest()

    def subset(self, indices) -> "Dataset":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.provenance)

    def split(self, fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        """Stratified split; returns ``(rest, held_out)`` with ``fraction`` held out per class."""
        held, rest = [], []
        for idx in self.class_index:
            perm = rng.permutation(idx)
            n = max(1, int(round(fraction * len(idx))))
            held.extend(perm[:n])
            rest.extend(perm[n:])
        return self.subset(sorted(rest)), self.subset(sorted(held))

    def as_batch(self) -> ImageBatch:
        return ImageBatch(self.images, self.labels)


def load_image_folder(root: str | Path) -> Dataset:
    """Read ``root/<class>/<image>`` files; classes indexed in lexicographic order."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"data directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class subdirectories")

    images, labels, size = [], [], None
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"empty class directory: {d}")
        for f in files:
            with Image.open(f) as im:
                arr = np.asarray(im if im.mode == "L" else im.convert("RGB"), dtype=np.uint8)
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            if size is None:
                size = arr.shape
            elif arr.shape != size:
                raise DatasetError(f"inconsistent image size {arr.shape} in {f}, expected {size}")
            images.append(arr)
            labels.append(label)

    pixels = torch.from_numpy(np.stack(images).astype(np.float32) / 127.5 - 1.0)
    return Dataset(pixels, torch.tensor(labels, dtype=torch.long), len(class_dirs), "folder")


# Signed distance functions on normalised coordinates; negative inside.
def _box(x, y, hx, hy):
    dx, dy = np.abs(x) - hx, np.abs(y) - hy
    outside = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
    return outside + np.minimum(np.maximum(dx, dy), 0)


def _disk(x, y):
    return np.hypot(x, y) - 0.8


def _square(x, y):
    return _box(x, y, 0.7, 0.7)


def _cross(x, y):
    return np.minimum(_box(x, y, 0.9, 0.25), _box(x, y, 0.25, 0.9))


def _triangle(x, y):
    k = np.sqrt(3.0)
    y = y - 0.2
    x = np.abs(x) - 0.9
    y = y + 0.9 / k
    flip = x + k * y > 0
    x, y = np.where(flip, (x - k * y) / 2, x), np.where(flip, (-k * x - y) / 2, y)
    x = x - np.clip(x, -1.8, 0.0)
    return -np.hypot(x, y) * np.sign(y)


def _ring(x, y):
    return np.abs(np.hypot(x, y) - 0.62) - 0.2


def _diamond(x, y):
    return (np.abs(x) + np.abs(y) - 0.95) / np.sqrt(2.0)


def _hbar(x, y):
    return _box(x, y, 0.95, 0.28)


def _vbar(x, y):
    return _box(x, y, 0.28, 0.95)


# ordered so that small class counts get the most distinct silhouettes
SHAPES = {
    "disk": _disk, "cross": _cross, "triangle": _triangle, "square": _square,
    "ring": _ring, "diamond": _diamond, "hbar": _hbar, "vbar": _vbar,
}


def _render_one(shape_fn, c: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    side = min(h, w)
    radius = side * rng.uniform(0.28, 0.42)
    cx = w / 2 + rng.uniform(-0.15, 0.15) * w
    cy = h / 2 + rng.uniform(-0.15, 0.15) * h
    angle = rng.uniform(-0.35, 0.35)
    u, v = (xs - cx) / radius, (ys - cy) / radius
    u, v = np.cos(angle) * u + np.sin(angle) * v, -np.sin(angle) * u + np.cos(angle) * v
    # one-pixel anti-aliased edge
    alpha = np.clip(0.5 - shape_fn(u, v) * radius, 0.0, 1.0)

    fg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.4, 1.0), rng.uniform(0.55, 1.0)))
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.35)))
    gx, gy = rng.normal(0, 0.25, size=2)
    shade = 1.0 + gx * (xs / w - 0.5) + gy * (ys / h - 0.5)
    background = bg[:, None, None] * shade[None]

    img = background * (1 - alpha)[None] + fg[:, None, None] * alpha[None]
    img = img + rng.normal(0.0, 0.05, size=(3, h, w))
    img = np.clip(img, 0.0, 1.0)
    if c == 1:
        img = img.mean(axis=0, keepdims=True)
    elif c != 3:
        raise DatasetError(f"toy images need 1 or 3 channels, got {c}")
    return img * 2.0 - 1.0


def make_toy_dataset(spec: ToySpec, split: str = "train", per_class: int | None = None) -> Dataset:
    """Render ``per_class`` jittered, anti-aliased shapes for each of K classes.

    Position, scale, rotation, colour, background shading and pixel noise are
    all drawn from the seed, so equal specs give bit-identical datasets.
    ``split`` selects an independent stream, e.g. ``"test"`` for a held-out set.
    """
    if spec.class_count > len(SHAPES):
        raise DatasetError(f"class_count {spec.class_count} exceeds the {len(SHAPES)} shape templates")
    c, h, w = spec.image_shape
    n = spec.per_class if per_class is None else per_class
    rng = fork_rng(spec.seed, f"toy-dataset/{split}")
    fns = list(SHAPES.values())[: spec.class_count]
    images = np.empty((spec.class_count * n, c, h, w), dtype=np.float32)
    labels = np.empty(spec.class_count * n, dtype=np.int64)
    i = 0
    # interleave classes so every prefix of the set stays balanced
    for _ in range(n):
        for label, fn in enumerate(fns):
            images[i] = _render_one(fn, c, h, w, rng)
            labels[i] = label
            i += 1
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels), spec.class_count, "toy")


def draw_labels(class_count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Label multiset for one batch, uniform over classes."""
    return rng.integers(0, class_count, size=size)


def balanced_labels(class_count: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(class_count), per_class)


def sample_real_batch(ds: Dataset, labels_wanted, rng: np.random.Generator) -> ImageBatch:
    """Real images whose labels equal ``labels_wanted`` position by position.

    Within a class, items are drawn without replacement while the class has
    enough images and with replacement otherwise.
    """
    wanted = np.asarray(labels_wanted, dtype=np.int64)
    bad = wanted[(wanted < 0) | (wanted >= ds.class_count)]
    if bad.size:
        raise DatasetError(f"unknown label {int(bad[0])} for a {ds.class_count}-class dataset")
    chosen = np.empty(len(wanted), dtype=np.int64)
    for c in np.unique(wanted):
        pos = np.flatnonzero(wanted == c)
        pool = ds.class_index[c]
        chosen[pos] = rng.choice(pool, size=len(pos), replace=len(pos) > len(pool))
    idx = torch.from_numpy(chosen)
    return ImageBatch(ds.images[idx], torch.from_numpy(wanted))


def sample_indices(ds: Dataset, per_class: int, rng: np.random.Generator) -> np.ndarray:
    out = []
    for pool in ds.class_index:
        out.append(rng.choice(pool, size=per_class, replace=per_class > len(pool)))
    return np.concatenate(out)
