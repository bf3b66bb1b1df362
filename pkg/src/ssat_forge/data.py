"""Datasets: CIFAR binary files, a raw-image directory format, synthetic shapes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_SIDE = 32
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE * 3
_LAYOUTS = {"cifar10": (1, 10), "cifar100": (2, 100)}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (M, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (M,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError(f"images {self.images.shape} / labels {self.labels.shape} inconsistent")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)

    def fraction(self, frac: float, seed: int = 0) -> "Dataset":
        """Class-stratified random subset keeping ``frac`` of every class."""
        if not 0 < frac <= 1:
            raise ValueError("fraction must be in (0, 1]")
        rng = np.random.default_rng(seed)
        keep = []
        for c in range(self.num_classes):
            members = np.flatnonzero(self.labels == c)
            n = max(1, int(round(frac * len(members)))) if len(members) else 0
            keep.append(np.sort(rng.permutation(members)[:n]))
        return self.subset(np.sort(np.concatenate(keep)))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# CIFAR binary


def parse_cifar_bytes(blob: bytes, layout: str = "cifar10", num_classes: int | None = None, split="train") -> Dataset:
    label_bytes, default_classes = _LAYOUTS[layout]
    k = default_classes if num_classes is None else num_classes
    record = label_bytes + CIFAR_PIXELS
    if len(blob) == 0 or len(blob) % record:
        raise DatasetError(f"truncated CIFAR file: {len(blob)} bytes is not a multiple of {record}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # CIFAR-100 stores coarse then fine
    if labels.max() >= k:
        raise DatasetError(f"label byte {labels.max()} >= class count {k}")
    planes = raw[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return Dataset(planes.astype(np.float32) / 255.0, labels, k, split)


def load_cifar_binary(path, layout: str = "cifar10", num_classes: int | None = None, split="train") -> Dataset:
    """Read one CIFAR binary batch file, or concatenate a list of them."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    blob = b"".join(Path(p).read_bytes() for p in paths)
    return parse_cifar_bytes(blob, layout, num_classes, split)


# ---------------------------------------------------------------------------
# raw directory format:
#   header.json   {"height": H, "width": W, "channels": C, "classes": K, "count": M}
#   labels.txt    one integer per line
#   images/NNNNNN.raw   C planes of H*W uint8 each


def save_raw_dir(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    h, w, c = dataset.image_shape
    header = {"height": h, "width": w, "channels": c, "classes": dataset.num_classes, "count": len(dataset)}
    (root / "header.json").write_text(json.dumps(header, sort_keys=True))
    (root / "labels.txt").write_text("".join(f"{int(y)}\n" for y in dataset.labels))
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    for i, img in enumerate(pixels):
        (root / "images" / f"{i:06d}.raw").write_bytes(img.transpose(2, 0, 1).tobytes())


def load_raw_dir(root, split: str = "train") -> Dataset:
    root = Path(root)
    header = json.loads((root / "header.json").read_text())
    h, w, c, k, m = (header[key] for key in ("height", "width", "channels", "classes", "count"))
    labels = np.array([int(x) for x in (root / "labels.txt").read_text().split()], dtype=np.int64)
    if len(labels) != m:
        raise DatasetError(f"labels.txt has {len(labels)} entries, header says {m}")
    images = np.empty((m, h, w, c), dtype=np.float32)
    for i in range(m):
        raw = (root / "images" / f"{i:06d}.raw").read_bytes()
        if len(raw) != h * w * c:
            raise DatasetError(f"image {i} has {len(raw)} bytes, expected {h * w * c}")
        images[i] = np.frombuffer(raw, dtype=np.uint8).reshape(c, h, w).transpose(1, 2, 0) / 255.0
    return Dataset(images, labels, k, split)


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("square", "circle", "cross", "triangle", "ring", "diamond", "hbar", "vbar")


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "cross":
        t = max(r * 0.3, 0.75)
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r)
    raise ValueError(kind)


def generate_synthetic(
    classes: int = 3,
    per_class: int = 100,
    image_size: int = 32,
    seed: int = 0,
    noise: float = 0.15,
    split: str = "train",
    tint: float = 0.5,
) -> Dataset:
    """Class ``k`` draws shape ``SHAPES[k]`` at a random place, size and colour.

    The foreground colour is a random colour pulled towards a per-class tint by
    ``tint``; background colour is independent of the class, and each image
    carries a random colour gradient and pixel noise, so raw-pixel templates
    only go so far.
    """
    if classes < 2 or classes > len(SHAPES):
        raise ValueError(f"classes must be in [2, {len(SHAPES)}]")
    if per_class < 1 or image_size < 8:
        raise ValueError("need per_class >= 1 and image_size >= 8")
    rng = np.random.default_rng(seed)
    palette = np.random.default_rng([0x5A7, classes]).uniform(0.0, 1.0, (classes, 3))
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.empty((len(labels), s, s, 3), dtype=np.float32)
    for i, y in enumerate(labels):
        r = rng.uniform(0.16, 0.34) * s
        cy, cx = rng.uniform(r * 0.8, s - r * 0.8, size=2)
        fg = (1.0 - tint) * rng.uniform(0.0, 1.0, 3) + tint * palette[y]
        bg = rng.uniform(0.0, 1.0, 3)
        while np.abs(fg - bg).sum() < 0.6:
            bg = rng.uniform(0.0, 1.0, 3)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * (xx - s / 2) + np.sin(angle) * (yy - s / 2)) / s
        base = bg[None, None, :] + 0.3 * ramp[..., None]
        mask = _shape_mask(SHAPES[y], yy, xx, cy, cx, r)[..., None]
        img = np.where(mask, fg[None, None, :], base)
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, split)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    flat = train.images.reshape(len(train), -1).astype(np.float64)
    centroids = np.stack([flat[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    probe = test.images.reshape(len(test), -1).astype(np.float64)
    dist = ((probe[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((dist.argmin(axis=1) == test.labels).mean())
