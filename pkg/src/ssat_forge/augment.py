"""Augmentation pipeline, mixup, and the random perspective perturbation.

Images are ``(H, W, C)`` float arrays in ``[0, 1]``.  Every random draw comes
from an explicit ``numpy.random.Generator``; :class:`AugmentationPipeline`
derives one per ``(seed, epoch, sample index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Sample ``image`` at float pixel coordinates; zeros outside the frame."""
    h, w = image.shape[:2]
    inside = (ys >= -tol) & (ys <= h - 1 + tol) & (xs >= -tol) & (xs <= w - 1 + tol)
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = image[y0, x0] * (1 - wx) + image[y0, x1] * wx
    bottom = image[y1, x0] * (1 - wx) + image[y1, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return np.where(inside[..., None], out, 0.0).astype(image.dtype)


def _affine(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Warp by a 2x3 matrix that maps output (x, y) to input (x, y)."""
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = matrix[0, 0] * xx + matrix[0, 1] * yy + matrix[0, 2]
    ys = matrix[1, 0] * xx + matrix[1, 1] * yy + matrix[1, 2]
    return bilinear_sample(image, ys, xs)


# ---------------------------------------------------------------------------
# transforms


@dataclass
class RandomResizedCrop:
    size: int
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def box(self, h: int, w: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
        area = h * w
        log_ratio = (math.log(self.ratio[0]), math.log(self.ratio[1]))
        for _ in range(10):
            target = area * rng.uniform(*self.scale)
            aspect = math.exp(rng.uniform(*log_ratio))
            cw = int(round(math.sqrt(target * aspect)))
            ch = int(round(math.sqrt(target / aspect)))
            if 0 < cw <= w and 0 < ch <= h:
                top = int(rng.integers(0, h - ch + 1))
                left = int(rng.integers(0, w - cw + 1))
                return top, left, ch, cw
        side = min(h, w)
        return (h - side) // 2, (w - side) // 2, side, side

    def __call__(self, image, rng):
        h, w = image.shape[:2]
        top, left, ch, cw = self.box(h, w, rng)
        # align corners of the crop with corners of the output grid
        ys = top + np.linspace(0.0, ch - 1, self.size)
        xs = left + np.linspace(0.0, cw - 1, self.size)
        return bilinear_sample(image, ys[:, None] + 0 * xs[None, :], xs[None, :] + 0 * ys[:, None])


@dataclass
class HorizontalFlip:
    p: float = 0.5

    def __call__(self, image, rng):
        return image[:, ::-1].copy() if rng.random() < self.p else image


@dataclass
class RandomErasing:
    """Fill one rectangle with uniform noise (``mode="pixel"``) or zeros."""

    p: float = 0.25
    area: tuple[float, float] = (0.02, 1 / 3)
    aspect: tuple[float, float] = (0.3, 3.3)
    mode: str = "pixel"

    def box(self, h: int, w: int, rng) -> tuple[int, int, int, int] | None:
        log_aspect = (math.log(self.aspect[0]), math.log(self.aspect[1]))
        for _ in range(10):
            target = h * w * rng.uniform(*self.area)
            aspect = math.exp(rng.uniform(*log_aspect))
            eh = int(round(math.sqrt(target * aspect)))
            ew = int(round(math.sqrt(target / aspect)))
            if 0 < eh < h and 0 < ew < w and self.area[0] <= eh * ew / (h * w) <= self.area[1]:
                return int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1)), eh, ew
        return None

    def __call__(self, image, rng):
        if rng.random() >= self.p:
            return image
        h, w, c = image.shape
        box = self.box(h, w, rng)
        if box is None:
            return image
        top, left, eh, ew = box
        out = image.copy()
        fill = rng.random((eh, ew, c)) if self.mode == "pixel" else 0.0
        out[top : top + eh, left : left + ew] = fill
        return out


def _brightness(img, level):
    return img * (1.0 + level)


def _contrast(img, level):
    mean = img.mean()
    return (img - mean) * (1.0 + level) + mean


def _rotate(img, level):
    h, w = img.shape[:2]
    theta = math.radians(30.0 * level)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    c, s = math.cos(theta), math.sin(theta)
    matrix = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])
    return _affine(img, matrix)


def _translate(img, level):
    h, w = img.shape[:2]
    return _affine(img, np.array([[1.0, 0.0, -0.45 * level * w], [0.0, 1.0, -0.45 * level * h]]))


def _posterize(img, level):
    bits = 8 - int(round(abs(level) * 4))
    q = 2 ** (8 - bits)
    return np.floor(np.clip(img, 0, 1) * 255.0 / q) * q / 255.0


RAND_OPS = {
    "brightness": _brightness,
    "contrast": _contrast,
    "rotate": _rotate,
    "translate": _translate,
    "posterize": _posterize,
}


@dataclass
class RandAugment:
    """``n`` ops drawn from a reduced op set, magnitude ~ N(m, std) on a 0..10 scale."""

    n: int = 2
    magnitude: float = 9.0
    magnitude_std: float = 0.5
    prob: float = 0.5
    ops: tuple[str, ...] = tuple(RAND_OPS)

    def __call__(self, image, rng):
        for name in rng.choice(self.ops, size=self.n, replace=True):
            if rng.random() >= self.prob:
                continue
            m = float(np.clip(rng.normal(self.magnitude, self.magnitude_std), 0.0, 10.0)) / 10.0
            level = m if rng.random() < 0.5 else -m
            image = np.clip(RAND_OPS[str(name)](image, level), 0.0, 1.0)
        return image


@dataclass
class AugmentationPipeline:
    transforms: list = field(default_factory=list)
    seed: int = 0

    def rng_for(self, epoch: int, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 0xA06, epoch, index])

    def __call__(self, image: np.ndarray, epoch: int, index: int) -> np.ndarray:
        return augment(image, self, self.rng_for(epoch, index))

    def batch(self, images: np.ndarray, epoch: int, indices) -> np.ndarray:
        return np.stack([self(img, epoch, int(i)) for img, i in zip(images, indices)])


def augment(image: np.ndarray, pipeline: AugmentationPipeline, rng: np.random.Generator) -> np.ndarray:
    out = image
    for t in pipeline.transforms:
        out = np.clip(t(out, rng), 0.0, 1.0).astype(image.dtype, copy=False)
    return out


def default_pipeline(image_size: int, seed: int = 0, crop_scale=(0.08, 1.0), erase_p: float = 0.25, rand_n: int = 2):
    """Crop, flip, RandAugment and random erasing with the usual ViT settings."""
    transforms = [RandomResizedCrop(image_size, scale=tuple(crop_scale)), HorizontalFlip(0.5)]
    if rand_n:
        transforms.append(RandAugment(n=rand_n))
    if erase_p:
        transforms.append(RandomErasing(erase_p))
    return AugmentationPipeline(transforms, seed)


# ---------------------------------------------------------------------------
# mixup


def mixup(
    images: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
):
    """Convex mix of the batch with a shuffled copy of itself.

    Returns ``(images, targets, lam, permutation)``; ``targets`` must be
    distributions ``(B, K)``.
    """
    if not alpha > 0:
        raise ValueError("mixup alpha must be positive")
    if len(images) < 2:
        raise ValueError("mixup needs a batch of at least 2")
    perm = rng.permutation(len(images))
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    if lam == 1.0:
        return images, targets, lam, perm
    mixed = (lam * images + (1.0 - lam) * images[perm]).astype(images.dtype)
    soft = lam * targets + (1.0 - lam) * targets[perm]
    return mixed, soft, lam, perm


# ---------------------------------------------------------------------------
# perspective perturbation


def perspective_corners(h: int, w: int, strength: float, rng: np.random.Generator):
    """Source corners displaced by at most ``strength * min(H, W) / 4`` per axis."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must be in [0, 1]")
    dst = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    bound = strength * min(h, w) / 4.0
    return dst, dst + rng.uniform(-bound, bound, size=dst.shape)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping each ``src`` (x, y) to ``dst`` (x, y)."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    sol = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.append(sol, 1.0).reshape(3, 3)


def perspective_perturb(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Random perspective warp, bilinear resampling, zeros outside the frame."""
    h, w = image.shape[:2]
    out_corners, src_corners = perspective_corners(h, w, strength, rng)
    mat = homography(out_corners, src_corners)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = mat[2, 0] * xx + mat[2, 1] * yy + mat[2, 2]
    xs = (mat[0, 0] * xx + mat[0, 1] * yy + mat[0, 2]) / denom
    ys = (mat[1, 0] * xx + mat[1, 1] * yy + mat[1, 2]) / denom
    return bilinear_sample(image, ys, xs)


def perturb_dataset_images(images: np.ndarray, strength: float, seed: int) -> np.ndarray:
    return np.stack(
        [perspective_perturb(img, strength, np.random.default_rng([seed, 0x9E5, i])) for i, img in enumerate(images)]
    )
