"""Image loading, pretraining augmentation and the synthetic desk-scale dataset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from latentmim.errors import ConfigError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff", ".ppm"}
CROP_SCALE = (0.2, 1.0)
CROP_RATIO = (3 / 4, 4 / 3)


@dataclass
class ImageSet:
    """Decoded images (uint8 ``[H, W, 3]``), with labels and source names."""

    images: list
    labels: np.ndarray
    names: list
    skipped: int = 0
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet([self.images[i] for i in idx], self.labels[idx], [self.names[i] for i in idx],
                        0, self.class_names)


@dataclass
class ImageBatch:
    images: torch.Tensor  # [B, 3, R, R], normalized
    indices: np.ndarray  # dataset index of each row
    epoch: int = 0


def load_image_folder(data_dir) -> ImageSet:
    """Decode every image below ``data_dir``.

    Files directly inside a subdirectory get that subdirectory as class label;
    files at the top level get label -1. Undecodable files are skipped with a
    warning and counted.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise ConfigError(f"data_dir {str(root)!r} is not a directory")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise ConfigError(f"data_dir {str(root)!r} contains no images")
    class_names = sorted({p.parent.name for p in files if p.parent != root})
    class_index = {c: i for i, c in enumerate(class_names)}
    images, labels, names = [], [], []
    skipped = 0
    for path in files:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            log.warning("skipping undecodable image %s: %s", path, exc)
            skipped += 1
            continue
        images.append(arr)
        labels.append(class_index.get(path.parent.name, -1) if path.parent != root else -1)
        names.append(str(path.relative_to(root)))
    if not images:
        raise ConfigError(f"data_dir {str(root)!r} has no decodable images ({skipped} skipped)")
    return ImageSet(images, np.asarray(labels, dtype=np.int64), names, skipped, class_names)


def write_image_folder(images: ImageSet, data_dir) -> None:
    root = Path(data_dir)
    for i, (img, label) in enumerate(zip(images.images, images.labels)):
        sub = root / (f"class{label}" if label >= 0 else ".")
        sub.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(sub / f"img{i:05d}.png")


def random_resized_crop_box(height: int, width: int, rng: np.random.Generator,
                            scale=CROP_SCALE, ratio=CROP_RATIO) -> tuple[int, int, int, int]:
    """``(top, left, h, w)`` of a crop covering a random area fraction and aspect ratio.

    Ten attempts, then a center crop clamped to the allowed aspect range.
    """
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    """uint8 or [0, 1] float ``[H, W, 3]`` -> normalized float32 ``[3, H, W]``."""
    x = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32)
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def augment(img: np.ndarray, resolution: int, rng: np.random.Generator, mean, std) -> np.ndarray:
    """Random resized crop, horizontal flip (p=0.5), per-channel normalization."""
    top, left, h, w = random_resized_crop_box(img.shape[0], img.shape[1], rng)
    crop = Image.fromarray(img[top : top + h, left : left + w])
    out = np.asarray(crop.resize((resolution, resolution), Image.BILINEAR))
    if rng.random() < 0.5:
        out = hflip(out)
    return normalize(out, mean, std)


def plain(img: np.ndarray, resolution: int, mean, std) -> np.ndarray:
    """Resize only (evaluation path)."""
    if img.shape[0] != resolution or img.shape[1] != resolution:
        img = np.asarray(Image.fromarray(img).resize((resolution, resolution), Image.BILINEAR))
    return normalize(img, mean, std)


def augment_seed(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(epoch), int(index), 0xA06])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0x5EED])).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def epoch_batch(dataset: ImageSet, epoch: int, batch: int, batch_size: int, resolution: int,
                seed: int, mean, std) -> ImageBatch:
    """Batch number ``batch`` of ``epoch``; a pure function of its arguments."""
    order = epoch_order(len(dataset), seed, epoch)
    idx = order[batch * batch_size : (batch + 1) * batch_size]
    rows = [
        augment(dataset.images[i], resolution, np.random.default_rng(augment_seed(seed, epoch, i)), mean, std)
        for i in idx
    ]
    return ImageBatch(torch.from_numpy(np.stack(rows)), idx, epoch)


def ingest(data_dir, resolution: int, seed: int, batch_size: int = 32, epoch: int = 0,
           mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), dataset: ImageSet | None = None) -> Iterator[ImageBatch]:
    """Stream the augmented batches of one epoch."""
    dataset = dataset if dataset is not None else load_image_folder(data_dir)
    for b in range(batches_per_epoch(len(dataset), batch_size)):
        yield epoch_batch(dataset, epoch, b, batch_size, resolution, seed, mean, std)


def eval_tensor(dataset: ImageSet, resolution: int, mean, std, idx: Sequence[int] | None = None) -> torch.Tensor:
    idx = range(len(dataset)) if idx is None else idx
    return torch.from_numpy(np.stack([plain(dataset.images[i], resolution, mean, std) for i in idx]))


# ---------------------------------------------------------------------------
# synthetic data

SHAPES = ("square", "disk", "bar", "cross")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "disk":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c**2
    third = max(1, size // 3)
    horiz = (yy >= c - third / 2) & (yy < c + third / 2)
    if kind == "bar":
        return horiz
    vert = (xx >= c - third / 2) & (xx < c + third / 2)
    return horiz | vert


def make_synthetic(num_images: int, image_size: int = 32, seed: int = 0, num_classes: int = 4,
                   noise_std: float = 0.08, min_size: float = 0.3, max_size: float = 0.5) -> ImageSet:
    """Structured foreground on a noise background.

    Each image has one bright, saturated shape (class = shape kind) at a random
    position and size over a gray background of Gaussian noise.
    """
    if not 1 < num_classes <= len(SHAPES):
        raise ConfigError(f"num_classes must lie in [2, {len(SHAPES)}], got {num_classes}")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(num_images):
        label = i % num_classes
        bg = 0.5 + noise_std * rng.standard_normal((image_size, image_size, 3))
        size = int(rng.integers(int(min_size * image_size), int(max_size * image_size) + 1))
        top = int(rng.integers(0, image_size - size + 1))
        left = int(rng.integers(0, image_size - size + 1))
        color = rng.uniform(0.0, 1.0, 3)
        color[rng.integers(0, 3)] = 1.0
        mask = _shape_mask(SHAPES[label], size)
        patch = bg[top : top + size, left : left + size]
        patch[mask] = color
        images.append(np.clip(np.round(bg * 255), 0, 255).astype(np.uint8))
        labels.append(label)
    names = [f"synthetic{i:05d}" for i in range(num_images)]
    return ImageSet(images, np.asarray(labels, dtype=np.int64), names, 0, list(SHAPES[:num_classes]))
