"""HR/LR pair construction and split bookkeeping."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MIN_IMAGES = 10


@dataclass
class Splits:
    train: list[int]
    validation: list[int]
    test: list[int]

    def as_dict(self) -> dict[str, list[int]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass
class SRDataset:
    hr_images: torch.Tensor  # (N, C, H, W) in [-1, 1]
    scale: int
    split_seed: int = 0
    splits: Splits | None = None
    source: dict = field(default_factory=dict)
    lr_images: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        self.hr_images = self.hr_images.float().contiguous()
        self.lr_images = degrade(self.hr_images, self.scale)

    def __len__(self) -> int:
        return self.hr_images.shape[0]

    @property
    def hr_size(self) -> int:
        return self.hr_images.shape[-1]

    def content_hash(self) -> str:
        return hashlib.sha256(self.hr_images.numpy().tobytes()).hexdigest()

    def subset(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(lr, hr)`` tensors of one split."""
        if self.splits is None:
            raise ValueError("dataset has not been split")
        idx = torch.tensor(getattr(self.splits, name), dtype=torch.long)
        return self.lr_images[idx], self.hr_images[idx]

    def manifest(self) -> dict:
        return {
            "source": self.source,
            "count": len(self),
            "hr_size": self.hr_size,
            "scale": self.scale,
            "split_seed": self.split_seed,
            "splits": self.splits.as_dict() if self.splits else None,
            "content_hash": self.content_hash(),
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def degrade(hr: torch.Tensor, scale: int) -> torch.Tensor:
    """Antialiased bicubic downscale by ``scale``; accepts (C,H,W) or (N,C,H,W)."""
    single = hr.dim() == 3
    batch = hr.unsqueeze(0) if single else hr
    h, w = batch.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"HR size {h}x{w} not divisible by scale {scale}")
    lr = F.interpolate(batch, size=(h // scale, w // scale), mode="bicubic", align_corners=False, antialias=True)
    lr = lr.clamp(-1.0, 1.0)
    return lr[0] if single else lr


def _load_image(path: Path, hr_size: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        img = img.crop((left, top, left + side, top + side)).resize((hr_size, hr_size), Image.BICUBIC)
        arr = np.asarray(img, dtype=np.float32)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def ingest(directory: str | Path, hr_size: int = 64, limit: int = 640, scale: int = 4) -> SRDataset:
    """Load up to ``limit`` PNG/JPEG images in filename order, centre-cropped and resized."""
    if limit < MIN_IMAGES:
        raise ValueError(f"limit must be >= {MIN_IMAGES}")
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, names = [], []
    for path in files:
        if len(images) == limit:
            break
        try:
            images.append(_load_image(path, hr_size))
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path.name, exc)
            continue
        names.append(path.name)
    if len(images) < MIN_IMAGES:
        raise ValueError(f"{directory}: only {len(images)} usable images, need at least {MIN_IMAGES}")
    hr = torch.from_numpy(np.stack(images))
    return SRDataset(hr, scale, source={"kind": "directory", "path": str(directory), "files": names})


def _synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((3, size, size))
    # linear colour gradient background
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    c0, c1 = rng.uniform(-0.8, 0.8, (2, 3))
    img += c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        ry, rx = rng.uniform(0.05, 0.35, 2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        colour = rng.uniform(-1, 1, 3)
        alpha = rng.uniform(0.5, 1.0)
        img = np.where(inside[None], (1 - alpha) * img + alpha * colour[:, None, None], img)
    # band-limited noise: random spectrum restricted to a frequency annulus
    freqs = np.fft.fftfreq(size)
    radius = np.hypot(*np.meshgrid(freqs, freqs, indexing="ij"))
    lo, hi = sorted(rng.uniform(0.05, 0.35, 2))
    band = (radius >= lo) & (radius <= hi + 0.05)
    spectrum = (rng.normal(size=(3, size, size)) + 1j * rng.normal(size=(3, size, size))) * band
    texture = np.real(np.fft.ifft2(spectrum))
    texture /= np.abs(texture).max() + 1e-12
    img += rng.uniform(0.05, 0.3) * texture
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def synthesize(count: int = 640, hr_size: int = 64, seed: int = 0, scale: int = 4) -> SRDataset:
    """Procedural images (gradients, ellipses, band-limited texture), fully seeded."""
    if count < MIN_IMAGES:
        raise ValueError(f"count must be >= {MIN_IMAGES}")
    rng = np.random.default_rng(seed)
    hr = torch.from_numpy(np.stack([_synthetic_image(rng, hr_size) for _ in range(count)]))
    return SRDataset(hr, scale, source={"kind": "synthetic", "seed": seed, "count": count})


def split(dataset: SRDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Splits:
    """Seeded shuffle, then partition into (train, validation, test).

    Validation and test sizes are rounded from their fractions; train takes
    the remainder. The result is also stored on ``dataset``.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_val, n_test = round(n * fractions[1]), round(n * fractions[2])
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"fractions {fractions} leave an empty split for {n} images")
    order = np.random.default_rng(seed).permutation(n).tolist()
    splits = Splits(
        train=sorted(order[:n_train]),
        validation=sorted(order[n_train : n_train + n_val]),
        test=sorted(order[n_train + n_val :]),
    )
    dataset.splits = splits
    dataset.split_seed = seed
    return splits


def fractions_for_counts(train: int, validation: int, test: int) -> tuple[float, float, float]:
    total = train + validation + test
    return train / total, validation / total, test / total
