"""Frozen-feature Fréchet distance, discriminator output diagnostics, latency."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .losses import FrozenPerceptualExtractor
from .models import (
    ArchitectureBlueprint,
    DiscriminatorNetwork,
    GeneratorNetwork,
    ScaledArchitecture,
    build_generator,
    format_fraction,
    parse_fraction,
)

log = logging.getLogger(__name__)

METRIC_NAME = "frozen-feature Fréchet distance (ff-FD)"
HIST_BINS = 20


class FrechetError(ArithmeticError):
    pass


@dataclass
class FrozenFeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8, rtol=0):
            raise ValueError("covariance is not symmetric")
        if self.sample_count < 2:
            raise ValueError("need at least 2 samples")

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FrozenFeatureStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise ValueError(f"need an (N>=2, d) feature matrix, got shape {features.shape}")
        cov = np.cov(features, rowvar=False)
        return cls(features.mean(axis=0), (cov + cov.T) / 2, features.shape[0])


@torch.no_grad()
def extract_features(images: Tensor, extractor: FrozenPerceptualExtractor, batch_size: int = 64) -> np.ndarray:
    if images.shape[0] < 2:
        raise ValueError("extract_features needs at least 2 images")
    rows = [extractor.embed(images[i : i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(rows).double().numpy()


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: FrozenFeatureStats, b: FrozenFeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken as Tr((S_a^½ S_b S_a^½)^½), whose
    argument is symmetric PSD, so both roots come from ``eigh`` with negative
    eigenvalues clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    sa, sb = a.covariance, b.covariance
    try:
        if not (np.isfinite(sa).all() and np.isfinite(sb).all()):
            raise np.linalg.LinAlgError("non-finite covariance")
        root_a = _psd_sqrt(sa)
        inner = root_a @ sb @ root_a
        cross_vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise FrechetError(
            f"matrix square root failed ({exc}); cond(S_a)={np.linalg.cond(sa):.3g}, cond(S_b)={np.linalg.cond(sb):.3g}"
        ) from exc
    tr_cross = np.sqrt(np.clip(cross_vals, 0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2 * tr_cross)
    if value < 0:
        if value < -1e-6:
            log.warning("Fréchet distance %.3g < 0 from round-off; clamped to 0", value)
        value = 0.0
    return value


def ff_fd(images_a: Tensor, images_b: Tensor, extractor: FrozenPerceptualExtractor) -> float:
    fa = FrozenFeatureStats.from_features(extract_features(images_a, extractor))
    fb = FrozenFeatureStats.from_features(extract_features(images_b, extractor))
    return frechet_distance(fa, fb)


# -- discriminator output distributions ------------------------------------


@dataclass
class DiscOutputStats:
    probabilities: list[float]
    histogram: list[int]
    mean: float
    sample_count: int
    bin_edges: list[float] = field(default_factory=lambda: np.linspace(0, 1, HIST_BINS + 1).tolist())

    @classmethod
    def from_probabilities(cls, probs: Sequence[float], bins: int = HIST_BINS) -> "DiscOutputStats":
        probs = np.asarray(probs, dtype=np.float64).reshape(-1)
        counts, edges = np.histogram(probs, bins=bins, range=(0.0, 1.0))
        return cls(probs.tolist(), counts.tolist(), float(probs.mean()), int(probs.size), edges.tolist())

    def to_csv(self) -> str:
        lines = ["bin_low,bin_high,count"]
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.histogram):
            lines.append(f"{lo:.2f},{hi:.2f},{c}")
        return "\n".join(lines) + "\n"


@torch.no_grad()
def disc_output_distribution(
    d: DiscriminatorNetwork, g: GeneratorNetwork, images: Tensor, count: int = 100, bins: int = HIST_BINS
) -> DiscOutputStats:
    """Histogram of d(g(x)) over the first ``count`` LR inputs."""
    if images.shape[0] < count:
        raise ValueError(f"need at least {count} LR inputs, got {images.shape[0]}")
    was_training = (g.training, d.training)
    g.eval(), d.eval()
    try:
        probs = torch.cat([d(g(images[i : i + 50])) for i in range(0, count, 50)])[:count]
    finally:
        g.train(was_training[0]), d.train(was_training[1])
    return DiscOutputStats.from_probabilities(probs.numpy(), bins)


def balance_score(stats: DiscOutputStats) -> float:
    return abs(stats.mean - 0.5)


# -- latency ----------------------------------------------------------------


@dataclass
class SpeedReport:
    fractions: list[Fraction]
    latency_ms: list[float]
    passes: int
    warmup: int

    @property
    def speed_up(self) -> list[float]:
        base = self.latency_ms[self.fractions.index(Fraction(1))]
        return [1.0 if f == 1 else base / t for f, t in zip(self.fractions, self.latency_ms)]

    def rows(self) -> list[dict]:
        return [
            {"channels": format_fraction(f), "latency_ms": t, "speed_up": s}
            for f, t, s in zip(self.fractions, self.latency_ms, self.speed_up)
        ]

    def render(self) -> str:
        head = f"{'x Channels':>10} | {'Latency (ms)':>12} | Speed-up"
        lines = [head, "-" * len(head)]
        for row in self.rows():
            s = "none (1.00x)" if row["channels"] == "1" else f"{row['speed_up']:.2f}x"
            lines.append(f"{row['channels']:>10} | {row['latency_ms']:>12.3f} | {s}")
        return "\n".join(lines)


@torch.inference_mode()
def measure_speedup(
    blueprint: ArchitectureBlueprint,
    fractions: Sequence = (1, "1/2", "1/4", "1/8"),
    input_shape: tuple[int, int, int, int] | None = None,
    passes: int = 50,
    warmup: int = 5,
    seed: int = 0,
) -> SpeedReport:
    """Mean single-threaded generator latency per channel fraction."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    fracs = [parse_fraction(f) for f in fractions]
    if Fraction(1) not in fracs:
        fracs.insert(0, Fraction(1))
    if input_shape is None:
        input_shape = (1, blueprint.input_channels, 16, 16)
    x = torch.randn(input_shape, generator=torch.Generator().manual_seed(seed))
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    latencies = []
    try:
        for frac in fracs:
            g = build_generator(ScaledArchitecture(blueprint, frac), seed).eval()
            for _ in range(warmup):
                g(x)
            start = time.perf_counter()
            for _ in range(passes):
                g(x)
            latencies.append((time.perf_counter() - start) / passes * 1e3)
    finally:
        torch.set_num_threads(threads)
    return SpeedReport(fracs, latencies, passes, warmup)
