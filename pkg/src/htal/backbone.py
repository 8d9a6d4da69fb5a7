"""Multi-scale pyramid, coarse anchor-free prediction and boundary features.

The base temporal unit throughout is one level-1 location (one snippet).
A level-l location i sits at base-unit center i * 2^(l-1); regressed
distances are converted to base units with the configured scale factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import Conv1d, LayerNorm, Module


@dataclass
class PyramidLevel:
    level: int            # 1-based
    features: Tensor      # level length x channels
    stride: int           # base units per location, 2^(level-1)

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class BoundaryFeatures:
    start: Tensor         # T x C, nonnegative
    end: Tensor           # T x C, nonnegative


def location_centers(length: int, level: int) -> np.ndarray:
    """Base-unit centers of every location at the given level."""
    return np.arange(length, dtype=np.float64) * (2 ** (level - 1))


class Pyramid(Module):
    """Stride-1 stem then repeated stride-2 convolutions, halving T per level."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.convs = [Conv1d(config.in_channels, config.channels, 3, stride=1, padding=1, rng=rng)]
        for _ in range(config.levels - 1):
            self.convs.append(Conv1d(config.channels, config.channels, 3, stride=2, padding=1, rng=rng))

    def __call__(self, features: Tensor) -> list[PyramidLevel]:
        t = features.shape[0]
        n = len(self.convs)
        unit = 2 ** (n - 1)
        if t % unit != 0:
            needed = ((t + unit - 1) // unit) * unit
            raise ValueError(
                f"input length {t} not divisible by 2^(levels-1)={unit}; pad to {needed} first"
            )
        levels = []
        x = features
        for i, conv in enumerate(self.convs):
            x = ad.relu(conv(x))
            levels.append(PyramidLevel(level=i + 1, features=x, stride=2 ** i))
        return levels


class CoarseHead(Module):
    """Shared regression head emitting nonnegative (start, end) distances."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.stem = Conv1d(config.channels, config.channels, 3, padding=1, rng=rng)
        self.out = Conv1d(config.channels, 2, 1, rng=rng)

    def __call__(self, level: PyramidLevel) -> Tensor:
        x = ad.relu(self.stem(level.features))
        return ad.softplus(self.out(x))


def decode_segments(distances: Tensor, level: int, clip_length: float,
                    config: ModelConfig) -> Tensor:
    """Map per-location distances to clamped (start, end) pairs in base units."""
    t = distances.shape[0]
    centers = Tensor(location_centers(t, level)[:, None])
    scale = config.scale(level)
    start = centers - ad.narrow(distances, 1, 0, 1) * scale
    end = centers + ad.narrow(distances, 1, 1, 1) * scale
    seg = ad.concat([start, end], axis=1)
    return ad.clamp(seg, 0.0, float(clip_length))


def decode_coarse(location: int, start_dist: float, end_dist: float, level: int,
                  config: ModelConfig, clip_length: float) -> tuple[float, float]:
    """Scalar convenience mirroring decode_segments for a single location."""
    center = location * 2 ** (level - 1)
    scale = config.scale(level)
    start = min(max(center - start_dist * scale, 0.0), clip_length)
    end = min(max(center + end_dist * scale, 0.0), clip_length)
    return start, end


class BoundaryNet(Module):
    """Two independent conv -> layer-norm -> ReLU branches over the level-1 map."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.start_conv = Conv1d(config.channels, config.channels, 3, padding=1, rng=rng)
        self.start_norm = LayerNorm(config.channels)
        self.end_conv = Conv1d(config.channels, config.channels, 3, padding=1, rng=rng)
        self.end_norm = LayerNorm(config.channels)

    def __call__(self, level1: PyramidLevel) -> BoundaryFeatures:
        if level1.level != 1:
            raise ValueError(f"boundary features read the level-1 map, got level {level1.level}")
        start = ad.relu(self.start_norm(self.start_conv(level1.features)))
        end = ad.relu(self.end_norm(self.end_conv(level1.features)))
        return BoundaryFeatures(start=start, end=end)


def pool_boundary(boundary: BoundaryFeatures, level: int) -> tuple[Tensor, Tensor]:
    """Max-pool boundary maps down to the temporal dimension of the given level."""
    if level == 1:
        return boundary.start, boundary.end
    k = 2 ** (level - 1)
    return (ad.max_pool1d(boundary.start, window=k, stride=k),
            ad.max_pool1d(boundary.end, window=k, stride=k))
