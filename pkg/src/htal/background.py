"""Background context sampling around coarse boundaries, and feature fusion.

For every location's coarse segment, a slice of the region left of the
predicted start and right of the predicted end is max-pooled channelwise
and concatenated as global context; the result joins the boundary-attended
feature map through a channel-reducing temporal convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import PyramidLevel
from .config import ModelConfig
from .layers import Conv1d, Module


@dataclass
class BackgroundRanges:
    left: tuple[int, int]    # half-open [a, b) in level-l indices
    right: tuple[int, int]


@dataclass
class CombinedFeature:
    level: int
    features: Tensor         # level length x channels


def background_ranges(start: float, end: float, length: int, rate: float) -> BackgroundRanges:
    """Half-open index ranges covering the sampled background slices.

    Left slice runs from rate*start up to the predicted start; right slice
    runs from the predicted end over a rate fraction of the remaining tail.
    Boundaries at the clip edge yield empty ranges.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"sampling rate must be in (0, 1], got {rate}")
    if start > end:
        raise ValueError(f"segment start {start} exceeds end {end}")
    if start < 0 or end > length:
        raise ValueError(f"segment ({start}, {end}) outside [0, {length}]")
    left = (int(round(rate * start)), int(round(start)))
    right_hi = min(round(end + rate * (length - end)), length)
    right = (int(round(end)), int(right_hi))
    return BackgroundRanges(left=left, right=right)


def level_ranges(segments: np.ndarray, level: int, length: int,
                 rate: float) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Per-location (left, right) ranges from base-unit segments at one level."""
    stride = 2 ** (level - 1)
    lefts, rights = [], []
    for s, e in segments:
        s_l = min(max(s / stride, 0.0), length)
        e_l = min(max(e / stride, 0.0), length)
        r = background_ranges(s_l, e_l, length, rate)
        lefts.append(r.left)
        rights.append(r.right)
    return lefts, rights


def sample_ranges(features: Tensor, lefts: list[tuple[int, int]],
                  rights: list[tuple[int, int]]) -> Tensor:
    """Channelwise max over precomputed left/right ranges, stacked along channels."""
    left_max = ad.range_max(features, lefts)
    right_max = ad.range_max(features, rights)
    return ad.concat([left_max, right_max], axis=1)


def sample_background(level: PyramidLevel, segments: np.ndarray, rate: float) -> Tensor:
    """Channelwise max over each location's left/right range, stacked to T x 2C.

    ``segments`` holds one decoded (start, end) pair in base units per
    location. Empty ranges contribute zeros.
    """
    t = level.length
    if segments.shape[0] != t:
        raise ValueError(f"need one segment per location: {segments.shape[0]} != {t}")
    lefts, rights = level_ranges(segments, level.level, t, rate)
    return sample_ranges(level.features, lefts, rights)


class FeatureRefiner(Module):
    """Fuse boundary attention and background context into the combined map."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.reduce = Conv1d(3 * config.channels, config.channels, 3, padding=1, rng=rng)

    def __call__(self, level: PyramidLevel, pooled_start: Tensor, pooled_end: Tensor,
                 background: Tensor) -> CombinedFeature:
        attention = pooled_start + pooled_end
        attended = ad.mul(level.features, attention)
        fused = self.reduce(ad.concat([attended, background], axis=1))
        return CombinedFeature(level=level.level, features=fused)
