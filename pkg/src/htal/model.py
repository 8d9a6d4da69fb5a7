"""Full coarse-to-fine localization network.

One forward pass runs: feature pyramid -> coarse boundary regression ->
boundary-attentive maps -> background sampling and fusion -> per-level
encoders -> refinement heads. The pass returns every intermediate the loss
and the decoder need, plus a ForwardPlan capturing the discrete sampling
decisions so a pass can be replayed exactly (finite-difference checks,
determinism tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .backbone import (BoundaryFeatures, BoundaryNet, CoarseHead, Pyramid,
                       PyramidLevel, decode_segments, pool_boundary)
from .background import CombinedFeature, FeatureRefiner, level_ranges, sample_ranges
from .config import ModelConfig
from .encoder import EncodePlan, build_encoder
from .heads import LevelPredictions, RefineHeads
from .layers import Module


@dataclass
class ForwardPlan:
    bg_ranges: list[tuple[list, list] | None]
    encode: EncodePlan


@dataclass
class ForwardOutput:
    levels: list[PyramidLevel]
    coarse_distances: list[Tensor]      # (level length, 2) per level
    coarse_segments: list[Tensor]       # (level length, 2), base units, clamped
    boundary: BoundaryFeatures
    combined: list[CombinedFeature]
    encoded: list[Tensor]
    predictions: list[LevelPredictions]
    plan: ForwardPlan


class LocalizerNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.pyramid = Pyramid(config, rng)
        self.coarse_head = CoarseHead(config, rng)
        self.boundary_net = BoundaryNet(config, rng)
        self.refiner = FeatureRefiner(config, rng) if config.bfs_enabled else None
        self.encoder = build_encoder(config, rng)
        self.heads = RefineHeads(config, rng)

    def forward(self, features: np.ndarray,
                rng: np.random.Generator | None = None,
                plan: ForwardPlan | None = None) -> ForwardOutput:
        cfg = self.config
        x = Tensor(np.asarray(features, dtype=np.float64))
        levels = self.pyramid(x)
        clip = float(levels[0].length)

        coarse_dist = [self.coarse_head(lvl) for lvl in levels]
        coarse_seg = [decode_segments(d, lvl.level, clip, cfg)
                      for d, lvl in zip(coarse_dist, levels)]
        boundary = self.boundary_net(levels[0])

        combined: list[CombinedFeature] = []
        bg_ranges: list[tuple[list, list] | None] = []
        if cfg.bfs_enabled:
            for i, (lvl, seg) in enumerate(zip(levels, coarse_seg)):
                pooled_start, pooled_end = pool_boundary(boundary, lvl.level)
                if plan is not None and plan.bg_ranges[i] is not None:
                    lefts, rights = plan.bg_ranges[i]
                else:
                    lefts, rights = level_ranges(seg.data, lvl.level, lvl.length, cfg.delta)
                background = sample_ranges(lvl.features, lefts, rights)
                combined.append(self.refiner(lvl, pooled_start, pooled_end, background))
                bg_ranges.append((lefts, rights))
        else:
            combined = [CombinedFeature(level=lvl.level, features=lvl.features)
                        for lvl in levels]
            bg_ranges = [None] * len(levels)

        encoded, enc_plan = self.encoder(combined, rng=rng,
                                         plan=plan.encode if plan is not None else None)
        predictions = [self.heads(z, lvl.level) for z, lvl in zip(encoded, levels)]
        return ForwardOutput(levels=levels, coarse_distances=coarse_dist,
                             coarse_segments=coarse_seg, boundary=boundary,
                             combined=combined, encoded=encoded,
                             predictions=predictions,
                             plan=ForwardPlan(bg_ranges=bg_ranges, encode=enc_plan))

    __call__ = forward

    def state_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters()]
