"""Refinement prediction heads, ground-truth assignment and the training loss.

The loss has five terms: generalized-IoU regression on coarse and refined
segments (positives only), sigmoid focal classification over every
location, and binary cross-entropy on the level-1 start/end boundary
probabilities. Positive assignment is center-inside with a shortest-segment
tie-break.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BoundaryFeatures, decode_segments, location_centers
from .config import ModelConfig
from .layers import Conv1d, LayerNorm, Module

PROB_EPS = 1e-7


@dataclass
class LevelPredictions:
    level: int
    class_logits: Tensor    # locations x classes, pre-sigmoid
    distances: Tensor       # locations x 2, nonnegative, already scaled by omega


@dataclass
class LocationTargets:
    level: int
    positive: np.ndarray          # bool, one per location
    class_id: np.ndarray          # int, one per location; -1 where negative
    seg_start: np.ndarray         # float; assigned segment in base units
    seg_end: np.ndarray
    dist: np.ndarray              # float, locations x 2; distances in head units
    g_start: np.ndarray | None = None   # 0/1 boundary labels, level 1 only
    g_end: np.ndarray | None = None


@dataclass
class LossBreakdown:
    coarse: float
    refine: float
    cls: float
    start: float
    end: float
    total: float
    lam: float
    total_tensor: Tensor


class RefineHeads(Module):
    """Classifier and regressor sharing one design: conv -> norm -> ReLU -> conv."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config.channels
        self.cls_stem = Conv1d(c, c, 3, padding=1, rng=rng)
        self.cls_norm = LayerNorm(c)
        self.cls_out = Conv1d(c, config.num_classes, 1, rng=rng)
        # start near P(action) ~ 0.01 so early training is not FP-dominated
        self.cls_out.bias.data[:] = -np.log(99.0)
        self.reg_stem = Conv1d(c, c, 3, padding=1, rng=rng)
        self.reg_norm = LayerNorm(c)
        self.reg_out = Conv1d(c, 2, 1, rng=rng)
        self.omega = config.omega

    def __call__(self, encoded: Tensor, level: int) -> LevelPredictions:
        logits = self.cls_out(ad.relu(self.cls_norm(self.cls_stem(encoded))))
        raw = self.reg_out(ad.relu(self.reg_norm(self.reg_stem(encoded))))
        distances = ad.softplus(raw) * self.omega
        return LevelPredictions(level=level, class_logits=logits, distances=distances)


def assign_targets(level_lengths: list[int],
                   annotations: list[tuple[float, float, int]],
                   config: ModelConfig) -> list[LocationTargets]:
    """Per-level location labels from base-unit annotated segments.

    A location is positive iff its center lies strictly inside a segment;
    nested/overlapping segments resolve to the shortest (earlier start on
    ties). Boundary labels g_start/g_end live on level 1 only.
    """
    clip = level_lengths[0]
    for s, e, _ in annotations:
        if not (0.0 <= s < e <= clip):
            raise ValueError(f"annotation ({s}, {e}) outside clip [0, {clip}]")
    # shortest-first, then earlier start: first containing match wins
    order = sorted(annotations, key=lambda a: (a[1] - a[0], a[0]))
    out = []
    for li, t_l in enumerate(level_lengths):
        level = li + 1
        centers = location_centers(t_l, level)
        positive = np.zeros(t_l, dtype=bool)
        class_id = np.full(t_l, -1, dtype=np.int64)
        seg_start = np.zeros(t_l)
        seg_end = np.zeros(t_l)
        dist = np.zeros((t_l, 2))
        scale = config.scale(level)
        for i, c in enumerate(centers):
            for s, e, k in order:
                if s < c < e:
                    positive[i] = True
                    class_id[i] = k
                    seg_start[i] = s
                    seg_end[i] = e
                    dist[i, 0] = (c - s) / scale
                    dist[i, 1] = (e - c) / scale
                    break
        g_start = g_end = None
        if level == 1:
            idx = np.arange(t_l, dtype=np.float64)
            g_start = np.zeros(t_l)
            g_end = np.zeros(t_l)
            for s, e, _ in annotations:
                g_start[np.abs(idx - s) <= config.tau] = 1.0
                g_end[np.abs(idx - e) <= config.tau] = 1.0
        out.append(LocationTargets(level=level, positive=positive, class_id=class_id,
                                   seg_start=seg_start, seg_end=seg_end, dist=dist,
                                   g_start=g_start, g_end=g_end))
    return out


def giou_values(pred_start, pred_end, tgt_start, tgt_end) -> Tensor:
    """Vectorized 1-D generalized IoU of prediction/target interval pairs."""
    inter = ad.maximum(ad.minimum(pred_end, tgt_end) - ad.maximum(pred_start, tgt_start), 0.0)
    union = (pred_end - pred_start) + (tgt_end - tgt_start) - inter
    hull = ad.maximum(pred_end, tgt_end) - ad.minimum(pred_start, tgt_start)
    return inter / union - (hull - union) / hull


def giou_1d(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Scalar GIoU of two intervals; coincident degenerate intervals give 1."""
    if a[0] > a[1] or b[0] > b[1]:
        raise ValueError(f"invalid segments {a}, {b}")
    hull = max(a[1], b[1]) - min(a[0], b[0])
    if hull == 0.0:
        return 1.0
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    iou = inter / union if union > 0.0 else 0.0
    return iou - (hull - union) / hull


def focal_loss(logits: Tensor, class_targets: np.ndarray, *, alpha: float,
               gamma: float, num_positives: int) -> Tensor:
    """Sigmoid focal loss over a T x N_c logit matrix.

    ``class_targets`` is the 0/1 matrix of per-class labels; the summed loss
    is normalized by ``num_positives`` (floored at 1).
    """
    if not np.isfinite(logits.data).all():
        raise ValueError("focal_loss received non-finite logits")
    y = class_targets.astype(np.float64)
    p = ad.clamp(ad.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.power(1.0 - p, gamma) * ad.log(p) * (-alpha)
    neg = ad.power(p, gamma) * ad.log(1.0 - p) * (alpha - 1.0)
    terms = pos * y + neg * (1.0 - y)
    return terms.sum() / max(num_positives, 1)


def class_target_matrix(targets: LocationTargets, num_classes: int) -> np.ndarray:
    y = np.zeros((len(targets.positive), num_classes))
    rows = np.nonzero(targets.positive)[0]
    y[rows, targets.class_id[rows]] = 1.0
    return y


def boundary_probabilities(features: Tensor) -> Tensor:
    """Per-location boundary probability from a nonnegative feature map.

    The channel means are nonnegative, so a plain sigmoid could never reach
    probabilities below 1/2; 2*sigmoid(m) - 1 maps [0, inf) onto [0, 1).
    """
    means = features.mean(axis=1)
    return ad.sigmoid(means) * 2.0 - 1.0


def binary_cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    p = ad.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = labels.astype(np.float64)
    terms = ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)
    return -terms.mean()


def boundary_bce(boundary: BoundaryFeatures,
                 targets: LocationTargets) -> tuple[Tensor, Tensor]:
    """BCE of rescaled level-1 boundary activations against g_start/g_end."""
    if targets.g_start is None or targets.g_end is None:
        raise ValueError("boundary supervision needs level-1 targets")
    l_start = binary_cross_entropy(boundary_probabilities(boundary.start), targets.g_start)
    l_end = binary_cross_entropy(boundary_probabilities(boundary.end), targets.g_end)
    return l_start, l_end


def _positive_giou_loss(segments: list[Tensor],
                        targets: list[LocationTargets]) -> tuple[Tensor, int]:
    """Mean (1 - GIoU) over all positive locations across levels."""
    preds_s, preds_e, tgts_s, tgts_e = [], [], [], []
    total = 0
    for seg, tgt in zip(segments, targets):
        rows = np.nonzero(tgt.positive)[0]
        if len(rows) == 0:
            continue
        total += len(rows)
        picked = ad.gather_rows(seg, rows)
        preds_s.append(ad.narrow(picked, 1, 0, 1))
        preds_e.append(ad.narrow(picked, 1, 1, 1))
        tgts_s.append(Tensor(tgt.seg_start[rows][:, None]))
        tgts_e.append(Tensor(tgt.seg_end[rows][:, None]))
    if total == 0:
        return Tensor(0.0), 0
    giou = giou_values(ad.concat(preds_s, axis=0), ad.concat(preds_e, axis=0),
                       ad.concat(tgts_s, axis=0), ad.concat(tgts_e, axis=0))
    return (1.0 - giou).mean(), total


def total_loss(coarse_segments: list[Tensor], predictions: list[LevelPredictions],
               boundary: BoundaryFeatures, targets: list[LocationTargets],
               config: ModelConfig, clip_length: float) -> LossBreakdown:
    """Five-term training loss; the total recomposes the parts exactly."""
    l_coarse, _ = _positive_giou_loss(coarse_segments, targets)

    refined = [decode_segments(p.distances, p.level, clip_length, config)
               for p in predictions]
    l_refine, _ = _positive_giou_loss(refined, targets)

    num_classes = predictions[0].class_logits.shape[1]
    all_logits = ad.concat([p.class_logits for p in predictions], axis=0)
    all_y = np.concatenate([class_target_matrix(t, num_classes) for t in targets], axis=0)
    num_pos = int(sum(t.positive.sum() for t in targets))
    l_cls = focal_loss(all_logits, all_y, alpha=config.focal_alpha,
                       gamma=config.focal_gamma, num_positives=num_pos)

    l_start, l_end = boundary_bce(boundary, targets[0])

    lam = config.loss_lambda
    total = (l_refine + l_coarse) * lam + l_cls + l_start + l_end
    return LossBreakdown(coarse=l_coarse.item(), refine=l_refine.item(),
                         cls=l_cls.item(), start=l_start.item(), end=l_end.item(),
                         total=total.item(), lam=lam, total_tensor=total)
