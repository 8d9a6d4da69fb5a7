"""Detection decoding and Gaussian Soft-NMS.

Per location and class the refined distances become a clamped segment and
the sigmoid of the class logit becomes its score. Redundancy is suppressed
per class by decaying overlapping scores with exp(-tIoU^2 / sigma) rather
than deleting detections outright.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .backbone import location_centers
from .config import ModelConfig
from .evaluation import tiou
from .heads import LevelPredictions


@dataclass(frozen=True)
class Detection:
    start: float
    end: float
    class_id: int
    score: float


def decode_detections(predictions: list[LevelPredictions], config: ModelConfig, *,
                      clip_length: float, seconds_per_unit: float = 1.0,
                      score_threshold: float | None = None,
                      top_k: int | None = None) -> list[Detection]:
    """Score/segment decoding with thresholding and a global top-k cut.

    ``clip_length`` bounds segments in base units (the unpadded length);
    degenerate segments are dropped.
    """
    threshold = config.score_threshold if score_threshold is None else score_threshold
    k = config.top_k if top_k is None else top_k
    candidates: list[Detection] = []
    for pred in predictions:
        logits = pred.class_logits.data
        dist = pred.distances.data
        if not (np.isfinite(dist).all() and np.isfinite(logits).all()):
            raise ValueError(f"non-finite predictions at level {pred.level}")
        t_l = logits.shape[0]
        centers = location_centers(t_l, pred.level)
        scale = config.scale(pred.level)
        starts = np.clip(centers - dist[:, 0] * scale, 0.0, clip_length)
        ends = np.clip(centers + dist[:, 1] * scale, 0.0, clip_length)
        scores = 1.0 / (1.0 + np.exp(-logits))
        keep_loc = starts < ends
        for i in np.nonzero(keep_loc)[0]:
            for cls in np.nonzero(scores[i] >= threshold)[0]:
                candidates.append(Detection(start=starts[i] * seconds_per_unit,
                                            end=ends[i] * seconds_per_unit,
                                            class_id=int(cls),
                                            score=float(scores[i, cls])))
    candidates.sort(key=lambda d: (-d.score, d.start, d.end, d.class_id))
    return candidates[:k]


def soft_nms(detections: list[Detection], sigma: float = 0.5,
             final_threshold: float = 1e-4) -> list[Detection]:
    """Gaussian Soft-NMS, applied per class; segments are never modified."""
    if sigma <= 0:
        raise ValueError(f"soft_nms sigma must be positive, got {sigma}")
    survivors: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for det in detections:
        by_class.setdefault(det.class_id, []).append(det)
    for class_id in sorted(by_class):
        pool = list(by_class[class_id])
        while pool:
            best_idx = max(range(len(pool)), key=lambda i: (pool[i].score, -pool[i].start))
            best = pool.pop(best_idx)
            if best.score < final_threshold:
                break
            survivors.append(best)
            decayed = []
            for det in pool:
                overlap = tiou((best.start, best.end), (det.start, det.end))
                factor = math.exp(-(overlap * overlap) / sigma)
                det = replace(det, score=det.score * factor)
                if det.score >= final_threshold:
                    decayed.append(det)
            pool = decayed
    survivors.sort(key=lambda d: (-d.score, d.start, d.end, d.class_id))
    return survivors
