"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np


def check_feature_array(x, *, name: str = "X") -> np.ndarray:
    """Coerce one feature sequence to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (snippets x channels), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_feature_list(xs, *, name: str = "X") -> list[np.ndarray]:
    if isinstance(xs, np.ndarray) and xs.ndim == 2:
        xs = [xs]
    arrays = [check_feature_array(x, name=f"{name}[{i}]") for i, x in enumerate(xs)]
    channels = {a.shape[1] for a in arrays}
    if len(channels) > 1:
        raise ValueError(f"{name} sequences disagree on channel count: {sorted(channels)}")
    return arrays


def check_annotation_list(ys, lengths: list[int], num_classes: int | None = None,
                          *, name: str = "y") -> list[list[tuple[float, float, int]]]:
    """Validate per-video (start, end, class) triples in snippet units."""
    if len(ys) != len(lengths):
        raise ValueError(f"{name} has {len(ys)} entries for {len(lengths)} sequences")
    out = []
    for i, (items, t) in enumerate(zip(ys, lengths)):
        segs = []
        for item in items:
            s, e, k = float(item[0]), float(item[1]), int(item[2])
            if not 0.0 <= s < e <= t:
                raise ValueError(f"{name}[{i}]: segment ({s}, {e}) outside [0, {t}]")
            if k < 0 or (num_classes is not None and k >= num_classes):
                raise ValueError(f"{name}[{i}]: class id {k} out of range")
            segs.append((s, e, k))
        out.append(segs)
    return out
