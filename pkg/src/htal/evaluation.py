"""Temporal-IoU mAP evaluation and false-negative profiling.

AP uses greedy score-ordered matching against unmatched ground truth and
all-point precision-recall interpolation. The FN profile buckets missed
instances by absolute length (XL = longer than 18 s) and by coverage, the
instance length relative to its video.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


Segment = tuple[float, float]

LENGTH_BUCKETS = [("XS", 0.0, 2.0), ("S", 2.0, 4.0), ("M", 4.0, 6.0),
                  ("L", 6.0, 18.0), ("XL", 18.0, float("inf"))]
COVERAGE_BUCKETS = [("XS", 0.0, 0.02), ("S", 0.02, 0.04), ("M", 0.04, 0.06),
                    ("L", 0.06, 0.08), ("XL", 0.08, float("inf"))]

THUMOS_GRID = [0.3, 0.4, 0.5, 0.6, 0.7]
ACTIVITYNET_GRID = [round(0.5 + 0.05 * i, 2) for i in range(10)]


def tiou(a: Segment, b: Segment) -> float:
    """Intersection over union of two temporal segments; disjoint gives 0."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass
class EvalReport:
    thresholds: list[float]
    per_class_ap: dict[float, dict[int, float]]
    map_per_threshold: dict[float, float]
    average_map: float
    fn_length: dict[str, float] = field(default_factory=dict)
    fn_coverage: dict[str, float] = field(default_factory=dict)
    fn_counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "thresholds": self.thresholds,
            "per_class_ap": {str(t): {str(c): ap for c, ap in aps.items()}
                             for t, aps in self.per_class_ap.items()},
            "map_per_threshold": {str(t): m for t, m in self.map_per_threshold.items()},
            "average_map": self.average_map,
            "fn_length": self.fn_length,
            "fn_coverage": self.fn_coverage,
            "fn_counts": self.fn_counts,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = ["threshold  mAP"]
        for t in self.thresholds:
            lines.append(f"{t:9.2f}  {self.map_per_threshold[t]:.4f}")
        lines.append(f"average mAP: {self.average_map:.4f}")
        if self.fn_length:
            lines.append("")
            lines.append("FN rate by length bucket:")
            for name, rate in self.fn_length.items():
                lines.append(f"  {name:3s}  {rate:.4f}")
        if self.fn_coverage:
            lines.append("FN rate by coverage bucket:")
            for name, rate in self.fn_coverage.items():
                lines.append(f"  {name:3s}  {rate:.4f}")
        return "\n".join(lines) + "\n"


def _match_detections(detections: dict[str, list], ground_truth: dict[str, list],
                      threshold: float) -> list[tuple[float, bool]]:
    """Score-ordered (score, is_true_positive) pairs via greedy matching.

    Each detection claims the unmatched same-class ground-truth segment of
    highest overlap >= threshold; equal overlaps resolve to the earlier
    ground-truth start.
    """
    ranked = []
    for vid, dets in detections.items():
        for det in dets:
            ranked.append((vid, det))
    ranked.sort(key=lambda vd: (-vd[1].score, vd[0], vd[1].start, vd[1].end))
    used: dict[str, set[int]] = {vid: set() for vid in ground_truth}
    results = []
    for vid, det in ranked:
        gts = ground_truth.get(vid, [])
        taken = used.setdefault(vid, set())
        best_j, best_ov, best_start = -1, 0.0, float("inf")
        for j, (s, e, k) in enumerate(gts):
            if k != det.class_id or j in taken:
                continue
            ov = tiou((det.start, det.end), (s, e))
            if ov < threshold:
                continue
            if ov > best_ov or (ov == best_ov and s < best_start):
                best_j, best_ov, best_start = j, ov, s
        if best_j >= 0:
            taken.add(best_j)
            results.append((det.score, True))
        else:
            results.append((det.score, False))
    return results


def average_precision(detections: dict[str, list], ground_truth: dict[str, list],
                      threshold: float) -> float:
    """All-point-interpolated AP for one class at one tIoU threshold.

    ``detections`` / ``ground_truth`` map video id to that class's instances.
    """
    num_gt = sum(len(v) for v in ground_truth.values())
    if num_gt == 0:
        raise ValueError("average_precision needs at least one ground-truth instance")
    matches = _match_detections(detections, ground_truth, threshold)
    tp = 0
    fp = 0
    points = []  # (recall, precision)
    for _, is_tp in matches:
        if is_tp:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    # sweep from the end so precision is the running maximum (envelope)
    best_precision = 0.0
    envelope = [0.0] * len(points)
    for i in range(len(points) - 1, -1, -1):
        best_precision = max(best_precision, points[i][1])
        envelope[i] = best_precision
    for (recall, _), prec in zip(points, envelope):
        ap += (recall - prev_recall) * prec
        prev_recall = recall
    return ap


def map_grid(detections: dict[str, list], ground_truth: dict[str, list],
             thresholds: list[float]) -> EvalReport:
    """Per-threshold mAP over classes with ground truth, and their average."""
    if not thresholds:
        raise ValueError("need at least one tIoU threshold")
    class_ids = sorted({k for gts in ground_truth.values() for _, _, k in gts})
    per_class_ap: dict[float, dict[int, float]] = {}
    map_per_threshold: dict[float, float] = {}
    for t in thresholds:
        aps = {}
        for cls in class_ids:
            cls_dets = {vid: [d for d in dets if d.class_id == cls]
                        for vid, dets in detections.items()}
            cls_gt = {vid: [g for g in gts if g[2] == cls]
                      for vid, gts in ground_truth.items()}
            cls_gt = {vid: gts for vid, gts in cls_gt.items() if gts}
            if not cls_gt:
                continue
            aps[cls] = average_precision(cls_dets, cls_gt, t)
        per_class_ap[t] = aps
        map_per_threshold[t] = sum(aps.values()) / len(aps) if aps else 0.0
    average = sum(map_per_threshold.values()) / len(thresholds)
    return EvalReport(thresholds=list(thresholds), per_class_ap=per_class_ap,
                      map_per_threshold=map_per_threshold, average_map=average)


def _bucket_name(value: float, buckets: list[tuple[str, float, float]]) -> str | None:
    for name, lo, hi in buckets:
        if lo < value <= hi:
            return name
    return None


def fn_profile(detections: dict[str, list], ground_truth: dict[str, list],
               durations: dict[str, float], threshold: float,
               length_buckets=None, coverage_buckets=None) -> tuple[dict, dict, dict]:
    """False-negative rates per length and coverage bucket.

    A ground-truth instance is a false negative iff no detection of its
    class reaches the tIoU threshold against it.
    """
    length_buckets = LENGTH_BUCKETS if length_buckets is None else length_buckets
    coverage_buckets = COVERAGE_BUCKETS if coverage_buckets is None else coverage_buckets
    length_total = {name: 0 for name, _, _ in length_buckets}
    length_fn = {name: 0 for name, _, _ in length_buckets}
    coverage_total = {name: 0 for name, _, _ in coverage_buckets}
    coverage_fn = {name: 0 for name, _, _ in coverage_buckets}
    for vid, gts in ground_truth.items():
        dets = detections.get(vid, [])
        for s, e, k in gts:
            missed = not any(
                d.class_id == k and tiou((d.start, d.end), (s, e)) >= threshold
                for d in dets
            )
            lname = _bucket_name(e - s, length_buckets)
            if lname is not None:
                length_total[lname] += 1
                length_fn[lname] += missed
            duration = durations.get(vid, 0.0)
            if duration > 0:
                cname = _bucket_name((e - s) / duration, coverage_buckets)
                if cname is not None:
                    coverage_total[cname] += 1
                    coverage_fn[cname] += missed
    length_rate = {name: (length_fn[name] / length_total[name]) if length_total[name] else 0.0
                   for name in length_total}
    coverage_rate = {name: (coverage_fn[name] / coverage_total[name]) if coverage_total[name] else 0.0
                     for name in coverage_total}
    counts = {name: length_total[name] for name in length_total}
    return length_rate, coverage_rate, counts


def evaluate(detections: dict[str, list], ground_truth: dict[str, list],
             thresholds: list[float], durations: dict[str, float] | None = None,
             fn_threshold: float = 0.5) -> EvalReport:
    """Full report: mAP grid plus FN profile when durations are provided."""
    report = map_grid(detections, ground_truth, thresholds)
    if durations is not None:
        length_rate, coverage_rate, counts = fn_profile(
            detections, ground_truth, durations, fn_threshold)
        report.fn_length = length_rate
        report.fn_coverage = coverage_rate
        report.fn_counts = counts
    return report


def write_reports(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / "eval_report.txt"
    json_path = out_dir / "eval_report.json"
    text_path.write_text(report.to_text())
    json_path.write_text(report.to_json())
    return text_path, json_path
