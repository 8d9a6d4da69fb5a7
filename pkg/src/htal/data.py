"""File formats, padding and synthetic dataset generation.

Feature files are a small fixed-endianness binary format; manifests,
annotations and detection results are schema-versioned JSON so fixtures
stay diffable. The synthetic generator plants class-specific patterns on
noise so desk-scale training has something learnable to find.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"HTNF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHIIH")  # magic, version, T, C, reserved
SCHEMA_VERSION = 1


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def save_features(path: str | Path, features: np.ndarray) -> None:
    """Write a T x C float matrix as little-endian f32 with a 16-byte header."""
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"features must be 2-D (T x C), got shape {arr.shape}")
    t, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, c, 0))
        fh.write(arr.tobytes())


def load_features(path: str | Path) -> np.ndarray:
    """Load a feature file, validating magic, version and byte counts."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(
            f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(blob)}"
        )
    magic, version, t, c, _ = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte offset 4")
    if t == 0 or c == 0:
        raise DataError(f"{path}: degenerate dimensions T={t}, C={c}")
    expected = _HEADER.size + 4 * t * c
    if len(blob) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes for T={t}, C={c}, got {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(t, c).copy()


def feature_header(path: str | Path) -> tuple[int, int]:
    """Read (T, C) from a feature file without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, t, c, _ = _HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte offset 0")
    return t, c


def pad_to_divisible(features: np.ndarray, levels: int) -> tuple[np.ndarray, int]:
    """Zero-pad the time axis to the next multiple of 2^(levels-1)."""
    if levels < 1:
        raise DataError(f"levels must be >= 1, got {levels}")
    t = features.shape[0]
    unit = 2 ** (levels - 1)
    target = ((t + unit - 1) // unit) * unit
    if target == t:
        return features, t
    padded = np.zeros((target, features.shape[1]), dtype=features.dtype)
    padded[:t] = features
    return padded, t


# ---------------------------------------------------------------------------
# manifests and annotations
# ---------------------------------------------------------------------------

@dataclass
class VideoRecord:
    id: str
    feature_path: str
    snippets: int
    channels: int
    fps: float
    frames_per_snippet: int
    snippet_stride: int

    @property
    def seconds_per_unit(self) -> float:
        return self.snippet_stride / self.fps

    @property
    def duration(self) -> float:
        return self.snippets * self.seconds_per_unit


@dataclass
class Manifest:
    classes: list[str]
    videos: list[VideoRecord]
    root: Path = field(default_factory=Path)

    def video(self, video_id: str) -> VideoRecord:
        for rec in self.videos:
            if rec.id == video_id:
                return rec
        raise DataError(f"unknown video id {video_id!r}")

    def resolve(self, rec: VideoRecord) -> Path:
        return self.root / rec.feature_path


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "classes": manifest.classes,
        "videos": [
            {
                "id": rec.id,
                "feature_path": rec.feature_path,
                "snippets": rec.snippets,
                "channels": rec.channels,
                "fps": rec.fps,
                "frames_per_snippet": rec.frames_per_snippet,
                "snippet_stride": rec.snippet_stride,
            }
            for rec in manifest.videos
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path, *, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {doc.get('schema_version')}")
    videos = [VideoRecord(**v) for v in doc["videos"]]
    manifest = Manifest(classes=list(doc["classes"]), videos=videos, root=path.parent)
    if check_files:
        for rec in videos:
            fpath = manifest.resolve(rec)
            t, c = feature_header(fpath)
            if (t, c) != (rec.snippets, rec.channels):
                raise DataError(
                    f"{fpath}: header says {t}x{c}, manifest says {rec.snippets}x{rec.channels}"
                )
    return manifest


def save_annotations(annotations: dict[str, list[tuple[float, float, int]]],
                     path: str | Path) -> None:
    """Annotations are per-video lists of (start seconds, end seconds, class id)."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "videos": {
            vid: [{"start": s, "end": e, "label": int(k)} for s, e, k in items]
            for vid, items in annotations.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_annotations(path: str | Path,
                     manifest: Manifest | None = None) -> dict[str, list[tuple[float, float, int]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotations not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {doc.get('schema_version')}")
    out: dict[str, list[tuple[float, float, int]]] = {}
    for vid, items in doc["videos"].items():
        segs = [(float(it["start"]), float(it["end"]), int(it["label"])) for it in items]
        for s, e, k in segs:
            if not 0.0 <= s < e:
                raise DataError(f"{path}: video {vid}: invalid segment ({s}, {e})")
            if manifest is not None:
                rec = manifest.video(vid)
                if e > rec.duration + 1e-9:
                    raise DataError(
                        f"{path}: video {vid}: segment end {e} exceeds duration {rec.duration:.3f}"
                    )
                if k >= len(manifest.classes) or k < 0:
                    raise DataError(f"{path}: video {vid}: class id {k} out of range")
        out[vid] = segs
    return out


# ---------------------------------------------------------------------------
# detection results
# ---------------------------------------------------------------------------

def save_detections(detections: dict[str, list], classes: list[str],
                    path: str | Path) -> None:
    """Serialize detections (score desc, then start) with class names."""
    doc: dict = {"schema_version": SCHEMA_VERSION, "videos": {}}
    for vid in sorted(detections):
        items = sorted(detections[vid], key=lambda d: (-d.score, d.start, d.end))
        rows = []
        for det in items:
            if not 0 <= det.class_id < len(classes):
                raise DataError(f"video {vid}: unknown class id {det.class_id}")
            rows.append({
                "start": float(det.start),
                "end": float(det.end),
                "class": classes[det.class_id],
                "score": float(det.score),
            })
        doc["videos"][vid] = rows
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_detections(path: str | Path, classes: list[str]) -> dict[str, list]:
    from .inference import Detection

    path = Path(path)
    if not path.exists():
        raise DataError(f"results file not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {doc.get('schema_version')}")
    index = {name: i for i, name in enumerate(classes)}
    out: dict[str, list] = {}
    for vid, rows in doc["videos"].items():
        dets = []
        for row in rows:
            if row["class"] not in index:
                raise DataError(f"{path}: video {vid}: unknown class {row['class']!r}")
            dets.append(Detection(start=float(row["start"]), end=float(row["end"]),
                                  class_id=index[row["class"]], score=float(row["score"])))
        out[vid] = dets
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    num_videos: int = 10
    t_range: tuple[int, int] = (64, 64)
    channels: int = 16
    num_classes: int = 3
    actions_range: tuple[int, int] = (1, 3)
    snr: float = 10.0
    seed: int = 7
    context_snr: float = 0.0       # class-correlated cue added to background snippets
    pattern_overlap: float = 0.0   # 0: orthogonal class patterns; ->1: locally confusable
    pattern_seed: int | None = None  # share class patterns across train/eval splits
    single_class_videos: bool = False
    fps: float = 25.0
    frames_per_snippet: int = 16
    snippet_stride: int = 4
    min_action_len: int = 2
    max_action_len: int = 16


def _place_segments(rng: np.random.Generator, t: int, count: int,
                    min_len: int, max_len: int) -> list[tuple[int, int]]:
    """Non-overlapping integer segments inside [0, t), separated by >= 1 snippet."""
    for _ in range(200):
        lengths = rng.integers(min_len, max_len + 1, size=count)
        occupied = int(lengths.sum()) + (count - 1)
        if occupied > t:
            continue
        cuts = np.sort(rng.integers(0, t - occupied + 1, size=count))
        segs = []
        consumed = 0
        for i, (gap, length) in enumerate(zip(cuts, lengths)):
            start = int(gap) + consumed + i
            segs.append((start, start + int(length)))
            consumed += int(length)
        return segs
    raise DataError(
        f"cannot place {count} actions of length {min_len}..{max_len} in {t} snippets"
    )


def synth_generate(config: SynthConfig, out_dir: str | Path) -> tuple[Manifest, dict]:
    """Generate feature files plus manifest/annotations; deterministic per seed."""
    if config.min_action_len < 2:
        raise DataError("action length must be at least 2 snippets")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(config.seed)

    # orthonormal basis: one shared direction, one pattern and one cue per
    # class; keeps class signals free of accidental cross-correlations.
    # pattern_seed decouples the class vectors from video sampling so that
    # train/eval splits generated with different seeds share one label space
    k = config.num_classes
    if 2 * k + 1 > config.channels:
        raise DataError(f"need at least {2 * k + 1} channels for {k} classes")
    basis_rng = rng if config.pattern_seed is None else np.random.default_rng(config.pattern_seed)
    basis, _ = np.linalg.qr(basis_rng.normal(size=(config.channels, 2 * k + 1)))
    shared = basis[:, 0]
    unique = basis[:, 1:k + 1].T
    cues = basis[:, k + 1:2 * k + 1].T
    a = config.pattern_overlap
    patterns = a * shared + np.sqrt(1.0 - a * a) * unique

    classes = [f"action_{k}" for k in range(config.num_classes)]
    records: list[VideoRecord] = []
    annotations: dict[str, list[tuple[float, float, int]]] = {}
    sec = config.snippet_stride / config.fps

    for v in range(config.num_videos):
        vid = f"video_{v:04d}"
        t = int(rng.integers(config.t_range[0], config.t_range[1] + 1))
        count = int(rng.integers(config.actions_range[0], config.actions_range[1] + 1))
        feats = rng.normal(size=(t, config.channels))
        segs = _place_segments(rng, t, count, config.min_action_len, config.max_action_len)
        if config.single_class_videos:
            theme = int(rng.integers(config.num_classes))
            labels = [theme] * count
        else:
            labels = [int(rng.integers(config.num_classes)) for _ in segs]
            theme = labels[0]
        covered = np.zeros(t, dtype=bool)
        for (a, b), k in zip(segs, labels):
            feats[a:b] += config.snr * patterns[k]
            covered[a:b] = True
        if config.context_snr > 0.0:
            feats[~covered] += config.context_snr * cues[theme]
        rel = f"features/{vid}.htnf"
        save_features(feat_dir / f"{vid}.htnf", feats)
        records.append(VideoRecord(id=vid, feature_path=rel, snippets=t,
                                   channels=config.channels, fps=config.fps,
                                   frames_per_snippet=config.frames_per_snippet,
                                   snippet_stride=config.snippet_stride))
        annotations[vid] = [(a * sec, b * sec, k) for (a, b), k in zip(segs, labels)]

    manifest = Manifest(classes=classes, videos=records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    save_annotations(annotations, out_dir / "annotations.json")
    return manifest, annotations


# ---------------------------------------------------------------------------
# in-memory samples shared by the trainer / estimator
# ---------------------------------------------------------------------------

@dataclass
class VideoSample:
    """One video ready for the model: float64 features plus unit metadata."""
    id: str
    features: np.ndarray                       # T x C float64, unpadded
    segments: list[tuple[float, float, int]]   # base (snippet) units
    seconds_per_unit: float = 1.0

    @property
    def snippets(self) -> int:
        return self.features.shape[0]


def load_dataset(manifest: Manifest,
                 annotations: dict[str, list[tuple[float, float, int]]] | None) -> list[VideoSample]:
    samples = []
    for rec in manifest.videos:
        feats = load_features(manifest.resolve(rec)).astype(np.float64)
        sec = rec.seconds_per_unit
        segs = []
        if annotations is not None:
            for s, e, k in annotations.get(rec.id, []):
                segs.append((s / sec, e / sec, k))
        samples.append(VideoSample(id=rec.id, features=feats, segments=segs,
                                   seconds_per_unit=sec))
    return samples
