"""AdamW optimization, cosine schedule, the training loop and checkpoints.

Samples are processed one clip per step with gradient accumulation across
the batch; training is bitwise deterministic for a fixed seed (seeded
shuffle, seeded context sampling, single-threaded numpy math).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .config import ModelConfig, TrainConfig
from .data import VideoSample, pad_to_divisible
from .heads import assign_targets, total_loss
from .inference import decode_detections, soft_nms
from .model import LocalizerNet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HTNC"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, sample_id: str | None = None):
        super().__init__(message)
        self.sample_id = sample_id


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: list[Tensor]) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState,
               *, lr: float, weight_decay: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One decoupled-weight-decay Adam update; skips (and logs) non-finite grads."""
    for g in grads:
        if not np.isfinite(g).all():
            logger.warning("adamw_step skipped: non-finite gradient encountered")
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return True


def cosine_lr(step: int, horizon: int, base: float) -> float:
    """Half-cosine decay from ``base`` at step 0 to 0 at ``horizon``."""
    if horizon <= 0:
        return base
    frac = min(max(step / horizon, 0.0), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        return [g * factor for g in grads]
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, net: LocalizerNet, model_cfg: ModelConfig) -> None:
    """Versioned container: JSON metadata then float64 tensors in name order."""
    named = list(net.named_parameters())
    meta = {
        "schema_version": CHECKPOINT_VERSION,
        "config": {k: v for k, v in vars(model_cfg).items()},
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in named],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[LocalizerNet, ModelConfig]:
    path = Path(path)
    if not path.exists():
        raise TrainingError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise TrainingError(f"{path}: not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(blob[10:10 + meta_len].decode())
    cfg = ModelConfig(**meta["config"])
    net = LocalizerNet(cfg, np.random.default_rng(0))
    named = dict(net.named_parameters())
    offset = 10 + meta_len
    for entry in meta["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        if name not in named:
            raise TrainingError(f"{path}: unexpected parameter {name!r}")
        if named[name].data.shape != shape:
            raise TrainingError(f"{path}: shape mismatch for {name!r}")
        named[name].data = data.reshape(shape).copy()
    return net, cfg


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: Path
    initial_loss: float
    final_loss: float
    best_map: float | None
    epoch_losses: list[dict]
    metrics_path: Path | None = None


def _sample_loss(net: LocalizerNet, sample: VideoSample, targets_cache: dict,
                 model_cfg: ModelConfig, rng: np.random.Generator):
    padded, original_t = pad_to_divisible(sample.features, model_cfg.levels)
    output = net.forward(padded, rng=rng)
    key = sample.id
    if key not in targets_cache:
        lengths = [lvl.length for lvl in output.levels]
        targets_cache[key] = assign_targets(lengths, sample.segments, model_cfg)
    breakdown = total_loss(output.coarse_segments, output.predictions,
                           output.boundary, targets_cache[key], model_cfg,
                           clip_length=float(padded.shape[0]))
    return output, breakdown, original_t


def predict_sample(net: LocalizerNet, sample: VideoSample, model_cfg: ModelConfig,
                   score_threshold: float | None = None,
                   top_k: int | None = None) -> list:
    """Deterministic inference: stratified sampling, decode, Soft-NMS."""
    padded, original_t = pad_to_divisible(sample.features, model_cfg.levels)
    output = net.forward(padded, rng=None)
    detections = decode_detections(output.predictions, model_cfg,
                                   clip_length=float(original_t),
                                   seconds_per_unit=sample.seconds_per_unit,
                                   score_threshold=score_threshold, top_k=top_k)
    return soft_nms(detections, sigma=model_cfg.nms_sigma,
                    final_threshold=model_cfg.nms_final_threshold)


def evaluate_samples(net: LocalizerNet, samples: list[VideoSample],
                     model_cfg: ModelConfig, thresholds: list[float]) -> float:
    from .evaluation import map_grid

    detections = {s.id: predict_sample(net, s, model_cfg) for s in samples}
    ground_truth = {
        s.id: [(a * s.seconds_per_unit, b * s.seconds_per_unit, k)
               for a, b, k in s.segments]
        for s in samples
    }
    return map_grid(detections, ground_truth, thresholds).average_map


def train(samples: list[VideoSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir: str | Path, val_samples: list[VideoSample] | None = None) -> TrainResult:
    """Seeded training loop; saves the checkpoint with the best validation mAP.

    Validation defaults to the training set. A non-finite loss aborts the
    run, naming the offending sample.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "best.ckpt"
    val = samples if val_samples is None else val_samples

    seed_rng = np.random.default_rng(train_cfg.seed)
    net = LocalizerNet(model_cfg, seed_rng)
    sampler_rng = np.random.default_rng(train_cfg.seed + 1)
    shuffle_rng = np.random.default_rng(train_cfg.seed + 2)
    params = net.parameters()
    state = OptimizerState.init(params)

    steps_per_epoch = max(1, math.ceil(len(samples) / max(1, train_cfg.batch_size)))
    horizon = train_cfg.schedule_horizon
    if horizon is None:
        horizon = max(1, train_cfg.epochs * steps_per_epoch)

    targets_cache: dict = {}
    best_map: float | None = None
    initial_loss = final_loss = float("nan")
    epoch_losses: list[dict] = []
    step = 0

    with open(metrics_path, "w") as metrics:
        if train_cfg.epochs == 0:
            save_checkpoint(ckpt_path, net, model_cfg)
        for epoch in range(train_cfg.epochs):
            order = shuffle_rng.permutation(len(samples))
            sums = {"total": 0.0, "coarse": 0.0, "refine": 0.0, "cls": 0.0,
                    "start": 0.0, "end": 0.0}
            for chunk_start in range(0, len(order), max(1, train_cfg.batch_size)):
                chunk = order[chunk_start:chunk_start + max(1, train_cfg.batch_size)]
                net.zero_grad()
                for idx in chunk:
                    sample = samples[int(idx)]
                    try:
                        with Tape() as tape:
                            _, breakdown, _ = _sample_loss(net, sample, targets_cache,
                                                           model_cfg, sampler_rng)
                    except ValueError as exc:
                        raise TrainingError(
                            f"forward failed on sample {sample.id!r}: {exc}",
                            sample.id) from exc
                    if not math.isfinite(breakdown.total):
                        raise TrainingError(
                            f"non-finite loss on sample {sample.id!r}", sample.id)
                    tape.backward(breakdown.total_tensor)
                    for key in sums:
                        sums[key] += getattr(breakdown, key)
                lr = cosine_lr(step, horizon, train_cfg.lr)
                grads = [np.zeros_like(p.data) if p.grad is None else p.grad / len(chunk)
                         for p in params]
                grads = clip_gradients(grads, train_cfg.grad_clip)
                adamw_step(params, grads, state, lr=lr,
                           weight_decay=train_cfg.weight_decay,
                           beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                           eps=train_cfg.adam_eps)
                step += 1
            mean = {k: v / len(samples) for k, v in sums.items()}
            if epoch == 0:
                initial_loss = mean["total"]
            final_loss = mean["total"]
            row = {"epoch": epoch, "lr": cosine_lr(step, horizon, train_cfg.lr)}
            row.update({f"loss_{k}": mean[k] for k in mean})
            epoch_losses.append(mean)

            last_epoch = epoch == train_cfg.epochs - 1
            if last_epoch or (train_cfg.eval_every > 0
                              and (epoch + 1) % train_cfg.eval_every == 0):
                val_map = evaluate_samples(net, val, model_cfg, train_cfg.eval_thresholds)
                row["val_map"] = val_map
                if best_map is None or val_map > best_map:
                    best_map = val_map
                    save_checkpoint(ckpt_path, net, model_cfg)
            metrics.write(json.dumps(row, sort_keys=True) + "\n")
    if train_cfg.epochs > 0 and not ckpt_path.exists():
        save_checkpoint(ckpt_path, net, model_cfg)
    return TrainResult(checkpoint_path=ckpt_path, initial_loss=initial_loss,
                       final_loss=final_loss, best_map=best_map,
                       epoch_losses=epoch_losses, metrics_path=metrics_path)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def ablate(train_samples: list[VideoSample], eval_samples: list[VideoSample],
           runs: list[tuple[str, ModelConfig, TrainConfig]],
           out_dir: str | Path) -> list[dict]:
    """Train each labelled configuration and compare average mAP on the eval set."""
    if len(runs) < 2:
        raise ValueError("ablation needs at least two configurations")
    out_dir = Path(out_dir)
    rows = []
    for label, model_cfg, train_cfg in runs:
        run_dir = out_dir / label.replace(" ", "_").replace("/", "-")
        result = train(train_samples, model_cfg, train_cfg, run_dir)
        net, cfg = load_checkpoint(result.checkpoint_path)
        avg = evaluate_samples(net, eval_samples, cfg, train_cfg.eval_thresholds)
        rows.append({"label": label, "average_map": avg,
                     "final_loss": result.final_loss})
    return rows


def ablation_table(rows: list[dict]) -> str:
    width = max(len(r["label"]) for r in rows)
    lines = [f"{'config':<{width}}  avg mAP   final loss"]
    for r in rows:
        lines.append(f"{r['label']:<{width}}  {r['average_map']:.4f}    {r['final_loss']:.4f}")
    return "\n".join(lines) + "\n"
