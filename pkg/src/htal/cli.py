"""Command-line entry point: synth, train, predict, eval, ablate, selftest.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
Every run that trains or evaluates writes its fully-resolved config into
the output directory so it can be reproduced from that file alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, load_config
from .data import (DataError, SynthConfig, load_annotations, load_dataset,
                   load_detections, load_manifest, save_detections, synth_generate)
from .evaluation import evaluate, write_reports
from .training import (TrainingError, ablate, load_checkpoint, predict_sample,
                       train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        overrides[key] = value
    return overrides


def _out_dir(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get("HTAL_OUTPUT_DIR", "runs")) / args.command


def build_parser() -> _Parser:
    parser = _Parser(prog="htal",
                     description="anchor-free temporal action localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--videos", type=int, default=10)
    synth.add_argument("--snippets", type=int, default=64)
    synth.add_argument("--channels", type=int, default=16)
    synth.add_argument("--classes", type=int, default=3)
    synth.add_argument("--snr", type=float, default=10.0)
    synth.add_argument("--context-snr", type=float, default=0.0)
    synth.add_argument("--single-class-videos", action="store_true")
    synth.add_argument("--seed", type=int, default=7)

    for name in ("train", "predict", "eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--out", default=None, help="output directory")
        if name in ("train", "ablate"):
            p.add_argument("--config", default=None, help="JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="config override, repeatable")
        if name == "train":
            p.add_argument("--manifest", required=True)
            p.add_argument("--annotations", required=True)
        if name == "predict":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--manifest", required=True)
        if name == "eval":
            p.add_argument("--manifest", required=True)
            p.add_argument("--annotations", required=True)
            p.add_argument("--results", required=True)
            p.add_argument("--thresholds", default="0.3,0.4,0.5,0.6,0.7")
        if name == "ablate":
            p.add_argument("--train-manifest", required=True)
            p.add_argument("--train-annotations", required=True)
            p.add_argument("--eval-manifest", required=True)
            p.add_argument("--eval-annotations", required=True)
            p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                           help="ablation axis, repeatable; rows are the product")
            p.add_argument("--seeds", default="0", help="comma-separated training seeds")

    sub.add_parser("selftest", help="run gradient checks and oracle suites")
    return parser


def _cmd_synth(args) -> int:
    cfg = SynthConfig(num_videos=args.videos, t_range=(args.snippets, args.snippets),
                      channels=args.channels, num_classes=args.classes, snr=args.snr,
                      context_snr=args.context_snr,
                      single_class_videos=args.single_class_videos, seed=args.seed)
    manifest, annotations = synth_generate(cfg, args.out)
    print(f"wrote {len(manifest.videos)} videos to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config, _parse_overrides(args.set))
    manifest = load_manifest(args.manifest)
    annotations = load_annotations(args.annotations, manifest)
    samples = load_dataset(manifest, annotations)
    if model_cfg.in_channels != manifest.videos[0].channels:
        model_cfg = dataclasses.replace(model_cfg,
                                        in_channels=manifest.videos[0].channels)
    if model_cfg.num_classes != len(manifest.classes):
        model_cfg = dataclasses.replace(model_cfg, num_classes=len(manifest.classes))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(model_cfg, train_cfg, out / "config.json")
    result = train(samples, model_cfg, train_cfg, out)
    print(f"initial loss {result.initial_loss:.4f}, final loss {result.final_loss:.4f}")
    if result.best_map is not None:
        print(f"best validation average mAP {result.best_map:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    net, model_cfg = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    samples = load_dataset(manifest, None)
    detections = {s.id: predict_sample(net, s, model_cfg) for s in samples}
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "detections.json"
    save_detections(detections, manifest.classes, results_path)
    total = sum(len(v) for v in detections.values())
    print(f"wrote {total} detections for {len(samples)} videos to {results_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    annotations = load_annotations(args.annotations, manifest)
    detections = load_detections(args.results, manifest.classes)
    thresholds = [float(t) for t in args.thresholds.split(",") if t]
    durations = {rec.id: rec.duration for rec in manifest.videos}
    report = evaluate(detections, annotations, thresholds, durations)
    out = _out_dir(args)
    write_reports(report, out)
    print(report.to_text(), end="")
    print(f"average mAP {report.average_map:.4f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    model_cfg, train_cfg = load_config(args.config, _parse_overrides(args.set))
    axes: list[tuple[str, list[str]]] = []
    for axis in args.grid:
        if "=" not in axis:
            raise ConfigError(f"grid axis {axis!r} is not of the form key=v1,v2")
        key, values = axis.split("=", 1)
        axes.append((key, values.split(",")))
    if not axes:
        raise ConfigError("ablate needs at least one --grid axis")
    rows: list[dict] = [{}]
    for key, values in axes:
        rows = [dict(r, **{key: v}) for r in rows for v in values]
    seeds = [int(s) for s in args.seeds.split(",") if s]

    train_manifest = load_manifest(args.train_manifest)
    train_ann = load_annotations(args.train_annotations, train_manifest)
    eval_manifest = load_manifest(args.eval_manifest)
    eval_ann = load_annotations(args.eval_annotations, eval_manifest)
    train_samples = load_dataset(train_manifest, train_ann)
    eval_samples = load_dataset(eval_manifest, eval_ann)

    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(model_cfg, train_cfg, out / "config.json")

    base_overrides = _parse_overrides(args.set)
    runs = []
    for combo in rows:
        label = ",".join(f"{k}={v}" for k, v in combo.items())
        for seed in seeds:
            overrides = dict(base_overrides)
            overrides.update(combo)
            overrides["seed"] = str(seed)
            m_cfg, t_cfg = load_config(args.config, overrides)
            m_cfg = dataclasses.replace(
                m_cfg, in_channels=train_manifest.videos[0].channels,
                num_classes=len(train_manifest.classes))
            runs.append((f"{label} seed={seed}", m_cfg, t_cfg))
    results = ablate(train_samples, eval_samples, runs, out / "runs")

    combined: dict[str, list[float]] = {}
    for combo, row in zip([c for c in rows for _ in seeds], results):
        label = ",".join(f"{k}={v}" for k, v in combo.items())
        combined.setdefault(label, []).append(row["average_map"])
    table_rows = [{"label": label, "average_map": float(np.mean(v)),
                   "final_loss": float("nan")} for label, v in combined.items()]
    averaged = [{"label": r["label"], "average_map": r["average_map"]}
                for r in table_rows]
    (out / "ablation.json").write_text(json.dumps(averaged, indent=2) + "\n")
    width = max(len(r["label"]) for r in table_rows)
    lines = [f"{'config':<{width}}  avg mAP"]
    for r in table_rows:
        lines.append(f"{r['label']:<{width}}  {r['average_map']:.4f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest()
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "predict": _cmd_predict,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
