"""Command-line entry point: ``cvfnet {train,infer,eval,bench,synth} --config PATH``.

Exit codes: 0 ok, 2 configuration error, 3 checkpoint mismatch, 4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import tensor as T
from .boxes import Box3D, bev_corners
from .checkpoint import load_weights, save_weights
from .config import ExperimentConfig, load_config
from .data import SceneSample, load_dataset, read_labels, scene_seed, synth_generate, write_scene
from .data.kitti import write_labels, write_manifest
from .errors import CheckpointMismatchError, ConfigurationError, DataError, DomainError
from .evaluation import evaluate, write_report
from .head import decode_and_nms
from .model import CVFNet, StageTimer
from .train import predict, train

log = logging.getLogger("cvfnet")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DATA = 0, 2, 3, 4
BENCH_STAGES = ("projection", "fusion", "scatter", "backbone", "head", "nms")


def synthetic_corpus(cfg: ExperimentConfig, n: Optional[int] = None) -> List[SceneSample]:
    n = cfg.n_scenes if n is None else n
    return [synth_generate(replace(cfg.synth, seed=scene_seed(cfg.seed, i)), f"{i:06d}") for i in range(n)]


def _scenes(cfg: ExperimentConfig, root: Optional[str]) -> List[SceneSample]:
    """Scenes from a KITTI-style directory, else the seeded synthetic corpus of the config."""
    root = root or cfg.paths.get("data")
    if root:
        if not Path(root).is_dir():
            raise DataError(f"data directory {root} does not exist")
        return load_dataset(root, calib=cfg.calib)
    return synthetic_corpus(cfg)


def _load_model(cfg: ExperimentConfig, checkpoint: Optional[str]) -> CVFNet:
    model = CVFNet(cfg.model, seed=cfg.seed)
    if checkpoint:
        model.load_state_dict(load_weights(checkpoint))
    return model


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = _scenes(cfg, args.scenes)
    if not scenes:
        raise DataError("no training scenes")
    model = _load_model(cfg, None)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.cvfw"
    log_path = out / "loss_log.tsv"
    with open(log_path, "w") as fh:
        fh.write("epoch\ttotal\tcls\treg\tdir\tlr\n")

        def on_epoch(r):
            fh.write(f"{r['epoch']}\t{r['total']:.8g}\t{r['cls']:.8g}\t{r['reg']:.8g}\t{r['dir']:.8g}\t{r['lr']:.8g}\n")
            fh.flush()

        history = train(model, scenes, cfg, on_epoch=on_epoch)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_weights(ckpt, model.state_dict())
    final = history[-1]["total"] if history else float("nan")
    print(f"trained {len(history)} epochs on {len(scenes)} scenes, final loss {final:.6f}")
    print(f"checkpoint: {ckpt}\nloss log: {log_path}")
    return EXIT_OK


def render_overlay(shape_hw, voxel, gts: List[Box3D], dets: List[Box3D]):
    """BEV raster at the backbone output resolution: ground truth green, detections red."""
    from PIL import Image, ImageDraw

    h, w = shape_hw
    img = Image.new("RGB", (w, h), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    sx = w / (voxel.x_range[1] - voxel.x_range[0])
    sy = h / (voxel.y_range[1] - voxel.y_range[0])

    def poly(box):
        return [((x - voxel.x_range[0]) * sx, (y - voxel.y_range[0]) * sy) for x, y in bev_corners(box.as_array())]

    for b in gts:
        draw.polygon(poly(b), outline=(0, 255, 0))
    for b in dets:
        draw.polygon(poly(b), outline=(255, 0, 0))
    return img


def cmd_infer(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, args.checkpoint)
    scenes = _scenes(cfg, args.scenes)
    for s in scenes:
        dets = predict(model, s, cfg)
        write_labels(out / f"{s.scene_id}.txt", dets, calib=cfg.calib)
        if args.overlay:
            img = render_overlay(model.bev_output_shape, cfg.model.voxel, s.gts, dets)
            img.save(out / f"{s.scene_id}.png")
    print(f"wrote {len(scenes)} label files to {out}")
    return EXIT_OK


def _label_dir(path: Path) -> Path:
    return path / "label" if (path / "label").is_dir() else path


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    if not args.pred or not args.gt:
        raise ConfigurationError("eval needs --pred DIR and --gt DIR")
    pred_dir, gt_dir = _label_dir(Path(args.pred)), _label_dir(Path(args.gt))
    if not gt_dir.is_dir() or not pred_dir.is_dir():
        raise DataError("prediction or ground-truth directory does not exist")
    gt = {p.stem: read_labels(p, calib=cfg.calib) for p in sorted(gt_dir.glob("*.txt"))}
    pred = {sid: read_labels(pred_dir / f"{sid}.txt", calib=cfg.calib)
            for sid in gt if (pred_dir / f"{sid}.txt").exists()}
    metrics = evaluate(pred, gt, cfg.eval, cfg.class_ids())
    text, kv = write_report(metrics, args.out)
    for k, v in metrics.items():
        print(f"{k}: {v:.4f}")
    print(f"report: {text} {kv}")
    return EXIT_OK


def bench_cloud(cfg: ExperimentConfig, n_points: int, n_objects: int, seed: int):
    """Synthetic cloud with exactly ``n_points`` returns (fewer only if the sensor cannot produce them)."""
    s = cfg.synth
    steps = max(s.azimuth_steps, int(math.ceil(2.0 * n_points / s.beams)))
    spec = replace(s, seed=seed, object_count=(n_objects, n_objects), azimuth_steps=steps,
                   azimuth_span=(-math.pi, math.pi), n_background_points=n_points,
                   min_points_per_object=min(s.min_points_per_object, 1))
    sample = synth_generate(spec)
    pts = sample.cloud.points
    if len(pts) > n_points:
        keep = np.sort(np.random.default_rng(seed).choice(len(pts), n_points, replace=False))
        pts = pts[keep]
    return replace(sample, cloud=type(sample.cloud)(pts))


def run_bench(cfg: ExperimentConfig, model: CVFNet, n_points: int, n_objects: int,
              warmup: int, iterations: int):
    cloud = bench_cloud(cfg, n_points, n_objects, cfg.seed).cloud
    samples = {k: [] for k in BENCH_STAGES}
    shapes = None
    for it in range(warmup + iterations):
        timer = StageTimer()
        with T.no_grad():
            prep = model.prepare(cloud, timer)
            keep = {}
            out = model(prep, timer, keep=keep)
            with timer.stage("nms"):
                decode_and_nms(out, model.anchors, cfg.train.score_thresh, cfg.train.nms_iou, cfg.train.max_keep)
        shapes = {"points": int(len(cloud)), "range_image": list(prep.image.channels.shape),
                  "bev": list(keep["bev"].shape), "backbone": list(keep["bev_out"].shape),
                  "valid_cells": int(out.valid_cells.size)}
        if it >= warmup:
            for k in BENCH_STAGES:
                samples[k].append(timer.times.get(k, 0.0) * 1e3)
    stats = {k: {"mean_ms": float(np.mean(v)), "p95_ms": float(np.percentile(v, 95))} for k, v in samples.items()}
    return stats, shapes


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    b = cfg.bench
    iterations = max(args.iterations or b.iterations, 20)
    model = _load_model(cfg, args.checkpoint)
    stats, shapes = run_bench(cfg, model, args.points or b.n_points, b.n_objects, max(b.warmup, 3), iterations)
    print(f"{'stage':<12}{'mean ms':>10}{'p95 ms':>10}")
    for k, v in stats.items():
        print(f"{k:<12}{v['mean_ms']:>10.2f}{v['p95_ms']:>10.2f}")
    print("shapes:", json.dumps(shapes))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps({"iterations": iterations, "warmup": max(b.warmup, 3),
                                                    "stages": stats, "shapes": shapes}, indent=2) + "\n")
    return EXIT_OK


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.n_scenes if args.n_scenes is None else args.n_scenes
    if n < 0:
        raise ConfigurationError("--n-scenes must be >= 0")
    entries = []
    for sample in synthetic_corpus(cfg, n):
        write_scene(out, sample)
        entries.append((sample.scene_id, scene_seed(cfg.seed, int(sample.scene_id))))
    write_manifest(out / "manifest.txt", entries)
    print(f"wrote {n} synthetic scenes to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvfnet", description="Cross-view LiDAR 3D detection on numpy.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--checkpoint", help="weights file (written by train, read by infer/bench)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--scenes", help="KITTI-style directory with velodyne/ (and label/)")
    p.add_argument("--pred", help="eval: directory of predicted label files")
    p.add_argument("--gt", help="eval: directory of ground-truth label files")
    p.add_argument("--n-scenes", type=int, help="synth: number of scenes (default: config n_scenes)")
    p.add_argument("--epochs", type=int, help="train: override train.epochs")
    p.add_argument("--overlay", action="store_true", help="infer: also write BEV overlay PNGs")
    p.add_argument("--points", type=int, help="bench: cloud size")
    p.add_argument("--iterations", type=int, help="bench: timed iterations (at least 20)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, DomainError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
