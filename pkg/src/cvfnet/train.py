"""Training loop and inference helpers."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import Box3D
from .config import ExperimentConfig
from .data import SceneSample, augment, build_gt_bank, gt_sample_injection
from .errors import EmptyImageError
from .head import build_targets, decode_and_nms, head_loss
from .model import CVFNet, Prepared
from .optim import Adam, TwoPhaseSchedule

log = logging.getLogger(__name__)


def _gt_for_model(sample: SceneSample, class_ids: Sequence[int]):
    to_model = {g: k for k, g in enumerate(class_ids)}
    keep = [b for b in sample.gts if b.class_id in to_model]
    arr = np.stack([b.as_array() for b in keep]) if keep else np.zeros((0, 7))
    return arr, np.array([to_model[b.class_id] for b in keep], dtype=np.int64)


def scene_loss(model: CVFNet, prep: Prepared, sample: SceneSample, cfg: ExperimentConfig, targets=None):
    """Forward one scene; returns (loss tensor, breakdown, targets). Targets are reusable
    as long as the cloud is unchanged."""
    out = model(prep)
    if targets is None:
        gts, gcls = _gt_for_model(sample, cfg.class_ids())
        targets = build_targets(model.anchors_at(out.valid_cells), model.anchor_classes, gts, gcls,
                                cfg.model.anchors)
    loss, parts = head_loss(out, targets, cfg.loss)
    return loss, parts, targets


def train(model: CVFNet, scenes: List[SceneSample], cfg: ExperimentConfig,
          on_epoch: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Adam over the scenes for ``cfg.train.epochs`` epochs; returns per-epoch mean losses."""
    tc = cfg.train
    n = len(scenes)
    steps_per_epoch = max((n + tc.batch_size - 1) // tc.batch_size, 1)
    schedule = TwoPhaseSchedule(tc.epochs * steps_per_epoch, tc.lr_peak, tc.lr_floor, tc.warmup_fraction)
    opt = Adam(model.parameters(), lr=tc.lr_peak, weight_decay=tc.weight_decay)
    bank = build_gt_bank(scenes) if tc.augment and cfg.augmentation.gt_sample_max_per_class else []
    cache = {}
    history, step = [], 0
    for epoch in range(tc.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums = {"total": 0.0, "cls": 0.0, "reg": 0.0, "dir": 0.0}
        for b0 in range(0, n, tc.batch_size):
            batch = order[b0: b0 + tc.batch_size]
            opt.zero_grad()
            for i in batch:
                i = int(i)
                if tc.augment:
                    srng = np.random.default_rng([cfg.seed, epoch, i])
                    sample = gt_sample_injection(scenes[i], bank, cfg.augmentation, srng)
                    sample = augment(sample, cfg.augmentation, srng)
                    prep, targets = model.prepare(sample.cloud), None
                else:
                    sample = scenes[i]
                    if i not in cache:
                        cache[i] = (model.prepare(sample.cloud), None)
                    prep, targets = cache[i]
                loss, parts, targets = scene_loss(model, prep, sample, cfg, targets)
                if not tc.augment:
                    cache[i] = (prep, targets)
                T.backward(T.mul_scalar(loss, 1.0 / len(batch)))
                for k in sums:
                    sums[k] += parts[k]
            opt.step(lr=schedule(step))
            step += 1
        record = {"epoch": epoch + 1, **{k: v / max(n, 1) for k, v in sums.items()}, "lr": schedule(step)}
        history.append(record)
        log.info("epoch %d total %.4f cls %.4f reg %.4f dir %.4f", record["epoch"], record["total"],
                 record["cls"], record["reg"], record["dir"])
        if on_epoch is not None:
            on_epoch(record)
    return history


def predict(model: CVFNet, sample_or_cloud, cfg: ExperimentConfig) -> List[Box3D]:
    cloud = sample_or_cloud.cloud if isinstance(sample_or_cloud, SceneSample) else sample_or_cloud
    try:
        prep = model.prepare(cloud)
    except EmptyImageError:
        return []
    with T.no_grad():
        out = model(prep)
    dets = decode_and_nms(out, model.anchors, cfg.train.score_thresh, cfg.train.nms_iou, cfg.train.max_keep)
    ids = cfg.class_ids()
    return [replace(d, class_id=ids[d.class_id]) for d in dets]
