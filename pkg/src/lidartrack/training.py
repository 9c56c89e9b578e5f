"""Training loops for the detector and the joint tracker."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .detector import DetectorParams, boxes_from_raw, forward, frame_seed
from .matching import LossWeights, NO_OBJECT, augment_tracks, match_detection, match_tracking, set_loss
from .scene import Scene


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-5
    epochs: int = 1
    n_skip: int = 2
    n_queries: int = 20
    p_drop: float = 0.1
    p_readd: float = 0.1
    batch_size: int = 1
    clip_norm: float | None = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainConfig":
        for name in ("p_drop", "p_readd"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TrainConfigError(f"{name} must lie in [0, 1]")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.n_skip < 0:
            raise TrainConfigError("lr > 0, epochs >= 0, batch_size >= 1, n_skip >= 0 required")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        w = obj.pop("weights", {})
        unknown = set(w) - {f.name for f in fields(LossWeights)}
        if unknown:
            raise TrainConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(weights=LossWeights(**w), **obj).validate()


class JsonlLog:
    def __init__(self, path: str | Path | None):
        self.fh = open(path, "w") if path else None

    def write(self, **record) -> None:
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss at step {step}")


def detection_step_loss(dp: DetectorParams, scene: Scene, k: int, seed: int, cfg: TrainConfig,
                        rng: np.random.Generator | None = None):
    frame = scene.frames[k]
    res = forward(frame.points, dp, seed, n_queries=cfg.n_queries, rng=rng)
    gts = frame.visible_boxes()
    preds = boxes_from_raw(res.raw.data, res.anchors)
    assignment = match_detection(preds, gts)
    return set_loss(res.raw, res.anchors, assignment, gts, cfg.weights, dp.cfg.n_classes)


def train_detector(scenes: Sequence[Scene], dp: DetectorParams, cfg: TrainConfig,
                   log_path: str | Path | None = None,
                   on_epoch: Callable[[int, DetectorParams], None] | None = None) -> DetectorParams:
    """Per-frame set-prediction training; returns the (mutated) params."""
    cfg.validate()
    samples = [(s, k) for s in range(len(scenes)) for k in range(len(scenes[s].frames))]
    if not samples:
        raise TrainConfigError("empty training set")
    if cfg.epochs == 0:
        return dp
    rng = np.random.default_rng(cfg.seed)
    params = dp.trainable()
    opt = ad.Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    log = JsonlLog(log_path)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(samples))
            acc = None
            n_acc = 0
            for j in order:
                s, k = samples[j]
                if scenes[s].frames[k].points.shape[0] == 0:
                    continue
                seed = int(rng.integers(2 ** 31))
                drop_rng = rng if dp.cfg.dropout > 0 else None
                with ad.Tape() as tape:
                    loss, parts = detection_step_loss(dp, scenes[s], k, seed, cfg, drop_rng)
                _check_finite(parts["total"], step)
                grads = tape.backward(loss, params)
                acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
                n_acc += 1
                if n_acc == cfg.batch_size:
                    opt.step([a / n_acc for a in acc])
                    acc, n_acc = None, 0
                    step += 1
                    dp.trained_steps += 1
                    log.write(step=step, epoch=epoch, lr=cfg.lr, **parts)
            if acc is not None:
                opt.step([a / n_acc for a in acc])
                step += 1
                dp.trained_steps += 1
            if on_epoch:
                on_epoch(epoch, dp)
    finally:
        log.close()
    return dp


def composed_pose(scene: Scene, k1: int, k2: int):
    """Pose change from frame ``k1`` to ``k2`` composed from the per-frame steps."""
    from .geometry import PoseChange, compose

    p = PoseChange.identity()
    for k in range(k1, k2):
        p = compose(p, scene.pose_change(k, k + 1))
    return p


def tracking_step_loss(dp: DetectorParams, ep, scene: Scene, k1: int, k2: int, seed: int, cfg: TrainConfig,
                       rng: np.random.Generator):
    """One frame pair: frame-1 detections become track queries for frame 2.

    Frame 1 runs without recording; gradients reach the EMC module and the
    frame-2 forward pass. Returns ``(loss, parts)`` or ``None`` if frame 2
    has no points.
    """
    from .emc import emc_features

    f1, f2 = scene.frames[k1], scene.frames[k2]
    if len(f2.points) == 0:
        return None
    slots = []
    pool = []
    if len(f1.points):
        res1 = forward(f1.points, dp, frame_seed(seed, 1), n_queries=cfg.n_queries)
        boxes1 = boxes_from_raw(res1.raw.data, res1.anchors)
        gts1 = f1.visible_boxes()
        a1 = match_detection(boxes1, gts1)
        tokens1 = res1.decoded.tokens.data
        for i, g in enumerate(a1.pred_to_gt):
            entry = (tokens1[i], boxes1[i].location)
            if g != NO_OBJECT:
                slots.append((int(gts1[g].track_id), entry))
            else:
                pool.append((-1 - i, entry))
    slots = augment_tracks(slots, pool, rng, cfg.p_drop, cfg.p_readd)
    p = composed_pose(scene, k1, k2)
    if slots:
        lat = emc_features(Tensor(np.stack([e[0] for _, e in slots])), p, ep)
        anchors = p.apply(np.stack([e[1] for _, e in slots]))
    else:
        lat, anchors = None, None
    res2 = forward(f2.points, dp, frame_seed(seed, 2), lat, anchors, n_queries=cfg.n_queries)
    boxes2 = boxes_from_raw(res2.raw.data, res2.anchors)
    gts2 = f2.visible_boxes()
    n_t = res2.n_track
    assignment = match_tracking([(tid, boxes2[s]) for s, (tid, _) in enumerate(slots)], boxes2[n_t:], gts2)
    return set_loss(res2.raw, res2.anchors, assignment, gts2, cfg.weights, dp.cfg.n_classes)


def train_tracker(scenes: Sequence[Scene], dp: DetectorParams, ep, cfg: TrainConfig, steps: int | None = None,
                  log_path: str | Path | None = None, train_emc: bool = True):
    """Joint detector (+ EMC) training on frame pairs up to ``n_skip`` frames apart.

    ``steps`` defaults to one pass per epoch over the number of frames.
    Returns ``(dp, ep)``, mutated in place.
    """
    cfg.validate()
    if ep is None:
        raise ContractError("train_tracker: EMC parameters are required")
    usable = [s for s in scenes if len(s.frames) >= 2]
    if not usable:
        raise TrainConfigError("train_tracker: need scenes with at least two frames")
    per_epoch = sum(len(s.frames) for s in usable)
    total = cfg.epochs * per_epoch if steps is None else steps
    rng = np.random.default_rng(cfg.seed)
    params = dp.trainable() + (ep.trainable() if train_emc else [])
    opt = ad.Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    log = JsonlLog(log_path)
    try:
        for step in range(total):
            scene = usable[int(rng.integers(len(usable)))]
            n = len(scene.frames)
            skip = int(rng.integers(0, min(cfg.n_skip, n - 2) + 1))
            k1 = int(rng.integers(0, n - 1 - skip))
            seed = int(rng.integers(2 ** 31))
            with ad.Tape() as tape:
                out = tracking_step_loss(dp, ep, scene, k1, k1 + 1 + skip, seed, cfg, rng)
            if out is None:
                continue
            loss, parts = out
            _check_finite(parts["total"], step)
            opt.step(tape.backward(loss, params))
            dp.trained_steps += 1
            if train_emc:
                ep.trained_steps += 1
            log.write(step=step, epoch=step // per_epoch, lr=cfg.lr, skip=skip, **parts)
    finally:
        log.close()
    return dp, ep
