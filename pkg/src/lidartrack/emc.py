"""Ego-motion compensation of decoder features.

A decoder output ``y`` that described a box in the previous ego frame is
mapped into the current frame as::

    y'' = y + up(T(p) @ down(y))

where ``T(p)`` is a ``k x k`` matrix produced by a small network from the
7-vector pose change only. The box anchor is moved by the exact rigid
transform; nothing about the anchor is learned.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .detector import N_BOX_PARAMS, BoxEstimate, DetectorParams, boxes_from_raw, forward, frame_seed, head_forward
from .geometry import GtBox, PoseChange, transform_box
from .matching import LossWeights
from .scene import Scene
from .training import JsonlLog, _check_finite


class EmcConfigError(ValueError):
    pass


@dataclass
class EmcConfig:
    k: int | None = None  # reduced width, d/4 when unset
    pose_hidden: int = 64
    translation_scale: float = 5.0  # metres; pose translation is divided by this before FFN_T

    def width(self, d_model: int) -> int:
        k = d_model // 4 if self.k is None else self.k
        if not 0 < k < d_model:
            raise EmcConfigError(f"reduced width k={k} must satisfy 0 < k < d={d_model}")
        return k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EmcConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise EmcConfigError(f"unknown emc config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class EmcParams:
    cfg: EmcConfig
    d_model: int
    k: int
    params: dict[str, Tensor]
    trained_steps: int = 0

    def trainable(self) -> list[Tensor]:
        return [self.params[n] for n in sorted(self.params)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"emc.{n}": t.data.copy() for n, t in self.params.items()}

    @classmethod
    def from_arrays(cls, cfg: EmcConfig, d_model: int, arrays: dict[str, np.ndarray]) -> "EmcParams":
        params = {n[4:]: Tensor(v.copy(), requires_grad=True, name=n)
                  for n, v in arrays.items() if n.startswith("emc.")}
        return cls(cfg, d_model, cfg.width(d_model), params)


def init_emc(d_model: int, cfg: EmcConfig | None = None, seed: int = 0) -> EmcParams:
    cfg = cfg or EmcConfig()
    k = cfg.width(d_model)
    rng = np.random.default_rng(seed)
    p = {}

    def lin(name, n_in, n_out):
        p[f"{name}.w"] = ad.glorot(rng, n_in, n_out)
        p[f"{name}.b"] = np.zeros(n_out)

    lin("pose.l1", 7, cfg.pose_hidden)
    lin("pose.l2", cfg.pose_hidden, k * k)
    p["pose.l2.w"] *= 0.1
    p["pose.l2.b"] = np.eye(k).ravel()  # T starts near the identity
    lin("down.l1", d_model, d_model)
    lin("down.l2", d_model, k)
    lin("up.l1", k, d_model)
    lin("up.l2", d_model, d_model)
    params = {n: Tensor(v, requires_grad=True, name=f"emc.{n}") for n, v in p.items()}
    return EmcParams(cfg, d_model, k, params)


def pose_input(p: PoseChange, cfg: EmcConfig) -> np.ndarray:
    v = p.as_vector().copy()
    v[:3] /= cfg.translation_scale
    return v[None, :]


def transform_matrix(p: PoseChange, ep: EmcParams) -> Tensor:
    """``T(p)``; depends on the pose change only."""
    w = ep.params
    h = ad.relu(ad.linear(Tensor(pose_input(p, ep.cfg)), w["pose.l1.w"], w["pose.l1.b"]))
    flat = ad.linear(h, w["pose.l2.w"], w["pose.l2.b"])
    return ad.reshape(flat, (ep.k, ep.k))


def emc_residual(y: Tensor, t_mat: Tensor, ep: EmcParams) -> Tensor:
    w = ep.params
    z = ad.linear(ad.relu(ad.linear(y, w["down.l1.w"], w["down.l1.b"])), w["down.l2.w"], w["down.l2.b"])
    z = ad.matmul(z, ad.transpose(t_mat))
    return ad.linear(ad.relu(ad.linear(z, w["up.l1.w"], w["up.l1.b"])), w["up.l2.w"], w["up.l2.b"])


def emc_features(y: Tensor, p: PoseChange, ep: EmcParams) -> Tensor:
    """Compensate a batch of feature rows; ``T`` is computed once for all rows."""
    if y.shape[-1] != ep.d_model:
        raise ad.DimensionError(f"emc: feature width {y.shape[-1]} != {ep.d_model}")
    if y.shape[0] == 0:
        return y
    return ad.add(y, emc_residual(y, transform_matrix(p, ep), ep))


def emc_apply(y, anchor, p: PoseChange, ep: EmcParams) -> tuple[np.ndarray, np.ndarray]:
    """Compensated features and rigidly moved anchor(s)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != ep.d_model:
        raise ad.DimensionError(f"emc: feature width {y.shape[-1]} != {ep.d_model}")
    single = y.ndim == 1
    out = emc_features(Tensor(y.reshape(-1, ep.d_model)), p, ep).data
    rho = p.apply(np.asarray(anchor, dtype=np.float64).reshape(-1, 3))
    return (out[0], rho[0]) if single else (out, rho)


@dataclass
class EmcTarget:
    anchor: np.ndarray  # transformed resolved location
    params: np.ndarray  # (0, 0, 0, w, l, h, yaw, vx, vy)
    cls: int


def emc_make_targets(box: BoxEstimate, p: PoseChange) -> EmcTarget:
    moved = transform_box(GtBox(-1, box.location, box.size, box.heading, box.velocity, box.cls), p)
    params = np.concatenate([np.zeros(3), box.size, [moved.heading], moved.velocity])
    return EmcTarget(moved.center, params, box.cls)


# ---------------------------------------------------------------- training


@dataclass
class EmcTrainConfig:
    lr: float = 1e-3
    epochs: int = 5
    n_skip: int = 2
    lambda_detect: float = 0.95
    clip_norm: float | None = 10.0
    seed: int = 0
    class_weight: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EmcTrainConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise EmcConfigError(f"unknown emc training keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class EmcSample:
    """Confident detections of one frame paired with the pose change to a later frame."""

    features: np.ndarray  # (n, d)
    boxes: list[BoxEstimate]
    class_probs: np.ndarray  # (n, C+1)
    pose: PoseChange
    skip: int
    targets: list[EmcTarget] = field(default_factory=list)


def collect_samples(dp: DetectorParams, scenes: Sequence[Scene], n_skip: int, lambda_detect: float,
                    seed: int = 0) -> list[EmcSample]:
    """Run the frozen detector once per frame and pair its confident outputs with 1..n_skip+1 step poses."""
    out = []
    for si, scene in enumerate(scenes):
        cache = {}
        for k in range(len(scene.frames)):
            pts = scene.frames[k].points
            if len(pts) == 0:
                continue
            res = forward(pts, dp, frame_seed(seed + si, k))
            boxes = boxes_from_raw(res.raw.data, res.anchors)
            keep = [i for i, b in enumerate(boxes) if b.confidence >= lambda_detect]
            if keep:
                cache[k] = (res.decoded.tokens.data[keep], [boxes[i] for i in keep])
        for k, (feats, boxes) in cache.items():
            for skip in range(n_skip + 1):
                j = k + 1 + skip
                if j >= len(scene.frames):
                    break
                p = scene.pose_change(k, j)
                probs = np.stack([b.class_probs for b in boxes])
                out.append(EmcSample(feats, boxes, probs, p, skip, [emc_make_targets(b, p) for b in boxes]))
    return out


def emc_loss(sample: EmcSample, ep: EmcParams, dp: DetectorParams, weights: LossWeights,
             class_weight: float) -> tuple[Tensor, dict[str, float]]:
    y2 = emc_features(Tensor(sample.features), sample.pose, ep)
    raw = head_forward(y2, dp)
    tgt = np.stack([t.params for t in sample.targets])
    reg = ad.take_cols(raw, 0, N_BOX_PARAMS)
    w = np.r_[[weights.location] * 3, [weights.size] * 3, 0.0, [weights.velocity] * 2]
    l1 = ad.add(ad.l1_loss(reg, tgt, w),
                ad.l1_loss(ad.take_cols(reg, 6, 7), tgt[:, 6:7], weights.heading, wrap=True))
    ce = ad.soft_cross_entropy(ad.take_cols(raw, N_BOX_PARAMS, raw.shape[1]), sample.class_probs)
    n = len(sample.targets)
    total = ad.add(ad.scale(l1, 1.0 / n), ad.scale(ce, class_weight))
    return total, {"l1": float(l1.data) / n, "cls": float(ce.data), "total": float(total.data)}


def train_emc(dp: DetectorParams, scenes: Sequence[Scene], cfg: EmcTrainConfig | None = None,
              ep: EmcParams | None = None, emc_cfg: EmcConfig | None = None,
              weights: LossWeights | None = None, log_path: str | Path | None = None) -> EmcParams:
    """Fit the compensation network against a frozen detector."""
    cfg = cfg or EmcTrainConfig()
    weights = weights or LossWeights()
    if dp.trained_steps <= 0:
        raise ContractError("train_emc: detector parameters are untrained")
    ep = ep or init_emc(dp.cfg.d_model, emc_cfg, cfg.seed)
    before = ad.params_digest(dp.arrays())
    samples = collect_samples(dp, scenes, cfg.n_skip, cfg.lambda_detect, cfg.seed) if cfg.epochs else []
    if cfg.epochs and not samples:
        raise ContractError("train_emc: the detector produced no confident detections")
    rng = np.random.default_rng(cfg.seed)
    params = ep.trainable()
    opt = ad.Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    log = JsonlLog(log_path)
    try:
        for epoch in range(cfg.epochs):
            for j in rng.permutation(len(samples)):
                with ad.Tape() as tape:
                    loss, parts = emc_loss(samples[j], ep, dp, weights, cfg.class_weight)
                _check_finite(parts["total"], ep.trained_steps)
                opt.step(tape.backward(loss, params))
                ep.trained_steps += 1
                log.write(step=ep.trained_steps, epoch=epoch, **parts)
    finally:
        log.close()
    if ad.params_digest(dp.arrays()) != before:
        raise ContractError("train_emc: detector parameters changed during training")
    return ep


# ---------------------------------------------------------------- evaluation


@dataclass
class EmcEvalRow:
    kind: str  # "translation" or "yaw"
    center: float
    location_rmse: float
    size_rmse: float
    velocity_rmse: float
    heading_rmse: float
    count: int


@dataclass
class EmcReport:
    rows: list[EmcEvalRow]
    overall: EmcEvalRow

    def by_kind(self, kind: str) -> list[EmcEvalRow]:
        return [r for r in self.rows if r.kind == kind]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket_kind", "bucket_center", "location_rmse", "size_rmse", "velocity_rmse",
                    "heading_rmse", "count"])
        for r in self.rows + [self.overall]:
            w.writerow([r.kind, f"{r.center:.6g}", f"{r.location_rmse:.9g}", f"{r.size_rmse:.9g}",
                        f"{r.velocity_rmse:.9g}", f"{r.heading_rmse:.9g}", r.count])
        return buf.getvalue()


def _rmse(err: np.ndarray) -> float:
    """Root of the mean squared Euclidean error over samples."""
    return float(math.sqrt(np.mean(np.sum(err ** 2, axis=1)))) if len(err) else float("nan")


def _row(kind: str, center: float, err: np.ndarray) -> EmcEvalRow:
    return EmcEvalRow(kind, center, _rmse(err[:, 0:3]), _rmse(err[:, 3:6]), _rmse(err[:, 7:9]),
                      _rmse(err[:, 6:7]), len(err))


def eval_emc(ep: EmcParams | None, dp: DetectorParams, scenes: Sequence[Scene], skips=(0, 1, 2),
             lambda_detect: float = 0.95, bypass: bool = False, translation_bin: float = 1.0,
             yaw_bin_deg: float = 2.0, seed: int = 0) -> EmcReport:
    """RMSE of compensated head outputs against rigidly transformed detections.

    ``bypass`` replaces the learned module with the exact transform, which
    must produce zero error everywhere.
    """
    if ep is None and not bypass:
        raise ContractError("eval_emc: emc params required unless bypass is set")
    n_skip = max(skips) if skips else 0
    errs, trans, yaws = [], [], []
    for s in collect_samples(dp, scenes, n_skip, lambda_detect, seed):
        if s.skip not in skips:
            continue
        tgt = np.stack([t.params for t in s.targets])
        if bypass:
            pred = tgt.copy()
        else:
            pred = head_forward(emc_features(Tensor(s.features), s.pose, ep), dp).data[:, :N_BOX_PARAMS]
        e = pred - tgt
        e[:, 6] = ad.wrap_angle(e[:, 6])
        errs.append(e)
        trans += [float(np.linalg.norm(s.pose.t))] * len(e)
        yaws += [abs(math.degrees(s.pose.yaw))] * len(e)
    err = np.concatenate(errs) if errs else np.zeros((0, N_BOX_PARAMS))
    trans, yaws = np.asarray(trans), np.asarray(yaws)
    rows = []
    for kind, values, width in (("translation", trans, translation_bin), ("yaw", yaws, yaw_bin_deg)):
        idx = np.floor(values / width).astype(np.int64)
        for b in np.unique(idx):
            rows.append(_row(kind, (b + 0.5) * width, err[idx == b]))
    return EmcReport(rows, _row("all", float("nan"), err))


def write_emc_report(report: EmcReport, path: str | Path) -> None:
    Path(path).write_text(report.to_csv())
