"""Tracking and detection metrics with centre-distance matching.

Matching is greedy: predictions in descending confidence each take the
nearest unmatched ground truth within the gate (BEV centre distance). Since a
prediction's match never depends on lower-confidence predictions, a single
matching pass serves every confidence threshold of the AMOTA sweep.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import wrap_angle
from .geometry import GtBox

GATE = 2.0
N_RECALL_POINTS = 40
MIN_RECALL = 0.1
MT_RATIO = 0.8


class MetricsConfigError(ValueError):
    pass


@dataclass
class MetricsConfig:
    gate: float = GATE
    n_recall_points: int = N_RECALL_POINTS
    min_recall: float = MIN_RECALL
    mt_ratio: float = MT_RATIO
    ap_gates: tuple[float, ...] = (GATE,)

    def __post_init__(self):
        self.ap_gates = tuple(float(g) for g in self.ap_gates)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise MetricsConfigError(f"unknown metrics config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class PredBox:
    track_id: int
    center: np.ndarray
    size: np.ndarray
    yaw: float
    score: float

    @classmethod
    def from_json(cls, obj: dict) -> "PredBox":
        return cls(int(obj["id"]), np.asarray(obj["c"], dtype=np.float64),
                   np.asarray(obj["s"], dtype=np.float64), float(obj["yaw"]), float(obj["score"]))


@dataclass
class FrameMatching:
    pairs: list[tuple[int, int, float]]  # (gt index, pred index, distance)
    unmatched_gts: list[int]
    unmatched_preds: list[int]


def _order(preds: Sequence[PredBox]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].track_id, i))


def match_frame(preds: Sequence[PredBox], gts: Sequence[GtBox], gate: float = GATE) -> FrameMatching:
    free = set(range(len(gts)))
    pairs = []
    matched_preds = set()
    for i in _order(preds):
        best, best_d = None, gate
        for g in sorted(free):
            d = float(np.linalg.norm(preds[i].center[:2] - gts[g].center[:2]))
            if d <= best_d and (best is None or d < best_d):
                best, best_d = g, d
        if best is not None:
            free.discard(best)
            pairs.append((best, i, best_d))
            matched_preds.add(i)
    pairs.sort()
    return FrameMatching(pairs, sorted(free), [i for i in range(len(preds)) if i not in matched_preds])


@dataclass
class EvalFrame:
    preds: list[PredBox]
    gts: list[GtBox]


Sequence_ = list[EvalFrame]


@dataclass
class _Event:
    """One matched pair with everything the threshold sweep needs."""

    seq: int
    frame: int
    gt_id: int
    pred_id: int
    score: float
    dist: float


@dataclass
class _Pass:
    events: list[_Event]
    fp_scores: np.ndarray
    n_gt: int
    gt_frames: dict[tuple[int, int], int]  # (seq, gt id) -> number of frames present


def _match_all(seqs: Sequence[Sequence[EvalFrame]], gate: float) -> _Pass:
    events, fps, n_gt, gt_frames = [], [], 0, {}
    for s, seq in enumerate(seqs):
        for f, fr in enumerate(seq):
            n_gt += len(fr.gts)
            for g in fr.gts:
                key = (s, int(g.track_id))
                gt_frames[key] = gt_frames.get(key, 0) + 1
            m = match_frame(fr.preds, fr.gts, gate)
            for gi, pi, d in m.pairs:
                p = fr.preds[pi]
                events.append(_Event(s, f, int(fr.gts[gi].track_id), p.track_id, p.score, d))
            fps.extend(fr.preds[i].score for i in m.unmatched_preds)
    return _Pass(events, np.asarray(fps, dtype=np.float64), n_gt, gt_frames)


@dataclass
class ClearMot:
    tp: int
    fp: int
    fn: int
    ids: int
    mt: int
    n_gt: int
    n_gt_tracks: int
    mean_dist: float

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0


def _counts(mp: _Pass, threshold: float, mt_ratio: float = MT_RATIO) -> ClearMot:
    ev = [e for e in mp.events if e.score >= threshold]
    fp = int(np.sum(mp.fp_scores >= threshold))
    last: dict[tuple[int, int], int] = {}
    hits: dict[tuple[int, int], int] = {}
    ids = 0
    for e in sorted(ev, key=lambda e: (e.seq, e.frame, e.gt_id)):
        key = (e.seq, e.gt_id)
        if key in last and last[key] != e.pred_id:
            ids += 1
        last[key] = e.pred_id
        hits[key] = hits.get(key, 0) + 1
    mt = sum(1 for key, n in mp.gt_frames.items() if hits.get(key, 0) >= mt_ratio * n)
    tp = len(ev)
    mean_dist = float(np.mean([e.dist for e in ev])) if ev else math.nan
    return ClearMot(tp, fp, mp.n_gt - tp, ids, mt, mp.n_gt, len(mp.gt_frames), mean_dist)


def clearmot(seqs: Sequence[Sequence[EvalFrame]], gate: float = GATE, mt_ratio: float = MT_RATIO) -> ClearMot:
    """Counts over all predictions as given (no extra confidence filtering)."""
    return _counts(_match_all(seqs, gate), -math.inf, mt_ratio)


@dataclass
class RecallPoint:
    target: float
    achieved: float | None
    threshold: float | None
    motar: float
    motp: float


def recall_grid(n: int = N_RECALL_POINTS, lo: float = MIN_RECALL) -> np.ndarray:
    return np.linspace(lo, 1.0, n)


def amota_amotp(seqs: Sequence[Sequence[EvalFrame]], n_points: int = N_RECALL_POINTS, gate: float = GATE,
                min_recall: float = MIN_RECALL) -> tuple[float, float, list[RecallPoint]]:
    """Recall-averaged MOTA and MOTP over a fixed recall grid.

    For each target recall the confidence threshold with the smallest
    achieved recall not below the target is used. Unachievable targets add
    MOTAR 0 and MOTP equal to the gate.
    """
    mp = _match_all(seqs, gate)
    grid = recall_grid(n_points, min_recall)
    if mp.n_gt == 0:
        return 0.0, gate, [RecallPoint(float(r), None, None, 0.0, gate) for r in grid]
    thresholds = np.unique(np.r_[[e.score for e in mp.events], mp.fp_scores])[::-1]
    # recall is non-increasing in the threshold, so walk thresholds from high to low
    sweep = [(float(t), _counts(mp, float(t))) for t in thresholds]
    points = []
    p_total = mp.n_gt
    for r in grid:
        chosen = next(((t, c) for t, c in sweep if c.recall >= r - 1e-12), None)
        if chosen is None:
            points.append(RecallPoint(float(r), None, None, 0.0, gate))
            continue
        t, c = chosen
        motar = 1.0 - (c.ids + c.fp + c.fn - (1.0 - r) * p_total) / (r * p_total)
        points.append(RecallPoint(float(r), c.recall, t, float(min(1.0, max(0.0, motar))), c.mean_dist))
    amota = float(np.mean([p.motar for p in points]))
    amotp = float(np.mean([p.motp for p in points]))
    return amota, amotp, points


# ---------------------------------------------------------------- detection


@dataclass
class DetectionMetrics:
    ap: float
    ate: float
    ase: float
    aoe: float
    n_tp: int


def size_aligned_iou(a, b) -> float:
    a, b = np.abs(np.asarray(a, dtype=np.float64)), np.abs(np.asarray(b, dtype=np.float64))
    inter = float(np.prod(np.minimum(a, b)))
    union = float(np.prod(a) + np.prod(b)) - inter
    return inter / union if union > 0 else 0.0


def average_precision(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.r_[0.0, recall, recall[-1]]
    mpre = np.r_[1.0, precision, 0.0]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def detection_metrics(frames: Sequence[EvalFrame], gate: float = GATE,
                      ap_gates: Sequence[float] | None = None) -> DetectionMetrics:
    """AP (mean over ``ap_gates``) plus true-positive errors at ``gate``."""
    n_gt = sum(len(f.gts) for f in frames)
    aps = []
    tp_err = None
    for g in (ap_gates or (gate,)):
        scores, flags, errs = [], [], []
        for fr in frames:
            m = match_frame(fr.preds, fr.gts, g)
            for gi, pi, d in m.pairs:
                p, t = fr.preds[pi], fr.gts[gi]
                scores.append(p.score)
                flags.append(True)
                errs.append((d, 1.0 - size_aligned_iou(p.size, t.size), abs(float(wrap_angle(p.yaw - t.heading)))))
            for pi in m.unmatched_preds:
                scores.append(fr.preds[pi].score)
                flags.append(False)
        aps.append(average_precision(np.asarray(scores, dtype=np.float64), np.asarray(flags, dtype=bool), n_gt))
        if g == gate or tp_err is None:
            tp_err = errs
    e = np.asarray(tp_err, dtype=np.float64).reshape(-1, 3)
    mean = e.mean(axis=0) if len(e) else np.full(3, math.nan)
    return DetectionMetrics(float(np.mean(aps)), float(mean[0]), float(mean[1]), float(mean[2]), len(e))


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    amota: float | None = None
    amotp: float | None = None
    mt: int | None = None
    fp: int | None = None
    fn: int | None = None
    ids: int | None = None
    ap: float | None = None
    ate: float | None = None
    ase: float | None = None
    aoe: float | None = None
    recall_table: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    SCALARS = ("amota", "amotp", "mt", "fp", "fn", "ids", "ap", "ate", "ase", "aoe")

    def to_json(self) -> dict:
        return {"metrics": {k: getattr(self, k) for k in self.SCALARS}, "recall_table": self.recall_table,
                "meta": self.meta}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1, allow_nan=True)

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = sorted(self.meta)
        w.writerow(list(self.SCALARS) + keys)
        w.writerow([_fmt(getattr(self, k)) for k in self.SCALARS] + [self.meta[k] for k in keys])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.dumps() + "\n")
        path.with_suffix(".csv").write_text(self.csv_row())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def tracking_report(seqs: Sequence[Sequence[EvalFrame]], cfg: MetricsConfig | None = None,
                    meta: dict | None = None) -> MetricsReport:
    cfg = cfg or MetricsConfig()
    amota, amotp, table = amota_amotp(seqs, cfg.n_recall_points, cfg.gate, cfg.min_recall)
    cm = clearmot(seqs, cfg.gate, cfg.mt_ratio)
    return MetricsReport(amota=amota, amotp=amotp, mt=cm.mt, fp=cm.fp, fn=cm.fn, ids=cm.ids,
                         recall_table=[asdict(p) for p in table], meta=dict(meta or {}))


def detection_report(frames: Sequence[EvalFrame], cfg: MetricsConfig | None = None,
                     meta: dict | None = None) -> MetricsReport:
    cfg = cfg or MetricsConfig()
    d = detection_metrics(frames, cfg.gate, cfg.ap_gates)
    return MetricsReport(ap=d.ap, ate=d.ate, ase=d.ase, aoe=d.aoe, meta=dict(meta or {}))


def align_outputs(scene, outputs: Iterable) -> list[EvalFrame]:
    """Pair tracker outputs (objects or JSON dicts) with the scene's visible ground truth by timestamp."""
    by_t = {round(float(f.timestamp), 9): f for f in scene.frames}
    seq = []
    for o in outputs:
        obj = o.to_json() if hasattr(o, "to_json") else o
        frame = by_t.get(round(float(obj["t"]), 9))
        if frame is None:
            raise KeyError(f"no frame at t={obj['t']} in {scene.scene_id}")
        seq.append(EvalFrame([PredBox.from_json(r) for r in obj["tracks"]], frame.visible_boxes()))
    return seq
