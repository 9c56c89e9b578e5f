"""Online tracking with decoder outputs as track state.

Each live track carries the decoder output vector of its last slot together
with an anchor. Between processed frames the state is moved into the new ego
frame (see ``emc_mode``), then decoded jointly with fresh object queries.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .detector import (OBJECT_QUERY, TRACK_QUERY, BoxEstimate, DetectorParams, EmptyInputError, boxes_from_raw,
                       forward, frame_seed)
from .emc import EmcParams, emc_features
from .geometry import GtBox, PoseChange, compose, transform_box
from .scene import Scene

EMC_MODES = ("full", "anchor-only", "none")
ACTIVE, OCCLUDED = "active", "occluded"


class TrackerConfigError(ValueError):
    pass


@dataclass
class TrackerConfig:
    lambda_detect: float = 0.95
    lambda_track: float = 0.5
    t_occ: int = 4
    nms_iou: float = 0.1
    nms_center_dist: float = 1.0
    n_queries: int = 20
    emc_mode: str = "full"
    suppress_near_occluded: bool = True

    def validate(self) -> "TrackerConfig":
        if not 0 < self.lambda_track <= self.lambda_detect < 1:
            raise TrackerConfigError("thresholds must satisfy 0 < lambda_track <= lambda_detect < 1")
        if self.t_occ < 0 or self.n_queries < 0:
            raise TrackerConfigError("t_occ and n_queries must be non-negative")
        if self.emc_mode not in EMC_MODES:
            raise TrackerConfigError(f"emc_mode must be one of {EMC_MODES}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrackerConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise TrackerConfigError(f"unknown tracker config keys: {sorted(unknown)}")
        return cls(**obj).validate()


@dataclass
class Track:
    track_id: int
    latent: np.ndarray
    anchor: np.ndarray
    box: BoxEstimate
    status: str = ACTIVE
    miss_count: int = 0
    age: int = 0


@dataclass
class TrackRecord:
    track_id: int
    box: BoxEstimate
    score: float

    def to_json(self) -> dict:
        b = self.box
        return {"id": int(self.track_id), "c": b.location.tolist(), "s": b.size.tolist(),
                "yaw": float(b.heading), "v": b.velocity.tolist(), "cls": int(b.cls),
                "score": float(self.score)}


@dataclass
class TrackerOutput:
    frame_index: int
    timestamp: float
    tracks: list[TrackRecord]
    births: int = 0
    deaths: int = 0
    occlusions: int = 0
    # filled only when the tracker records attention: track id -> per-layer
    # cross-attention weights over memory cells, plus the (row, col) of each cell
    attention: dict[int, list[np.ndarray]] | None = None
    cells: np.ndarray | None = None

    def to_json(self) -> dict:
        return {"t": float(self.timestamp), "tracks": [r.to_json() for r in self.tracks]}


@dataclass
class TrackerState:
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    transitions: list[tuple[int, str, str]] = field(default_factory=list)  # (id, from, to)

    def live_ids(self) -> list[int]:
        return [t.track_id for t in self.tracks]


# ---------------------------------------------------------------- NMS


def _bev_extent(box: BoxEstimate) -> np.ndarray:
    """Axis-aligned BEV rectangle (xmin, ymin, xmax, ymax) of the rotated footprint."""
    c, s = abs(np.cos(box.heading)), abs(np.sin(box.heading))
    w, l = abs(box.size[0]), abs(box.size[1])
    hx, hy = (l * c + w * s) / 2, (l * s + w * c) / 2
    x, y = box.location[0], box.location[1]
    return np.array([x - hx, y - hy, x + hx, y + hy])


def bev_overlap(a: BoxEstimate, b: BoxEstimate) -> float:
    ea, eb = _bev_extent(a), _bev_extent(b)
    iw = max(0.0, min(ea[2], eb[2]) - max(ea[0], eb[0]))
    ih = max(0.0, min(ea[3], eb[3]) - max(ea[1], eb[1]))
    inter = iw * ih
    union = (ea[2] - ea[0]) * (ea[3] - ea[1]) + (eb[2] - eb[0]) * (eb[3] - eb[1]) - inter
    return inter / union if union > 0 else 0.0


def boxes_conflict(a: BoxEstimate, b: BoxEstimate, iou: float, center_dist: float) -> bool:
    if np.linalg.norm(a.location[:2] - b.location[:2]) < center_dist:
        return True
    return bev_overlap(a, b) > iou


def nms(candidates: Sequence[tuple[str, BoxEstimate]], iou: float = 0.1,
        center_dist: float = 1.0) -> list[int]:
    """Indices of kept candidates. Track-origin boxes beat object-origin ones.

    Candidates are visited track-origin first, then by confidence descending,
    then by track id (object candidates last) and input index.
    """
    def key(i):
        origin, box = candidates[i]
        tid = box.track_id if box.track_id is not None else np.iinfo(np.int64).max
        return (origin != TRACK_QUERY, -box.confidence, tid, i)

    kept: list[int] = []
    for i in sorted(range(len(candidates)), key=key):
        if all(not boxes_conflict(candidates[i][1], candidates[j][1], iou, center_dist) for j in kept):
            kept.append(i)
    return sorted(kept)


# ---------------------------------------------------------------- runtime


def _moved_box(box: BoxEstimate, p: PoseChange) -> BoxEstimate:
    g = transform_box(GtBox(-1, box.location, box.size, box.heading, box.velocity, box.cls), p)
    return BoxEstimate(g.center, np.zeros(3), box.size.copy(), g.heading, g.velocity, box.class_probs.copy(),
                       box.origin, box.track_id)


def compensate(tracks: list[Track], p: PoseChange, ep: EmcParams | None, mode: str) -> None:
    """Move every live track into the frame reached by ``p`` (in place)."""
    if not tracks:
        return
    if mode == "full":
        if ep is None:
            raise ContractError("emc_mode 'full' needs EMC parameters")
        lat = emc_features(Tensor(np.stack([t.latent for t in tracks])), p, ep).data
        for t, y in zip(tracks, lat):
            t.latent = y
            t.anchor = p.apply(t.box.location[None])[0]
    elif mode == "anchor-only":
        for t in tracks:
            t.anchor = p.apply(t.anchor[None])[0]
    elif mode == "none":
        return
    else:
        raise TrackerConfigError(f"unknown emc mode {mode!r}")
    for t in tracks:
        t.box = _moved_box(t.box, p)


class Tracker:
    """Frame-by-frame tracker over frozen detector and EMC parameters."""

    def __init__(self, dp: DetectorParams, ep: EmcParams | None, cfg: TrackerConfig | None = None,
                 seed: int = 0, record_attention: bool = False):
        self.dp, self.ep = dp, ep
        self.record_attention = record_attention
        self.cfg = (cfg or TrackerConfig()).validate()
        if ep is not None and ep.d_model != dp.cfg.d_model:
            raise ContractError("detector and EMC widths differ")
        if self.cfg.emc_mode == "full" and ep is None:
            raise ContractError("emc_mode 'full' needs EMC parameters")
        self.seed = seed
        self.state = TrackerState()

    def _transition(self, t: Track, new: str) -> None:
        if new != t.status:
            self.state.transitions.append((t.track_id, t.status, new))
            t.status = new

    def init(self, points: np.ndarray, frame_index: int = 0, timestamp: float = 0.0) -> TrackerOutput:
        self.state = TrackerState()
        return self._process(points, None, frame_index, timestamp)

    def step(self, points: np.ndarray, p: PoseChange, frame_index: int, timestamp: float) -> TrackerOutput:
        return self._process(points, p, frame_index, timestamp)

    def _process(self, points, p, frame_index, timestamp) -> TrackerOutput:
        cfg, st = self.cfg, self.state
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if p is not None:
            compensate(st.tracks, p, self.ep, cfg.emc_mode)
        out = TrackerOutput(frame_index, timestamp, [])
        if len(points) == 0:
            self._age_without_observation(out)
            return out
        tracks = st.tracks
        tok = Tensor(np.stack([t.latent for t in tracks])) if tracks else None
        anc = np.stack([t.anchor for t in tracks]) if tracks else None
        try:
            res = forward(points, self.dp, frame_seed(self.seed, frame_index), tok, anc,
                          record_attention=self.record_attention and bool(tracks), n_queries=cfg.n_queries)
        except EmptyInputError:
            self._age_without_observation(out)
            return out
        origins = [TRACK_QUERY] * len(tracks) + [OBJECT_QUERY] * res.n_object
        ids = [t.track_id for t in tracks] + [None] * res.n_object
        boxes = boxes_from_raw(res.raw.data, res.anchors, origins, ids)
        tokens = res.decoded.tokens.data
        if self.record_attention and tracks:
            out.attention = {t.track_id: [m[i].copy() for m in res.decoded.cross_attention] for i, t in enumerate(tracks)}
            out.cells = res.memory.cells.copy()

        survivors, dead = [], []
        for i, t in enumerate(tracks):
            t.age += 1
            b = boxes[i]
            if b.confidence >= cfg.lambda_track:
                t.latent, t.box, t.miss_count = tokens[i].copy(), b, 0
                self._transition(t, ACTIVE)
                survivors.append(t)
            else:
                t.miss_count += 1
                if t.miss_count > cfg.t_occ:
                    dead.append(t)
                else:
                    if t.status == ACTIVE:
                        out.occlusions += 1
                    self._transition(t, OCCLUDED)
                    survivors.append(t)

        spawn = [j for j in range(len(tracks), len(boxes)) if boxes[j].confidence >= cfg.lambda_detect]
        cands: list[tuple[str, BoxEstimate]] = []
        owners: list[object] = []
        for t in survivors:
            if t.status == ACTIVE or cfg.suppress_near_occluded:
                cands.append((TRACK_QUERY, t.box))
                owners.append(t)
        for j in spawn:
            cands.append((OBJECT_QUERY, boxes[j]))
            owners.append(j)
        kept = set(nms(cands, cfg.nms_iou, cfg.nms_center_dist))
        for k, owner in enumerate(owners):
            if isinstance(owner, Track) and k not in kept:
                dead.append(owner)
        for t in dead:
            self._transition(t, "dead")
        out.deaths = len(dead)
        dead_ids = {t.track_id for t in dead}
        st.tracks = [t for t in survivors if t.track_id not in dead_ids]

        for k, owner in enumerate(owners):
            if isinstance(owner, Track) or k not in kept:
                continue
            b = boxes[owner]
            b.track_id, b.origin = st.next_id, TRACK_QUERY
            st.tracks.append(Track(st.next_id, tokens[owner].copy(), res.anchors[owner].copy(), b))
            st.transitions.append((st.next_id, "new", ACTIVE))
            st.next_id += 1
            out.births += 1

        out.tracks = [TrackRecord(t.track_id, t.box, t.box.confidence)
                      for t in sorted(st.tracks, key=lambda t: t.track_id) if t.status == ACTIVE]
        return out

    def _age_without_observation(self, out: TrackerOutput) -> None:
        keep = []
        for t in self.state.tracks:
            t.age += 1
            t.miss_count += 1
            if t.miss_count > self.cfg.t_occ:
                self._transition(t, "dead")
                out.deaths += 1
            else:
                if t.status == ACTIVE:
                    out.occlusions += 1
                self._transition(t, OCCLUDED)
                keep.append(t)
        self.state.tracks = keep


def drop_mask(n_frames: int, p: float, seed: int) -> np.ndarray:
    """Processed-frame mask; frame 0 is always processed."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("drop probability must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0xD0])
    mask = rng.random(n_frames) >= p
    if n_frames:
        mask[0] = True
    return mask


def run_sequence(scene: Scene, dp: DetectorParams, ep: EmcParams | None, cfg: TrackerConfig | None = None,
                 drop_prob: float = 0.0, seed: int = 0) -> list[TrackerOutput]:
    """Track one scene; withheld frames only contribute their pose changes."""
    tracker = Tracker(dp, ep, cfg, seed)
    mask = drop_mask(len(scene.frames), drop_prob, seed)
    outputs = []
    pending: PoseChange | None = None
    for k, frame in enumerate(scene.frames):
        if k > 0:
            step_p = scene.pose_change(k - 1, k)
            pending = step_p if pending is None else compose(pending, step_p)
        if not mask[k]:
            continue
        if k == 0:
            outputs.append(tracker.init(frame.points, 0, frame.timestamp))
        else:
            outputs.append(tracker.step(frame.points, pending, k, frame.timestamp))
        pending = None
    return outputs


def write_tracks(outputs: Sequence[TrackerOutput], path: str | Path) -> None:
    with open(path, "w") as fh:
        for o in outputs:
            fh.write(json.dumps(o.to_json(), sort_keys=True) + "\n")


def read_tracks(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
