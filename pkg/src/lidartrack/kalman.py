"""Constant-velocity Kalman tracking-by-detection baseline.

Tracks live in the global frame with state ``(x, y, z, yaw, vx, vy)``; box
size is passed through from the last associated measurement. Association is
greedy over ascending Mahalanobis distance inside a chi-square gate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .autodiff import wrap_angle
from .detector import OBJECT_QUERY, BoxEstimate
from .geometry import EgoPose, quat_to_matrix
from .scene import Scene
from .tracker import TrackerOutput, TrackRecord, drop_mask, nms

STATE_DIM, MEAS_DIM = 6, 4
H = np.hstack([np.eye(MEAS_DIM), np.zeros((MEAS_DIM, 2))])
CHI2_95_4DOF = 9.487729036781154


class KalmanConfigError(ValueError):
    pass


@dataclass
class ProbMotConfig:
    q_diag: tuple[float, ...] = (0.01, 0.01, 0.01, 0.01, 0.01, 0.01)  # per second
    r_diag: tuple[float, ...] = (0.09, 0.09, 0.09, 0.01)
    init_velocity_var: float = 25.0
    gate: float = CHI2_95_4DOF  # on the squared distance
    thr: float = 0.5
    birth_hits: int = 1
    max_misses: int = 3
    # suppress duplicate input boxes before association (same rule as the transformer tracker)
    input_nms: bool = True
    nms_iou: float = 0.1
    nms_center_dist: float = 1.0

    def __post_init__(self):
        self.q_diag = tuple(float(v) for v in self.q_diag)
        self.r_diag = tuple(float(v) for v in self.r_diag)

    def validate(self) -> "ProbMotConfig":
        if len(self.q_diag) != STATE_DIM or len(self.r_diag) != MEAS_DIM:
            raise KalmanConfigError("q_diag needs 6 entries and r_diag 4")
        if min(self.q_diag) <= 0 or min(self.r_diag) <= 0 or self.init_velocity_var <= 0:
            raise KalmanConfigError("noise diagonals must be > 0")
        if self.birth_hits < 1 or self.max_misses < 1:
            raise KalmanConfigError("birth_hits and max_misses must be >= 1")
        return self

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.r_diag)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "ProbMotConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise KalmanConfigError(f"unknown baseline config keys: {sorted(unknown)}")
        return cls(**obj).validate()


@dataclass
class KalmanTrack:
    track_id: int
    mean: np.ndarray
    cov: np.ndarray
    size: np.ndarray
    cls: int = 0
    score: float = 0.0
    miss_count: int = 0
    hit_count: int = 1
    updated: bool = True


def transition(dt: float) -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[0, 4] = f[1, 5] = dt
    return f


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def predict(track: KalmanTrack, dt: float, cfg: ProbMotConfig) -> KalmanTrack:
    if dt <= 0:
        raise ValueError("predict: dt must be > 0")
    f = transition(dt)
    track.mean = f @ track.mean
    track.mean[3] = float(wrap_angle(track.mean[3]))
    track.cov = _symmetrize(f @ track.cov @ f.T + cfg.Q * dt)
    return track


def innovation(track: KalmanTrack, z: np.ndarray) -> np.ndarray:
    nu = np.asarray(z, dtype=np.float64) - H @ track.mean
    nu[3] = float(wrap_angle(nu[3]))
    return nu


def mahalanobis(track: KalmanTrack, z: np.ndarray, cfg: ProbMotConfig) -> float:
    nu = innovation(track, z)
    s = H @ track.cov @ H.T + cfg.R
    try:
        return float(math.sqrt(max(0.0, nu @ np.linalg.solve(s, nu))))
    except np.linalg.LinAlgError:
        warnings.warn(f"track {track.track_id}: singular innovation covariance, rejecting", stacklevel=2)
        return math.inf


def update(track: KalmanTrack, z: np.ndarray, size, cfg: ProbMotConfig) -> KalmanTrack:
    nu = innovation(track, z)
    p = track.cov
    s = H @ p @ H.T + cfg.R
    k = np.linalg.solve(s, H @ p).T  # P H^T S^-1, S symmetric
    track.mean = track.mean + k @ nu
    track.mean[3] = float(wrap_angle(track.mean[3]))
    i_kh = np.eye(STATE_DIM) - k @ H
    track.cov = _symmetrize(i_kh @ p @ i_kh.T + k @ cfg.R @ k.T)  # Joseph form
    track.size = np.asarray(size, dtype=np.float64).copy()
    return track


def associate(tracks: Sequence[KalmanTrack], measurements: Sequence[np.ndarray],
              cfg: ProbMotConfig) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Greedy pairs (track, measurement) by ascending distance within the gate."""
    gate = math.sqrt(cfg.gate)
    pairs = []
    for i, t in enumerate(tracks):
        for j, z in enumerate(measurements):
            d = mahalanobis(t, z, cfg)
            if d <= gate:
                pairs.append((d, i, j))
    pairs.sort()
    used_t, used_m, matches = set(), set(), []
    for _, i, j in pairs:
        if i in used_t or j in used_m:
            continue
        used_t.add(i)
        used_m.add(j)
        matches.append((i, j))
    un_t = [i for i in range(len(tracks)) if i not in used_t]
    un_m = [j for j in range(len(measurements)) if j not in used_m]
    return sorted(matches), un_t, un_m


@dataclass
class GlobalDetection:
    z: np.ndarray  # (x, y, z, yaw) global
    size: np.ndarray
    cls: int
    score: float


def to_global(box: BoxEstimate, pose: EgoPose) -> GlobalDetection:
    r = quat_to_matrix(pose.rotation)
    c = r @ box.location + pose.translation
    yaw = float(wrap_angle(box.heading + pose.yaw))
    return GlobalDetection(np.array([c[0], c[1], c[2], yaw]), box.size.copy(), box.cls, box.confidence)


def to_ego(track: KalmanTrack, pose: EgoPose) -> BoxEstimate:
    r = quat_to_matrix(pose.rotation)
    c = r.T @ (track.mean[:3] - pose.translation)
    yaw = float(wrap_angle(track.mean[3] - pose.yaw))
    v = r.T[:2, :2] @ track.mean[4:6]
    probs = np.zeros(track.cls + 2)
    probs[track.cls], probs[-1] = track.score, 1.0 - track.score
    return BoxEstimate(c, np.zeros(3), track.size.copy(), yaw, v, probs, "track", track.track_id)


@dataclass
class KalmanTracker:
    cfg: ProbMotConfig = field(default_factory=ProbMotConfig)
    tracks: list[KalmanTrack] = field(default_factory=list)
    next_id: int = 0
    last_time: float | None = None

    def _birth(self, det: GlobalDetection) -> None:
        cov = np.diag(list(self.cfg.r_diag) + [self.cfg.init_velocity_var] * 2)
        mean = np.r_[det.z, 0.0, 0.0]
        self.tracks.append(KalmanTrack(self.next_id, mean, cov, det.size, det.cls, det.score))
        self.next_id += 1

    def step(self, boxes: Sequence[BoxEstimate], pose: EgoPose, timestamp: float) -> list[KalmanTrack]:
        """Predict, associate, update and manage births/deaths for one processed frame."""
        cfg = self.cfg
        kept = [b for b in boxes if b.confidence >= cfg.thr]
        if cfg.input_nms and len(kept) > 1:
            order = nms([(OBJECT_QUERY, b) for b in kept], cfg.nms_iou, cfg.nms_center_dist)
            kept = [kept[i] for i in sorted(order, key=lambda i: (-kept[i].confidence, i))]
        dets = [to_global(b, pose) for b in kept]
        if self.last_time is not None:
            dt = timestamp - self.last_time
            for t in self.tracks:
                predict(t, dt, cfg)
        self.last_time = timestamp
        for t in self.tracks:
            t.updated = False
        matches, un_t, un_m = associate(self.tracks, [d.z for d in dets], cfg)
        for i, j in matches:
            t = self.tracks[i]
            update(t, dets[j].z, dets[j].size, cfg)
            t.score, t.cls = dets[j].score, dets[j].cls
            t.hit_count += 1
            t.miss_count = 0
            t.updated = True
        for i in un_t:
            self.tracks[i].miss_count += 1
        self.tracks = [t for t in self.tracks if t.miss_count < cfg.max_misses]
        for j in un_m:
            self._birth(dets[j])
        return [t for t in self.tracks if t.updated and t.hit_count >= cfg.birth_hits]


def run_sequence(scene: Scene, detections: Sequence[Sequence[BoxEstimate]], cfg: ProbMotConfig | None = None,
                 drop_prob: float = 0.0, seed: int = 0) -> list[TrackerOutput]:
    """Track precomputed per-frame detections; withheld frames are skipped entirely."""
    kt = KalmanTracker((cfg or ProbMotConfig()).validate())
    mask = drop_mask(len(scene.frames), drop_prob, seed)
    outputs = []
    for k, frame in enumerate(scene.frames):
        if not mask[k]:
            continue
        emitted = kt.step(detections[k], frame.ego_pose, frame.timestamp)
        recs = [TrackRecord(t.track_id, to_ego(t, frame.ego_pose), t.score)
                for t in sorted(emitted, key=lambda t: t.track_id)]
        outputs.append(TrackerOutput(k, frame.timestamp, recs))
    return outputs
