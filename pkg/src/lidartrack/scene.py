"""Synthetic lidar-like sequences with exact ground truth.

Agents and the ego vehicle move on constant-turn-rate paths in a global
frame. Each frame samples points on the sensor-facing sides of every agent
box plus uniform ground clutter, then removes points whose bird's-eye-view
ray from the sensor passes through another agent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import wrap_angle
from .geometry import EgoPose, GtBox, global_to_ego, pose_change, PoseChange, quat_to_matrix

SCENE_SCHEMA = "lidartrack.scene/1"


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_frames: int = 20
    dt: float = 0.5
    x_range: tuple[float, float] = (-16.0, 16.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    n_agents_min: int = 1
    n_agents_max: int = 3
    late_agent_prob: float = 0.0
    traffic_fraction: float = 0.5
    traffic_speed_jitter: float = 1.5
    agent_speed_max: float = 3.0
    agent_turn_rate_max: float = 0.15
    agent_width: tuple[float, float] = (1.7, 2.1)
    agent_length: tuple[float, float] = (3.9, 5.0)
    agent_height: tuple[float, float] = (1.4, 1.8)
    agent_min_separation: float = 6.0
    ego_speed: tuple[float, float] = (0.0, 5.0)
    ego_yaw_rate_max: float = 0.15
    clutter_points: int = 150
    clutter_height: float = 0.25
    points_per_agent: int = 60
    point_noise: float = 0.02
    min_visible_points: int = 5
    occlusion: bool = True
    ego_clearance: float = 3.0  # agents whose centre is closer to the sensor are not observed
    n_classes: int = 1

    def validate(self) -> "SceneConfig":
        if self.dt <= 0:
            raise SceneConfigError("frame period dt must be > 0")
        if self.n_frames < 1:
            raise SceneConfigError("n_frames must be >= 1")
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise SceneConfigError("field of view has zero extent")
        if self.n_agents_min < 0 or self.n_agents_max < self.n_agents_min:
            raise SceneConfigError("agent count range invalid")
        if not 0.0 <= self.point_noise <= 0.05:
            raise SceneConfigError("point_noise must lie in [0, 0.05]")
        for name in ("late_agent_prob", "traffic_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SceneConfigError(f"{name} must lie in [0, 1]")
        if self.n_classes < 1:
            raise SceneConfigError("n_classes must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "SceneConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(obj) - set(known)
        if unknown:
            raise SceneConfigError(f"unknown scene config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**kw).validate()


@dataclass
class Frame:
    timestamp: float
    points: np.ndarray
    ego_pose: EgoPose
    gt_boxes: list[GtBox]

    def visible_boxes(self) -> list[GtBox]:
        return [b for b in self.gt_boxes if b.visible]


@dataclass
class Scene:
    scene_id: str
    frames: list[Frame]
    seed: int | list[int]
    config: SceneConfig = field(default_factory=SceneConfig)

    def pose_change(self, i: int, j: int) -> PoseChange:
        return pose_change(self.frames[i].ego_pose, self.frames[j].ego_pose)


@dataclass
class _Path:
    """Constant-turn-rate motion in the global plane."""

    x0: float
    y0: float
    yaw0: float
    speed: float
    yaw_rate: float

    def at(self, t: float) -> tuple[float, float, float]:
        yaw = self.yaw0 + self.yaw_rate * t
        if abs(self.yaw_rate) < 1e-9:
            x = self.x0 + self.speed * t * math.cos(self.yaw0)
            y = self.y0 + self.speed * t * math.sin(self.yaw0)
        else:
            r = self.speed / self.yaw_rate
            x = self.x0 + r * (math.sin(yaw) - math.sin(self.yaw0))
            y = self.y0 - r * (math.cos(yaw) - math.cos(self.yaw0))
        return x, y, yaw


@dataclass
class _Agent:
    track_id: int
    path: _Path
    size: np.ndarray
    appear: int
    cls: int


def _segment_hits_box(p1: np.ndarray, center, size, heading) -> np.ndarray:
    """For BEV segments from the origin to each ``p1`` row: does it cross the box?"""
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, s], [-s, c]])
    o = rot @ (-np.asarray(center[:2]))
    e = (p1[:, :2] - center[:2]) @ rot.T
    d = e - o
    half = np.array([size[1] / 2, size[0] / 2])
    t_in = np.zeros(len(p1))
    t_out = np.ones(len(p1))
    for ax in range(2):
        da = d[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[ax] - o[ax]) / da
            t2 = (half[ax] - o[ax]) / da
        parallel = np.abs(da) < 1e-12
        lo = np.where(parallel, np.where(np.abs(o[ax]) <= half[ax], -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(np.abs(o[ax]) <= half[ax], np.inf, -np.inf), np.maximum(t1, t2))
        t_in = np.maximum(t_in, lo)
        t_out = np.minimum(t_out, hi)
    return (t_in < t_out) & (t_in < 1.0 - 1e-9)


def _sample_agent_points(rng, center, size, heading, n, noise) -> np.ndarray:
    """Points on the vertical box sides that face the sensor at the origin."""
    w, l, h = size
    c, s = math.cos(heading), math.sin(heading)
    fwd = np.array([c, s])
    left = np.array([-s, c])
    faces = [(fwd, l / 2, left, w), (-fwd, l / 2, left, w), (left, w / 2, fwd, l), (-left, w / 2, fwd, l)]
    vis = []
    for normal, offset, along, extent in faces:
        fc = np.asarray(center[:2]) + normal * offset
        if normal @ fc < 0:
            vis.append((normal, fc, along, extent))
    if not vis:  # sensor inside the footprint
        return np.zeros((0, 3))
    areas = np.array([f[3] for f in vis])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    z0 = center[2] - h / 2
    for (normal, fc, along, extent), k in zip(vis, counts):
        if k == 0:
            continue
        u = rng.uniform(-extent / 2, extent / 2, size=k)
        z = rng.uniform(z0, z0 + h, size=k)
        jitter = rng.uniform(-noise, noise, size=k)
        xy = fc + u[:, None] * along + jitter[:, None] * normal
        out.append(np.column_stack([xy, z]))
    return np.concatenate(out) if out else np.zeros((0, 3))


def _in_fov(cfg: SceneConfig, xy) -> bool:
    if math.hypot(xy[0], xy[1]) < cfg.ego_clearance:
        return False
    return cfg.x_range[0] <= xy[0] <= cfg.x_range[1] and cfg.y_range[0] <= xy[1] <= cfg.y_range[1]


def generate_scene(config: SceneConfig, seed, scene_id: str | None = None) -> Scene:
    """Deterministic synthetic sequence for ``(config, seed)``."""
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    ego = _Path(0.0, 0.0, rng.uniform(-math.pi, math.pi), rng.uniform(*cfg.ego_speed),
                rng.uniform(-cfg.ego_yaw_rate_max, cfg.ego_yaw_rate_max))

    n_agents = int(rng.integers(cfg.n_agents_min, cfg.n_agents_max + 1))
    agents: list[_Agent] = []
    margin = 2.5
    for tid in range(n_agents):
        appear = 0
        if cfg.n_frames > 1 and rng.random() < cfg.late_agent_prob:
            appear = int(rng.integers(1, cfg.n_frames))
        t0 = appear * cfg.dt
        ex, ey, eyaw = ego.at(t0)
        ego_pose = EgoPose.planar(ex, ey, eyaw)
        others = [a for a in agents]
        for _ in range(200):
            local = np.array([rng.uniform(cfg.x_range[0] + margin, cfg.x_range[1] - margin),
                              rng.uniform(cfg.y_range[0] + margin, cfg.y_range[1] - margin), 0.0])
            if np.hypot(*local[:2]) < 4.0:
                continue
            g = quat_to_matrix(ego_pose.rotation) @ local + ego_pose.translation
            ok = True
            for a in others:
                ax, ay, _ = a.path.at(t0 - a.appear * cfg.dt) if t0 >= a.appear * cfg.dt else (a.path.x0, a.path.y0, 0)
                if math.hypot(g[0] - ax, g[1] - ay) < cfg.agent_min_separation:
                    ok = False
                    break
            if ok:
                break
        if rng.random() < cfg.traffic_fraction:
            yaw0 = eyaw + rng.normal(0.0, 0.1)
            speed = max(0.0, ego.speed + rng.uniform(-cfg.traffic_speed_jitter, cfg.traffic_speed_jitter))
        else:
            yaw0 = rng.uniform(-math.pi, math.pi)
            speed = rng.uniform(0.0, cfg.agent_speed_max)
        turn = rng.uniform(-cfg.agent_turn_rate_max, cfg.agent_turn_rate_max)
        size = np.array([rng.uniform(*cfg.agent_width), rng.uniform(*cfg.agent_length),
                         rng.uniform(*cfg.agent_height)])
        cls = int(rng.integers(0, cfg.n_classes))
        agents.append(_Agent(tid, _Path(g[0], g[1], yaw0, speed, turn), size, appear, cls))

    frames = []
    for k in range(cfg.n_frames):
        t = k * cfg.dt
        ex, ey, eyaw = ego.at(t)
        pose = EgoPose.planar(ex, ey, eyaw)
        r_inv = quat_to_matrix(pose.rotation).T
        live = []
        for a in agents:
            if k < a.appear:
                continue
            ta = t - a.appear * cfg.dt
            gx, gy, gyaw = a.path.at(ta)
            center = global_to_ego(pose, [gx, gy, a.size[2] / 2])
            heading = float(wrap_angle(gyaw - eyaw))
            gvel = a.path.speed * np.array([math.cos(gyaw), math.sin(gyaw)])
            vel = r_inv[:2, :2] @ gvel
            if _in_fov(cfg, center):
                live.append((a, center, heading, vel))

        agent_pts = []
        for a, center, heading, _ in live:
            agent_pts.append(_sample_agent_points(rng, center, a.size, heading,
                                                  cfg.points_per_agent, cfg.point_noise))
        clutter = np.column_stack([
            rng.uniform(cfg.x_range[0], cfg.x_range[1], size=cfg.clutter_points),
            rng.uniform(cfg.y_range[0], cfg.y_range[1], size=cfg.clutter_points),
            rng.uniform(0.0, cfg.clutter_height, size=cfg.clutter_points),
        ])
        keep = np.ones(len(clutter), dtype=bool)
        for a, center, heading, _ in live:
            local = (clutter[:, :2] - center[:2]) @ np.array(
                [[math.cos(heading), -math.sin(heading)], [math.sin(heading), math.cos(heading)]])
            keep &= ~((np.abs(local[:, 0]) <= a.size[1] / 2) & (np.abs(local[:, 1]) <= a.size[0] / 2))
        clutter = clutter[keep]

        boxes = []
        kept_pts = []
        for i, (a, center, heading, vel) in enumerate(live):
            pts = agent_pts[i]
            if cfg.occlusion and len(pts):
                blocked = np.zeros(len(pts), dtype=bool)
                for j, (b, cb, hb, _) in enumerate(live):
                    if j != i:
                        blocked |= _segment_hits_box(pts, cb, b.size, hb)
                pts = pts[~blocked]
            visible = len(pts) >= cfg.min_visible_points
            if visible:
                kept_pts.append(pts)
            boxes.append(GtBox(a.track_id, center, a.size.copy(), heading, vel, a.cls, visible))
        if cfg.occlusion and len(clutter):
            blocked = np.zeros(len(clutter), dtype=bool)
            for b, cb, hb, _ in live:
                blocked |= _segment_hits_box(clutter, cb, b.size, hb)
            clutter = clutter[~blocked]
        kept_pts.append(clutter)
        points = np.concatenate(kept_pts) if kept_pts else np.zeros((0, 3))
        points = points[rng.permutation(len(points))]
        frames.append(Frame(t, points, pose, boxes))

    sid = scene_id if scene_id is not None else f"scene-{seed}"
    return Scene(sid, frames, seed, cfg)


def scene_seed(base_seed: int, split: str, index: int) -> list[int]:
    split_code = sum(ord(c) * 31 ** i for i, c in enumerate(split)) % (2 ** 31)
    return [int(base_seed), split_code, int(index)]


def generate_scenes(config: SceneConfig, n: int, base_seed: int, split: str = "train") -> list[Scene]:
    return [generate_scene(config, scene_seed(base_seed, split, i), scene_id=f"{split}-{i:04d}")
            for i in range(n)]


def write_scene(scene: Scene, path: str | Path) -> None:
    lines = [json.dumps({"schema": SCENE_SCHEMA, "scene_id": scene.scene_id, "seed": scene.seed,
                         "config": scene.config.to_dict()}, sort_keys=True)]
    for fr in scene.frames:
        lines.append(json.dumps({"t": fr.timestamp, "points": fr.points.tolist(),
                                 "ego": fr.ego_pose.to_json(),
                                 "boxes": [b.to_json() for b in fr.gt_boxes]}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path: str | Path) -> Scene:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SCENE_SCHEMA:
            raise SceneConfigError(f"{path}: unknown scene schema {header.get('schema')!r}")
        frames = []
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            pts = np.asarray(obj["points"], dtype=np.float64).reshape(-1, 3)
            frames.append(Frame(float(obj["t"]), pts, EgoPose.from_json(obj["ego"]),
                                [GtBox.from_json(b) for b in obj["boxes"]]))
    return Scene(header["scene_id"], frames, header["seed"], SceneConfig.from_dict(header["config"]))
