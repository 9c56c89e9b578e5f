"""Rigid-body geometry shared by every module.

Quaternions are scalar-first ``(q0, q1, q2, q3)``. A :class:`PoseChange` maps
coordinates expressed in the previous ego frame into the current ego frame::

    x_curr = R(q) @ x_prev + t
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import wrap_angle

UNIT_TOL = 1e-9


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_canonical(q) -> np.ndarray:
    """Normalise and pick the hemisphere with a non-negative scalar part."""
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_mul(a, b) -> np.ndarray:
    a0, a1, a2, a3 = a
    b0, b1, b2, b3 = b
    return np.array([
        a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
        a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
        a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
        a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return quat_canonical(q)


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])


def yaw_of(r: np.ndarray) -> float:
    return math.atan2(r[1, 0], r[0, 0])


def _checked_unit(q, what: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > UNIT_TOL:
        warnings.warn(f"{what}: quaternion norm {n:.12f} is not 1, normalising", stacklevel=3)
        q = q / n
    return q


@dataclass(frozen=True)
class EgoPose:
    translation: np.ndarray
    rotation: np.ndarray

    @classmethod
    def planar(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "EgoPose":
        return cls(np.array([x, y, z], dtype=np.float64), quat_from_yaw(yaw))

    @property
    def yaw(self) -> float:
        return yaw_of(quat_to_matrix(self.rotation))

    def to_json(self) -> dict:
        return {"t": self.translation.tolist(), "q": self.rotation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "EgoPose":
        return cls(np.asarray(obj["t"], dtype=np.float64), np.asarray(obj["q"], dtype=np.float64))


@dataclass(frozen=True)
class PoseChange:
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def identity(cls) -> "PoseChange":
        return cls()

    @classmethod
    def from_matrix(cls, r: np.ndarray, t) -> "PoseChange":
        return cls(np.asarray(t, dtype=np.float64), matrix_to_quat(r))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def yaw(self) -> float:
        return yaw_of(self.rotation)

    def as_vector(self) -> np.ndarray:
        """The 7-vector ``(t1, t2, t3, q0, q1, q2, q3)``."""
        return np.concatenate([self.t, self.q])

    def homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.rotation
        h[:3, 3] = self.t
        return h

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.t

    def inverse(self) -> "PoseChange":
        rt = self.rotation.T
        return PoseChange(-rt @ self.t, quat_canonical(quat_conj(self.q)))

    def then(self, other: "PoseChange") -> "PoseChange":
        """Apply ``self`` first, then ``other``."""
        return compose(self, other)


def compose(first: PoseChange, second: PoseChange) -> PoseChange:
    r2 = second.rotation
    return PoseChange(r2 @ first.t + second.t, quat_canonical(quat_mul(second.q, first.q)))


def pose_change(prev: EgoPose, curr: EgoPose) -> PoseChange:
    """Rigid map from ``prev`` ego coordinates to ``curr`` ego coordinates."""
    qp = _checked_unit(prev.rotation, "pose_change(prev)")
    qc = _checked_unit(curr.rotation, "pose_change(curr)")
    rc = quat_to_matrix(qc)
    t = rc.T @ (np.asarray(prev.translation) - np.asarray(curr.translation))
    return PoseChange(t, quat_canonical(quat_mul(quat_conj(qc), qp)))


def ego_to_global(pose: EgoPose, points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ quat_to_matrix(pose.rotation).T + pose.translation


def global_to_ego(pose: EgoPose, points) -> np.ndarray:
    r = quat_to_matrix(pose.rotation)
    return (np.asarray(points, dtype=np.float64) - pose.translation) @ r


@dataclass(frozen=True)
class GtBox:
    track_id: int
    center: np.ndarray
    size: np.ndarray  # (w, l, h)
    heading: float
    velocity: np.ndarray  # (vx, vy)
    cls: int = 0
    visible: bool = True

    def to_json(self) -> dict:
        return {"id": int(self.track_id), "c": self.center.tolist(), "s": self.size.tolist(),
                "yaw": float(self.heading), "v": self.velocity.tolist(), "cls": int(self.cls),
                "visible": bool(self.visible)}

    @classmethod
    def from_json(cls, obj: dict) -> "GtBox":
        return cls(int(obj["id"]), np.asarray(obj["c"], dtype=np.float64),
                   np.asarray(obj["s"], dtype=np.float64), float(obj["yaw"]),
                   np.asarray(obj["v"], dtype=np.float64), int(obj.get("cls", 0)),
                   bool(obj.get("visible", True)))

    def params(self) -> np.ndarray:
        """(x, y, z, w, l, h, yaw, vx, vy)."""
        return np.concatenate([self.center, self.size, [self.heading], self.velocity])


def transform_box(box: GtBox, p: PoseChange) -> GtBox:
    """Express ``box`` in the frame reached by pose change ``p``."""
    r = p.rotation
    center = r @ box.center + p.t
    heading = float(wrap_angle(box.heading + yaw_of(r)))
    velocity = r[:2, :2] @ box.velocity
    return replace(box, center=center, heading=heading, velocity=velocity)


def box_corners_bev(center, size, heading) -> np.ndarray:
    """4×2 footprint corners, counter-clockwise."""
    w, l = size[0], size[1]
    c, s = math.cos(heading), math.sin(heading)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center)[:2]
