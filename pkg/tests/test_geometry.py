import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidartrack.detector import BoxEstimate
from lidartrack.emc import emc_make_targets
from lidartrack.geometry import (EgoPose, GtBox, PoseChange, compose, ego_to_global, global_to_ego,
                                 pose_change, quat_from_yaw, quat_to_matrix, transform_box)


def hmat(yaw, t):
    """4x4 homogeneous transform built independently of the package."""
    c, s = math.cos(yaw), math.sin(yaw)
    h = np.eye(4)
    h[:2, :2] = [[c, -s], [s, c]]
    h[:3, 3] = t
    return h


def box_oracle(h, center, heading, vel):
    """Transform a box by pushing its centre and a unit heading/velocity through ``h``."""
    c = (h @ np.r_[center, 1.0])[:3]
    d = h[:3, :3] @ np.array([math.cos(heading), math.sin(heading), 0.0])
    v = h[:3, :3] @ np.r_[vel, 0.0]
    return c, math.atan2(d[1], d[0]), v[:2]


def angle_diff(a, b):
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def make_box(center=(5.0, 1.0, 0.8), heading=0.3, vel=(1.0, -0.5)):
    return GtBox(3, np.array(center, float), np.array([1.9, 4.5, 1.6]), heading, np.array(vel, float))


def test_pose_change_identity_and_translation():
    a = EgoPose.planar(3.0, -2.0, 0.7)
    p = pose_change(a, a)
    np.testing.assert_allclose(p.t, 0.0, atol=1e-15)
    np.testing.assert_allclose(p.q, [1, 0, 0, 0], atol=1e-15)
    moved = pose_change(EgoPose.planar(0, 0, 0), EgoPose.planar(2, 0, 0))
    np.testing.assert_allclose(moved.apply([5.0, 0, 0]), [3.0, 0, 0], atol=1e-15)


def test_pose_change_yaw_matches_homogeneous_oracle():
    prev, curr = EgoPose.planar(0, 0, 0), EgoPose.planar(0, 0, math.pi / 2)
    p = pose_change(prev, curr)
    oracle = np.linalg.inv(hmat(math.pi / 2, [0, 0, 0])) @ hmat(0, [0, 0, 0])
    np.testing.assert_allclose(p.apply([1.0, 0, 0]), (oracle @ [1, 0, 0, 1])[:3], atol=1e-15)
    np.testing.assert_allclose(p.apply([1.0, 0, 0]), [0, -1, 0], atol=1e-15)


def test_pose_change_round_trips_through_global(rng):
    for _ in range(200):
        a = EgoPose.planar(*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi))
        b = EgoPose.planar(*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi))
        pts = rng.uniform(-20, 20, (5, 3))
        direct = pose_change(a, b).apply(pts)
        via = global_to_ego(b, ego_to_global(a, pts))
        np.testing.assert_allclose(direct, via, atol=1e-9)


def test_transform_box_trivial_cases():
    box = make_box()
    same = transform_box(box, PoseChange.identity())
    np.testing.assert_array_equal(same.center, box.center)
    assert same.heading == box.heading
    shifted = transform_box(box, PoseChange(np.array([1.0, -2.0, 0.5])))
    np.testing.assert_allclose(shifted.center, box.center + [1.0, -2.0, 0.5])
    assert shifted.heading == box.heading
    np.testing.assert_array_equal(shifted.velocity, box.velocity)
    np.testing.assert_array_equal(shifted.size, box.size)


def test_transform_box_quarter_turn():
    box = make_box(center=(1.0, 0.0, 0.0), heading=0.0, vel=(1.0, 0.0))
    out = transform_box(box, PoseChange(np.zeros(3), quat_from_yaw(math.pi / 2)))
    np.testing.assert_allclose(out.center, [0, 1, 0], atol=1e-15)
    assert out.heading == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(out.velocity, [0, 1], atol=1e-15)


def test_transform_box_matches_homogeneous_oracle_on_10k_poses():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10_000):
        yaw = rng.uniform(-math.pi, math.pi)
        t = rng.uniform(-30, 30, 3)
        box = make_box(rng.uniform(-40, 40, 3), rng.uniform(-math.pi, math.pi), rng.uniform(-10, 10, 2))
        out = transform_box(box, PoseChange(t, quat_from_yaw(yaw)))
        c, hd, v = box_oracle(hmat(yaw, t), box.center, box.heading, box.velocity)
        worst = max(worst, np.abs(out.center - c).max(), angle_diff(out.heading, hd), np.abs(out.velocity - v).max())
        assert -math.pi < out.heading <= math.pi
    assert worst < 1e-9


yaws = st.floats(-math.pi, math.pi)
coords = st.floats(-50, 50)


@settings(max_examples=200, deadline=None)
@given(yaws, coords, coords, yaws, coords, coords)
def test_composition_equals_sequential_application(y1, x1, v1, y2, x2, v2):
    a = PoseChange(np.array([x1, v1, 0.0]), quat_from_yaw(y1))
    b = PoseChange(np.array([x2, v2, 0.3]), quat_from_yaw(y2))
    box = make_box()
    two_step = transform_box(transform_box(box, a), b)
    one_step = transform_box(box, compose(a, b))
    np.testing.assert_allclose(one_step.center, two_step.center, atol=1e-9)
    np.testing.assert_allclose(one_step.velocity, two_step.velocity, atol=1e-9)
    assert angle_diff(one_step.heading, two_step.heading) < 1e-9
    np.testing.assert_allclose(compose(a, b).homogeneous(), b.homogeneous() @ a.homogeneous(), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(yaws, coords, coords)
def test_inverse_undoes_pose(yaw, x, y):
    p = PoseChange(np.array([x, y, 1.0]), quat_from_yaw(yaw))
    np.testing.assert_allclose(compose(p, p.inverse()).homogeneous(), np.eye(4), atol=1e-9)


def test_scene_pose_changes_compose_across_skips():
    poses = [EgoPose.planar(i * 1.5, 0.2 * i * i, 0.1 * i) for i in range(4)]
    direct = pose_change(poses[0], poses[3])
    chained = compose(compose(pose_change(poses[0], poses[1]), pose_change(poses[1], poses[2])),
                      pose_change(poses[2], poses[3]))
    np.testing.assert_allclose(direct.homogeneous(), chained.homogeneous(), atol=1e-12)


def test_non_unit_quaternion_warns_and_normalises():
    bad = EgoPose(np.zeros(3), np.array([2.0, 0, 0, 0]))
    with pytest.warns(UserWarning):
        p = pose_change(bad, EgoPose.planar(0, 0, 0))
    np.testing.assert_allclose(p.q, [1, 0, 0, 0])


def det_box(loc=(4.0, -1.0, 0.7), heading=0.4, vel=(1.0, 2.0)):
    return BoxEstimate(np.array(loc, float) - 0.5, np.full(3, 0.5), np.array([1.8, 4.2, 1.5]), heading,
                       np.array(vel, float), np.array([0.9, 0.1]))


def test_emc_targets_identity_zeroes_offsets():
    d = det_box()
    tgt = emc_make_targets(d, PoseChange.identity())
    np.testing.assert_array_equal(tgt.anchor, d.location)
    np.testing.assert_array_equal(tgt.params[:3], 0.0)
    np.testing.assert_array_equal(tgt.params[3:6], [1.8, 4.2, 1.5])
    assert tgt.params[6] == 0.4
    np.testing.assert_array_equal(tgt.params[7:9], [1.0, 2.0])
    assert tgt.cls == d.cls


def test_emc_targets_translation_and_rotation():
    d = det_box()
    tr = emc_make_targets(d, PoseChange(np.array([2.0, 0.0, 0.0])))
    np.testing.assert_allclose(tr.anchor, d.location + [2, 0, 0])
    np.testing.assert_array_equal(tr.params[:3], 0.0)
    assert tr.params[6] == 0.4
    np.testing.assert_array_equal(tr.params[7:9], [1.0, 2.0])
    rot = emc_make_targets(d, PoseChange(np.zeros(3), quat_from_yaw(math.pi / 2)))
    c, hd, v = box_oracle(hmat(math.pi / 2, [0, 0, 0]), d.location, 0.4, np.array([1.0, 2.0]))
    np.testing.assert_allclose(rot.anchor, c, atol=1e-12)
    np.testing.assert_array_equal(rot.params[:3], 0.0)
    assert angle_diff(rot.params[6], hd) < 1e-12
    np.testing.assert_allclose(rot.params[7:9], v, atol=1e-12)


def test_quat_matrix_is_rotation(rng):
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        r = quat_to_matrix(q)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)
