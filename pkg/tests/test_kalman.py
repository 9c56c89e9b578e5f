import math

import numpy as np
import pytest

from lidartrack.detector import BoxEstimate
from lidartrack.geometry import EgoPose
from lidartrack.kalman import (CHI2_95_4DOF, H, KalmanConfigError, KalmanTrack, KalmanTracker, ProbMotConfig,
                               associate, mahalanobis, predict, run_sequence, transition, update)
from lidartrack.metrics import align_outputs, clearmot
from lidartrack.scene import SceneConfig, generate_scene

CFG = ProbMotConfig()


def track(mean, cov=None, tid=0):
    cov = np.eye(6) if cov is None else cov
    return KalmanTrack(tid, np.asarray(mean, float), np.asarray(cov, float), np.ones(3))


def random_spd(rng, n=6):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def test_predict_kinematics_and_closed_form():
    t = predict(track([0, 0, 0, 0, 1, 0]), 0.5, CFG)
    assert t.mean[0] == pytest.approx(0.5)
    cfg = ProbMotConfig(q_diag=(1e-300,) * 6)
    p0 = np.diag([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    t = predict(track(np.zeros(6), p0), 0.5, cfg)
    np.testing.assert_array_equal(t.mean, 0.0)
    assert t.cov[0, 0] == pytest.approx(1.0 + 5.0 * 0.25)
    assert t.cov[1, 1] == pytest.approx(2.0 + 6.0 * 0.25)
    assert t.cov[2, 2] == 3.0
    with pytest.raises(ValueError):
        predict(track(np.zeros(6)), 0.0, CFG)


def test_predict_matches_matrix_oracle(rng):
    for _ in range(100):
        mean, cov, dt = rng.normal(size=6) * 0.5, random_spd(rng), rng.uniform(0.1, 2.0)
        mean[3] = rng.uniform(-1, 1)
        t = predict(track(mean.copy(), cov.copy()), dt, CFG)
        f = np.array([[1, 0, 0, 0, dt, 0], [0, 1, 0, 0, 0, dt], [0, 0, 1, 0, 0, 0],
                      [0, 0, 0, 1, 0, 0], [0, 0, 0, 0, 1, 0], [0, 0, 0, 0, 0, 1]])
        np.testing.assert_allclose(t.mean, f @ mean, atol=1e-9)
        np.testing.assert_allclose(t.cov, f @ cov @ f.T + np.diag(CFG.q_diag) * dt, atol=1e-9)


def test_mahalanobis_cases(rng):
    t = track([1, 2, 3, 0.5, 0, 0])
    assert mahalanobis(t, np.array([1, 2, 3, 0.5]), CFG) == 0.0
    cfg = ProbMotConfig(r_diag=(0.5,) * 4)
    unit = track(np.zeros(6), np.diag([0.5] * 4 + [1.0] * 2))
    assert mahalanobis(unit, np.array([3.0, 4.0, 0, 0]), cfg) == pytest.approx(5.0)
    for _ in range(50):
        cov = random_spd(rng)
        mean = rng.normal(size=6)
        mean[3] = 0.1
        z = mean[:4] + rng.normal(size=4)
        z[3] = 0.2
        s = H @ cov @ H.T + CFG.R
        nu = z - H @ mean
        assert mahalanobis(track(mean, cov), z, CFG) == pytest.approx(math.sqrt(nu @ np.linalg.inv(s) @ nu), abs=1e-9)


def test_update_cases(rng):
    tight = ProbMotConfig(r_diag=(1e-12,) * 4)
    t = update(track(np.zeros(6), np.eye(6) * 4), np.array([1.0, -2.0, 0.5, 0.3]), [2, 4, 1.5], tight)
    np.testing.assert_allclose(t.mean[:4], [1.0, -2.0, 0.5, 0.3], atol=1e-6)
    np.testing.assert_array_equal(t.size, [2, 4, 1.5])
    start = track([1, 1, 1, 0.2, 0, 0], np.eye(6) * 2)
    before = start.cov.trace()
    t = update(start, np.array([1, 1, 1, 0.2]), [1, 1, 1], CFG)
    np.testing.assert_allclose(t.mean, [1, 1, 1, 0.2, 0, 0], atol=1e-15)
    assert t.cov.trace() < before


def test_update_matches_gain_formula(rng):
    for _ in range(100):
        cov = random_spd(rng)
        mean = rng.normal(size=6) * 0.3
        z = mean[:4] + rng.normal(size=4) * 0.3
        t = update(track(mean.copy(), cov.copy()), z, [1, 1, 1], CFG)
        s = H @ cov @ H.T + CFG.R
        k = cov @ H.T @ np.linalg.inv(s)
        np.testing.assert_allclose(t.mean, mean + k @ (z - H @ mean), atol=1e-9)
        np.testing.assert_allclose(t.cov, (np.eye(6) - k @ H) @ cov, atol=1e-9)


def test_covariance_stays_spd_over_1000_steps():
    rng = np.random.default_rng(5)
    for run in range(5):
        t = track(np.zeros(6), np.diag([0.09, 0.09, 0.09, 0.01, 25, 25]))
        for _ in range(1000):
            predict(t, rng.uniform(0.05, 2.0), CFG)
            if rng.random() < 0.7:
                update(t, H @ t.mean + rng.normal(size=4), [1, 1, 1], CFG)
            np.testing.assert_array_equal(t.cov, t.cov.T)
            assert np.linalg.eigvalsh(t.cov).min() > 0


def test_associate_greedy_hand_trace():
    cfg = ProbMotConfig(r_diag=(0.5,) * 4)
    cov = np.diag([0.5] * 4 + [1.0] * 2)
    a, b = track(np.zeros(6), cov, 0), track([3, 0, 0, 0, 0, 0], cov, 1)
    assert associate([], [np.zeros(4)], cfg) == ([], [], [0])
    assert associate([a], [np.array([1.0, 0, 0, 0])], cfg)[0] == [(0, 0)]
    # A-d0 1.0, B-d1 1.2, A-d1 1.8, B-d0 2.0: greedy takes 1.0 then 1.2
    m, _, _ = associate([a, b], [np.array([1.0, 0, 0, 0]), np.array([1.8, 0, 0, 0])], cfg)
    assert m == [(0, 0), (1, 1)]
    # A-d0 1.4 is taken first, which strands B (B-d1 = 4.6 lies outside the gate)
    m, un_t, un_m = associate([a, b], [np.array([1.4, 0, 0, 0]), np.array([-1.6, 0, 0, 0])], cfg)
    assert m == [(0, 0)] and un_t == [1] and un_m == [1]
    assert math.sqrt(CHI2_95_4DOF) < 4.6


def test_config_validation():
    with pytest.raises(KalmanConfigError):
        ProbMotConfig(q_diag=(1.0,) * 5).validate()
    with pytest.raises(KalmanConfigError):
        ProbMotConfig.from_dict({"nope": 1})
    cfg = ProbMotConfig(r_diag=(0.5, 0.5, 0.15, 1.0))
    assert ProbMotConfig.from_dict(cfg.to_dict()) == cfg


def perfect_detections(scene):
    out = []
    for fr in scene.frames:
        out.append([BoxEstimate(b.center.copy(), np.zeros(3), b.size.copy(), b.heading, b.velocity.copy(),
                                np.array([0.99, 0.01])) for b in fr.visible_boxes()])
    return out


def single_agent_scene(seed=3):
    cfg = SceneConfig(n_frames=20, n_agents_min=1, n_agents_max=1, point_noise=0.0, agent_turn_rate_max=0.0,
                      occlusion=False, ego_clearance=0.0)
    for s in range(seed, seed + 50):
        scene = generate_scene(cfg, s)
        if all(len(f.visible_boxes()) == 1 for f in scene.frames):
            return scene
    raise AssertionError("no fully visible single-agent scene")


@pytest.mark.parametrize("drop", [0.0, 0.5])
def test_noise_free_single_agent_gives_one_track(drop):
    scene = single_agent_scene()
    outs = run_sequence(scene, perfect_detections(scene), CFG, drop_prob=drop, seed=1)
    ids = {r.track_id for o in outs for r in o.tracks}
    assert ids == {0}
    cm = clearmot([align_outputs(scene, outs)])
    assert cm.ids == 0 and cm.fp == 0 and cm.fn == 0


def test_no_detections_no_tracks():
    scene = single_agent_scene()
    outs = run_sequence(scene, [[] for _ in scene.frames], CFG)
    assert all(not o.tracks for o in outs)


def test_track_dies_after_max_misses():
    kt = KalmanTracker(ProbMotConfig(max_misses=3))
    pose = EgoPose.planar(0, 0, 0)
    box = BoxEstimate(np.array([5.0, 0, 0]), np.zeros(3), np.ones(3), 0.0, np.zeros(2), np.array([0.9, 0.1]))
    kt.step([box], pose, 0.0)
    for k in range(1, 3):
        kt.step([], pose, 0.5 * k)
        assert len(kt.tracks) == 1
    kt.step([], pose, 1.5)
    assert kt.tracks == []


def test_transition_matrix():
    np.testing.assert_array_equal(transition(0.5)[[0, 1], [4, 5]], [0.5, 0.5])
