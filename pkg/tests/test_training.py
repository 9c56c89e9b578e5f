import json
import math

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from lidartrack import autodiff as ad
from lidartrack.autodiff import ContractError
from lidartrack.detector import DetectorConfig, frame_seed, init_detector
from lidartrack.emc import (EmcConfig, EmcConfigError, EmcTrainConfig, collect_samples, emc_apply, emc_features, emc_loss,
                            eval_emc, init_emc, train_emc)
from lidartrack.geometry import PoseChange, quat_from_yaw
from lidartrack.matching import LossWeights
from lidartrack.scene import SceneConfig, generate_scene, generate_scenes
import lidartrack.training as tr
from lidartrack.training import (TrainConfig, TrainConfigError, detection_step_loss, train_detector,
                                 train_tracker, tracking_step_loss)

DET = dict(fourier_sigma=0.3, pe_temperature=30.0, grid_conv=True)


def one_agent_scene(n_frames=1, seed=5):
    return generate_scene(SceneConfig(n_frames=n_frames, n_agents_min=1, n_agents_max=1), seed)


def small_det(**kw):
    return init_detector(DetectorConfig(d_model=16, n_heads=2, ffn_dim=32, n_queries=8, **DET, **kw), seed=0)


def test_zero_epochs_leaves_init():
    dp = small_det()
    before = ad.params_digest(dp.arrays())
    train_detector([one_agent_scene()], dp, TrainConfig(epochs=0))
    assert ad.params_digest(dp.arrays()) == before
    with pytest.raises(TrainConfigError):
        train_detector([], dp, TrainConfig())


def test_single_frame_overfit_at_d64():
    scene = one_agent_scene()
    dp = init_detector(DetectorConfig(**DET), seed=0)
    cfg = TrainConfig(lr=3e-4)
    params = dp.trainable()
    opt = ad.Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    best = math.inf
    for _ in range(500):
        with ad.Tape() as tape:
            loss, parts = detection_step_loss(dp, scene, 0, 0, cfg)
        opt.step(tape.backward(loss, params))
        best = min(best, parts["total"])
    assert best < 0.1


def test_identical_seeds_identical_checkpoints(tmp_path):
    scenes = generate_scenes(SceneConfig(n_frames=2), 2, 0)
    digests = []
    for run in range(2):
        dp = small_det()
        train_detector(scenes, dp, TrainConfig(lr=1e-3, epochs=1, seed=4))
        path = tmp_path / f"{run}.json"
        ad.save_checkpoint(path, dp.arrays())
        digests.append(path.read_bytes())
    assert digests[0] == digests[1]


def test_on_epoch_callback_sees_every_epoch():
    seen = []
    train_detector([one_agent_scene()], small_det(), TrainConfig(lr=1e-3, epochs=3),
                   on_epoch=lambda e, dp: seen.append((e, dp.trained_steps)))
    assert seen == [(0, 1), (1, 2), (2, 3)]


def test_nan_loss_raises(monkeypatch):
    def broken(*a, **k):
        loss, parts = detection_step_loss(*a, **k)
        parts["total"] = float("nan")
        return loss, parts

    monkeypatch.setattr(tr, "detection_step_loss", broken)
    with pytest.raises(FloatingPointError):
        train_detector([one_agent_scene()], small_det(), TrainConfig(lr=1e-3))


def test_train_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(p_drop=1.5).validate()
    with pytest.raises(TrainConfigError):
        TrainConfig.from_dict({"weights": {"bogus": 1}})
    cfg = TrainConfig(lr=1e-4, weights=LossWeights(velocity=0.2))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def trained_small():
    """A detector overfitted on a few one-agent frames, enough for confident outputs."""
    scenes = [one_agent_scene(4, s) for s in (5, 6)]
    dp = small_det()
    train_detector(scenes, dp, TrainConfig(lr=1e-3, epochs=40, seed=0))
    return dp, scenes


def test_tracking_skip_zero_uses_adjacent_pairs(trained_small, tmp_path):
    dp, scenes = trained_small
    dp = dp.copy()
    ep = init_emc(dp.cfg.d_model)
    log = tmp_path / "t.jsonl"
    train_tracker(scenes, dp, ep, TrainConfig(lr=1e-4, n_skip=0, n_queries=8), steps=10, log_path=log)
    assert {json.loads(line)["skip"] for line in log.read_text().splitlines()} == {0}


def test_tracking_pair_without_frame1_points_is_detection(trained_small):
    dp, scenes = trained_small
    scene = one_agent_scene(2, 5)
    scene.frames[0].points = np.zeros((0, 3))
    cfg = TrainConfig(n_queries=8)
    loss, parts = tracking_step_loss(dp, init_emc(16), scene, 0, 1, 3, cfg, np.random.default_rng(0))
    ref = detection_step_loss(dp, scene, 1, frame_seed(3, 2), cfg)[1]
    assert parts["total"] == pytest.approx(ref["total"], abs=1e-12)


def test_tracker_training_loss_falls_between_epochs(tmp_path):
    scenes = generate_scenes(SceneConfig(n_frames=4, n_agents_max=1), 5, 0)
    dp = small_det()
    train_detector(scenes, dp, TrainConfig(lr=1e-3, epochs=2, seed=0))
    path = tmp_path / "log.jsonl"
    train_tracker(scenes, dp, init_emc(16), TrainConfig(lr=1e-3, epochs=2, n_queries=8, seed=1), log_path=path)
    log = [json.loads(line) for line in path.read_text().splitlines()]
    e0 = np.mean([r["total"] for r in log if r["epoch"] == 0])
    e1 = np.mean([r["total"] for r in log if r["epoch"] == 1])
    assert e1 < e0


def test_tracker_training_requires_emc():
    with pytest.raises(ContractError):
        train_tracker([one_agent_scene(3)], small_det(), None, TrainConfig())


# ---------------------------------------------------------------- EMC


def test_emc_shapes_and_anchor_identity(rng):
    ep = init_emc(16)
    y = rng.normal(size=(3, 16))
    anchors = rng.normal(size=(3, 3))
    out, rho = emc_apply(y, anchors, PoseChange.identity(), ep)
    assert out.shape == (3, 16)
    np.testing.assert_array_equal(rho, anchors)
    p = PoseChange(np.array([1.0, 2.0, 0.0]), quat_from_yaw(0.4))
    _, rho = emc_apply(y[0], anchors[0], p, ep)
    np.testing.assert_allclose(rho, p.rotation @ anchors[0] + p.t, atol=1e-12)
    with pytest.raises(EmcConfigError):
        EmcConfig(k=16).width(16)
    with pytest.raises(ad.DimensionError):
        emc_apply(rng.normal(size=(2, 8)), anchors[:2], p, ep)


def test_emc_gradcheck(rng):
    ep = init_emc(8, EmcConfig(pose_hidden=6))
    y = rng.normal(size=(2, 8))
    p = PoseChange(np.array([1.0, -0.5, 0.0]), quat_from_yaw(0.3))
    w = rng.normal(size=(2, 8))

    def build():
        return ad.sum_all(ad.mul(emc_features(ad.Tensor(y), p, ep), ad.Tensor(w)))

    params = ep.trainable()
    with ad.Tape() as tape:
        loss = build()
    grads = tape.backward(loss, params)
    numeric = numeric_grad(lambda: float(build().data), [q.data for q in params])
    assert max(rel_err(g, n) for g, n in zip(grads, numeric)) < 1e-4


def test_emc_training_contract(trained_small):
    dp, scenes = trained_small
    before = ad.params_digest(dp.arrays())
    ep0 = train_emc(dp, scenes, EmcTrainConfig(epochs=0, lambda_detect=0.3))
    fresh = init_emc(dp.cfg.d_model, seed=0)
    assert ad.params_digest(ep0.arrays()) == ad.params_digest(fresh.arrays())
    with pytest.raises(ContractError):
        train_emc(small_det(), scenes, EmcTrainConfig(lambda_detect=0.3))
    assert ad.params_digest(dp.arrays()) == before


def test_emc_loss_decreases_on_fixed_batch(trained_small):
    dp, scenes = trained_small
    samples = collect_samples(dp, scenes, 2, 0.3)
    assert samples
    ep = init_emc(dp.cfg.d_model)
    params = ep.trainable()
    opt = ad.Adam(params, lr=EmcTrainConfig().lr)
    batch = samples[:4]
    first = last = None
    for step in range(50):
        total = 0.0
        grads = None
        for s in batch:
            with ad.Tape() as tape:
                loss, parts = emc_loss(s, ep, dp, LossWeights(), 0.1)
            g = tape.backward(loss, params)
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
            total += parts["total"]
        opt.step(grads)
        first = total if first is None else first
        last = total
    assert last < first


def test_eval_emc_bypass_is_exact_and_buckets(trained_small):
    dp, scenes = trained_small
    rep = eval_emc(None, dp, scenes, lambda_detect=0.3, bypass=True)
    assert rep.overall.count > 0
    for r in rep.rows + [rep.overall]:
        assert r.location_rmse == r.size_rmse == r.heading_rmse == r.velocity_rmse == 0.0
    header = rep.to_csv().splitlines()[0]
    assert header.startswith("bucket_kind,bucket_center,location_rmse,size_rmse")
    ident = eval_emc(init_emc(16), dp, scenes, skips=(0,), lambda_detect=0.3)
    assert np.isfinite(ident.overall.size_rmse)
    with pytest.raises(ContractError):
        eval_emc(None, dp, scenes)
