import json

import pytest

from lidartrack.reference import BANNER, REFERENCE, as_dict


def test_table_is_read_only():
    with pytest.raises(TypeError):
        REFERENCE["detection_ap"] = {}
    with pytest.raises(TypeError):
        REFERENCE["tracking"]["transformer_tracker"]["amota"] = 1.0


def test_values_and_orderings():
    ref = as_dict()
    json.dumps(ref)
    assert ref["detection_ap"] == {"pillar_cnn_detector": 0.684, "transformer_detector": 0.727}
    assert ref["tracking"]["transformer_tracker"] == {"amota": 0.674, "amotp": 0.754, "mt": 2096, "fp": 9449,
                                                      "fn": 14071, "ids": 1403}
    abl = ref["emc_ablation_amota"]
    assert abl["full"] > abl["anchor-only"] > abl["none"]
    # the full-compensation row and the tracker row are the same model
    assert abl["full"] == ref["tracking"]["transformer_tracker"]["amota"]
    drop = ref["frame_drop_amota"]
    t_loss = drop["transformer_tracker"]["p=0.0"] - drop["transformer_tracker"]["p=0.7"]
    k_loss = drop["kalman_baseline"]["p=0.0"] - drop["kalman_baseline"]["p=0.7"]
    assert t_loss == pytest.approx(0.112) and k_loss == pytest.approx(0.276)
    assert "not reproducible at desk scale" in BANNER
