"""Published large-scale results, kept apart from anything computed here.

These numbers come from full-size training on a real driving dataset. They
are shown next to desk-scale results for orientation only and are never
merged into computed metrics.
"""

from __future__ import annotations

from types import MappingProxyType

BANNER = "published large-scale reference values; not reproducible at desk scale"

REFERENCE = MappingProxyType({
    "detection_ap": MappingProxyType({"pillar_cnn_detector": 0.684, "transformer_detector": 0.727}),
    "tracking": MappingProxyType({
        "transformer_tracker": MappingProxyType({"amota": 0.674, "amotp": 0.754, "mt": 2096, "fp": 9449,
                                                 "fn": 14071, "ids": 1403}),
        "kalman_baseline_thr_0.5": MappingProxyType({"amota": 0.645}),
    }),
    "emc_ablation_amota": MappingProxyType({"none": 0.564, "anchor-only": 0.657, "full": 0.674}),
    "frame_drop_amota": MappingProxyType({
        "transformer_tracker": MappingProxyType({"p=0.0": 0.674, "p=0.7": 0.562}),
        "kalman_baseline": MappingProxyType({"p=0.0": 0.650, "p=0.7": 0.374}),
    }),
})


def as_dict(obj=REFERENCE):
    """Plain nested dict copy (for JSON reports)."""
    if isinstance(obj, MappingProxyType):
        return {k: as_dict(v) for k, v in obj.items()}
    return obj
