"""Glue between modules: scene folders, checkpoints and evaluation runs."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .detector import DetectorConfig, DetectorParams, detect, frame_seed
from .emc import EmcConfig, EmcParams
from .kalman import ProbMotConfig
from .kalman import run_sequence as kalman_sequence
from .metrics import EvalFrame, MetricsConfig, MetricsReport, align_outputs, detection_report, tracking_report
from .metrics import PredBox, match_frame
from .scene import Scene, read_scene, write_scene
from .tracker import TrackerConfig, TrackerOutput, TrackRecord, drop_mask, run_sequence


class DependencyError(RuntimeError):
    """A prerequisite artifact (scene folder, checkpoint) is missing or invalid."""


# ---------------------------------------------------------------- scenes


def write_scenes(scenes: Sequence[Scene], folder: str | Path) -> list[Path]:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in scenes:
        p = folder / f"{s.scene_id}.jsonl"
        write_scene(s, p)
        paths.append(p)
    return paths


def load_scenes(folder: str | Path) -> list[Scene]:
    folder = Path(folder)
    files = sorted(folder.glob("*.jsonl")) if folder.is_dir() else []
    if not files:
        raise DependencyError(f"no scene files in {folder} (run gen-data first)")
    return [read_scene(p) for p in files]


# ---------------------------------------------------------------- checkpoints


def save_detector(dp: DetectorParams, path: str | Path, extra: dict | None = None) -> str:
    meta = {"kind": "detector", "detector": dp.cfg.to_dict(), "trained_steps": dp.trained_steps, **(extra or {})}
    return ad.save_checkpoint(path, dp.arrays(), meta)


def save_emc(ep: EmcParams, path: str | Path, extra: dict | None = None) -> str:
    meta = {"kind": "emc", "emc": ep.cfg.to_dict(), "d_model": ep.d_model, "trained_steps": ep.trained_steps,
            **(extra or {})}
    return ad.save_checkpoint(path, ep.arrays(), meta)


def save_joint(dp: DetectorParams, ep: EmcParams, path: str | Path, extra: dict | None = None) -> str:
    meta = {"kind": "tracker", "detector": dp.cfg.to_dict(), "emc": ep.cfg.to_dict(), "d_model": ep.d_model,
            "trained_steps": dp.trained_steps, "emc_trained_steps": ep.trained_steps, **(extra or {})}
    return ad.save_checkpoint(path, {**dp.arrays(), **ep.arrays()}, meta)


def checkpoint_digest(path: str | Path) -> str:
    """Verified content hash of a checkpoint file."""
    arrays, _ = _load(path)
    return ad.params_digest(arrays)


def checkpoint_meta(path: str | Path) -> dict:
    return _load(path)[1]


def require_parents(path: str | Path, parents: dict[str, str | Path]) -> None:
    """Fail if ``path`` was derived from different versions of ``parents``.

    Checkpoints record the content hashes of the checkpoints they were
    trained from under ``meta["parents"]``.
    """
    recorded = checkpoint_meta(path).get("parents", {})
    for name, parent in parents.items():
        want = recorded.get(name)
        if want is None:
            raise DependencyError(f"{path} does not record which {name} checkpoint it was trained from")
        if want != checkpoint_digest(parent):
            raise DependencyError(f"{path} is stale: {parent} changed since it was trained (rerun the training step)")


def _load(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise DependencyError(f"missing checkpoint {path}")
    try:
        return ad.load_checkpoint(path)
    except ad.ContractError as exc:
        raise DependencyError(str(exc)) from exc


def load_detector(path: str | Path) -> DetectorParams:
    arrays, meta = _load(path)
    if "detector" not in meta:
        raise DependencyError(f"{path} holds no detector parameters")
    dp = DetectorParams.from_arrays(DetectorConfig.from_dict(meta["detector"]), arrays)
    dp.trained_steps = int(meta.get("trained_steps", 0))
    return dp


def load_emc(path: str | Path) -> EmcParams:
    arrays, meta = _load(path)
    if "emc" not in meta:
        raise DependencyError(f"{path} holds no EMC parameters")
    ep = EmcParams.from_arrays(EmcConfig.from_dict(meta["emc"]), int(meta["d_model"]), arrays)
    ep.trained_steps = int(meta.get("emc_trained_steps", meta.get("trained_steps", 0)))
    return ep


# ---------------------------------------------------------------- evaluation


def scene_detections(scene: Scene, dp: DetectorParams, seed: int) -> list[list]:
    """Standalone detector output (all object-query estimates) for every frame."""
    out = []
    for k, f in enumerate(scene.frames):
        out.append(detect(f.points, dp, frame_seed(seed, k)) if len(f.points) else [])
    return out


def eval_detection(scenes: Sequence[Scene], dp: DetectorParams, seed: int = 0,
                   metrics: MetricsConfig | None = None) -> MetricsReport:
    frames = []
    for s in scenes:
        for f, boxes in zip(s.frames, scene_detections(s, dp, seed)):
            preds = [PredBox(-1, b.location, b.size, b.heading, b.confidence) for b in boxes]
            frames.append(EvalFrame(preds, f.visible_boxes()))
    return detection_report(frames, metrics, {"frames": len(frames), "seed": seed})


def detection_recall(scenes: Sequence[Scene], dp: DetectorParams, threshold: float = 0.5, gate: float = 2.0,
                     seed: int = 0) -> float:
    """Share of visible boxes with a detection of confidence >= ``threshold`` within ``gate`` metres (BEV)."""
    hit = total = 0
    for s in scenes:
        for f, boxes in zip(s.frames, scene_detections(s, dp, seed)):
            gts = f.visible_boxes()
            preds = [PredBox(-1, b.location, b.size, b.heading, b.confidence) for b in boxes
                     if b.confidence >= threshold]
            total += len(gts)
            hit += len(match_frame(preds, gts, gate).pairs)
    return hit / total if total else 0.0


def map_scenes(fn: Callable, jobs: Sequence[tuple], workers: int = 1) -> list:
    """``[fn(*job) for job in jobs]``, optionally spread over worker processes.

    Every job carries its own seed, so the result does not depend on
    ``workers``.
    """
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def transmot_outputs(scenes: Sequence[Scene], dp: DetectorParams, ep: EmcParams | None,
                     cfg: TrackerConfig | None = None, drop_prob: float = 0.0,
                     seed: int = 0, workers: int = 1) -> list[list[TrackerOutput]]:
    jobs = [(s, dp, ep, cfg, drop_prob, seed + i) for i, s in enumerate(scenes)]
    return map_scenes(run_sequence, jobs, workers)


def _probmot_scene(scene: Scene, dp: DetectorParams, cfg: ProbMotConfig | None, drop_prob: float, seed: int,
                   dets: list | None) -> list[TrackerOutput]:
    if dets is None:
        dets = scene_detections(scene, dp, seed)
    return kalman_sequence(scene, dets, cfg, drop_prob, seed)


def probmot_outputs(scenes: Sequence[Scene], dp: DetectorParams, cfg: ProbMotConfig | None = None,
                    drop_prob: float = 0.0, seed: int = 0,
                    detections: Sequence[list[list]] | None = None, workers: int = 1) -> list[list[TrackerOutput]]:
    jobs = [(s, dp, cfg, drop_prob, seed + i, detections[i] if detections is not None else None)
            for i, s in enumerate(scenes)]
    return map_scenes(_probmot_scene, jobs, workers)


def tracking_metrics(scenes: Sequence[Scene], outputs: Sequence[Sequence[TrackerOutput]],
                     metrics: MetricsConfig | None = None, meta: dict | None = None) -> MetricsReport:
    seqs = [align_outputs(s, o) for s, o in zip(scenes, outputs)]
    return tracking_report(seqs, metrics, meta)


def eval_tracking(model: str, scenes: Sequence[Scene], dp: DetectorParams, ep: EmcParams | None,
                  tracker: TrackerConfig, baseline: ProbMotConfig, metrics: MetricsConfig | None = None,
                  drop_prob: float = 0.0, seed: int = 0, emc_mode: str | None = None, workers: int = 1,
                  return_outputs: bool = False):
    """Track every scene and score the result; optionally also return the raw outputs."""
    if model == "transmot":
        cfg = TrackerConfig(**{**tracker.to_dict(), **({"emc_mode": emc_mode} if emc_mode else {})}).validate()
        outs = transmot_outputs(scenes, dp, ep, cfg, drop_prob, seed, workers)
        meta = {"model": model, "emc_mode": cfg.emc_mode}
    elif model == "probmot":
        outs = probmot_outputs(scenes, dp, baseline, drop_prob, seed, workers=workers)
        meta = {"model": model, "emc_mode": "n/a"}
    else:
        raise ValueError(f"unknown model {model!r}")
    meta.update(drop_prob=drop_prob, seed=seed, scenes=len(scenes))
    report = tracking_metrics(scenes, outs, metrics, meta)
    return (report, outs) if return_outputs else report


def records_to_boxes(records: Sequence[TrackRecord]):
    return [r.box for r in records]


__all__ = [
    "DependencyError", "write_scenes", "load_scenes", "save_detector", "save_emc", "save_joint",
    "load_detector", "load_emc", "checkpoint_digest", "checkpoint_meta", "require_parents", "map_scenes", "scene_detections", "eval_detection", "detection_recall",
    "transmot_outputs", "probmot_outputs", "tracking_metrics", "eval_tracking", "drop_mask",
]
