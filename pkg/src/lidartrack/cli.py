"""Command-line entry point: ``lidartrack <verb> [--config PATH] [--seed N] [--out DIR] ...``.

A run directory collects everything a pipeline produces::

    config.json                resolved configuration used by gen-data
    data/train, data/val       scene files (one JSON Lines file per scene)
    detector.json              standalone detector checkpoint
    emc.json                   EMC module trained against the frozen detector
    tracker.json               jointly trained detector + EMC
    logs/*.jsonl               per-step training losses
    eval/                      metric reports, CSV tables, attention maps
    report.json, report.txt    consolidated summary

Exit codes: 0 success, 1 other failure, 2 config error, 3 missing or stale
prerequisite, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .autodiff import ContractError
from .config import ConfigError, ExperimentConfig, load_config
from .detector import init_detector
from .emc import EmcParams, EmcTrainConfig, eval_emc, train_emc, write_emc_report
from .reference import BANNER, as_dict
from .scene import generate_scenes
from .tracker import TrackerConfig, Tracker, write_tracks
from .training import TrainConfig, train_detector, train_tracker

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3, 4

EMC_MODES = ("full", "anchor-only", "none")
FRAMESKIP_PROBS = tuple(round(0.1 * i, 1) for i in range(8))


class Run:
    """Paths and settings shared by every verb."""

    def __init__(self, args: argparse.Namespace):
        self.cfg: ExperimentConfig = load_config(args.config)
        self.seed = self.cfg.seed if args.seed is None else args.seed
        self.out = Path(args.out)

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def ensure(self, *parts: str) -> Path:
        p = self.path(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def scenes(self, split: str):
        return pl.load_scenes(self.path("data", split))

    def train_cfg(self, section: str) -> TrainConfig:
        base = getattr(self.cfg, section)
        try:
            return TrainConfig.from_dict({**base.to_dict(), "seed": self.seed})
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from exc

    def detector(self):
        return pl.load_detector(self.path("detector.json"))

    def tracker_params(self):
        ckpt = self.path("tracker.json")
        pl.require_parents(ckpt, {"detector": self.path("detector.json"), "emc": self.path("emc.json")})
        return pl.load_detector(ckpt), pl.load_emc(ckpt)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------- verbs


def cmd_gen_data(run: Run, args) -> int:
    cfg = run.cfg
    seed = cfg.data.base_seed if args.seed is None else args.seed
    run.ensure()
    run.path("config.json").write_text(cfg.dumps() + "\n")
    for split, n in (("train", cfg.data.n_train), ("val", cfg.data.n_val)):
        folder = run.ensure("data", split)
        for old in folder.glob("*.jsonl"):
            old.unlink()
        scenes = generate_scenes(cfg.scene_for(split), n, seed, split)
        pl.write_scenes(scenes, folder)
        frames = sum(len(s.frames) for s in scenes)
        boxes = sum(len(f.visible_boxes()) for s in scenes for f in s.frames)
        points = sum(len(f.points) for s in scenes for f in s.frames)
        _say(f"{split}: {n} scenes, {frames} frames, {boxes} visible boxes, {points} points -> {folder}")
    return EXIT_OK


def cmd_train_detector(run: Run, args) -> int:
    scenes = run.scenes("train")
    tcfg = run.train_cfg("detector_training")
    dp = init_detector(run.cfg.detector, run.seed)
    run.ensure("logs")
    meta = {"seed": run.seed, "train": tcfg.to_dict()}

    def snapshot(epoch: int, params) -> None:
        # an interrupted run keeps the last finished epoch
        pl.save_detector(params, run.path("detector.json"), {**meta, "epoch": epoch + 1})

    train_detector(scenes, dp, tcfg, log_path=run.path("logs", "detector.jsonl"), on_epoch=snapshot)
    digest = pl.save_detector(dp, run.path("detector.json"), {**meta, "epoch": tcfg.epochs})
    _say(f"detector: {dp.trained_steps} steps, sha256 {digest[:12]} -> {run.path('detector.json')}")
    return EXIT_OK


def cmd_train_emc(run: Run, args) -> int:
    det_path = run.path("detector.json")
    dp = run.detector()
    scenes = run.scenes("train")
    try:
        ecfg = EmcTrainConfig.from_dict({**run.cfg.emc_training.to_dict(), "seed": run.seed})
    except ValueError as exc:
        raise ConfigError(f"emc_training: {exc}") from exc
    run.ensure("logs")
    try:
        ep = train_emc(dp, scenes, ecfg, emc_cfg=run.cfg.emc, log_path=run.path("logs", "emc.jsonl"))
    except ContractError as exc:
        raise pl.DependencyError(str(exc)) from exc
    digest = pl.save_emc(ep, run.path("emc.json"),
                         {"seed": run.seed, "parents": {"detector": pl.checkpoint_digest(det_path)}})
    _say(f"emc: {ep.trained_steps} steps, sha256 {digest[:12]} -> {run.path('emc.json')}")
    return EXIT_OK


def cmd_train_tracker(run: Run, args) -> int:
    det_path, emc_path = run.path("detector.json"), run.path("emc.json")
    dp = run.detector()
    ep = pl.load_emc(emc_path)
    pl.require_parents(emc_path, {"detector": det_path})
    scenes = run.scenes("train")
    tcfg = run.train_cfg("tracker_training")
    run.ensure("logs")
    train_tracker(scenes, dp, ep, tcfg, log_path=run.path("logs", "tracker.jsonl"))
    parents = {"detector": pl.checkpoint_digest(det_path), "emc": pl.checkpoint_digest(emc_path)}
    digest = pl.save_joint(dp, ep, run.path("tracker.json"),
                           {"seed": run.seed, "train": tcfg.to_dict(), "parents": parents})
    _say(f"tracker: {dp.trained_steps} detector steps in total, sha256 {digest[:12]} -> {run.path('tracker.json')}")
    return EXIT_OK


def cmd_eval_detect(run: Run, args) -> int:
    dp = run.tracker_params()[0] if args.checkpoint == "tracker" else run.detector()
    scenes = run.scenes("val")
    report = pl.eval_detection(scenes, dp, run.seed, run.cfg.metrics)
    report.meta["checkpoint"] = args.checkpoint
    report.write(run.ensure("eval") / f"detect-{args.checkpoint}.json")
    _say(f"AP {_fmt(report.ap)}  ATE {_fmt(report.ate)}  ASE {_fmt(report.ase)}  AOE {_fmt(report.aoe)}")
    return EXIT_OK


def track_name(model: str, emc_mode: str, drop_prob: float) -> str:
    mode = emc_mode if model == "transmot" else "na"
    return f"track-{model}-{mode}-p{drop_prob:.2f}"


def _track(run: Run, model: str, emc_mode: str, drop_prob: float, save_tracks: bool = False):
    dp, ep = run.tracker_params()
    scenes = run.scenes("val")
    cfg = run.cfg
    report, outs = pl.eval_tracking(model, scenes, dp, ep, cfg.tracker, cfg.baseline, cfg.metrics, drop_prob,
                                    run.seed, emc_mode, cfg.workers, return_outputs=True)
    name = track_name(model, emc_mode, drop_prob)
    report.write(run.ensure("eval") / f"{name}.json")
    if save_tracks:
        folder = run.ensure("eval", name)
        for s, o in zip(scenes, outs):
            write_tracks(o, folder / f"{s.scene_id}.jsonl")
    return report


def cmd_eval_track(run: Run, args) -> int:
    if not 0.0 <= args.drop_prob < 1.0:
        raise ConfigError("--drop-prob must lie in [0, 1)")
    report = _track(run, args.model, args.emc_mode, args.drop_prob, args.save_tracks)
    _say(f"{args.model} emc={report.meta['emc_mode']} p={args.drop_prob:.2f}: AMOTA {_fmt(report.amota)} "
         f"AMOTP {_fmt(report.amotp)} MT {report.mt} FP {report.fp} FN {report.fn} IDS {report.ids}")
    return EXIT_OK


def cmd_ablate_emc(run: Run, args) -> int:
    rows = []
    for mode in EMC_MODES:
        r = _track(run, "transmot", mode, 0.0)
        rows.append([mode, r.amota, r.amotp, r.mt, r.fp, r.fn, r.ids])
        _say(f"emc={mode}: AMOTA {_fmt(r.amota)}")
    _write_csv(run.ensure("eval") / "emc-ablation.csv", ["emc_mode", "amota", "amotp", "mt", "fp", "fn", "ids"], rows)
    return EXIT_OK


def cmd_sweep_frameskip(run: Run, args) -> int:
    rows = []
    for p in FRAMESKIP_PROBS:
        for model in ("transmot", "probmot"):
            r = _track(run, model, run.cfg.tracker.emc_mode, p)
            rows.append([model, f"{p:.1f}", r.amota, r.amotp, r.mt, r.fp, r.fn, r.ids])
            _say(f"p={p:.1f} {model}: AMOTA {_fmt(r.amota)}")
    _write_csv(run.ensure("eval") / "frameskip.csv", ["model", "drop_prob", "amota", "amotp", "mt", "fp", "fn", "ids"],
               rows)
    return EXIT_OK


def cmd_eval_emc(run: Run, args) -> int:
    emc_path = run.path("emc.json")
    dp = run.detector()
    ep = pl.load_emc(emc_path)
    pl.require_parents(emc_path, {"detector": run.path("detector.json")})
    cfg = run.cfg
    report = eval_emc(ep, dp, run.scenes("val"), skips=tuple(range(cfg.emc_training.n_skip + 1)),
                      lambda_detect=cfg.emc_training.lambda_detect, seed=run.seed)
    write_emc_report(report, run.ensure("eval") / "emc-rmse.csv")
    row = report.overall
    _say(f"all: location {_fmt(row.location_rmse)} size {_fmt(row.size_rmse)} "
         f"velocity {_fmt(row.velocity_rmse)} heading {_fmt(row.heading_rmse)} (n={row.count})")
    return EXIT_OK


def _scene_by_key(scenes, key: str):
    for s in scenes:
        if s.scene_id == key:
            return s
    if key.isdigit() and int(key) < len(scenes):
        return scenes[int(key)]
    raise LookupError(f"no scene {key!r} in the validation split")


def attention_maps(scene, dp, ep, cfg: TrackerConfig, frame: int, seed: int):
    """Run the tracker up to ``frame`` and return that frame's output with attention recorded."""
    if not 0 <= frame < len(scene.frames):
        raise LookupError(f"frame {frame} outside scene {scene.scene_id} ({len(scene.frames)} frames)")
    tracker = Tracker(dp, ep, cfg, seed)
    out = None
    for k in range(frame + 1):
        tracker.record_attention = k == frame
        f = scene.frames[k]
        if k == 0:
            out = tracker.init(f.points, 0, f.timestamp)
        else:
            out = tracker.step(f.points, scene.pose_change(k - 1, k), k, f.timestamp)
    return out


def cmd_dump_attention(run: Run, args) -> int:
    dp, ep = run.tracker_params()
    scene = _scene_by_key(run.scenes("val"), args.scene)
    out = attention_maps(scene, dp, ep, run.cfg.tracker, args.frame, run.seed)
    maps = (out.attention or {}).get(args.track_id)
    if maps is None:
        known = sorted((out.attention or {}).keys())
        raise LookupError(f"track {args.track_id} has no query at frame {args.frame} (live tracks: {known})")
    folder = run.ensure("eval", "attention")
    for layer, w in enumerate(maps):
        path = folder / f"{scene.scene_id}-f{args.frame:03d}-t{args.track_id}-layer{layer}.csv"
        _write_csv(path, ["row", "col", "weight"],
                   [[int(r), int(c), float(x)] for (r, c), x in zip(out.cells, w)])
        r, c = out.cells[int(np.argmax(w))]
        _say(f"layer {layer}: peak cell ({r}, {c}) weight {w.max():.4f} -> {path}")
    return EXIT_OK


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_report(out: Path) -> dict:
    """Collect checkpoints and evaluation artifacts of one run directory."""
    if not out.is_dir():
        raise pl.DependencyError(f"run directory {out} does not exist")
    sections: dict = {}
    ckpts = {}
    for name in ("detector", "emc", "tracker"):
        p = out / f"{name}.json"
        if p.is_file():
            meta = pl.checkpoint_meta(p)
            ckpts[name] = {"sha256": pl.checkpoint_digest(p), "trained_steps": meta.get("trained_steps"),
                           "seed": meta.get("seed")}
    if ckpts:
        sections["checkpoints"] = ckpts
    ev = out / "eval"
    det = {}
    for p in sorted(ev.glob("detect-*.json")) if ev.is_dir() else []:
        det[p.stem.removeprefix("detect-")] = json.loads(p.read_text())["metrics"]
    if det:
        sections["detection"] = det
    trk = {}
    for p in sorted(ev.glob("track-*.json")) if ev.is_dir() else []:
        obj = json.loads(p.read_text())
        trk[p.stem] = {**obj["metrics"], **{k: obj["meta"][k] for k in ("model", "emc_mode", "drop_prob", "seed")}}
    if trk:
        sections["tracking"] = trk
        ablation = {v["emc_mode"]: v["amota"] for v in trk.values()
                    if v["model"] == "transmot" and v["drop_prob"] == 0.0}
        if ablation:
            sections["emc_ablation_amota"] = ablation
    for key, fname in (("frameskip", "frameskip.csv"), ("emc_rmse", "emc-rmse.csv")):
        if ev.is_dir() and (ev / fname).is_file():
            sections[key] = _read_csv(ev / fname)
    if not sections:
        raise pl.DependencyError(f"{out} holds no checkpoints or evaluation results")
    return {"desk_scale": sections, "published": {"banner": BANNER, "values": as_dict()}}


def render_report(rep: dict) -> str:
    lines = ["desk-scale results", "=================="]
    desk = rep["desk_scale"]
    for name, c in desk.get("checkpoints", {}).items():
        lines.append(f"checkpoint {name}: {c['trained_steps']} steps, sha256 {c['sha256'][:12]}")
    for name, m in desk.get("detection", {}).items():
        lines.append(f"detection ({name}): AP {_fmt(m['ap'])}")
    for name, m in desk.get("tracking", {}).items():
        lines.append(f"{name}: AMOTA {_fmt(m['amota'])} AMOTP {_fmt(m['amotp'])} MT {m['mt']} FP {m['fp']} "
                     f"FN {m['fn']} IDS {m['ids']}")
    if "frameskip" in desk:
        lines.append("frame-skip sweep (AMOTA):")
        for row in desk["frameskip"]:
            lines.append(f"  p={row['drop_prob']} {row['model']}: {row['amota']}")
    for row in desk.get("emc_rmse", []):
        if row["bucket_kind"] == "all":
            lines.append(f"EMC RMSE: location {row['location_rmse']} size {row['size_rmse']} "
                         f"velocity {row['velocity_rmse']} heading {row['heading_rmse']}")
    lines += ["", BANNER.upper(), "-" * len(BANNER)]

    def walk(obj, prefix=""):
        for k, v in obj.items():
            if isinstance(v, dict):
                walk(v, f"{prefix}{k}.")
            else:
                lines.append(f"{prefix}{k}: {v}")

    walk(rep["published"]["values"])
    return "\n".join(lines) + "\n"


def cmd_report(run: Run, args) -> int:
    rep = build_report(run.out)
    run.path("report.json").write_text(json.dumps(rep, sort_keys=True, indent=1) + "\n")
    text = render_report(rep)
    run.path("report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (JSON); defaults apply if omitted")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", default="run", help="run directory (default: ./run)")

    parser = argparse.ArgumentParser(prog="lidartrack", description="LiDAR detection and tracking experiments")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    def verb(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    verb("gen-data", cmd_gen_data, "generate train/val scene files")
    verb("train-detector", cmd_train_detector, "train the standalone detector")
    verb("train-emc", cmd_train_emc, "train EMC against the frozen detector")
    verb("train-tracker", cmd_train_tracker, "jointly train detector and EMC on frame pairs")
    p = verb("eval-detect", cmd_eval_detect, "detection AP and error metrics on the val split")
    p.add_argument("--checkpoint", choices=("detector", "tracker"), default="detector")
    p = verb("eval-track", cmd_eval_track, "tracking metrics on the val split")
    p.add_argument("--model", choices=("transmot", "probmot"), default="transmot")
    p.add_argument("--emc-mode", choices=EMC_MODES, default="full")
    p.add_argument("--drop-prob", type=float, default=0.0)
    p.add_argument("--save-tracks", action="store_true", help="also write per-scene track files")
    verb("ablate-emc", cmd_ablate_emc, "eval-track for every EMC mode, one CSV")
    verb("sweep-frameskip", cmd_sweep_frameskip, "both trackers for drop probabilities 0.0..0.7")
    verb("eval-emc", cmd_eval_emc, "EMC RMSE per ego translation and rotation bucket")
    p = verb("dump-attention", cmd_dump_attention, "per-layer cross-attention of one track query")
    p.add_argument("--scene", required=True, help="val scene id or index")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--track-id", type=int, required=True)
    verb("report", cmd_report, "consolidated JSON and text summary of a run directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = Run(args)
        return args.fn(run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LookupError as exc:
        print(f"lookup error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
