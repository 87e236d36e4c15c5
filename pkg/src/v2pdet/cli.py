"""Command line: synth, train, infer, eval and iou-check."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import tomli

from . import config as config_mod
from . import geom3d
from .evaluation import FrameDetections, evaluate
from .model import Detector
from .roi import CONFIDENCE_MODES
from .scene_io import (GroundTruth, LabelRecord, SynthSpec, ensure_dir, format_kitti_labels,
                       list_frames, parse_kitti_labels, read_dataset, synth_dataset, write_scene)
from .train import train, write_reports

log = logging.getLogger("v2pdet")


def _load_config(name_or_path: str):
    if Path(name_or_path).exists():
        return config_mod.load(name_or_path)
    return config_mod.bundled(name_or_path)


def cmd_synth(args) -> int:
    values = {}
    if args.spec:
        with open(args.spec, "rb") as fh:
            values = tomli.load(fh)
    spec = SynthSpec.from_dict(values)
    if args.seed is not None:
        spec.seed = args.seed
    if args.num_scenes is not None:
        spec.num_scenes = args.num_scenes
    classes = list(spec.size_ranges)
    for i, (pc, gt) in enumerate(synth_dataset(spec, classes)):
        write_scene(args.out, f"{i:06d}", pc, gt, classes)
    print(f"wrote {spec.num_scenes} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.no_refine:
        cfg.train.refine = False
    if args.no_seg:
        cfg.train.seg_supervision = False
    for flag, attr in (("no_point_stream", "use_point"), ("no_map_stream", "use_map"),
                       ("no_cge", "use_cge")):
        if getattr(args, flag):
            setattr(cfg.roi, attr, False)
    data = read_dataset(args.data, list(cfg.classes))
    if not data:
        print(f"no frames under {args.data}", file=sys.stderr)
        return 2
    t0 = time.time()

    def show(rep):
        if args.verbose and (rep.step % 10 == 0):
            print(f"step {rep.step:4d} total {rep.total:.4f} rpn {rep.rpn:.4f} seg {rep.seg:.4f} "
                  f"refine {rep.refine:.4f}", flush=True)

    model, reports = train(cfg, [(pc, gt) for _, pc, gt in data], args.steps, callback=show)
    model.save(args.out, {"steps": len(reports)})
    losses = args.losses or str(Path(args.out).with_suffix(".losses.jsonl"))
    write_reports(losses, reports)
    print(f"trained {len(reports)} steps in {time.time() - t0:.1f}s; checkpoint {args.out}; losses {losses}")
    return 0


def cmd_infer(args) -> int:
    model = Detector.load(args.ckpt)
    classes = list(model.cfg.classes)
    out = ensure_dir(args.out)
    frames = read_dataset(args.data, classes)
    for fid, pc, _ in frames:
        det = model.detect(pc, mode=args.confidence)
        recs = [LabelRecord(classes[int(c)], b, float(s))
                for b, c, s in zip(det.boxes, det.class_ids, det.scores)]
        (out / f"{fid}.txt").write_text(format_kitti_labels(recs))
    print(f"wrote detections for {len(frames)} frames to {out}")
    return 0


def read_detections(det_dir, frame_ids, classes) -> list[FrameDetections]:
    dets = []
    for fid in frame_ids:
        path = Path(det_dir) / f"{fid}.txt"
        recs = parse_kitti_labels(path.read_text()) if path.exists() else []
        recs = [r for r in recs if r.cls_name in classes]
        dets.append(FrameDetections(np.array([r.box for r in recs]).reshape(-1, 7),
                                    [classes.index(r.cls_name) for r in recs],
                                    [1.0 if r.score is None else r.score for r in recs]))
    return dets


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    classes = list(cfg.classes)
    gt_root = Path(args.gt)
    fids = list_frames(gt_root) or sorted(p.stem for p in (gt_root / "label_2").glob("*.txt"))
    gts = []
    for fid in fids:
        path = gt_root / "label_2" / f"{fid}.txt"
        recs = [r for r in parse_kitti_labels(path.read_text()) if r.cls_name in classes]
        gts.append(GroundTruth(np.array([r.box for r in recs]).reshape(-1, 7),
                               [classes.index(r.cls_name) for r in recs]))
    dets = read_detections(args.det, fids, classes)
    report = evaluate(dets, gts, classes, cfg.eval.iou_thresholds, cfg.eval.num_recall)
    payload = report.to_dict()
    payload["frames"] = len(fids)
    Path(args.report).write_text(json.dumps(payload, indent=2))
    for c in classes:
        print(f"{c}: AP3D {report.ap_3d[c]:.4f}  APBEV {report.ap_bev[c]:.4f}")
    return 0


def random_box_pairs(n: int, rng: np.random.Generator) -> np.ndarray:
    """Pairs of boxes that overlap often enough to exercise the clipper."""
    a = np.empty((n, 7))
    a[:, 0:3] = rng.uniform(-1, 1, (n, 3))
    a[:, 3:6] = rng.uniform(0.5, 3.0, (n, 3))
    a[:, 6] = rng.uniform(-np.pi, np.pi, n)
    b = a.copy()
    b[:, 0:3] += rng.uniform(-1.5, 1.5, (n, 3))
    b[:, 3:6] *= rng.uniform(0.5, 1.5, (n, 3))
    b[:, 6] = rng.uniform(-np.pi, np.pi, n)
    return np.stack([a, b], axis=1)


def iou_check(trials: int, samples: int, seed: int = 0, tol: float = 0.01):
    """Compare exact IoU with Monte Carlo on random pairs; returns (max deviation, mean deviation)."""
    rng = np.random.default_rng(seed)
    pairs = random_box_pairs(trials, rng)
    devs = np.empty(trials)
    for i, (a, b) in enumerate(pairs):
        exact = geom3d.iou_3d(a, b)
        est, _ = geom3d.iou_3d_montecarlo(a, b, samples, rng)
        devs[i] = abs(exact - est)
    return float(devs.max()), float(devs.mean())


def cmd_iou_check(args) -> int:
    t0 = time.time()
    worst, mean = iou_check(args.trials, args.samples, args.seed)
    ok = worst <= args.tol
    print(f"{args.trials} pairs, {args.samples} samples each: max |exact - mc| {worst:.5f}, "
          f"mean {mean:.5f}, {time.time() - t0:.1f}s -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="v2pdet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate synthetic KITTI-layout scenes")
    s.add_argument("--spec", help="TOML file with synthetic scene parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--num-scenes", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", required=True, help="TOML file or bundled name (default, desk)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--losses", help="loss series output (JSON lines)")
    t.add_argument("--no-refine", action="store_true", help="train the RPN and decoder only")
    t.add_argument("--no-seg", action="store_true", help="drop the segmentation loss")
    t.add_argument("--no-point-stream", action="store_true")
    t.add_argument("--no-map-stream", action="store_true")
    t.add_argument("--no-cge", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write KITTI result files")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--confidence", choices=CONFIDENCE_MODES, default="aligned-iou-x-cls")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="AP of detection files against labels")
    e.add_argument("--det", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", default="default")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("iou-check", help="exact IoU against a Monte Carlo oracle")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--samples", type=int, default=1_000_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=0.01)
    c.set_defaults(func=cmd_iou_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
