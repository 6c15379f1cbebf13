"""Command-line entry point: ``heightbev <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bevgrid, geometry, metrics, pipeline, predictor, synthscene
from .errors import DivergenceDetected, HeightBEVError, NonFiniteGradient, NonFiniteLoss

log = logging.getLogger("heightbev")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def bundled_scenes() -> Path:
    """Directory of the 50 scene JSON files shipped with the package."""
    return Path(str(resources.files("heightbev") / "data" / "scenes"))


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _non_negative_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


# --- subcommands -------------------------------------------------------------------


BOUNDS_FIELDS = [
    "u_gt",
    "v_gt",
    "eps",
    "depth_bound_m",
    "height_bound_m",
    "empirical_depth",
    "empirical_height",
    "depth_ratio",
    "height_ratio",
    "height_over_depth",
    "v_offset_over_fy",
]


def _ratio(empirical: float, analytic: float) -> float:
    if analytic == 0:
        return 1.0 if empirical == 0 else float("inf")
    return empirical / analytic


def cmd_bounds(args) -> int:
    cam = geometry.CameraModel.load(args.calib)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(BOUNDS_FIELDS)
    n = args.sweep
    for k in range(n):
        # from the principal point (on-axis row first) toward the far image corner
        t = k / (n - 1) if n > 1 else 0.0
        u = cam.u0 + t * (cam.width - 1 - cam.u0)
        v = cam.v0 + t * (cam.height - 1 - cam.v0)
        q = geometry.BoundQuery(cam, u, v, args.depth, args.eps)
        db, de = geometry.depth_error_bound(q), geometry.verify_depth_bound(q, args.steps)
        hb, he = geometry.height_error_bound(q), geometry.verify_height_bound(q, args.steps)
        out.writerow(
            [
                f"{u:.6f}",
                f"{v:.6f}",
                repr(args.eps),
                repr(db),
                repr(hb),
                repr(de),
                repr(he),
                repr(_ratio(de, db)),
                repr(_ratio(he, hb)),
                repr(hb / db),
                repr(abs(v - cam.v0) / cam.fy),
            ]
        )
    return EXIT_OK


def cmd_gtmap(args) -> int:
    scene = synthscene.load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = scene.grid
    maps = {"boxes": bevgrid.heightmap_from_boxes(g, scene.boxes)}
    if args.lidar:
        cloud = synthscene.lidar_like(scene, rays=args.rays, seed=args.seed)
        maps["lidar"] = bevgrid.heightmap_from_lidar(g, cloud)
        maps["fused"] = bevgrid.fuse_heightmaps(maps["boxes"], maps["lidar"])
    for name, hm in maps.items():
        bevgrid.save_heightmap_csv(hm, out / f"{name}.csv")
        bevgrid.save_heightmap_pgm(hm, out / f"{name}.pgm")
        print(f"{name}: {int(hm.indicator.sum())} covered cells -> {out / name}.csv, .pgm")
    return EXIT_OK


def _load_scenes(directory: Optional[str]):
    return synthscene.load_dataset(directory or bundled_scenes())


def cmd_train(args) -> int:
    scenes = _load_scenes(args.scenes)
    config = predictor.TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        n_anchors=args.n_anchors,
        batch_scenes=args.batch_scenes,
        supervise_all=args.supervise_all,
    )
    t0 = time.perf_counter()
    data = pipeline.prepare(scenes, noise=pipeline.training_clutter(len(scenes), args.clutter))
    params, history = predictor.fit(
        data, config, callback=lambda e: log.info("epoch %d loss %.4f y-mae %.3f m", e.epoch, e.total_loss, e.y_mae_occupied_m)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictor.save_checkpoint(params, out / "checkpoint.bin", epoch=config.epochs)
    predictor.write_training_log(history, out / "train_log.csv")
    final = history[-1] if history else None
    summary = {
        "scenes": len(scenes),
        "epochs": config.epochs,
        "final_loss": final.total_loss if final else None,
        "final_y_mae_m": final.y_mae_occupied_m if final else None,
        "seconds": round(time.perf_counter() - t0, 2),
        "checkpoint": str(out / "checkpoint.bin"),
    }
    print(json.dumps(summary))
    return EXIT_OK


def _table(r: metrics.EvalResult) -> str:
    rows = [(k, v) for k, v in r.to_dict().items()]
    return "\n".join(f"{k:>5}  {v:8.4f}" for k, v in rows)


def cmd_eval(args) -> int:
    scenes = _load_scenes(args.scenes)
    gts = [s.boxes for s in scenes]
    names = [p.name for p in sorted(Path(args.scenes or bundled_scenes()).glob("*.json"))]
    if args.detections:
        det_dir = Path(args.detections)
        dets = [metrics.load_detections_json(det_dir / n) for n in names]
        result = metrics.evaluate(dets, gts)
    else:
        if args.gt_heights:
            mode, params = "gt", None
        elif args.baseline:
            mode, params = "baseline", None
        else:
            if not args.checkpoint:
                raise UsageError("eval: --checkpoint is required unless --gt-heights, --baseline or --detections is given")
            mode = "pred"
            params, _ = predictor.load_checkpoint(args.checkpoint)
        data = pipeline.prepare(scenes, noise=args.noise, noise_seed=args.seed)
        result, dets = pipeline.evaluate_dataset(data, mode, params, mask=args.mask, tau=args.tau, n_anchors=args.n_anchors)
    if args.save_detections:
        out = Path(args.save_detections)
        out.mkdir(parents=True, exist_ok=True)
        for n, d in zip(names, dets):
            metrics.save_detections_json(d, out / n)
    payload = json.dumps(result.to_dict())
    if args.json_out:
        Path(args.json_out).write_text(payload + "\n")
    print(payload)
    print(_table(result))
    return EXIT_OK


def cmd_sample(args) -> int:
    scene = synthscene.load_scene(args.scene)
    data = pipeline.prepare([scene])[0]
    if args.checkpoint:
        params, _ = predictor.load_checkpoint(args.checkpoint)
        q, _ = pipeline.bev_queries(data, "pred", params, mask=args.mask, n_anchors=args.n_anchors)
    elif args.gt_heights:
        q, _ = pipeline.bev_queries(data, "gt", mask=args.mask, n_anchors=args.n_anchors)
    else:
        q, _ = pipeline.bev_queries(data, "baseline", n_anchors=args.n_anchors)
    if not 0 <= args.channel < q.channels:
        raise UsageError(f"sample: channel must lie in [0, {q.channels})")
    img = np.rint(np.clip(q.features[..., args.channel], 0.0, 1.0) * 255).astype(np.uint8).T[::-1]
    bevgrid.write_pgm(args.out, img)
    print(f"channel {args.channel}: {int((q.hits > 0).sum())} cells with samples -> {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.min_boxes > args.max_boxes:
        raise UsageError("generate: --min-boxes exceeds --max-boxes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = synthscene.generate_dataset(args.n_scenes, args.seed, (args.min_boxes, args.max_boxes))
    for k, s in enumerate(scenes):
        synthscene.save_scene(s, out / f"scene_{k:03d}.json")
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heightbev", description="Height-based BEV construction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bounds", help="analytic and brute-force error bounds as CSV")
    b.add_argument("--calib", required=True, help="camera JSON")
    b.add_argument("--eps", type=_positive_float, required=True, help="neighbourhood radius in meters")
    b.add_argument("--sweep", type=_positive_int, default=10, help="number of pixels to sample")
    b.add_argument("--depth", type=_positive_float, default=20.0, help="ground-truth depth in meters")
    b.add_argument("--steps", type=int, default=10_000, help="oracle resolution (>= 1000)")
    b.set_defaults(func=cmd_bounds)

    g = sub.add_parser("gtmap", help="ground-truth height maps of one scene as CSV and PGM")
    g.add_argument("--scene", required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--lidar", action="store_true", help="also write LiDAR and fused maps")
    g.add_argument("--rays", type=_positive_int, default=1024, help="LiDAR azimuth samples per beam")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gtmap)

    t = sub.add_parser("train", help="train the height predictor")
    t.add_argument("--scenes", help="scene directory (default: bundled dataset)")
    t.add_argument("--epochs", type=_non_negative_int, default=60)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=_non_negative_float, default=0.003)
    t.add_argument("--batch-scenes", type=_non_negative_int, default=1, help="scenes per update, 0 for all")
    t.add_argument("--n-anchors", type=_positive_int, default=4)
    t.add_argument("--supervise-all", action="store_true", help="supervise every layer, not only the last")
    t.add_argument(
        "--clutter",
        type=_non_negative_float,
        default=pipeline.TRAIN_CLUTTER,
        help="background clutter amplitude on every other training scene",
    )
    t.add_argument("--out", default="run", help="output directory for checkpoint.bin and train_log.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="detect and score on a scene directory")
    e.add_argument("--scenes", help="scene directory (default: bundled dataset)")
    e.add_argument("--checkpoint")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--gt-heights", action="store_true", help="sample at ground-truth heights")
    src.add_argument("--baseline", action="store_true", help="fixed full-range anchors, no predictor")
    src.add_argument("--detections", help="score precomputed detection JSON files instead")
    e.add_argument("--mask", choices=("on", "off", "uncertainty"), default="on")
    e.add_argument("--tau", type=_probability, default=0.25)
    e.add_argument("--n-anchors", type=_positive_int, default=4)
    e.add_argument("--noise", type=_non_negative_float, default=0.0, help="uniform background clutter amplitude")
    e.add_argument("--seed", type=int, default=0, help="clutter seed")
    e.add_argument("--json-out", help="also write the result JSON here")
    e.add_argument("--save-detections", help="write per-scene detection JSON files here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="dump one channel of the BEV queries as PGM")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="use predicted heights")
    s.add_argument("--gt-heights", action="store_true")
    s.add_argument("--mask", choices=("on", "off", "uncertainty"), default="off")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--n-anchors", type=_positive_int, default=4)
    s.set_defaults(func=cmd_sample)

    n = sub.add_parser("generate", help="write a synthetic scene dataset")
    n.add_argument("--out", required=True)
    n.add_argument("--n-scenes", type=_positive_int, default=50)
    n.add_argument("--seed", type=int, default=7)
    n.add_argument("--min-boxes", type=_non_negative_int, default=6)
    n.add_argument("--max-boxes", type=_non_negative_int, default=12)
    n.set_defaults(func=cmd_generate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NonFiniteGradient, DivergenceDetected, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HeightBEVError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
