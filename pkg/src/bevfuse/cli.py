"""Command-line entry points.

Subcommands: gen-data, train, infer, eval, gradcheck. Exit code 0 on
success; on a recognized failure the process prints one line of the form
``error:<category>: <message>`` to stderr and exits 1.
"""

import argparse
import sys

from .config import Config
from .errors import BevFuseError
from .evaluation import MatchConfig, evaluate_detections
from .fileio import (load_checkpoint, load_manifest, load_scene,
                     read_detections, save_manifest, write_detections)
from .model import FusionModel
from .scene_gen import generate_dataset


def _load_config(path):
    if path is None:
        return Config()
    return Config.from_dict(load_manifest(path))


def _cmd_gen_data(args):
    cfg = _load_config(args.config)
    paths = generate_dataset(args.out, args.scenes, args.seed, cfg)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return 0


def _cmd_train(args):
    from .training import train_run

    cfg = _load_config(args.config)
    if args.freeze_cvt:
        cfg.freeze_cvt = True
    if args.camera_only:
        cfg.camera_only = True
    ckpt = train_run(cfg, args.data, args.out, resume=args.resume)
    print(f"checkpoint written to {ckpt}")
    return 0


def _cmd_infer(args):
    cfg_tree, arrays, _ = load_checkpoint(args.ckpt)
    cfg = Config.from_dict(cfg_tree)
    model = FusionModel(cfg, seed=cfg.seed)
    model.load_state(arrays)
    scene = load_scene(args.scene)
    boxes = model.detect(scene, threshold=args.threshold)
    write_detections(args.out, [(scene.scene_id, b) for b in boxes])
    print(f"{len(boxes)} detections written to {args.out}")
    return 0


def _cmd_eval(args):
    preds = read_detections(args.pred)
    gts = read_detections(args.gt)
    report = evaluate_detections(preds, gts, MatchConfig(mode=args.mode))
    save_manifest(args.report, report.as_dict())
    print(f"mAP {report.map_score:.4f} ({args.mode}); report written to {args.report}")
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import run_all

    reports = run_all()
    failed = 0
    for r in reports:
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.name:20s} max_rel_err {r.max_rel_err:.3e} {status}")
        failed += not r.ok
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="bevfuse")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-cvt", action="store_true")
    p.add_argument("--camera-only", action="store_true")
    p.add_argument("--resume")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="run detection on one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--threshold", type=float, default=0.35)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("center_distance", "iou"),
                   default="center_distance")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BevFuseError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
