"""Command-line driver: ``artikin synth | fit | eval | pipeline``.

Exit codes: 0 success, 2 invalid input, 3 degenerate geometry, 4 divergence.
"""

import argparse
import logging
import sys

import numpy as np

from .exceptions import ArtikinError
from .kinematics import RefineConfig, initialize, refine
from .metrics import evaluate
from .model_io import export_bases, export_model, import_model, save_report
from .motion import run_stage1
from .tracks import NoiseSpec, TrackSet, cabinet_rig, interpolate_occlusions, load_rig, load_tracks, \
    save_tracks, synthesize

logger = logging.getLogger("artikin")
_D = RefineConfig()


def _add_synth_args(p):
    p.add_argument("--rig", help="rig JSON file (default: built-in cabinet rig)")
    p.add_argument("--seed", type=int, default=0, help="noise/occlusion seed")
    p.add_argument("--noise", type=float, default=0.0,
                   help="track noise sigma as a fraction of the bbox diagonal")
    p.add_argument("--occlusion", type=float, default=0.0, help="per-sample occlusion rate")
    p.add_argument("--confidence-floor", type=float, default=1.0,
                   help="confidences drawn uniformly from [floor, 1]")


def _add_fit_args(p):
    p.add_argument("--parts", type=int, default=3, help="number of parts K including the base")
    p.add_argument("--horizon", help="inclusive frame range a:b for motion segmentation")
    p.add_argument("--no-refine", action="store_true", help="stop after initialization")
    p.add_argument("--lr-w", type=float, default=_D.lr_w)
    p.add_argument("--lr-ac", type=float, default=_D.lr_ac)
    p.add_argument("--lr-q", type=float, default=_D.lr_q)
    p.add_argument("--lambda-acc", type=float, default=_D.lambda_acc)
    p.add_argument("--lambda-z", type=float, default=_D.lambda_z)
    p.add_argument("--iters", type=int, default=_D.n_iter)
    p.add_argument("--keep-fraction", type=float, default=_D.keep_fraction)
    p.add_argument("--workers", type=int, default=1, help="threads for per-frame evaluation")
    p.add_argument("--trajectories", help="also write predicted tracks to this file")
    p.add_argument("--dump-bases", help="write the Stage 1 motion bases (JSON) for debugging")


def build_parser():
    parser = argparse.ArgumentParser(prog="artikin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample tracks and ground truth from a rig")
    _add_synth_args(p)
    p.add_argument("--out", default="tracks.txt", help="track file to write")
    p.add_argument("--gt", default="gt_model.json", help="ground-truth model file to write")

    p = sub.add_parser("fit", help="fit an articulated model to tracks")
    p.add_argument("--tracks", required=True)
    _add_fit_args(p)
    p.add_argument("--out", default="model.json", help="model file to write")

    p = sub.add_parser("eval", help="score a model against ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", default="report.json")

    p = sub.add_parser("pipeline", help="synth, fit and eval in one go")
    _add_synth_args(p)
    _add_fit_args(p)
    p.add_argument("--tracks", help="also write the synthesized tracks here")
    p.add_argument("--gt", help="also write the ground-truth model here")
    p.add_argument("--out", default="model.json")
    p.add_argument("--report", default="report.json")
    return parser


def _synth(args):
    rig = load_rig(args.rig) if args.rig else cabinet_rig()
    noise = NoiseSpec(args.noise * rig.bbox_diagonal(), args.occlusion, args.confidence_floor)
    return synthesize(rig, noise, seed=args.seed)


def _config(args):
    return RefineConfig(lr_w=args.lr_w, lr_ac=args.lr_ac, lr_q=args.lr_q,
                        lambda_acc=args.lambda_acc, lambda_z=args.lambda_z, n_iter=args.iters,
                        keep_fraction=args.keep_fraction, workers=args.workers)


def _fit(tracks, args):
    cfg = _config(args)
    tracks = interpolate_occlusions(tracks)
    s1 = run_stage1(tracks, args.parts, args.horizon)
    for note in s1.bases.notes:
        logger.info(note)
    if args.dump_bases:
        export_bases(s1.bases, args.dump_bases)
    model = initialize(tracks, s1.labels, s1.distances, cfg)
    if not args.no_refine:
        model = refine(model, tracks, cfg)
    if args.trajectories:
        P = model.forward()
        save_tracks(TrackSet(P, np.ones(P.shape[:2], bool), np.ones(P.shape[:2])), args.trajectories)
    return model


def _report_summary(report):
    for p in report.parts:
        pos = "" if p.position_error is None else f" pos {p.position_error * 100:.4g} cm"
        ax = "n/a" if p.axis_error is None else f"{p.axis_error:.4g} deg"
        print(f"part {p.gt_part} ({p.gt_kind} -> {p.pred_kind}): axis {ax}{pos}")
    print(f"epe {report.epe * 100:.4g} cm, chamfer {report.chamfer_whole * 100:.4g} cm, "
          f"type accuracy {report.joint_type_accuracy:.3f}")


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        tracks, truth = _synth(args)
        save_tracks(tracks, args.out)
        export_model(truth, args.gt)
    elif args.command == "fit":
        model = _fit(load_tracks(args.tracks), args)
        export_model(model, args.out)
    elif args.command == "eval":
        report = evaluate(import_model(args.model), import_model(args.gt))
        save_report(report, args.report)
        _report_summary(report)
    else:
        tracks, truth = _synth(args)
        if args.tracks:
            save_tracks(tracks, args.tracks)
        if args.gt:
            export_model(truth, args.gt)
        model = _fit(tracks, args)
        export_model(model, args.out)
        report = evaluate(model, truth)
        save_report(report, args.report)
        _report_summary(report)
    return 0


def main(argv=None):
    try:
        return run(argv)
    except ArtikinError as exc:
        print(f"artikin: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
