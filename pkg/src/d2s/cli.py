"""``d2s`` command-line entry point.

Exit codes: 0 ok, 1 gate failure (recall below ``--min-recall``, no pose
found), 2 usage or configuration error, 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import load_settings
from .exceptions import (ArchitectureMismatch, BadConfig, EmptyDataset, FormatError,
                         InsufficientVisibility, IoError, NoConsensus, TooFewCorrespondences)
from .estimator import D2SRegressor
from .pseudo_label import PseudoLabeler, PseudoLabelReport
from .synth import generate_scene, make_dataset
from .training import train, update_with_pseudo

log = logging.getLogger("d2s")

EXIT_OK, EXIT_GATE, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SPLITS = ("train", "test", "unlabeled")
MANIFEST = "scene.txt"
CONFIG_COPY = "config.cfg"


def _settings(args, dataset_dir=None):
    spec = args.config
    if spec is None and dataset_dir is not None and (Path(dataset_dir) / CONFIG_COPY).exists():
        spec = str(Path(dataset_dir) / CONFIG_COPY)
    settings = load_settings(spec)
    if args.seed is not None:
        settings = settings.with_seed(args.seed)
    if args.verbose and not settings.train.log_every:
        settings = replace(settings, train=replace(settings.train, log_every=1000))
    return settings


def _manifest(dataset_dir):
    path = Path(dataset_dir) / MANIFEST
    return io.parse_key_values(path.read_text()) if path.exists() else {}


def _find_manifest(frames_dir):
    for d in (Path(frames_dir), Path(frames_dir).parent):
        m = _manifest(d)
        if m:
            return m
    return {}


def _read_split(directory):
    frames = io.read_frames(directory)
    if not frames:
        raise IoError(f"no frame files in {directory}")
    return frames


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    settings = _settings(args)
    s = settings.scene
    scene = generate_scene(s.num_points, s.descriptor_dim, s.unreliable_fraction, settings.seed)
    splits = make_dataset(scene, settings.trajectory, settings.render)
    out = Path(args.out)
    for name, frames in zip(SPLITS, splits):
        io.write_frames(out / name, frames)
    manifest = [
        f"num_points = {len(scene.points)}",
        f"descriptor_dim = {scene.codes.shape[1]}",
        f"unreliable_points = {int(np.count_nonzero(scene.reliable_flag == 0))}",
        f"diameter = {scene.diameter!r}",
        "centroid = " + ",".join(repr(float(c)) for c in scene.centroid),
        f"domain_shift = {settings.render.domain_shift!r}",
        f"seed = {settings.seed}",
    ] + [f"frames_{name} = {len(frames)}" for name, frames in zip(SPLITS, splits)]
    io.atomic_write(out / MANIFEST, ("\n".join(manifest) + "\n").encode())
    io.atomic_write(out / CONFIG_COPY, settings.to_text().encode())
    print(f"wrote {sum(len(f) for f in splits)} frames to {out} (diameter {scene.diameter:.4f})")
    return EXIT_OK


def cmd_train(args):
    settings = _settings(args, args.dataset)
    frames = _read_split(Path(args.dataset) / "train")
    params = train(frames, settings.train)
    io.save_checkpoint(args.out, params)
    print(f"saved checkpoint {args.out} ({params.num_parameters()} parameters)")
    return EXIT_OK


def cmd_update(args):
    settings = _settings(args, Path(args.labeled).parent)
    params = io.load_params(args.checkpoint)
    labeled = _read_split(args.labeled)
    pseudo = _read_split(args.pseudo)
    params = update_with_pseudo(params, labeled, pseudo, settings.train)
    io.save_checkpoint(args.out, params)
    print(f"saved updated checkpoint {args.out}")
    return EXIT_OK


def cmd_pseudo_label(args):
    train_frames = _read_split(args.train)
    unlabeled = _read_split(args.unlabeled)
    report = PseudoLabelReport()
    labeler = PseudoLabeler(top_k=args.top_k, min_valid=args.min_valid)
    admitted = labeler.fit_transform(train_frames, unlabeled, report)
    out = Path(args.out)
    io.write_frames(out, admitted)
    io.atomic_write(out / "report.txt", report.to_text().encode())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _model(args):
    params = io.load_params(args.checkpoint)
    return D2SRegressor.from_params(params, reliability_threshold=args.reliability_threshold,
                                    seed=args.seed or 0)


def cmd_eval(args):
    settings = _settings(args, Path(args.test).parent)
    est = _model(args)
    frames = _read_split(args.test)
    t_thresh = args.threshold_trans
    if t_thresh is None:
        diameter = float(_find_manifest(args.test).get("diameter", 1.0))
        t_thresh = settings.eval.threshold_trans_fraction * diameter
    r_thresh = args.threshold_rot if args.threshold_rot is not None else settings.eval.threshold_rot
    solver = replace(settings.solver, reliability_threshold=args.reliability_threshold)
    report = est.evaluate(frames, t_thresh, r_thresh, solver, use_filter=not args.no_filter)
    sys.stdout.write(report.summary_text())
    if args.out:
        io.atomic_write(args.out, report.to_text().encode())
        io.atomic_write(str(args.out) + ".curve", report.curve_text().encode())
    if args.min_recall is not None and report.recall() < args.min_recall:
        print(f"recall {report.recall():.2f}% below gate {args.min_recall}%", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_localize(args):
    est = _model(args)
    frame = io.read_frame(args.frame)
    try:
        result = est.localize(frame, use_filter=not args.no_filter)
    except (NoConsensus, TooFewCorrespondences) as exc:
        print(f"no pose: {exc}", file=sys.stderr)
        return EXIT_GATE
    print(" ".join(f"{v:.10g}" for v in result.pose.to_array()), result.inlier_count)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or preset name (desk, hard)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    solve = argparse.ArgumentParser(add_help=False)
    solve.add_argument("--reliability-threshold", type=float, default=0.5)
    solve.add_argument("--no-filter", action="store_true", help="use every prediction in RANSAC")

    parser = argparse.ArgumentParser(prog="d2s", description="Descriptor-to-scene-coordinate relocalization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("update", parents=[common], help="fine-tune with pseudo-labelled frames")
    p.add_argument("checkpoint")
    p.add_argument("labeled")
    p.add_argument("pseudo")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("pseudo-label", parents=[common], help="label unlabeled frames by matching")
    p.add_argument("train")
    p.add_argument("unlabeled")
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--min-valid", type=int, default=50)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("eval", parents=[common, solve], help="localize test frames and report errors")
    p.add_argument("checkpoint")
    p.add_argument("test")
    p.add_argument("--threshold-trans", type=float, default=None,
                   help="translation threshold in scene units (default: 5%% of scene diameter)")
    p.add_argument("--threshold-rot", type=float, default=None, help="rotation threshold in degrees")
    p.add_argument("--min-recall", type=float, default=None, help="exit 1 if recall (%%) is below this")
    p.add_argument("--out", default=None, help="write per-frame records here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", parents=[common, solve], help="estimate the pose of one frame")
    p.add_argument("checkpoint")
    p.add_argument("frame")
    p.set_defaults(func=cmd_localize)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, ArchitectureMismatch, IoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BadConfig, EmptyDataset, InsufficientVisibility, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
