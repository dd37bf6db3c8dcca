"""Command line entry point: ``posevote estimate | sensitivity | bench``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from posevote.clustering import Bandwidths
from posevote.estimators import PipelineConfig, format_report, recognize, write_detections_csv
from posevote.harness import (
    BENCH_COLUMNS,
    SENSITIVITY_COLUMNS,
    SensitivityConfig,
    noise_levels,
    run_bench,
    run_sensitivity,
    write_rows_csv,
)
from posevote.io import ModelParseError, load_model

SEED_ENV = "POSEVOTE_SEED"


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    d = PipelineConfig()
    p.add_argument("--voxel-resolution", type=float, default=d.voxel_resolution, help="metres")
    p.add_argument("--feature-target", type=int, default=d.feature_target)
    p.add_argument("--descriptor-radius", type=float, default=None, help="metres (default 15 x voxel resolution)")
    p.add_argument("--n-r", type=int, default=d.n_r, help="rotational tessellation count")
    p.add_argument("--sigma-t", type=float, default=d.bandwidths.sigma_t, help="translation bandwidth, metres")
    p.add_argument("--sigma-r-deg", type=float, default=float(np.degrees(d.bandwidths.sigma_r)),
                   help="rotation bandwidth, degrees")
    p.add_argument("--nms-fraction", type=float, default=d.nms_fraction, help="NMS radius as a fraction of the object diagonal")
    p.add_argument("--density-threshold", type=float, default=d.density_threshold)
    p.add_argument("--icp-iterations", type=int, default=d.icp_iterations)
    p.add_argument("--no-refine", action="store_true", help="skip ICP refinement")
    p.add_argument("--normal-k", type=int, default=d.normal_k)
    p.add_argument("--seed", type=int, default=None, help=f"default from ${SEED_ENV} or 0")


def _config(args) -> PipelineConfig:
    return PipelineConfig(
        voxel_resolution=args.voxel_resolution,
        feature_target=args.feature_target,
        descriptor_radius=args.descriptor_radius,
        n_r=args.n_r,
        bandwidths=Bandwidths(args.sigma_t, np.radians(args.sigma_r_deg)),
        nms_fraction=args.nms_fraction,
        density_threshold=args.density_threshold,
        icp_iterations=args.icp_iterations,
        multi_instance=args.multi_instance,
        refine=not args.no_refine,
        normal_k=args.normal_k,
        seed=args.seed if args.seed is not None else _default_seed(),
    )


def cmd_estimate(args) -> int:
    objects = [load_model(p) for p in args.objects]
    scene = load_model(args.scene)
    names = [os.path.basename(p) for p in args.objects]
    detections = recognize(objects, scene, _config(args), names)
    if args.out:
        write_detections_csv(args.out, detections)
    report = format_report(detections)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report)
    sys.stdout.write(report)
    return 0 if detections else 2


def cmd_sensitivity(args) -> int:
    model = load_model(args.model)
    levels = noise_levels(args.noise_start, args.noise_stop, args.noise_step)
    cfg = SensitivityConfig(
        voxel_resolution=args.voxel_resolution,
        feature_target=args.feature_target,
        descriptor_radius=args.descriptor_radius,
        normal_k=args.normal_k,
        n_r=args.n_r,
        bandwidths=Bandwidths(args.sigma_t, np.radians(args.sigma_r_deg)),
        ransac_iterations=args.ransac_iterations,
        ransac_repeats=args.ransac_repeats,
        seed=args.seed if args.seed is not None else _default_seed(),
    )

    def progress(rows):
        for r in rows:
            logging.info("%s noise %.3f: %.4f m, %.2f deg, inlier rate %.3f", r["method"], r["noise_fraction"],
                         r["translation_error_m"], r["rotation_error_deg"], r["inlier_rate"])

    rows = run_sensitivity(model, levels, tuple(args.methods), cfg, progress)
    cols = SENSITIVITY_COLUMNS if args.timing else [c for c in SENSITIVITY_COLUMNS if c != "wall_time_s"]
    write_rows_csv(args.out, rows, cols)
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.model) if args.model else None
    rows = run_bench(
        args.inlier_rates, args.trials, args.pairs, args.noise_sigma, tuple(args.methods), model,
        Bandwidths(args.sigma_t, np.radians(args.sigma_r_deg)), args.ransac_iterations,
        seed=args.seed if args.seed is not None else _default_seed(),
    )
    cols = BENCH_COLUMNS if args.timing else [c for c in BENCH_COLUMNS if c != "mean_wall_time_s"]
    write_rows_csv(args.out, rows, cols)
    for r in rows:
        print(f"{r['method']:8s} inlier rate {r['inlier_rate']:.3f}: success {r['success_rate']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posevote", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="recognize one or more objects in a scene")
    p.add_argument("scene")
    p.add_argument("objects", nargs="+")
    p.add_argument("--out", help="detection CSV path")
    p.add_argument("--report", help="human-readable report path")
    p.add_argument("--multi-instance", type=int, default=None, metavar="K", help="return up to K instances per object")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sensitivity", help="pose error versus uniform point noise")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--noise-start", type=float, default=0.001)
    p.add_argument("--noise-stop", type=float, default=0.030)
    p.add_argument("--noise-step", type=float, default=0.001)
    p.add_argument("--methods", nargs="+", choices=["cluster", "ransac"], default=["cluster", "ransac"])
    p.add_argument("--voxel-resolution", type=float, default=SensitivityConfig.voxel_resolution)
    p.add_argument("--feature-target", type=int, default=SensitivityConfig.feature_target)
    p.add_argument("--descriptor-radius", type=float, default=None)
    p.add_argument("--normal-k", type=int, default=SensitivityConfig.normal_k)
    p.add_argument("--n-r", type=int, default=SensitivityConfig.n_r)
    p.add_argument("--sigma-t", type=float, default=Bandwidths().sigma_t)
    p.add_argument("--sigma-r-deg", type=float, default=float(np.degrees(Bandwidths().sigma_r)))
    p.add_argument("--ransac-iterations", type=int, default=SensitivityConfig.ransac_iterations)
    p.add_argument("--ransac-repeats", type=int, default=SensitivityConfig.ransac_repeats)
    p.add_argument("--timing", action="store_true", help="add a wall-time column (breaks byte-identical reruns)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("bench", help="success rate versus inlier rate on synthetic correspondences")
    p.add_argument("--out", required=True)
    p.add_argument("--inlier-rates", type=float, nargs="+", default=[1.0, 0.5, 0.2, 0.1, 0.05, 0.02])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--noise-sigma", type=float, default=0.002, help="metres")
    p.add_argument("--model", help="object model (default: built-in 0.25 m blob)")
    p.add_argument("--methods", nargs="+", choices=["cluster", "ransac"], default=["cluster", "ransac"])
    p.add_argument("--sigma-t", type=float, default=Bandwidths().sigma_t)
    p.add_argument("--sigma-r-deg", type=float, default=float(np.degrees(Bandwidths().sigma_r)))
    p.add_argument("--ransac-iterations", type=int, default=10000)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ModelParseError, IndexError) as exc:
        print(f"posevote: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
