"""Command-line interface.

Subcommands: simulate, vio, align, run, eval, drift, sweep. Exit codes:
0 success, 2 parse/validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, report
from .alignment import affine_drift_series
from .depthmap import InverseDepthMap
from .errors import (
    DimensionMismatch,
    MissingFile,
    ParseError,
    VioDenseError,
)
from .geometry import CameraIntrinsics, Extrinsics, UnitQuaternion
from .metrics import DepthPair, MetricReport, eval_metrics
from .pipeline import PipelineConfig, run
from .simulate import (
    ImuNoiseModel,
    SyntheticScene,
    TexturedPlane,
    cast_rays,
    default_trajectory,
    observe_landmarks,
    render_image,
    sample_imu,
    value_noise,
)

logger = logging.getLogger("viodense")

VALIDATION_ERRORS = (ParseError, MissingFile, DimensionMismatch, ValueError)


def benchmark_scene(seed: int = 0, n_landmarks: int = 200) -> SyntheticScene:
    """Wedge of two textured planes (continuous depth) with surface landmarks."""
    wall = TexturedPlane(
        center=np.array([0.0, 0.0, 3.0]),
        axis_u=np.array([1.0, 0.0, 0.0]),
        axis_v=np.array([0.0, 1.0, 0.0]),
        half_u=8.0,
        half_v=8.0,
        texture_seed=seed,
        texture_scale=2.0,
        texture_octaves=2,
    )
    floor = TexturedPlane(
        center=np.array([0.0, 1.2, 1.8]),
        axis_u=np.array([1.0, 0.0, 0.0]),
        axis_v=np.array([0.0, -0.6, 0.8]),
        half_u=8.0,
        half_v=8.0,
        texture_seed=seed + 3,
        texture_scale=2.0,
        texture_octaves=2,
    )
    rng = np.random.default_rng(seed)
    marks = []
    for plane, n in ((wall, n_landmarks // 2), (floor, n_landmarks - n_landmarks // 2)):
        pu = rng.uniform(-2.5, 2.5, n)
        pv = rng.uniform(-2.0, 2.0, n)
        marks.append(plane.center + pu[:, None] * plane.axis_u + pv[:, None] * plane.axis_v)
    return SyntheticScene([wall, floor], np.vstack(marks))


def synthesize_dataset(
    out_dir,
    duration: float = 12.0,
    frame_rate: float = 2.0,
    n_points: int = 150,
    seed: int = 0,
    width: int = 160,
    height: int = 120,
    noisy: bool = True,
    pred_scale: float = 2.0,
    pred_offset: float = 0.05,
    corruption: float = 0.1,
):
    """Write a full synthetic sequence in the dataset layout.

    Pseudo-predictions are an affine distortion of the true inverse depth plus
    a smooth multiplicative corruption field, so alignment has real work to do
    and refinement has something left to fix.
    """
    intr = CameraIntrinsics(1.25 * width, 1.25 * width, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    ext = Extrinsics(UnitQuaternion.from_axis_angle(np.array([0.02, -0.015, 0.01])), np.array([0.01, 0.02, -0.03]))
    spline = default_trajectory(duration)
    scene = benchmark_scene(seed)
    noise = ImuNoiseModel() if noisy else ImuNoiseModel.noiseless()
    imu = sample_imu(spline, noise, seed=seed)
    end = imu[-1].timestamp

    rng = np.random.default_rng(seed + 1)
    frame_times = np.arange(spline.t_min, end - 1e-9, 1.0 / frame_rate)
    gu, gv = np.meshgrid(np.arange(width) / width, np.arange(height) / height)
    frames = []
    for k, t in enumerate(frame_times):
        pose = spline.pose(float(t))
        image = render_image(scene, pose, ext, intr)
        depth, plane_idx, _ = cast_rays(scene, pose, ext, intr)
        valid = plane_idx >= 0
        ys, xs = np.nonzero(valid)
        take = min(n_points, len(xs))
        sel = rng.choice(len(xs), size=take, replace=False)
        sparse = [
            dataio.SparseMetricPoint(float(xs[s]), float(ys[s]), float(depth[ys[s], xs[s]]))
            for s in sel
        ]
        bearings = observe_landmarks(scene, pose, ext, intr, rng, 1.0 if noisy else 0.0)

        field = value_noise(gu, gv, seed=seed + 31 * k, octaves=2, scale=2.0) * 2.0 - 1.0
        peak = np.abs(field).max()
        if peak > 0:
            field /= peak
        corrupt = np.exp(np.log1p(corruption) * field)
        z_true = np.where(valid, 1.0 / depth, 1.0 / 8.0)
        pred_inv = (z_true * corrupt - pred_offset) / pred_scale

        frames.append(
            {
                "timestamp": float(t),
                "pose": pose,
                "image": image,
                "sparse": sparse,
                "pred_inv": pred_inv.astype(np.float32),
                "gt_depth": np.where(valid, depth, 0.0),
                "tracks": bearings,
            }
        )
    dataio.write_sequence(out_dir, intr, ext, imu, frames)
    return out_dir


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    parser.add_argument("--iters", type=int, default=None)
    parser.add_argument("--reduction", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--pooled-metrics", action="store_true", default=None)


def _build_config(args, mode) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    config.mode = mode
    if args.iters is not None:
        config.iters = args.iters
    if args.reduction is not None:
        config.reduction = args.reduction
    if args.seed is not None:
        config.seed = args.seed
    if args.pooled_metrics:
        config.pooled_metrics = True
    return PipelineConfig(**{f: getattr(config, f) for f in config.__dataclass_fields__})


def _summarize(results, dataset, config, out_dir):
    note = "pooled" if config.pooled_metrics else "per-frame"
    if config.pooled_metrics:
        preds, gts = [], []
        for r in results:
            gt = dataset.load_gt_depth(r.index)
            if r.depth is not None and gt is not None:
                preds.append(r.depth.ravel())
                gts.append(gt.ravel())
        if preds:
            pair = DepthPair(
                np.concatenate(preds).reshape(1, -1),
                np.concatenate(gts).reshape(1, -1),
                eval_range=(config.eval_min, config.eval_max),
            )
            report.write_metrics_report([("pooled", eval_metrics(pair))], out_dir, pooled_note=note)
            return
    report.write_metrics_report([(r.index, r.report) for r in results], out_dir, pooled_note=note)


def cmd_simulate(args) -> int:
    synthesize_dataset(
        args.out,
        duration=args.duration,
        frame_rate=args.frame_rate,
        n_points=args.n_points,
        seed=args.seed if args.seed is not None else 0,
        width=args.width,
        height=args.height,
        noisy=not args.noiseless,
    )
    print(f"wrote synthetic sequence to {args.out}")
    return 0


def cmd_vio(args) -> int:
    dataset = dataio.ingest(args.dataset)
    config = _build_config(args, "vio")
    results = run(config, dataset, out_dir=args.out)
    ok = sum(1 for r in results if r.error is None)
    print(f"vio: {ok}/{len(results)} frames processed, outputs in {args.out}")
    return 0


def _run_depth_mode(args, mode) -> int:
    dataset = dataio.ingest(args.dataset)
    config = _build_config(args, mode)
    results = run(config, dataset, out_dir=args.out)
    _summarize(results, dataset, config, args.out)
    reported = [r for r in results if r.report is not None]
    if reported:
        mean_rmse = float(np.mean([r.report.rmse for r in reported]))
        print(f"{mode}: {len(reported)} frames evaluated, mean RMSE {mean_rmse:.2f} mm; reports in {args.out}")
    else:
        print(f"{mode}: processed {len(results)} frames; reports in {args.out}")
    return 0


def cmd_align(args) -> int:
    return _run_depth_mode(args, "align-only")


def cmd_run(args) -> int:
    return _run_depth_mode(args, "full")


def cmd_eval(args) -> int:
    dataset = dataio.ingest(args.dataset)
    config = _build_config(args, "full")
    rows = []
    for rec in dataset.frames:
        depth_path = Path(args.results) / "frames" / f"{rec.index:06d}" / "depth.png"
        gt = dataset.load_gt_depth(rec.index)
        if not depth_path.exists() or gt is None:
            continue
        pred = dataio.read_depth_png(depth_path)
        pred = np.where(np.isfinite(pred), np.clip(pred, config.z_min, config.z_max), config.z_max)
        pair = DepthPair(pred, gt, eval_range=(config.eval_min, config.eval_max))
        if not pair.eval_mask.any():
            continue
        rows.append((rec.index, eval_metrics(pair)))
    report.write_metrics_report(rows, args.out)
    print(f"eval: {len(rows)} frames, table in {args.out}/metrics.csv")
    return 0


def cmd_drift(args) -> int:
    dataset = dataio.ingest(args.dataset)
    config = _build_config(args, "align-only")
    frames = []
    for rec in dataset.frames:
        pred = dataset.load_pred_inv(rec.index)
        if pred is None:
            continue
        points = dataset.load_sparse(rec.index)
        frames.append((InverseDepthMap(pred, None, config.z_min, config.z_max), points))
    series = affine_drift_series(frames)
    report.write_drift_report(series, args.out)
    print(
        f"drift: {len(frames)} frames, var(scale)={series.scale_variance:.4g}, "
        f"var(offset)={series.offset_variance:.4g}; report in {args.out}"
    )
    return 0


def cmd_sweep(args) -> int:
    dataset = dataio.ingest(args.dataset)
    rows = {}
    for pct in (10, 50, 80):
        row = {}
        for mode, key in (("align-only", "ga"), ("full", "refined")):
            config = _build_config(args, mode)
            config.reduction = float(pct)
            results = run(config, dataset, out_dir=None)
            reports = [r.report for r in results if r.report is not None]
            if reports:
                vals = np.mean([rep.row() for rep in reports], axis=0)
                count = int(sum(rep.count for rep in reports))
                row[key] = MetricReport(vals[0], vals[1], vals[2], vals[3], absrel=vals[4], iabsrel=float("nan"), count=count)
        rows[pct] = row
    report.write_sweep_report(rows, args.out)
    print(f"sweep: reductions 10/50/80 done; table in {args.out}/sweep.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viodense", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic sequence directory")
    p.add_argument("out", type=Path)
    p.add_argument("--duration", type=float, default=12.0)
    p.add_argument("--frame-rate", type=float, default=2.0)
    p.add_argument("--n-points", type=int, default=150)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--noiseless", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    for name, func, help_text in (
        ("vio", cmd_vio, "run visual-inertial filtering, emit poses and sparse depths"),
        ("align", cmd_align, "global alignment only"),
        ("run", cmd_run, "full pipeline: align, scaffold, refine"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("dataset", type=Path)
        p.add_argument("out", type=Path)
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate emitted depth maps against ground truth")
    p.add_argument("dataset", type=Path)
    p.add_argument("results", type=Path)
    p.add_argument("out", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("drift", help="per-frame affine drift analysis")
    p.add_argument("dataset", type=Path)
    p.add_argument("out", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("sweep", help="sparsity reduction sweep at 10/50/80 percent")
    p.add_argument("dataset", type=Path)
    p.add_argument("out", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        logger.error("%s", exc)
        return 2
    except VioDenseError as exc:
        logger.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
