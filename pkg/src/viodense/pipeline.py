"""End-to-end orchestration: dataset in, depth maps, uncertainties and metrics out.

Modes:

* ``vio``: run the filter over IMU and bearing tracks; emit per-frame poses
  and sparse metric points as a dataset overlay.
* ``align-only``: per-frame global alignment of the predicted inverse depth
  against the sparse points.
* ``full``: alignment, scaffold construction, then multi-view refinement
  against the previous two sufficiently-translated frames.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataio
from .alignment import build_scaffold, global_align
from .depthmap import InverseDepthMap, SparseMetricPoint
from .errors import ParseError, VioDenseError
from .geometry import Pose
from .metrics import DepthPair, MetricReport, eval_metrics, reduce_sparse
from .msckf import FilterConfig, MsckfFilter, NavState
from .refine import CandidateSearchOperator, UpdateOperator, refine
from .dataio import SequenceDataset

logger = logging.getLogger(__name__)

MODES = ("vio", "align-only", "full")


@dataclass
class PipelineConfig:
    mode: str = "full"
    iters: int = 3
    # prediction clamp / loss mask / evaluation mask depth ranges, meters
    z_min: float = 0.1
    z_max: float = 8.0
    loss_min: float = 0.1
    loss_max: float = 5.0
    eval_min: float = 0.2
    eval_max: float = 5.0
    min_baseline: float = 0.02  # reference-frame selection, meters
    seed: int = 0
    reduction: float = 0.0  # percent of sparse points removed
    pooled_metrics: bool = False
    scaffold_mode: str = "aligned_over_pred"
    scaffold_init: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iters < 0:
            raise ValueError("iteration count must be >= 0")
        for lo, hi, name in (
            (self.z_min, self.z_max, "prediction clamp"),
            (self.loss_min, self.loss_max, "loss mask"),
            (self.eval_min, self.eval_max, "eval mask"),
        ):
            if not lo < hi:
                raise ValueError(f"{name} range must satisfy min < max")

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        """Flat key=value text config; unknown keys are an error."""
        path = Path(path)
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError(path, "expected key=value", line=lineno)
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in known:
                    raise ParseError(path, f"unknown config key {key!r}", line=lineno)
                kwargs[key] = _parse_value(key, value, path, lineno)
        return cls(**kwargs)


def _parse_value(key, value, path, lineno):
    if key in ("mode", "scaffold_mode"):
        return value
    if key in ("iters", "seed"):
        try:
            return int(value)
        except ValueError as exc:
            raise ParseError(path, f"{key} must be an integer", line=lineno) from exc
    if key in ("pooled_metrics", "scaffold_init"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ParseError(path, f"{key} must be a boolean", line=lineno)
    try:
        return float(value)
    except ValueError as exc:
        raise ParseError(path, f"{key} must be a number", line=lineno) from exc


@dataclass
class FrameResult:
    index: int
    timestamp: float
    depth: np.ndarray | None = None  # meters, native resolution
    uncertainty: np.ndarray | None = None  # log variance
    report: MetricReport | None = None
    ga_scale: float = float("nan")
    ga_offset: float = float("nan")
    n_sparse: int = 0
    compute_seconds: float = 0.0
    error: str | None = None


def _frame_sparse(dataset: SequenceDataset, i: int, config: PipelineConfig) -> list[SparseMetricPoint]:
    points = dataset.load_sparse(i)
    if config.reduction > 0:
        points = reduce_sparse(points, config.reduction, seed=config.seed + i)
    return points


def _evaluate(depth_pred, gt, config: PipelineConfig) -> MetricReport | None:
    if gt is None:
        return None
    pair = DepthPair(
        depth_pred,
        gt,
        eval_range=(config.eval_min, config.eval_max),
        loss_range=(config.loss_min, config.loss_max),
    )
    if not pair.eval_mask.any():
        return None
    return eval_metrics(pair)


def _align_frame(dataset, i, config) -> tuple[InverseDepthMap, float, float, list[SparseMetricPoint]]:
    pred = dataset.load_pred_inv(i)
    if pred is None:
        raise VioDenseError(f"frame {i} has no predicted inverse depth")
    d_inv = InverseDepthMap(pred, None, config.z_min, config.z_max)
    points = _frame_sparse(dataset, i, config)
    params, aligned = global_align(d_inv, points, allow_degenerate=True)
    return aligned, params.scale, params.offset, points


def run(config: PipelineConfig, dataset: SequenceDataset, out_dir=None, op: UpdateOperator | None = None) -> list[FrameResult]:
    """Run the configured mode over every frame.

    Per-frame failures are logged and skipped; artifacts are written under
    ``out_dir`` when given (16-bit mm PNG + float PFM per depth map,
    uncertainty PFM, poses and sparse overlays in vio mode).
    """
    if config.mode == "vio":
        return _run_vio(config, dataset, out_dir)
    results = []
    accepted: list[tuple[int, Pose, np.ndarray]] = []  # (index, pose, image) usable as references
    op = op or CandidateSearchOperator()
    for i, rec in enumerate(dataset.frames):
        result = FrameResult(index=i, timestamp=rec.timestamp)
        t0 = time.perf_counter()
        try:
            aligned, s, b, points = _align_frame(dataset, i, config)
            result.ga_scale = s
            result.ga_offset = b
            result.n_sparse = len(points)
            if config.mode == "full":
                refs = _select_references(accepted, rec.pose, config)
                if len(refs) == 2 and config.iters > 0:
                    image = dataset.load_image(i)
                    scaffold = None
                    if config.scaffold_init and points:
                        scaffold = build_scaffold(aligned, aligned, points, mode="sparse_over_aligned")
                    out, unc = refine(
                        image,
                        [r[2] for r in refs],
                        aligned,
                        scaffold,
                        rec.pose,
                        [r[1] for r in refs],
                        dataset.extrinsics,
                        dataset.intrinsics,
                        op=op,
                        iters=config.iters,
                    )
                    result.depth = 1.0 / out.clamped().values
                    result.uncertainty = unc.log_variance
                else:
                    result.depth = 1.0 / aligned.clamped().values
            else:
                result.depth = 1.0 / aligned.clamped().values
            result.compute_seconds = time.perf_counter() - t0
            result.report = _evaluate(result.depth, dataset.load_gt_depth(i), config)
            if config.mode == "full":
                image = dataset.load_image(i)
                _remember_reference(accepted, i, rec.pose, image, config)
        except VioDenseError as exc:
            result.error = str(exc)
            logger.error("frame %d failed: %s", i, exc)
        results.append(result)

    if out_dir is not None:
        _write_outputs(results, Path(out_dir))
    return results


def _select_references(accepted, pose: Pose, config: PipelineConfig):
    """Previous two frames with at least the minimum baseline to the target."""
    refs = []
    for idx, ref_pose, image in reversed(accepted):
        baseline = np.linalg.norm(ref_pose.translation - pose.translation)
        if baseline >= config.min_baseline:
            refs.append((idx, ref_pose, image))
        if len(refs) == 2:
            break
    return refs


def _remember_reference(accepted, i, pose, image, config):
    if accepted:
        last_pose = accepted[-1][1]
        if np.linalg.norm(last_pose.translation - pose.translation) < config.min_baseline:
            return
    accepted.append((i, pose, image))
    if len(accepted) > 8:
        accepted.pop(0)


def _write_outputs(results: list[FrameResult], out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in results:
        if r.depth is None:
            continue
        frame_out = out_dir / "frames" / f"{r.index:06d}"
        frame_out.mkdir(parents=True, exist_ok=True)
        dataio.write_depth_png(frame_out / "depth.png", r.depth)
        dataio.write_pfm(frame_out / "depth.pfm", r.depth)
        if r.uncertainty is not None:
            dataio.write_pfm(frame_out / "uncertainty.pfm", r.uncertainty)


def _run_vio(config: PipelineConfig, dataset: SequenceDataset, out_dir=None) -> list[FrameResult]:
    if not dataset.imu:
        raise VioDenseError("vio mode requires an IMU stream")
    if not dataset.frames:
        raise VioDenseError("vio mode requires frames")
    poses = [(rec.timestamp, rec.pose) for rec in dataset.frames]
    nav = NavState(
        poses[0][1].rotation,
        poses[0][1].translation,
        _initial_velocity(poses),
        np.zeros(3),
        np.zeros(3),
    )
    vio = MsckfFilter(dataset.intrinsics, dataset.extrinsics, FilterConfig(), nav=nav, start_time=poses[0][0])

    sample_times = np.array([s.timestamp for s in dataset.imu])
    results = []
    out_poses = []
    out_sparse: dict[int, list[SparseMetricPoint]] = {}
    for i, rec in enumerate(dataset.frames):
        result = FrameResult(index=i, timestamp=rec.timestamp)
        t0 = time.perf_counter()
        try:
            if rec.timestamp > vio.state.time:
                lo = max(np.searchsorted(sample_times, vio.state.time) - 1, 0)
                hi = np.searchsorted(sample_times, rec.timestamp) + 1
                vio.propagate_to(dataset.imu[lo:hi + 1], rec.timestamp)
            bearings = dataset.load_tracks(i)
            obs = [(fid, vio.normalize_pixels(uv)) for fid, uv in bearings]
            _, points, _ = vio.process_frame(obs, rec.timestamp)
            result.n_sparse = len(points)
            out_poses.append((rec.timestamp, vio.state.nav.pose()))
            out_sparse[i] = points
            result.compute_seconds = time.perf_counter() - t0
        except VioDenseError as exc:
            result.error = str(exc)
            logger.error("vio frame %d failed: %s", i, exc)
        results.append(result)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        dataio.write_poses_txt(out_dir / "poses.txt", out_poses)
        for i, points in out_sparse.items():
            d = out_dir / "frames" / f"{i:06d}"
            d.mkdir(parents=True, exist_ok=True)
            dataio.write_sparse_csv(d / "sparse.csv", points)
    return results


def _initial_velocity(poses) -> np.ndarray:
    if len(poses) < 2:
        return np.zeros(3)
    (t0, p0), (t1, p1) = poses[0], poses[1]
    dt = t1 - t0
    return (p1.translation - p0.translation) / dt if dt > 0 else np.zeros(3)
