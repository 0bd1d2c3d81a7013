"""Visual-inertial motion estimation with sparse-to-dense metric depth recovery.

Pipeline: an MSCKF-style filter fuses IMU and monocular bearings into poses
and sparse metric depths; predicted inverse depth is globally aligned to
those anchors, densified through a scale-map scaffold, and iteratively
refined per pixel with multi-view warp costs and an uncertainty estimate.
"""

from .alignment import AffineParams, ScaleMap, affine_drift_series, build_scaffold, global_align
from .depthmap import InverseDepthMap, SparseMetricPoint
from .geometry import CameraIntrinsics, Extrinsics, Pose, UnitQuaternion
from .metrics import DepthPair, MetricReport, eval_metrics, laplace_nll, multiscale_loss, reduce_sparse
from .msckf import FeatureTrack, FilterConfig, FilterState, ImuSample, MsckfFilter, NavState
from .refine import CandidateSearchOperator, CostMap, FeatureMap, UncertaintyMap, UpdateOperator, refine
from .simulate import ImuNoiseModel, SyntheticScene, TexturedPlane, TrajectorySpline, fit_spline, sample_imu

__version__ = "0.1.0"

__all__ = [
    "AffineParams",
    "CameraIntrinsics",
    "CandidateSearchOperator",
    "CostMap",
    "DepthPair",
    "Extrinsics",
    "FeatureMap",
    "FeatureTrack",
    "FilterConfig",
    "FilterState",
    "ImuNoiseModel",
    "ImuSample",
    "InverseDepthMap",
    "MetricReport",
    "MsckfFilter",
    "NavState",
    "Pose",
    "ScaleMap",
    "SparseMetricPoint",
    "SyntheticScene",
    "TexturedPlane",
    "TrajectorySpline",
    "UncertaintyMap",
    "UnitQuaternion",
    "UpdateOperator",
    "affine_drift_series",
    "build_scaffold",
    "eval_metrics",
    "fit_spline",
    "global_align",
    "laplace_nll",
    "multiscale_loss",
    "reduce_sparse",
    "refine",
    "sample_imu",
]
