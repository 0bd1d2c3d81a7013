"""Global affine alignment of predicted inverse depth and scale-map scaffolding.

A monocular prediction is affine-invariant in inverse depth: it matches the
metric scene only up to an unknown scale and offset. ``global_align`` fits
both per frame against sparse metric anchors; ``build_scaffold`` interpolates
per-knot scale ratios into a dense multiplicative prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.spatial import QhullError

from .depthmap import InverseDepthMap, SparseMetricPoint, points_to_arrays
from .errors import DegenerateFit, EmptyKnots, TooFewPoints

# Knot-value conventions for the scaffold ratio. "aligned_over_pred" is the
# default (aligned prediction over raw prediction); "sparse_over_pred" uses
# the measured sparse inverse depth as numerator; "sparse_over_aligned" is a
# pure correction field relative to the aligned map, used to seed refinement.
SCAFFOLD_MODES = ("aligned_over_pred", "sparse_over_pred", "sparse_over_aligned")


@dataclass
class AffineParams:
    """Global inverse-depth alignment: aligned = scale * predicted + offset."""

    scale: float  # dimensionless
    offset: float  # 1/meters


@dataclass
class ScaleMap:
    """Dense multiplicative scale prior interpolated from sparse knots.

    ``values`` is normalized to unit range (divided by the max knot value);
    ``normalizer`` retains the divisor so consumers can recover raw scales.
    """

    values: np.ndarray  # (H, W), dimensionless, normalized
    knots: list  # [(x, y, sigma_raw)]
    normalizer: float

    @property
    def raw(self) -> np.ndarray:
        return self.values * self.normalizer


def _sample_at(points: list[SparseMetricPoint], grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    out = np.empty(len(points))
    for i, p in enumerate(points):
        x = int(round(p.u))
        y = int(round(p.v))
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"sparse point ({p.u}, {p.v}) outside {w}x{h} grid")
        out[i] = grid[y, x]
    return out


def global_align(
    d_inv: InverseDepthMap,
    points: list[SparseMetricPoint],
    allow_degenerate: bool = False,
) -> tuple[AffineParams, InverseDepthMap]:
    """Least-squares fit of scale and offset mapping prediction to sparse metric inverse depth.

    Minimizes sum_j (s * d_j + b - 1/depth_j)^2 over the sparse points and
    returns the fitted parameters together with the aligned, bound-clamped map.

    Raises TooFewPoints (<2 points) or DegenerateFit (all sampled predictions
    equal, so scale and offset cannot be separated). With
    ``allow_degenerate=True`` those cases fall back to a median-ratio scale
    with zero offset, which keeps extremely sparse frames usable.
    """
    d_samples = _sample_at(points, d_inv.values) if points else np.empty(0)
    _, _, depths = points_to_arrays(points)
    z_sparse = 1.0 / depths if len(points) else np.empty(0)

    degenerate = len(points) >= 1 and np.ptp(d_samples) <= 1e-12 * max(1.0, np.abs(d_samples).max())
    if len(points) < 2 or degenerate:
        if allow_degenerate and len(points) >= 1:
            ratios = z_sparse / d_samples
            params = AffineParams(float(np.median(ratios)), 0.0)
            return params, _apply_affine(d_inv, params)
        if len(points) < 2:
            raise TooFewPoints(f"affine alignment needs >=2 sparse points, got {len(points)}")
        raise DegenerateFit("all sparse points sample the same predicted inverse depth")

    A = np.stack([d_samples, np.ones_like(d_samples)], axis=1)
    sol, *_ = np.linalg.lstsq(A, z_sparse, rcond=None)
    params = AffineParams(float(sol[0]), float(sol[1]))
    return params, _apply_affine(d_inv, params)


def _apply_affine(d_inv: InverseDepthMap, params: AffineParams) -> InverseDepthMap:
    lo, hi = d_inv.inv_bounds
    aligned = np.clip(params.scale * d_inv.values + params.offset, lo, hi)
    return InverseDepthMap(aligned, d_inv.valid.copy(), d_inv.z_min, d_inv.z_max)


def interpolate_scattered(
    xy: np.ndarray, values: np.ndarray, width: int, height: int
) -> np.ndarray:
    """Scattered 2D linear interpolation onto a full pixel grid.

    Inside the knot convex hull: barycentric-linear over a Delaunay
    triangulation. Outside the hull: nearest-knot extension. Collinear knots
    fall back to 1D linear interpolation along the knot axis.
    """
    xy = np.asarray(xy, dtype=float)
    values = np.asarray(values, dtype=float)
    gu, gv = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))

    if len(values) == 1:
        return np.full((height, width), values[0])

    centered = xy - xy.mean(axis=0)
    # leading principal axis; near-zero second singular value means collinear
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    collinear = len(values) == 2 or svals[-1] <= 1e-9 * max(svals[0], 1.0)
    if collinear:
        axis = vt[0]
        t_knots = centered @ axis
        order = np.argsort(t_knots)
        t_sorted = t_knots[order]
        v_sorted = values[order]
        t_grid = (np.stack([gu, gv], axis=-1) - xy.mean(axis=0)) @ axis
        # np.interp clamps beyond the end knots, i.e. nearest extension
        return np.interp(t_grid.ravel(), t_sorted, v_sorted).reshape(height, width)

    try:
        linear = LinearNDInterpolator(xy, values)
    except QhullError:
        nearest = NearestNDInterpolator(xy, values)
        return nearest(gu, gv)
    grid = linear(gu, gv)
    outside = ~np.isfinite(grid)
    if outside.any():
        nearest = NearestNDInterpolator(xy, values)
        grid[outside] = nearest(gu[outside], gv[outside])
    return grid


def build_scaffold(
    z_ga: InverseDepthMap,
    d_inv: InverseDepthMap,
    knots: list[SparseMetricPoint],
    mode: str = "aligned_over_pred",
) -> ScaleMap:
    """Interpolate per-knot scale ratios into a dense multiplicative prior.

    The knot value at (x_j, y_j) is a ratio selected by ``mode`` (see
    SCAFFOLD_MODES); the dense map is scattered-linear interpolation of those
    ratios, normalized by the maximum knot value.
    """
    if not knots:
        raise EmptyKnots("scaffold construction requires at least one knot")
    if mode not in SCAFFOLD_MODES:
        raise ValueError(f"unknown scaffold mode {mode!r}")

    xs = np.array([k.u for k in knots], dtype=float)
    ys = np.array([k.v for k in knots], dtype=float)
    if mode == "aligned_over_pred":
        num = _sample_at(knots, z_ga.values)
        den = _sample_at(knots, d_inv.values)
    elif mode == "sparse_over_pred":
        num = np.array([k.inverse_depth for k in knots])
        den = _sample_at(knots, d_inv.values)
    else:  # sparse_over_aligned
        num = np.array([k.inverse_depth for k in knots])
        den = _sample_at(knots, z_ga.values)
    if np.any(den == 0.0):
        raise ValueError("scaffold denominator is zero at a knot pixel")
    sigma = num / den
    if np.any(sigma <= 0.0):
        raise ValueError("scaffold knot ratios must be strictly positive")

    h, w = z_ga.shape
    grid = interpolate_scattered(np.stack([xs, ys], axis=1), sigma, w, h)
    normalizer = float(sigma.max())
    return ScaleMap(grid / normalizer, [(x, y, s) for x, y, s in zip(xs, ys, sigma)], normalizer)


@dataclass
class DriftSeries:
    """Per-frame affine parameters plus their spread across frames."""

    params: list  # AffineParams or None per frame (None = degenerate/failed)
    scale_variance: float
    offset_variance: float

    @property
    def scales(self) -> np.ndarray:
        return np.array([p.scale if p is not None else np.nan for p in self.params])

    @property
    def offsets(self) -> np.ndarray:
        return np.array([p.offset if p is not None else np.nan for p in self.params])


def affine_drift_series(frames: list[tuple[InverseDepthMap, list]]) -> DriftSeries:
    """Fit per-frame affine parameters and summarize their variability.

    Degenerate frames are flagged with None and excluded from the variance
    summary. Variances are sample variances (ddof=1) across usable frames.
    """
    if len(frames) < 2:
        raise TooFewPoints("drift analysis requires at least two frames")
    params: list[AffineParams | None] = []
    for d_inv, points in frames:
        try:
            fit, _ = global_align(d_inv, points)
            params.append(fit)
        except (TooFewPoints, DegenerateFit):
            params.append(None)
    usable = [p for p in params if p is not None]
    if len(usable) >= 2:
        s_var = float(np.var([p.scale for p in usable], ddof=1))
        b_var = float(np.var([p.offset for p in usable], ddof=1))
    else:
        s_var = b_var = float("nan")
    return DriftSeries(params, s_var, b_var)
