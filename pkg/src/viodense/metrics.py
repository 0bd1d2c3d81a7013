"""Depth evaluation metrics and the Laplace likelihood loss.

Evaluation follows the inverse-depth convention: errors are computed on
z = 1000/D (km^-1), which penalizes near-range errors more, plus MAE/RMSE in
millimeters of metric depth. Masking ranges are kept separate on purpose:
the prediction clamp, the loss mask and the evaluation mask are three
distinct intervals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depthmap import SparseMetricPoint
from .errors import EmptyList, EmptyMask

LAPLACE_EPS = 1e-6

EVAL_DEPTH_RANGE = (0.2, 5.0)  # meters, ground truth considered valid
LOSS_DEPTH_RANGE = (0.1, 5.0)  # meters, supervision mask


@dataclass
class DepthPair:
    """Aligned prediction/ground-truth grids with evaluation and loss masks."""

    prediction: np.ndarray  # meters
    ground_truth: np.ndarray  # meters
    eval_mask: np.ndarray | None = None
    loss_mask: np.ndarray | None = None
    eval_range: tuple[float, float] = EVAL_DEPTH_RANGE
    loss_range: tuple[float, float] = LOSS_DEPTH_RANGE

    def __post_init__(self):
        self.prediction = np.asarray(self.prediction, dtype=float)
        self.ground_truth = np.asarray(self.ground_truth, dtype=float)
        if self.prediction.shape != self.ground_truth.shape:
            raise ValueError("prediction and ground truth shapes differ")
        finite = np.isfinite(self.prediction) & np.isfinite(self.ground_truth)
        if self.eval_mask is None:
            lo, hi = self.eval_range
            self.eval_mask = finite & (self.ground_truth >= lo) & (self.ground_truth <= hi)
        else:
            self.eval_mask = np.asarray(self.eval_mask, dtype=bool) & finite
        if self.loss_mask is None:
            lo, hi = self.loss_range
            self.loss_mask = finite & (self.ground_truth >= lo) & (self.ground_truth <= hi)
        else:
            self.loss_mask = np.asarray(self.loss_mask, dtype=bool) & finite


@dataclass
class MetricReport:
    """Evaluation summary; inverse metrics in km^-1, MAE/RMSE in millimeters."""

    rmse: float
    mae: float
    irmse: float
    imae: float
    iabsrel: float
    absrel: float
    count: int

    COLUMNS = ("RMSE", "MAE", "iRMSE", "iMAE", "AbsRel")

    def row(self) -> list[float]:
        """Values in the table column order RMSE, MAE, iRMSE, iMAE, AbsRel."""
        return [self.rmse, self.mae, self.irmse, self.imae, self.absrel]


def eval_metrics(pair: DepthPair) -> MetricReport:
    """Compute the evaluation metrics over the pair's evaluation mask.

    Predictions are expected to be pre-clamped to the prediction range; this
    function does not clamp.
    """
    mask = pair.eval_mask
    if not mask.any():
        raise EmptyMask("evaluation mask selects no pixels")
    pred = pair.prediction[mask]
    gt = pair.ground_truth[mask]

    err_mm = (gt - pred) * 1000.0
    z_gt = 1000.0 / gt  # km^-1
    z_pred = 1000.0 / pred
    ierr = z_gt - z_pred

    return MetricReport(
        rmse=float(np.sqrt(np.mean(err_mm**2))),
        mae=float(np.mean(np.abs(err_mm))),
        irmse=float(np.sqrt(np.mean(ierr**2))),
        imae=float(np.mean(np.abs(ierr))),
        iabsrel=float(np.mean(np.abs(ierr) / z_gt)),
        absrel=float(np.mean(np.abs(gt - pred) / gt)),
        count=int(mask.sum()),
    )


def laplace_nll(pred_depth: np.ndarray, log_var: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Uncertainty-weighted Laplace negative log-likelihood.

    Mean over masked pixels of |D - D*|/b + log(b) with b = exp(log_var) + eps.
    """
    loss, _, _ = laplace_nll_with_grad(pred_depth, log_var, gt, mask)
    return loss


def laplace_nll_with_grad(
    pred_depth: np.ndarray, log_var: np.ndarray, gt: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Laplace NLL plus its analytic gradients w.r.t. prediction and log-variance."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("loss mask selects no pixels")
    pred = np.asarray(pred_depth, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    gt = np.asarray(gt, dtype=float)

    m = mask.sum()
    err = pred - gt
    b = np.exp(log_var) + LAPLACE_EPS
    per_pixel = np.abs(err) / b + np.log(b)
    loss = float(np.mean(per_pixel[mask]))

    d_pred = np.where(mask, np.sign(err) / b, 0.0) / m
    d_logv = np.where(mask, (1.0 / b - np.abs(err) / b**2) * np.exp(log_var), 0.0) / m
    return loss, d_pred, d_logv


def multiscale_loss(per_scale, gamma: float = 0.85) -> float:
    """Exponentially weighted average of per-scale losses, finest weighted most.

    ``per_scale`` is ordered coarse -> fine; scale i of s gets weight
    gamma^(s-i), normalized so the weights sum to one.
    """
    per_scale = list(per_scale)
    if not per_scale:
        raise EmptyList("multiscale loss needs at least one scale")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    s = len(per_scale)
    weights = np.array([gamma ** (s - i) for i in range(1, s + 1)])
    return float(np.dot(weights, per_scale) / weights.sum())


def reduce_sparse(points: list[SparseMetricPoint], reduction_pct: float, seed: int) -> list[SparseMetricPoint]:
    """Uniform random subsample keeping round(N * (1 - pct/100)) points.

    Seeded and deterministic; preserves the original point order.
    """
    if not 0 <= reduction_pct < 100:
        raise ValueError("reduction percentage must be in [0, 100)")
    n_keep = int(round(len(points) * (1.0 - reduction_pct / 100.0)))
    if n_keep >= len(points):
        return list(points)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(points), size=n_keep, replace=False))
    return [points[i] for i in idx]
