"""Dense inverse-depth containers and sparse metric depth samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Prediction clamp range, meters. Loss and evaluation masks use their own
# ranges (see metrics); these bound what the pipeline is allowed to output.
DEFAULT_Z_MIN = 0.1
DEFAULT_Z_MAX = 8.0


@dataclass
class SparseMetricPoint:
    """A pixel with known metric camera-frame depth."""

    u: float
    v: float
    depth: float  # meters, camera-frame z
    landmark_id: int | None = None

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError(f"sparse depth must be positive, got {self.depth}")

    @property
    def inverse_depth(self) -> float:
        return 1.0 / self.depth


@dataclass
class InverseDepthMap:
    """Per-pixel inverse depth with a validity mask and metric bounds."""

    values: np.ndarray  # (H, W), 1/meters
    valid: np.ndarray | None = None  # (H, W) bool; defaults to all True
    z_min: float = DEFAULT_Z_MIN
    z_max: float = DEFAULT_Z_MAX

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise ValueError(f"inverse depth grid must be 2D and non-empty, got {self.values.shape}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ValueError("validity mask shape differs from value grid")
        if not self.z_min < self.z_max:
            raise ValueError("depth bounds must satisfy z_min < z_max")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def inv_bounds(self) -> tuple[float, float]:
        """(lo, hi) bounds in inverse-depth units."""
        return 1.0 / self.z_max, 1.0 / self.z_min

    def clamped(self) -> "InverseDepthMap":
        lo, hi = self.inv_bounds
        return InverseDepthMap(np.clip(self.values, lo, hi), self.valid.copy(), self.z_min, self.z_max)

    def to_depth(self) -> np.ndarray:
        """Metric depth in meters; invalid pixels become NaN."""
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = np.where(self.valid & (self.values > 0), 1.0 / self.values, np.nan)
        return depth

    @classmethod
    def from_depth(
        cls,
        depth: np.ndarray,
        z_min: float = DEFAULT_Z_MIN,
        z_max: float = DEFAULT_Z_MAX,
        clamp: bool = False,
    ) -> "InverseDepthMap":
        depth = np.asarray(depth, dtype=float)
        valid = np.isfinite(depth) & (depth > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            values = np.where(valid, 1.0 / depth, 0.0)
        imap = cls(values, valid, z_min, z_max)
        return imap.clamped() if clamp else imap

    def check_bounds(self, atol: float = 1e-12) -> bool:
        lo, hi = self.inv_bounds
        vals = self.values[self.valid]
        return bool(vals.size == 0 or (vals.min() >= lo - atol and vals.max() <= hi + atol))


def points_to_arrays(points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split sparse points into (u, v, depth) arrays."""
    u = np.array([p.u for p in points], dtype=float)
    v = np.array([p.v for p in points], dtype=float)
    d = np.array([p.depth for p in points], dtype=float)
    return u, v, d
