"""Multi-view iterative per-pixel scale refinement.

Works at stride-4 feature resolution: reference descriptors are warped into
the target view through the current inverse depth, a cosine dissimilarity
cost is computed per pixel, and a bounded multiplicative correction is
applied and clamped. The update operator is an interface; the deterministic
baseline searches a fixed candidate set and favors the identity on ties.
Learned encoders/update heads can be dropped in behind the same contracts
(stride 4, corrections in [0.5, 1.5], cost recomputed every iteration).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .depthmap import InverseDepthMap
from .errors import DimensionMismatch, EmptyImage, NoReferences
from .geometry import CameraIntrinsics, Extrinsics, Pose, warp_coordinates

STRIDE = 4
# multiplicative scale candidates, log-symmetric about 1 so the search has no
# directional bias; all inside the (0.5, 1.5] update contract. The two inner
# candidates keep the search from quantizing at the 10% step, which freezes
# convergence once the residual error drops below one step.
CANDIDATES = (0.667, 0.8, 0.9, 0.95, 1.0, 1.05, 1.1, 1.25, 1.5)
CORRECTION_RANGE = (0.5, 1.5)
UNCERTAINTY_EPS = 1e-6


@dataclass
class FeatureMap:
    """Stride-4 descriptor grid; channels are standardized over valid cells."""

    values: np.ndarray  # (Hc, Wc, C)
    stride: int = STRIDE
    valid: np.ndarray | None = None  # cells fully inside the unpadded image

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.values.shape[:2], dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass
class CostMap:
    """Per-pixel multi-view dissimilarity in [0, 2]; masked entries are zero.

    ``ref_count`` records how many references contributed per pixel; costs
    built from fewer references carry a small systematic bias (interpolation
    attenuation no longer averages out), which robust consumers may want to
    exclude.
    """

    values: np.ndarray  # (Hc, Wc)
    valid: np.ndarray  # (Hc, Wc) bool
    ref_count: np.ndarray | None = None  # (Hc, Wc) int
    n_references: int = 0


@dataclass
class UncertaintyMap:
    """Per-pixel log-variance of the predicted depth."""

    log_variance: np.ndarray

    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)


@dataclass
class RefinementState:
    z_inv: np.ndarray  # (Hc, Wc), 1/meters, always inside clamp bounds
    iteration: int = 0
    last_correction: np.ndarray | None = None  # per-pixel multiplicative factor
    last_choice: np.ndarray | None = None  # index into CANDIDATES
    inv_bounds: tuple[float, float] = (1.0 / 8.0, 1.0 / 0.1)


def _pad_to_stride(image: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    h, w = image.shape
    ph = (-h) % stride
    pw = (-w) % stride
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)), mode="edge")
    return image


def block_pool(image: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    """Average-pool with edge padding to a multiple of the stride."""
    img = _pad_to_stride(np.asarray(image, dtype=float), stride)
    h, w = img.shape
    return img.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))


def feature_intrinsics(intr: CameraIntrinsics, shape: tuple[int, int], stride: int = STRIDE) -> CameraIntrinsics:
    """Intrinsics of the pooled grid: cell j is centered on source pixel stride*j + (stride-1)/2."""
    off = (stride - 1) / 2.0
    return CameraIntrinsics(
        intr.fx / stride,
        intr.fy / stride,
        (intr.cx - off) / stride,
        (intr.cy - off) / stride,
        shape[1],
        shape[0],
    )


def extract_features(image: np.ndarray, standardize: bool = True) -> FeatureMap:
    """Stride-4 descriptor: pooled intensity plus horizontal/vertical gradients.

    Each channel is standardized to zero mean and unit variance over valid
    cells; a zero-variance channel maps to zeros.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise EmptyImage(f"expected a non-empty 2D grayscale image, got shape {image.shape}")
    h, w = image.shape
    pooled = block_pool(image)
    dy, dx = np.gradient(pooled)
    channels = np.stack([pooled, dx, dy], axis=-1)

    hc, wc = pooled.shape
    valid = np.ones((hc, wc), dtype=bool)
    if h % STRIDE:
        valid[h // STRIDE:, :] = False
    if w % STRIDE:
        valid[:, w // STRIDE:] = False

    if standardize:
        flat = channels[valid]
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        channels = (channels - mean) / std
        dead = flat.std(axis=0) <= 1e-12
        channels[..., dead] = 0.0
    return FeatureMap(channels, STRIDE, valid)


def bilinear_sample(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) data at float (…, 2) uv coordinates, zero outside."""
    h, w = grid.shape[:2]
    u = coords[..., 0]
    v = coords[..., 1]
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = u - u0
    fv = v - v0
    u0c = np.clip(u0, 0, w - 1)
    u1c = np.clip(u0 + 1, 0, w - 1)
    v0c = np.clip(v0, 0, h - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)
    inb = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    wu = fu[..., None] if grid.ndim == 3 else fu
    wv = fv[..., None] if grid.ndim == 3 else fv
    out = (
        grid[v0c, u0c] * (1 - wu) * (1 - wv)
        + grid[v0c, u1c] * wu * (1 - wv)
        + grid[v1c, u0c] * (1 - wu) * wv
        + grid[v1c, u1c] * wu * wv
    )
    out = np.where(inb[..., None] if grid.ndim == 3 else inb, out, 0.0)
    return out


def compute_cost(
    f_t: FeatureMap,
    f_refs: list[FeatureMap],
    z_inv: np.ndarray,
    pose_target: Pose,
    pose_refs: list[Pose],
    ext: Extrinsics,
    intr: CameraIntrinsics,
) -> CostMap:
    """Average cosine-dissimilarity against all warped references.

    ``z_inv`` must already live at feature resolution; ``intr`` is the
    native-resolution calibration. Per reference, the cost is
    (1 - cos(F_t, warp(F_r))) with bilinear descriptor sampling, masked to
    zero where the warp is invalid; the output averages over references.
    """
    if not f_refs:
        raise NoReferences("cost computation needs at least one reference")
    if len(f_refs) != len(pose_refs):
        raise ValueError("one pose per reference feature map required")
    z_vals = getattr(z_inv, "values", z_inv)
    z_vals = np.asarray(z_vals, dtype=float)
    if z_vals.shape != f_t.shape:
        raise DimensionMismatch(f"inverse depth {z_vals.shape} vs features {f_t.shape}")
    intr_c = feature_intrinsics(intr, f_t.shape, f_t.stride)

    ft_norm = np.linalg.norm(f_t.values, axis=-1)
    total = np.zeros(f_t.shape)
    counts = np.zeros(f_t.shape)
    for f_r, pose_r in zip(f_refs, pose_refs):
        coords, mask = warp_coordinates(z_vals, pose_target, pose_r, ext, intr_c)
        warped = bilinear_sample(f_r.values, coords)
        wn = np.linalg.norm(warped, axis=-1)
        denom = np.maximum(ft_norm * wn, 1e-12)
        cos = np.einsum("...c,...c->...", f_t.values, warped) / denom
        total += np.where(mask, 1.0 - cos, 0.0)
        counts += mask
    # average over the references that actually see the pixel; dividing by the
    # full reference count would reward hypotheses that warp out of bounds
    any_valid = counts > 0
    values = np.where(any_valid, total / np.maximum(counts, 1.0), 0.0)
    return CostMap(values, any_valid, counts.astype(int), len(f_refs))


class UpdateOperator:
    """Interface for the per-iteration scale update.

    Implementations must produce per-pixel multiplicative corrections inside
    CORRECTION_RANGE and may consult the scaffold prior.
    """

    implementation_id = "abstract"

    def step(self, state: RefinementState, cost_fn, scaffold: np.ndarray | None) -> RefinementState:
        raise NotImplementedError


class CandidateSearchOperator(UpdateOperator):
    """Deterministic baseline: per-pixel argmin over a fixed candidate set.

    Per-candidate cost maps are aggregated over a small neighborhood before
    comparison (single-cell cosine costs are too noisy to rank 10% scale
    steps), a candidate must beat the identity by ``identity_margin`` to be
    accepted, and the chosen log-scale field is box-filtered
    (radius ``smooth_radius``) for spatial coherence. Exact ties fall back to
    the identity.
    """

    implementation_id = "candidate-search"

    def __init__(
        self,
        candidates=CANDIDATES,
        smooth_radius: int = 2,
        aggregate_radius: int = 2,
        identity_margin: float = 4e-3,
    ):
        self.candidates = tuple(candidates)
        self.smooth_radius = smooth_radius
        self.aggregate_radius = aggregate_radius
        self.identity_margin = identity_margin
        if any(not CORRECTION_RANGE[0] <= c <= CORRECTION_RANGE[1] for c in self.candidates):
            raise ValueError("candidates must lie inside the correction range")
        if 1.0 not in self.candidates:
            raise ValueError("the identity candidate is required for tie-breaking")

    def _aggregate(self, cmap: CostMap) -> np.ndarray:
        full = cmap.valid
        if cmap.ref_count is not None and cmap.n_references:
            # partially-visible pixels carry a reference-dependent bias
            full = full & (cmap.ref_count == cmap.n_references)
        if self.aggregate_radius <= 0:
            return np.where(full, cmap.values, np.inf)
        size = 2 * self.aggregate_radius + 1
        weights = ndimage.uniform_filter(full.astype(float), size=size, mode="nearest")
        sums = ndimage.uniform_filter(np.where(full, cmap.values, 0.0), size=size, mode="nearest")
        agg = np.where(weights > 1e-9, sums / np.maximum(weights, 1e-12), np.inf)
        return np.where(full, agg, np.inf)

    def step(self, state: RefinementState, cost_fn, scaffold=None) -> RefinementState:
        stack = np.stack([self._aggregate(cost_fn(cand)) for cand in self.candidates])
        idx_identity = self.candidates.index(1.0)
        best = stack.min(axis=0)
        choice = stack.argmin(axis=0)
        # later iterations demand stronger evidence; most of the correction
        # happens in the first step and the deadband keeps refinement from
        # wandering once converged
        margin = self.identity_margin * (1 + state.iteration)
        keep_identity = stack[idx_identity] <= best + margin
        choice = np.where(keep_identity, idx_identity, choice)
        # candidates are only comparable where every hypothesis has a valid,
        # fully-visible cost; near image borders the extreme scales warp out
        # of view and would win by default otherwise
        comparable = np.isfinite(stack).all(axis=0)
        choice = np.where(comparable, choice, idx_identity)

        log_scale = np.log(np.array(self.candidates))[choice]
        log_scale = ndimage.median_filter(log_scale, size=3, mode="nearest")
        size = 2 * self.smooth_radius + 1
        log_scale = ndimage.uniform_filter(log_scale, size=size, mode="nearest")
        correction = np.exp(log_scale)

        lo, hi = state.inv_bounds
        return RefinementState(
            z_inv=np.clip(state.z_inv * correction, lo, hi),
            iteration=state.iteration + 1,
            last_correction=correction,
            last_choice=choice,
            inv_bounds=state.inv_bounds,
        )


def baseline_update(state: RefinementState, cost_fn, scaffold=None) -> RefinementState:
    """One step of the default candidate-search operator."""
    return CandidateSearchOperator().step(state, cost_fn, scaffold)


def estimate_uncertainty(cost: CostMap, residual_scale_mag: np.ndarray, alpha: float = 1.0, beta: float = 1.0) -> UncertaintyMap:
    """Log-variance heuristic: log(alpha*cost + beta*|log last correction| + eps).

    Monotone non-decreasing in the cost; zero cost and zero residual map to
    log(eps).
    """
    resid = np.asarray(residual_scale_mag, dtype=float)
    return UncertaintyMap(np.log(alpha * cost.values + beta * resid + UNCERTAINTY_EPS))


def _upsample(grid: np.ndarray, out_shape: tuple[int, int], order: int) -> np.ndarray:
    up = ndimage.zoom(grid, STRIDE, order=order, mode="nearest", grid_mode=True)
    return up[: out_shape[0], : out_shape[1]]


def refine(
    target_image: np.ndarray,
    ref_images: list[np.ndarray],
    z_ga: InverseDepthMap,
    scaffold,
    pose_target: Pose,
    pose_refs: list[Pose],
    ext: Extrinsics,
    intr: CameraIntrinsics,
    op: UpdateOperator | None = None,
    iters: int = 3,
    history: list | None = None,
) -> tuple[InverseDepthMap, UncertaintyMap]:
    """Iteratively refine a globally aligned inverse depth map.

    The initial state multiplies the (pooled) aligned map by the scaffold's
    raw scale values clamped to the correction range; each iteration
    recomputes the warp cost and applies a bounded multiplicative update.
    The final inverse depth is bicubically upsampled to native resolution and
    clamped; the uncertainty map tracks the final cost and last correction.
    When ``history`` is given, the feature-resolution inverse depth after the
    init and after each iteration is appended to it.
    """
    if iters < 0:
        raise ValueError("iteration count must be >= 0")
    if op is None:
        op = CandidateSearchOperator()
    f_t = extract_features(target_image)
    f_refs = [extract_features(img) for img in ref_images]
    if len(f_refs) != len(pose_refs):
        raise ValueError("one pose per reference image required")

    z0 = block_pool(z_ga.values)
    lo, hi = z_ga.inv_bounds
    if scaffold is not None:
        raw = scaffold.raw if hasattr(scaffold, "raw") else np.asarray(scaffold, dtype=float)
        init_scale = np.clip(block_pool(raw), *CORRECTION_RANGE)
        z0 = z0 * init_scale
    z0 = np.clip(z0, lo, hi)
    state = RefinementState(z_inv=z0, inv_bounds=(lo, hi))
    if history is not None:
        history.append(state.z_inv.copy())

    scaffold_pooled = None
    if scaffold is not None and hasattr(scaffold, "values"):
        scaffold_pooled = block_pool(scaffold.values)

    def make_cost_fn(current):
        def cost_fn(candidate: float) -> CostMap:
            z_c = np.clip(current * candidate, lo, hi)
            return compute_cost(f_t, f_refs, z_c, pose_target, pose_refs, ext, intr)

        return cost_fn

    for _ in range(iters):
        state = op.step(state, make_cost_fn(state.z_inv), scaffold_pooled)
        if state.last_correction is not None:
            c = state.last_correction
            if c.min() < CORRECTION_RANGE[0] - 1e-9 or c.max() > CORRECTION_RANGE[1] + 1e-9:
                raise ValueError("update operator violated the correction range contract")
        if history is not None:
            history.append(state.z_inv.copy())

    final_cost = compute_cost(f_t, f_refs, state.z_inv, pose_target, pose_refs, ext, intr)
    last = state.last_correction if state.last_correction is not None else np.ones_like(state.z_inv)
    unc_c = estimate_uncertainty(final_cost, np.abs(np.log(last)))

    native = np.clip(_upsample(state.z_inv, z_ga.shape, order=3), lo, hi)
    unc_native = _upsample(unc_c.log_variance, z_ga.shape, order=1)
    out = InverseDepthMap(native, np.ones(z_ga.shape, dtype=bool), z_ga.z_min, z_ga.z_max)
    return out, UncertaintyMap(unc_native)
