"""Global translation estimation by 3D phase correlation, plus ICP refinement.

The spectral estimator works on voxelized density signals. For signals f and
g with g(x) = f(x - s), the normalized cross-power spectrum

    Q(k) = F(k) conj(G(k)) / |F(k) conj(G(k))|

has phase angle(Q(k)) = 2*pi*(k . s)/N, a linear function of frequency. The
translation that maps the moving signal onto the fixed one is t = -s, so the
fit solves angle(Q(k)) = -2*pi*(k . t)/N over low-frequency bins with a
random-sample consensus over 3-bin subsets, comparing residuals modulo 2*pi.
High-frequency bins, where detail mismatch between the two clouds lives, are
discarded before the fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import BoundingBox, PointCloud, VoxelSignal, voxelize
from .errors import (
    AgbkitError,
    DegenerateInputError,
    NoConsensusError,
    PairingFailureError,
    UndefinedCorrelationError,
    ValidationError,
)

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p' = R p + t with orthonormal R, det(R) = +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValidationError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValidationError("rotation matrix must have determinant +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.atleast_2d(xyz) @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """self after inner: (self . inner)(p) = self(inner(p))."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_identity(self, tol: float = 1e-12) -> bool:
        return (np.abs(self.rotation - np.eye(3)).max() <= tol
                and np.abs(self.translation).max() <= tol)


def save_transform(t: RigidTransform, path, comment: str = "") -> None:
    """Plain text: provenance comment, then 12 numbers (row-major R, then t)."""
    lines = []
    if comment:
        lines.append("# " + comment)
    for row in t.rotation:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append(" ".join(repr(float(v)) for v in t.translation))
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")


def load_transform(path) -> RigidTransform:
    from pathlib import Path

    numbers: list[float] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        numbers.extend(float(p) for p in line.split())
    if len(numbers) != 12:
        raise ValidationError(f"transform file must hold 12 numbers, found {len(numbers)}")
    arr = np.array(numbers)
    return RigidTransform(arr[:9].reshape(3, 3), arr[9:])


@dataclass(frozen=True)
class PhaseCorrelationResult:
    """Sub-voxel translation estimate from the spectral fit.

    shift is in meters and maps the moving signal onto the fixed one;
    inlier_fraction is the consensus share of candidate spectral bins;
    residual is the RMS wrapped-phase misfit (radians) on the inliers.
    """

    shift: tuple[float, float, float]
    voxel_size: float
    inlier_fraction: float
    residual: float

    def __post_init__(self):
        if not 0.0 <= self.inlier_fraction <= 1.0:
            raise ValidationError("inlier_fraction must lie in [0, 1]")
        object.__setattr__(self, "shift", tuple(float(v) for v in self.shift))

    @property
    def shift_array(self) -> np.ndarray:
        return np.array(self.shift, dtype=float)


@dataclass(frozen=True)
class RegistrationEvaluation:
    """Fit of extracted vs. measured heights: y = intercept + slope * x."""

    pearson_r: float
    r_squared: float
    rmse: float
    slope: float
    intercept: float
    n: int


def _wrap(phase: np.ndarray) -> np.ndarray:
    """Map angles to the principal interval (-pi, pi]."""
    return np.angle(np.exp(1j * phase))


def _principal_cells(t: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Resolve the modulo-N shift ambiguity to |t| <= N/2 per axis."""
    half = dims / 2.0
    return (t + half) % dims - half


def grpc_translation(
    fixed: VoxelSignal,
    moving: VoxelSignal,
    cutoff_fraction: float = 0.25,
    min_inlier_fraction: float = 0.25,
    *,
    magnitude_epsilon: float = 1e-12,
    ransac_iterations: int = 500,
    inlier_threshold: float = 0.15,
    seed: int = 0,
) -> PhaseCorrelationResult:
    """Estimate the 3D translation between two voxel signals.

    Procedure: forward FFT of both signals; normalized cross-power spectrum
    (bins below ``magnitude_epsilon`` excluded); keep bins with normalized
    frequency magnitude under ``cutoff_fraction`` of the Nyquist radius;
    robust linear phase fit by random-sample consensus over 3-bin subsets
    (wrapped residuals, threshold ``inlier_threshold`` rad, fixed seed); the
    consensus set is then refit by least squares. The integer-cell part of
    the shift is pre-located from the correlation peak of the band-limited
    spectrum and demodulated away so the linear fit only sees the wrap-free
    sub-voxel remainder.

    Raises NoConsensusError when the inlier fraction ends below
    ``min_inlier_fraction`` and DegenerateInputError for empty signals.
    """
    if not 0 < cutoff_fraction <= 1:
        raise ValidationError("cutoff_fraction must be in (0, 1]")
    if not 0 < min_inlier_fraction <= 1:
        raise ValidationError("min_inlier_fraction must be in (0, 1]")
    if fixed.voxel_size != moving.voxel_size:
        raise ValidationError("signals must share voxel_size")
    if fixed.dims != moving.dims:
        raise ValidationError(f"signals must share dims, got {fixed.dims} vs {moving.dims}")
    if fixed.total_mass == 0 or moving.total_mass == 0:
        raise DegenerateInputError("phase correlation needs nonzero mass in both signals")

    dims = np.array(fixed.dims)
    spec_fixed = np.fft.fftn(fixed.values)
    spec_moving = np.fft.fftn(moving.values)
    cross = spec_fixed * np.conj(spec_moving)
    mag = np.abs(cross)

    freqs = np.meshgrid(*(np.fft.fftfreq(n) for n in dims), indexing="ij")
    radius = np.sqrt(sum(f * f for f in freqs))
    band = (radius < 0.5 * cutoff_fraction) & (radius > 0) & (mag > magnitude_epsilon)
    n_candidates = int(band.sum())
    if n_candidates < 3:
        raise DegenerateInputError(
            f"only {n_candidates} usable low-frequency bins; need at least 3"
        )

    normalized = np.zeros_like(cross)
    normalized[band] = cross[band] / mag[band]

    # integer-cell pre-location: with angle(Q) = 2*pi*(k . s)/N the
    # band-limited correlation surface ifft(Q) peaks at -s mod N, which is
    # exactly the map-moving-onto-fixed shift t modulo the grid
    corr = np.real(np.fft.ifftn(normalized))
    peak = np.array(np.unravel_index(int(np.argmax(corr)), corr.shape), dtype=float)
    t_integer = _principal_cells(peak, dims)

    k = np.column_stack([f[band] for f in freqs])  # cycles per sample
    angles = np.angle(normalized[band])
    demodulated = _wrap(angles + 2.0 * np.pi * k @ t_integer)

    design = -2.0 * np.pi * k
    rng = np.random.default_rng(seed)
    best_inliers: np.ndarray | None = None
    best_count = -1
    for _ in range(ransac_iterations):
        pick = rng.choice(n_candidates, size=3, replace=False)
        a = design[pick]
        if abs(np.linalg.det(a)) < 1e-12:
            continue
        candidate = np.linalg.solve(a, demodulated[pick])
        residuals = _wrap(demodulated - design @ candidate)
        inliers = np.abs(residuals) <= inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None or best_count < 3:
        raise NoConsensusError("robust phase fit found no 3-bin consensus", 0.0)

    # refit on the consensus set; unwrap the targets toward the current model
    a_in = design[best_inliers]
    model, *_ = np.linalg.lstsq(a_in, demodulated[best_inliers], rcond=None)
    target = (a_in @ model) + _wrap(demodulated[best_inliers] - a_in @ model)
    delta, *_ = np.linalg.lstsq(a_in, target, rcond=None)
    residuals = _wrap(demodulated[best_inliers] - a_in @ delta)
    residual_rms = float(np.sqrt(np.mean(residuals ** 2)))
    inlier_fraction = best_count / n_candidates
    if inlier_fraction < min_inlier_fraction:
        raise NoConsensusError(
            f"inlier fraction {inlier_fraction:.3f} below {min_inlier_fraction}",
            inlier_fraction,
        )

    t_cells = _principal_cells(t_integer + delta, dims)
    shift = t_cells * fixed.voxel_size + (fixed.origin_array - moving.origin_array)
    return PhaseCorrelationResult(
        shift=tuple(shift),
        voxel_size=fixed.voxel_size,
        inlier_fraction=float(inlier_fraction),
        residual=residual_rms,
    )


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Map every point through the transform; attributes ride along."""
    if len(cloud) == 0:
        return cloud
    return cloud.with_xyz(t.apply(cloud.xyz))


def icp_refine(
    fixed: PointCloud,
    moving: PointCloud,
    init: RigidTransform | None = None,
    max_iter: int = 50,
    tol: float = 1e-4,
    max_pair_dist: float = 4.0,
) -> RigidTransform:
    """Point-to-point ICP with a closed-form SVD update per iteration.

    Pairs nearest neighbors within ``max_pair_dist``, estimates the rigid
    update from the cross-covariance SVD, and stops once the mean pair
    distance improves by less than ``tol`` (or would increase, or after
    ``max_iter`` rounds). The returned transform composes ``init`` with the
    refinement; accepted iterations never increase the mean pair distance.
    """
    if len(fixed) == 0 or len(moving) == 0:
        raise DegenerateInputError("ICP needs two non-empty clouds")
    if init is None:
        init = RigidTransform.identity()
    tree = cKDTree(fixed.xyz)
    current = init
    moved = init.apply(moving.xyz)
    prev_mean = math.inf
    for _ in range(max_iter):
        dist, idx = tree.query(moved, distance_upper_bound=max_pair_dist)
        valid = np.isfinite(dist)
        if not valid.any():
            raise PairingFailureError(
                f"no point pairs within {max_pair_dist} m", last_transform=current
            )
        mean_dist = float(dist[valid].mean())
        if mean_dist > prev_mean:
            break  # reject the last update's pairing regression; keep current
        if prev_mean - mean_dist < tol:
            break
        prev_mean = mean_dist
        src = moved[valid]
        dst = fixed.xyz[idx[valid]]
        centroid_src = src.mean(axis=0)
        centroid_dst = dst.mean(axis=0)
        h = (src - centroid_src).T @ (dst - centroid_dst)
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        trans = centroid_dst - rot @ centroid_src
        update = RigidTransform(rot, trans)
        current = update.compose(current)
        moved = update.apply(moved)
    return current


@dataclass(frozen=True)
class ScaleResult:
    """Per-scale outcome of multiscale registration (transform or error)."""

    transform: RigidTransform | None = None
    correlation: PhaseCorrelationResult | None = None
    error: AgbkitError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def register_multiscale(
    fixed: PointCloud,
    moving: PointCloud,
    scales: list[float],
    refine: bool = False,
    cutoff_fraction: float = 0.25,
    min_inlier_fraction: float = 0.25,
    icp_max_iter: int = 50,
    icp_tol: float = 1e-4,
    seed: int = 0,
    region: BoundingBox | None = None,
) -> dict[float, ScaleResult]:
    """Run GRPC (and optionally ICP) at every requested voxel scale.

    Both clouds are voxelized over ``region`` (their union by default) so the
    two signals share origin and dims; for partially overlapping inputs such
    as flight strips, pass the footprint intersection instead so shared
    content dominates the spectrum. Per-scale failures are captured in the
    result map without aborting the remaining scales. With ``refine``, ICP
    runs from the spectral estimate using a pairing distance of twice that
    scale.
    """
    if not scales:
        raise ValidationError("scales must be non-empty")
    if any(s <= 0 for s in scales):
        raise ValidationError("scales must be positive")
    if region is None:
        region = fixed.bounds.union(moving.bounds)
    results: dict[float, ScaleResult] = {}
    for scale in scales:
        try:
            sig_fixed = voxelize(fixed, scale, region)
            sig_moving = voxelize(moving, scale, region)
            pc = grpc_translation(
                sig_fixed, sig_moving,
                cutoff_fraction=cutoff_fraction,
                min_inlier_fraction=min_inlier_fraction,
                seed=seed,
            )
            transform = RigidTransform.from_translation(pc.shift_array)
            if refine:
                transform = icp_refine(
                    fixed, moving, transform,
                    max_iter=icp_max_iter, tol=icp_tol, max_pair_dist=2.0 * scale,
                )
            results[scale] = ScaleResult(transform=transform, correlation=pc)
        except AgbkitError as err:
            results[scale] = ScaleResult(error=err)
    return results


def evaluate_registration(
    extracted_heights, measured_heights
) -> RegistrationEvaluation:
    """Pearson correlation and OLS line of extracted against measured heights.

    Uses the standard Pearson definition
    r = (n sum(xy) - sum(x) sum(y)) / (sqrt(n sum(x^2) - sum(x)^2) * sqrt(n sum(y^2) - sum(y)^2)).
    """
    x = np.asarray(measured_heights, dtype=float)
    y = np.asarray(extracted_heights, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("height lists must be equal-length 1D sequences")
    n = len(x)
    if n < 3:
        raise ValidationError(f"need at least 3 height pairs, got {n}")
    sxx = n * np.sum(x * x) - np.sum(x) ** 2
    syy = n * np.sum(y * y) - np.sum(y) ** 2
    if sxx <= 0 or syy <= 0:
        raise UndefinedCorrelationError("zero variance in heights; correlation undefined")
    sxy = n * np.sum(x * y) - np.sum(x) * np.sum(y)
    r = float(sxy / (np.sqrt(sxx) * np.sqrt(syy)))
    slope = float(sxy / sxx)
    intercept = float(np.mean(y) - slope * np.mean(x))
    predicted = intercept + slope * x
    ss_res = float(np.sum((y - predicted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r_squared = 1.0 - ss_res / ss_tot
    rmse = float(np.sqrt(ss_res / n))
    return RegistrationEvaluation(
        pearson_r=r, r_squared=r_squared, rmse=rmse,
        slope=slope, intercept=intercept, n=n,
    )


def extract_crown_heights(
    normalized: PointCloud,
    crowns: list[np.ndarray],
    percentile: float = 99.0,
) -> np.ndarray:
    """Per-crown canopy height: the 99th-percentile normalized height inside
    each crown polygon (xy vertex ring). Crowns without samples yield NaN."""
    heights = np.full(len(crowns), np.nan)
    if len(normalized) == 0:
        return heights
    xy = normalized.xyz[:, :2]
    for i, ring in enumerate(crowns):
        if ring is None or len(ring) < 3:
            continue
        inside = points_in_polygon(xy, np.asarray(ring, dtype=float))
        if inside.any():
            heights[i] = float(np.percentile(normalized.xyz[inside, 2], percentile))
    return heights


def points_in_polygon(xy: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd ray casting; points on an edge count as inside."""
    x, y = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        crosses = ((y1 > y) != (y2 > y))
        if not crosses.any():
            continue
        x_cross = x1 + (y[crosses] - y1) * (x2 - x1) / (y2 - y1)
        sel = np.flatnonzero(crosses)
        inside[sel[x_cross >= x[crosses]]] ^= True
    return inside
