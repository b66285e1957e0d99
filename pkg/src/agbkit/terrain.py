"""Ground classification, terrain/surface models, and height normalization.

Ground points are extracted from the sparse LiDAR cloud by progressive TIN
densification: seed with the lowest point per coarse grid cell, then grow the
terrain TIN by accepting points that sit close to the facet below them both
in vertical distance and in the angles subtended to the facet vertices.
The DTM is a TIN-linear sampling of the accepted ground points; the CHM takes
the per-cell maximum of normalized heights and fills empty cells with Sibson
natural-neighbor interpolation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .cloud import BoundingBox, PointCloud, Source
from .errors import (
    EmptyOutputError,
    InsufficientSeedsError,
    TriangulationError,
    ValidationError,
)
from .grid import Raster

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundFilterParams:
    """Progressive densification thresholds; conventional forest defaults."""

    seed_cell_size: float = 20.0
    max_tin_distance: float = 1.0
    max_tin_angle: float = 20.0
    max_iterations: int = 20

    def __post_init__(self):
        if min(self.seed_cell_size, self.max_tin_distance, self.max_tin_angle) <= 0:
            raise ValidationError("ground filter parameters must be positive")
        if self.max_tin_angle >= 90:
            raise ValidationError("max_tin_angle must be below 90 degrees")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")


class TriangulatedSurface:
    """A 2.5D Delaunay TIN with point location and linear interpolation."""

    def __init__(self, vertices: np.ndarray):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if len(vertices) < 3:
            raise TriangulationError(f"need at least 3 vertices, got {len(vertices)}")
        try:
            self._delaunay = Delaunay(vertices[:, :2])
        except Exception as exc:  # qhull reports degeneracy via QhullError
            raise TriangulationError(f"triangulation failed: {exc}") from exc
        if self._delaunay.simplices.size == 0:
            raise TriangulationError("vertices are collinear; no triangles produced")
        self.vertices = vertices

    @property
    def triangles(self) -> np.ndarray:
        return self._delaunay.simplices

    def locate(self, xy: np.ndarray) -> np.ndarray:
        """Containing-triangle index per query, -1 outside the hull."""
        return self._delaunay.find_simplex(np.atleast_2d(xy))

    def interpolate(self, xy: np.ndarray) -> np.ndarray:
        """Barycentric (TIN-linear) elevation; NaN outside the hull."""
        xy = np.atleast_2d(xy)
        simplex = self._delaunay.find_simplex(xy)
        out = np.full(len(xy), np.nan)
        ok = simplex >= 0
        if not ok.any():
            return out
        transform = self._delaunay.transform[simplex[ok]]
        bary2 = np.einsum("ijk,ik->ij", transform[:, :2], xy[ok] - transform[:, 2])
        bary = np.column_stack([bary2, 1.0 - bary2.sum(axis=1)])
        verts = self._delaunay.simplices[simplex[ok]]
        out[ok] = np.einsum("ij,ij->i", bary, self.vertices[verts, 2])
        return out

    def vertical_and_plane_offsets(self, points: np.ndarray):
        """Per point: (vertical offset to facet, worst angle to facet vertices).

        Points outside the hull get NaN. The angle is the largest angle
        between the facet plane and the line from the point to each facet
        vertex, in degrees.
        """
        points = np.atleast_2d(points)
        simplex = self._delaunay.find_simplex(points[:, :2])
        dz = np.full(len(points), np.nan)
        angle = np.full(len(points), np.nan)
        ok = simplex >= 0
        if not ok.any():
            return dz, angle
        tri_pts = self.vertices[self._delaunay.simplices[simplex[ok]]]  # (m, 3, 3)
        p = points[ok]
        # facet plane through the 3 vertices
        edge1 = tri_pts[:, 1] - tri_pts[:, 0]
        edge2 = tri_pts[:, 2] - tri_pts[:, 0]
        normal = np.cross(edge1, edge2)
        norm_len = np.linalg.norm(normal, axis=1)
        norm_len[norm_len == 0] = np.nan
        unit_n = normal / norm_len[:, None]
        rel = p - tri_pts[:, 0]
        plane_dist = np.abs(np.einsum("ij,ij->i", rel, unit_n))
        # vertical offset: z minus the plane elevation under the point
        nz = unit_n[:, 2]
        with np.errstate(invalid="ignore", divide="ignore"):
            dz[ok] = np.where(np.abs(nz) > 1e-12, plane_dist / np.abs(nz), np.inf)
        # angle to each vertex: asin(plane distance / distance to vertex)
        vert_dist = np.linalg.norm(p[:, None, :] - tri_pts, axis=2)
        nearest = vert_dist.min(axis=1)
        ratio = np.clip(np.where(nearest > 1e-12, plane_dist / nearest, 0.0), 0.0, 1.0)
        angle[ok] = np.degrees(np.arcsin(ratio))
        return dz, angle


def _seed_points(cloud: PointCloud, cell: float) -> np.ndarray:
    """Index of the lowest point per seed-grid cell."""
    mn = cloud.bounds.min_array
    col = np.floor((cloud.xyz[:, 0] - mn[0]) / cell).astype(np.int64)
    row = np.floor((cloud.xyz[:, 1] - mn[1]) / cell).astype(np.int64)
    key = row * (col.max() + 1) + col
    order = np.lexsort((cloud.xyz[:, 2], key))
    sorted_keys = key[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_keys[1:] != sorted_keys[:-1]
    return order[first]


def ground_mask(cloud: PointCloud, params: GroundFilterParams = GroundFilterParams()) -> np.ndarray:
    """Boolean ground-classification mask, in input point order."""
    if len(cloud) == 0:
        raise InsufficientSeedsError("cannot filter an empty cloud")
    if cloud.source is not Source.LIDAR:
        log.warning("ground filtering a non-LiDAR cloud (%s)", cloud.source.value)
    seeds = _seed_points(cloud, params.seed_cell_size)
    if len(seeds) < 3:
        raise InsufficientSeedsError(
            f"only {len(seeds)} seed cells; need at least 3"
        )
    is_ground = np.zeros(len(cloud), dtype=bool)
    is_ground[seeds] = True

    # virtual border vertices keep the TIN hull covering the full footprint
    # (points near the edge would otherwise never locate a facet); their
    # elevation is refreshed every iteration from the nearest accepted ground
    # point, and they are never classified ground themselves
    mn, mx = cloud.bounds.min_array, cloud.bounds.max_array
    xs = np.linspace(mn[0], mx[0], max(int(np.ceil((mx[0] - mn[0]) / params.seed_cell_size)), 1) + 1)
    ys = np.linspace(mn[1], mx[1], max(int(np.ceil((mx[1] - mn[1]) / params.seed_cell_size)), 1) + 1)
    border_xy = np.vstack([
        np.column_stack([xs, np.full_like(xs, mn[1])]),
        np.column_stack([xs, np.full_like(xs, mx[1])]),
        np.column_stack([np.full_like(ys[1:-1], mn[0]), ys[1:-1]]),
        np.column_stack([np.full_like(ys[1:-1], mx[0]), ys[1:-1]]),
    ])

    for _ in range(params.max_iterations):
        accepted = cloud.xyz[is_ground]
        _, nearest = cKDTree(accepted[:, :2]).query(border_xy)
        corners = np.column_stack([border_xy, accepted[nearest, 2]])
        vertices = np.vstack([accepted, corners])
        tin = TriangulatedSurface(vertices)
        candidates = np.flatnonzero(~is_ground)
        if len(candidates) == 0:
            break
        dz, angle = tin.vertical_and_plane_offsets(cloud.xyz[candidates])
        accept = (
            np.isfinite(dz)
            & (dz <= params.max_tin_distance)
            & (angle <= params.max_tin_angle)
        )
        if not accept.any():
            break
        is_ground[candidates[accept]] = True
    return is_ground


def filter_ground(
    cloud: PointCloud, params: GroundFilterParams = GroundFilterParams()
) -> PointCloud:
    """Ground subset of the cloud (input order preserved, flags set)."""
    mask = ground_mask(cloud, params)
    subset = cloud.take(np.flatnonzero(mask))
    return subset.with_ground(np.ones(len(subset), dtype=bool))


def _grid_for_bounds(bounds: BoundingBox, cell: float):
    mn, mx = bounds.min_array, bounds.max_array
    ncols = max(int(math.ceil((mx[0] - mn[0]) / cell - 1e-12)), 1)
    nrows = max(int(math.ceil((mx[1] - mn[1]) / cell - 1e-12)), 1)
    origin_x = mn[0]
    origin_y = mn[1] + nrows * cell
    return origin_x, origin_y, nrows, ncols


def build_dtm(ground: PointCloud, cell_size: float = 0.5,
              nodata: float = -9999.0) -> Raster:
    """Terrain raster by TIN-linear interpolation of the ground points.

    Cell values are sampled at cell centers; cells outside the ground-point
    convex hull carry nodata.
    """
    if cell_size <= 0:
        raise ValidationError("cell_size must be positive")
    tin = TriangulatedSurface(ground.xyz)
    origin_x, origin_y, nrows, ncols = _grid_for_bounds(ground.bounds, cell_size)
    xs = origin_x + (np.arange(ncols) + 0.5) * cell_size
    ys = origin_y - (np.arange(nrows) + 0.5) * cell_size
    gx, gy = np.meshgrid(xs, ys)
    z = tin.interpolate(np.column_stack([gx.ravel(), gy.ravel()]))
    z = np.where(np.isnan(z), nodata, z).reshape(nrows, ncols)
    return Raster(origin_x, origin_y, cell_size, {"elevation": z}, nodata)


def _bilinear(raster: Raster, band: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear sample of the four surrounding cell centers.

    Returns (values, valid); queries whose four neighbors are not all valid
    in-grid cells are flagged invalid.
    """
    gx = (x - raster.origin_x) / raster.cell_size - 0.5
    gy = (raster.origin_y - y) / raster.cell_size - 0.5
    col0 = np.floor(gx).astype(int)
    row0 = np.floor(gy).astype(int)
    fx = gx - col0
    fy = gy - row0
    valid = (
        (col0 >= 0) & (col0 + 1 < raster.ncols)
        & (row0 >= 0) & (row0 + 1 < raster.nrows)
    )
    values = np.full(len(x), np.nan)
    if not valid.any():
        return values, valid
    r0, c0 = row0[valid], col0[valid]
    q11 = band[r0, c0]
    q12 = band[r0, c0 + 1]
    q21 = band[r0 + 1, c0]
    q22 = band[r0 + 1, c0 + 1]
    corners_ok = (
        (q11 != raster.nodata) & (q12 != raster.nodata)
        & (q21 != raster.nodata) & (q22 != raster.nodata)
    )
    wx, wy = fx[valid], fy[valid]
    interp = (
        q11 * (1 - wx) * (1 - wy)
        + q12 * wx * (1 - wy)
        + q21 * (1 - wx) * wy
        + q22 * wx * wy
    )
    out = np.where(corners_ok, interp, np.nan)
    values[valid] = out
    valid = valid.copy()
    valid[np.flatnonzero(valid)] = corners_ok
    return values, valid


def normalize_cloud(dap: PointCloud, dtm: Raster) -> tuple[PointCloud, int]:
    """Replace each z by height above the DTM (bilinear); clamp negatives to 0.

    Points over nodata terrain (or off the DTM's center lattice) are dropped;
    returns the normalized cloud and the dropped-point count.
    """
    band = dtm.band()
    terrain, valid = _bilinear(dtm, band, dap.xyz[:, 0], dap.xyz[:, 1])
    dropped = int((~valid).sum())
    if not valid.any():
        raise EmptyOutputError("DTM has no valid terrain under any point")
    kept = dap.take(np.flatnonzero(valid))
    heights = np.maximum(kept.xyz[:, 2] - terrain[valid], 0.0)
    normalized = kept.with_xyz(
        np.column_stack([kept.xyz[:, 0], kept.xyz[:, 1], heights])
    )
    return normalized, dropped


def build_dsm(cloud: PointCloud, cell_size: float = 0.1,
              nodata: float = -9999.0) -> Raster:
    """Per-cell maximum of raw elevations; empty cells carry nodata."""
    if cell_size <= 0:
        raise ValidationError("cell_size must be positive")
    if len(cloud) == 0:
        raise EmptyOutputError("cannot rasterize an empty cloud")
    origin_x, origin_y, nrows, ncols = _grid_for_bounds(cloud.bounds, cell_size)
    col = np.minimum(
        np.floor((cloud.xyz[:, 0] - origin_x) / cell_size).astype(int), ncols - 1
    )
    row = np.minimum(
        np.floor((origin_y - cloud.xyz[:, 1]) / cell_size).astype(int), nrows - 1
    )
    row = np.maximum(row, 0)
    surf = np.full(nrows * ncols, -np.inf)
    np.maximum.at(surf, row * ncols + col, cloud.xyz[:, 2])
    surf = np.where(np.isfinite(surf), surf, nodata).reshape(nrows, ncols)
    return Raster(origin_x, origin_y, cell_size, {"elevation": surf}, nodata)


def build_chm(normalized: PointCloud, cell_size: float = 0.1,
              nodata: float = -9999.0) -> Raster:
    """Canopy height raster: per-cell max height, Sibson fill, clamp at 0.

    Cells without points inside the occupied-cell convex hull are filled by
    natural-neighbor interpolation of the occupied cell centers; cells outside
    that hull carry nodata. With fewer than 3 occupied cells interpolation is
    impossible: the occupied cells are returned as-is with a warning.
    """
    if cell_size <= 0:
        raise ValidationError("cell_size must be positive")
    if len(normalized) == 0:
        raise EmptyOutputError("cannot rasterize an empty cloud")
    origin_x, origin_y, nrows, ncols = _grid_for_bounds(normalized.bounds, cell_size)
    col = np.minimum(
        np.floor((normalized.xyz[:, 0] - origin_x) / cell_size).astype(int), ncols - 1
    )
    row = np.minimum(
        np.floor((origin_y - normalized.xyz[:, 1]) / cell_size).astype(int), nrows - 1
    )
    row = np.maximum(row, 0)
    heights = np.full(nrows * ncols, -np.inf)
    np.maximum.at(heights, row * ncols + col, normalized.xyz[:, 2])
    heights = heights.reshape(nrows, ncols)
    occupied = np.isfinite(heights)
    values = np.where(occupied, np.maximum(heights, 0.0), nodata)

    n_occupied = int(occupied.sum())
    if n_occupied < 3:
        log.warning(
            "only %d occupied CHM cells; skipping natural-neighbor fill", n_occupied
        )
        return Raster(origin_x, origin_y, cell_size, {"height": values}, nodata)

    rows_occ, cols_occ = np.nonzero(occupied)
    sites = np.column_stack([
        origin_x + (cols_occ + 0.5) * cell_size,
        origin_y - (rows_occ + 0.5) * cell_size,
    ])
    site_values = heights[rows_occ, cols_occ]
    rows_empty, cols_empty = np.nonzero(~occupied)
    if len(rows_empty):
        queries = np.column_stack([
            origin_x + (cols_empty + 0.5) * cell_size,
            origin_y - (rows_empty + 0.5) * cell_size,
        ])
        try:
            interpolator = SibsonInterpolator(sites, site_values)
        except TriangulationError:
            log.warning("occupied cells are collinear; skipping natural-neighbor fill")
            return Raster(origin_x, origin_y, cell_size, {"height": values}, nodata)
        filled = interpolator.interpolate(queries)
        ok = ~np.isnan(filled)
        values[rows_empty[ok], cols_empty[ok]] = np.maximum(filled[ok], 0.0)
    return Raster(origin_x, origin_y, cell_size, {"height": values}, nodata)


# ---------------------------------------------------------------------------
# Sibson natural-neighbor interpolation
# ---------------------------------------------------------------------------


def _clip_halfplane(poly: np.ndarray, point: np.ndarray, direction: np.ndarray):
    """Keep the part of a convex polygon with dot(x - point, direction) <= 0."""
    if len(poly) == 0:
        return poly
    side = (poly - point) @ direction
    keep = side <= 0
    if keep.all():
        return poly
    if not keep.any():
        return poly[:0]
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        if keep[i]:
            out.append(poly[i])
        if keep[i] != keep[j]:
            t = side[i] / (side[i] - side[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.array(out)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


class SibsonInterpolator:
    """Exact Sibson (natural-neighbor) interpolation over scattered 2D sites.

    For a query q inside the site hull, inserting q into the Voronoi diagram
    steals area from the cells of its natural neighbors; the Sibson weight of
    neighbor i is the stolen area. Cells are built directly from bisector
    half-planes, so the weights are exact up to floating point and sum to the
    area of q's new cell.
    """

    def __init__(self, sites: np.ndarray, values: np.ndarray):
        self.sites = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(self.sites) != len(self.values):
            raise ValidationError("sites and values must have equal length")
        if len(self.sites) < 3:
            raise TriangulationError("Sibson interpolation needs at least 3 sites")
        try:
            self._tri = Delaunay(self.sites)
        except Exception as exc:
            raise TriangulationError(f"site triangulation failed: {exc}") from exc
        if self._tri.simplices.size == 0:
            raise TriangulationError("sites are collinear")
        pts = self.sites[self._tri.simplices]
        self._circumcenters, self._circumradii2 = _circumcircles(pts)
        indptr, indices = self._tri.vertex_neighbor_vertices
        self._neighbor_indptr = indptr
        self._neighbor_indices = indices
        span = self.sites.max(axis=0) - self.sites.min(axis=0)
        self._box_half = float(max(span.max(), 1.0)) * 4.0

    def _cavity(self, q: np.ndarray, start: int) -> set[int]:
        """Triangles whose circumcircle contains q, by BFS from ``start``."""
        seen = {start}
        stack = [start]
        cavity = set()
        while stack:
            t = stack.pop()
            d2 = float(np.sum((q - self._circumcenters[t]) ** 2))
            if d2 <= self._circumradii2[t] * (1.0 + 1e-9) + 1e-12:
                cavity.add(t)
                for nb in self._tri.neighbors[t]:
                    if nb >= 0 and nb not in seen:
                        seen.add(nb)
                        stack.append(nb)
        return cavity

    def weights_at(self, q) -> tuple[np.ndarray, np.ndarray, float]:
        """(site indices, stolen areas, area of q's inserted cell).

        Weight normalization is left to the caller so partition of unity
        (sum of stolen areas == cell area) stays checkable. Queries outside
        the hull return empty arrays and zero area.
        """
        q = np.asarray(q, dtype=np.float64).reshape(2)
        start = int(self._tri.find_simplex(q))
        if start < 0:
            return np.empty(0, dtype=int), np.empty(0), 0.0
        # coincident with a site: that site carries everything
        verts = self._tri.simplices[start]
        d2 = np.sum((self.sites[verts] - q) ** 2, axis=1)
        hit = np.argmin(d2)
        if d2[hit] < 1e-20:
            return np.array([verts[hit]]), np.array([1.0]), 1.0

        cavity = self._cavity(q, start)
        candidates: set[int] = set()
        for t in cavity:
            candidates.update(int(v) for v in self._tri.simplices[t])
        for v in list(candidates):
            lo, hi = self._neighbor_indptr[v], self._neighbor_indptr[v + 1]
            candidates.update(int(u) for u in self._neighbor_indices[lo:hi])
        cand = np.fromiter(candidates, dtype=int)

        h = self._box_half
        cell_q = np.array(
            [[q[0] - h, q[1] - h], [q[0] + h, q[1] - h],
             [q[0] + h, q[1] + h], [q[0] - h, q[1] + h]]
        )
        for i in cand:
            p = self.sites[i]
            cell_q = _clip_halfplane(cell_q, (q + p) / 2.0, p - q)
            if len(cell_q) == 0:
                break
        area_q = _polygon_area(cell_q)
        weights = np.zeros(len(cand))
        if area_q <= 0:
            return cand, weights, 0.0
        for idx, i in enumerate(cand):
            p = self.sites[i]
            piece = cell_q
            lo, hi = self._neighbor_indptr[i], self._neighbor_indptr[i + 1]
            for r in self._neighbor_indices[lo:hi]:
                other = self.sites[r]
                piece = _clip_halfplane(piece, (p + other) / 2.0, other - p)
                if len(piece) == 0:
                    break
            weights[idx] = _polygon_area(piece)
        return cand, weights, area_q

    def at(self, q) -> float:
        """Interpolated value at one query; NaN outside the site hull."""
        idx, w, area = self.weights_at(q)
        total = w.sum()
        if len(idx) == 0 or total <= 0:
            return float("nan")
        return float(np.dot(w, self.values[idx]) / total)

    def interpolate(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(queries)
        return np.array([self.at(q) for q in queries])


def _circumcircles(tri_pts: np.ndarray):
    """Circumcenter and squared circumradius per triangle (m, 3, 2)."""
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    ab = b - a
    ac = c - a
    d = 2.0 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
    d = np.where(np.abs(d) < 1e-300, np.nan, d)
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ac2 = np.einsum("ij,ij->i", ac, ac)
    ux = (ac[:, 1] * ab2 - ab[:, 1] * ac2) / d
    uy = (ab[:, 0] * ac2 - ac[:, 0] * ab2) / d
    centers = a + np.column_stack([ux, uy])
    radii2 = ux * ux + uy * uy
    bad = ~np.isfinite(radii2)
    if bad.any():
        centers[bad] = a[bad]
        radii2[bad] = np.inf  # degenerate sliver: treat as always-containing
    return centers, radii2
