"""Deterministic synthetic forest scenes for end-to-end verification.

A scene is an analytic sinusoid terrain with planted cone-crown trees. The
photogrammetric cloud densely samples the visible surface only (canopy tops
and open ground) and carries a known rigid offset; the laser cloud sparsely
samples the full scene, penetrating the canopy to terrain. Band grids are
smooth functions of canopy height, and a chosen linear plot-AGB model is
emitted alongside so mapping can be checked against an exact oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .allometry import Species, TreeRecord, tree_agb, write_tree_records
from .cloud import CloudFormat, PointCloud, Source, save_cloud
from .config import PipelineConfig, PlotDefinition, write_config, write_plot_definitions
from .errors import ValidationError
from .grid import Raster, write_ascii_grid, write_band_manifest
from .metrics import SpectralBands
from .regression import LinearModel, write_model


@dataclass(frozen=True)
class SceneParams:
    extent: float = 200.0
    terrain_amplitude: float = 10.0
    terrain_period: float = 200.0
    base_elevation: float = 2500.0
    tree_count: int = 120
    height_min: float = 4.0
    height_max: float = 22.0
    crown_radius_ratio: float = 0.3
    crown_depth_ratio: float = 0.3
    dap_density: float = 42.45
    lidar_density: float = 0.627
    dap_noise: float = 0.05
    lidar_noise: float = 0.02
    canopy_ground_fraction: float = 0.5
    offset: tuple[float, float, float] = (5.0, -3.0, 1.2)
    lidar_strip_count: int = 1
    strip_overlap: float = 0.3
    strip_offset: tuple[float, float, float] = (0.8, -0.5, 0.3)
    plot_side: float = 30.0
    plot_margin: float = 10.0
    band_cell: float = 1.0

    def __post_init__(self):
        if self.extent <= 0 or self.tree_count < 0:
            raise ValidationError("extent must be positive and tree_count non-negative")
        if self.height_min <= 0 or self.height_max < self.height_min:
            raise ValidationError("tree height range must be positive and ordered")
        if self.lidar_strip_count < 1:
            raise ValidationError("need at least one LiDAR strip")


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    params: SceneParams
    dap: PointCloud                      # offset applied
    lidar: PointCloud                    # merged, true positions
    lidar_strips: tuple[PointCloud, ...]  # strip 0 is the reference frame
    lidar_is_ground: np.ndarray          # truth labels for the merged cloud
    lidar_true_height: np.ndarray        # height above terrain per merged point
    bands: SpectralBands
    trees: tuple[TreeRecord, ...]
    plots: tuple[PlotDefinition, ...]
    applied_offset: np.ndarray
    strip_offsets: tuple[tuple[float, float, float], ...]
    agb_model: LinearModel
    tree_positions: np.ndarray           # (n, 2) true stem xy
    tree_heights: np.ndarray             # (n,) true apex heights

    def terrain_elevation(self, x, y) -> np.ndarray:
        return _terrain(np.asarray(x, dtype=float), np.asarray(y, dtype=float), self.params)

    def canopy_height(self, x, y) -> np.ndarray:
        return _canopy_height(
            np.asarray(x, dtype=float), np.asarray(y, dtype=float),
            self.tree_positions, self.tree_heights, self.params,
        )

    def surface_elevation(self, x, y) -> np.ndarray:
        return self.terrain_elevation(x, y) + self.canopy_height(x, y)


def _terrain(x, y, p: SceneParams):
    w = 2.0 * math.pi / p.terrain_period
    return p.base_elevation + p.terrain_amplitude * np.sin(w * x) * np.cos(w * y)


def _canopy_height(x, y, positions, heights, p: SceneParams):
    """Upper canopy surface height above terrain: max over tree cones."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    surface = np.zeros(x.shape)
    for (tx, ty), h in zip(positions, heights):
        radius = p.crown_radius_ratio * h
        depth = p.crown_depth_ratio * h
        slope = depth / radius
        near = (np.abs(x - tx) <= radius) & (np.abs(y - ty) <= radius)
        if not near.any():
            continue
        r = np.hypot(x[near] - tx, y[near] - ty)
        cone = np.where(r <= radius, h - slope * r, 0.0)
        surface[near] = np.maximum(surface[near], cone)
    return surface


def _stratified_xy(rng: np.random.Generator, extent: float, density: float) -> np.ndarray:
    """Jittered-grid sampling: one point per cell of a sqrt(density) grid.

    Scan patterns are quasi-regular, and stratification keeps the point hull
    tight against the footprint (iid-uniform sampling leaves long boundary
    chords that degrade TIN interpolation there).
    """
    per_axis = max(int(round(extent * math.sqrt(density))), 2)
    step = extent / per_axis
    jitter = rng.uniform(0.0, 1.0, size=(per_axis * per_axis, 2))
    i, j = np.divmod(np.arange(per_axis * per_axis), per_axis)
    return np.column_stack([(j + jitter[:, 0]) * step, (i + jitter[:, 1]) * step])


_SPECIES_CYCLE = tuple(Species)


def _octagon(cx: float, cy: float, radius: float) -> np.ndarray:
    ang = np.arange(8) * (math.pi / 4.0)
    return np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)])


def _band_fields(canopy: np.ndarray) -> dict[str, np.ndarray]:
    """Smooth reflectances driven by canopy height; all within [0, 1]."""
    u = np.tanh(canopy / 10.0)
    return {
        "blue": 0.10 + 0.01 * u,
        "green": 0.18 + 0.04 * u,
        "red": 0.20 - 0.10 * u,
        "red_edge": 0.35 + 0.10 * u,
        "nir": 0.45 + 0.25 * u,
    }


def planted_agb_model() -> LinearModel:
    """The linear model the synthetic bands are built to support exactly."""
    return LinearModel(
        predictors=("OSAVI", "DVI", "h75"),
        coefficients=(220.0, 150.0, 4.2),
        intercept=10.0,
        r_squared=1.0,
        rmse=0.0,
        rrmse=0.0,
        n=0,
        source_hash="synthetic-truth",
    )


def generate_synthetic_scene(
    seed: int, params: SceneParams = SceneParams()
) -> SyntheticScene:
    """Build the full scene; identical seeds give identical scenes."""
    p = params
    rng = np.random.default_rng(seed)
    extent = p.extent

    # place trees with disjoint crowns so every planted apex is exposed and
    # can serve as a canopy-height oracle
    margin = p.crown_radius_ratio * p.height_max
    placed_xy: list[np.ndarray] = []
    placed_h: list[float] = []
    attempts = 0
    while len(placed_xy) < p.tree_count and attempts < 50 * max(p.tree_count, 1):
        attempts += 1
        candidate = rng.uniform(margin, extent - margin, size=2)
        height = float(rng.uniform(p.height_min, p.height_max))
        radius = p.crown_radius_ratio * height
        clear = True
        for other_xy, other_h in zip(placed_xy, placed_h):
            min_sep = radius + p.crown_radius_ratio * other_h + 0.5
            if float(np.hypot(*(candidate - other_xy))) < min_sep:
                clear = False
                break
        if clear:
            placed_xy.append(candidate)
            placed_h.append(height)
    positions = np.array(placed_xy).reshape(-1, 2)
    heights = np.array(placed_h)
    n_trees = len(heights)
    species = [
        _SPECIES_CYCLE[i] for i in rng.integers(0, len(_SPECIES_CYCLE), size=n_trees)
    ]
    trees = tuple(
        TreeRecord(
            id=f"t{i:04d}",
            species=species[i],
            x=float(positions[i, 0]),
            y=float(positions[i, 1]),
            height=float(heights[i]),
            crown=_octagon(positions[i, 0], positions[i, 1],
                           p.crown_radius_ratio * heights[i]),
        )
        for i in range(n_trees)
    )

    # photogrammetric cloud: dense, surface only, known offset applied
    dap_xy = _stratified_xy(rng, extent, p.dap_density)
    n_dap = len(dap_xy)
    dap_canopy = _canopy_height(dap_xy[:, 0], dap_xy[:, 1], positions, heights, p)
    dap_z = (
        _terrain(dap_xy[:, 0], dap_xy[:, 1], p) + dap_canopy
        + rng.normal(0.0, p.dap_noise, size=n_dap)
    )
    shade = rng.integers(0, 40, size=n_dap, dtype=np.int64)
    on_canopy = dap_canopy > 0.5
    color = np.zeros((n_dap, 3), dtype=np.int64)
    color[on_canopy] = np.column_stack(
        [40 + shade[on_canopy], 120 + shade[on_canopy], 50 + shade[on_canopy]]
    )
    color[~on_canopy] = np.column_stack(
        [130 + shade[~on_canopy], 100 + shade[~on_canopy], 70 + shade[~on_canopy]]
    )
    offset = np.array(p.offset, dtype=float)
    dap = PointCloud(
        np.column_stack([dap_xy, dap_z]) + offset,
        source=Source.DAP,
        color=color.astype(np.uint8),
    )

    # laser cloud: sparse, penetrates canopy to terrain; strips are clipped
    # to the tile so returns land exactly on the boundary lines, which keeps
    # the point hull flush with the footprint
    step = 1.0 / math.sqrt(p.lidar_density)
    edge_ticks = np.linspace(0.0, extent, max(int(round(extent / step)), 2) + 1)
    edge_xy = np.vstack([
        np.column_stack([edge_ticks, np.zeros_like(edge_ticks)]),
        np.column_stack([edge_ticks, np.full_like(edge_ticks, extent)]),
        np.column_stack([np.zeros_like(edge_ticks[1:-1]), edge_ticks[1:-1]]),
        np.column_stack([np.full_like(edge_ticks[1:-1], extent), edge_ticks[1:-1]]),
    ])
    lidar_xy = np.vstack([_stratified_xy(rng, extent, p.lidar_density), edge_xy])
    n_lidar = len(lidar_xy)
    lidar_canopy = _canopy_height(lidar_xy[:, 0], lidar_xy[:, 1], positions, heights, p)
    terrain_z = _terrain(lidar_xy[:, 0], lidar_xy[:, 1], p)
    under_canopy = lidar_canopy > 0.5
    reaches_ground = rng.uniform(size=n_lidar) < p.canopy_ground_fraction
    is_ground = ~under_canopy | reaches_ground
    lidar_z = (
        np.where(is_ground, terrain_z, terrain_z + lidar_canopy)
        + rng.normal(0.0, p.lidar_noise, size=n_lidar)
    )
    intensity = np.where(is_ground, 30.0, 80.0) + rng.uniform(0.0, 20.0, size=n_lidar)
    lidar = PointCloud(
        np.column_stack([lidar_xy, lidar_z]),
        source=Source.LIDAR,
        intensity=intensity.astype(np.float32),
    )
    true_height = np.where(is_ground, 0.0, lidar_canopy)

    # optional strips: x-band slices with planted offsets on strips >= 1
    strips: list[PointCloud] = []
    strip_offsets: list[tuple[float, float, float]] = []
    if p.lidar_strip_count == 1:
        strips.append(lidar)
        strip_offsets.append((0.0, 0.0, 0.0))
    else:
        k = p.lidar_strip_count
        width = extent / (k - (k - 1) * p.strip_overlap)
        step = width * (1.0 - p.strip_overlap)
        base_off = np.array(p.strip_offset, dtype=float)
        for i in range(k):
            x0 = i * step
            x1 = min(x0 + width, extent)
            inside = (lidar_xy[:, 0] >= x0) & (lidar_xy[:, 0] <= x1)
            strip = lidar.take(np.flatnonzero(inside))
            if i == 0:
                strip_offsets.append((0.0, 0.0, 0.0))
            else:
                off = tuple(float(v) for v in base_off * i)
                strip = strip.with_xyz(strip.xyz + np.array(off))
                strip_offsets.append(off)
            strips.append(strip)

    # band grids over the full extent
    n_cells = int(round(extent / p.band_cell))
    xs = (np.arange(n_cells) + 0.5) * p.band_cell
    ys = extent - (np.arange(n_cells) + 0.5) * p.band_cell
    gx, gy = np.meshgrid(xs, ys)
    canopy_grid = _canopy_height(gx.ravel(), gy.ravel(), positions, heights, p)
    fields = _band_fields(canopy_grid.reshape(n_cells, n_cells))
    bands = SpectralBands(Raster(0.0, extent, p.band_cell, fields))

    # square plots on a grid inside the margin
    inner = extent - 2.0 * p.plot_margin
    per_axis = max(int(inner // p.plot_side), 0)
    plots = []
    for i in range(per_axis):
        for j in range(per_axis):
            cx = p.plot_margin + (j + 0.5) * p.plot_side
            cy = p.plot_margin + (i + 0.5) * p.plot_side
            plots.append(PlotDefinition(
                plot_id=f"p{i * per_axis + j:03d}",
                center_x=float(cx), center_y=float(cy), side=p.plot_side,
            ))

    return SyntheticScene(
        seed=seed,
        params=p,
        dap=dap,
        lidar=lidar,
        lidar_strips=tuple(strips),
        lidar_is_ground=is_ground,
        lidar_true_height=true_height,
        bands=bands,
        trees=trees,
        plots=tuple(plots),
        applied_offset=offset,
        strip_offsets=tuple(strip_offsets),
        agb_model=planted_agb_model(),
        tree_positions=positions,
        tree_heights=heights,
    )


def write_scene(scene: SyntheticScene, out_dir: str | Path) -> PipelineConfig:
    """Write all scene inputs plus ground-truth tables; returns a ready
    pipeline configuration pointing at the written files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(scene.dap, out / "dap.bin", CloudFormat.BINARY_RECORD)
    save_cloud(scene.lidar, out / "lidar.bin", CloudFormat.BINARY_RECORD)
    strip_paths = []
    for i, strip in enumerate(scene.lidar_strips):
        path = out / f"lidar_strip_{i}.bin"
        save_cloud(strip, path, CloudFormat.BINARY_RECORD)
        strip_paths.append(str(path))
    write_band_manifest(scene.bands.raster, out / "bands", "bands")
    write_tree_records(list(scene.trees), out / "trees.csv")
    write_plot_definitions(list(scene.plots), out / "plots.csv")

    truth = out / "truth"
    truth.mkdir(exist_ok=True)
    offset = scene.applied_offset
    (truth / "offset.txt").write_text(
        " ".join(repr(float(v)) for v in offset) + "\n"
    )
    (truth / "strip_offsets.txt").write_text(
        "\n".join(" ".join(repr(float(v)) for v in off) for off in scene.strip_offsets)
        + "\n"
    )
    write_model(scene.agb_model, truth / "planted_model.txt",
                comment="linear model the synthetic bands satisfy exactly")
    lines = ["index,is_ground,true_height"]
    for i, (g, h) in enumerate(zip(scene.lidar_is_ground, scene.lidar_true_height)):
        lines.append(f"{i},{int(g)},{float(h)!r}")
    (truth / "lidar_ground.csv").write_text("\n".join(lines) + "\n")
    agb_lines = ["id,species,height,dbh_cm,total_kg"]
    for t in scene.trees:
        comp = tree_agb(t.species, t.height)
        agb_lines.append(
            f"{t.id},{t.species.value},{t.height!r},{comp.dbh_used!r},{comp.total!r}"
        )
    (truth / "tree_agb.csv").write_text("\n".join(agb_lines) + "\n")
    cell = 2.0
    n = int(round(scene.params.extent / cell))
    xs = (np.arange(n) + 0.5) * cell
    ys = scene.params.extent - (np.arange(n) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys)
    terrain = scene.terrain_elevation(gx.ravel(), gy.ravel()).reshape(n, n)
    write_ascii_grid(
        Raster(0.0, scene.params.extent, cell, {"elevation": terrain}),
        truth / "terrain.asc",
    )

    config = PipelineConfig(
        dap_path=str(out / "dap.bin"),
        lidar_paths=tuple(strip_paths),
        bands_manifest=str(out / "bands" / "bands.bands"),
        trees_path=str(out / "trees.csv"),
        plots_path=str(out / "plots.csv"),
        out_dir=str(out / "run"),
    )
    write_config(config, out / "pipeline.cfg")
    return config
