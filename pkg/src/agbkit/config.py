"""Pipeline configuration and plot definitions.

Config files are flat text: one ``section.key = value`` per line, ``#``
comments, lists comma-separated. Every key has a CLI flag override.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cloud import BoundingBox
from .errors import ParseError, ValidationError

_Z_SPAN = 1e12  # plot footprints constrain xy only


@dataclass(frozen=True)
class PlotDefinition:
    """Square sample plot: center, side length, optional observed AGB."""

    plot_id: str
    center_x: float
    center_y: float
    side: float = 30.0
    agb_obs: float | None = None

    def __post_init__(self):
        if self.side <= 0:
            raise ValidationError(f"plot {self.plot_id}: side must be positive")

    def footprint(self) -> BoundingBox:
        half = self.side / 2.0
        return BoundingBox(
            (self.center_x - half, self.center_y - half, -_Z_SPAN),
            (self.center_x + half, self.center_y + half, _Z_SPAN),
        )


def read_plot_definitions(path: str | Path) -> list[PlotDefinition]:
    """CSV: plot_id,center_x,center_y,side[,agb_obs]."""
    import csv

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"plot definition file does not exist: {path}")
    plots: list[PlotDefinition] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("missing CSV header", path=str(path), line=1)
        required = {"plot_id", "center_x", "center_y"}
        missing = required - set(reader.fieldnames)
        if missing:
            raise ParseError(f"missing columns: {sorted(missing)}", path=str(path), line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                agb = row.get("agb_obs") or None
                plots.append(PlotDefinition(
                    plot_id=row["plot_id"],
                    center_x=float(row["center_x"]),
                    center_y=float(row["center_y"]),
                    side=float(row.get("side") or 30.0),
                    agb_obs=float(agb) if agb else None,
                ))
            except (ValueError, ValidationError) as exc:
                raise ParseError(f"bad plot row: {exc}", path=str(path), line=lineno)
    return plots


def write_plot_definitions(plots: list[PlotDefinition], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["plot_id,center_x,center_y,side,agb_obs"]
    for p in plots:
        agb = repr(float(p.agb_obs)) if p.agb_obs is not None else ""
        lines.append(f"{p.plot_id},{p.center_x!r},{p.center_y!r},{p.side!r},{agb}")
    path.write_text("\n".join(lines) + "\n")


_DEFAULT_CANDIDATES = (
    "ARVI", "DVI", "GNDVI", "NDVI", "OSAVI", "RGRI", "NormG",
    "h25", "h50", "h75", "h95", "hmean", "hcv",
)


@dataclass(frozen=True)
class PipelineConfig:
    # inputs
    dap_path: str = ""
    lidar_paths: tuple[str, ...] = ()
    bands_manifest: str = ""
    trees_path: str = ""
    plots_path: str = ""
    # registration
    scales: tuple[float, ...] = (2.0, 3.0, 4.0, 5.0, 10.0)
    refine: bool = True
    cutoff_fraction: float = 0.25
    min_inlier_fraction: float = 0.25
    seed: int = 0
    icp_max_iter: int = 200
    icp_tol: float = 1e-7
    icp_pair_dist: float = 0.0  # 0 = twice the finest registration scale
    # terrain
    seed_cell: float = 20.0
    max_tin_distance: float = 1.0
    max_tin_angle: float = 20.0
    max_tin_iterations: int = 20
    dtm_cell: float = 0.5
    chm_cell: float = 0.1
    emit_dsm: bool = False
    # metrics
    cover_threshold: float = 2.0
    corrected_indices: bool = False
    per_pixel: bool = False
    metrics_from_cloud: bool = True
    # allometry
    unit_to_tonne: float = 1e-3
    species_models: str = ""
    # regression
    candidates: tuple[str, ...] = _DEFAULT_CANDIDATES
    max_size: int = 3
    loocv: bool = False
    # mapping
    map_cell: float = 15.0
    map_from_cloud: bool = False
    # output
    out_dir: str = "out"

    def validate(self) -> None:
        for label, p in [("input.dap", self.dap_path),
                         ("input.bands", self.bands_manifest),
                         ("input.trees", self.trees_path),
                         ("input.plots", self.plots_path)]:
            if not p:
                raise ValidationError(f"config key {label} is required")
            if not Path(p).exists():
                raise ValidationError(f"{label} path does not exist: {p}")
        if not self.lidar_paths:
            raise ValidationError("config key input.lidar is required")
        for p in self.lidar_paths:
            if not Path(p).exists():
                raise ValidationError(f"input.lidar path does not exist: {p}")
        if self.species_models and not Path(self.species_models).exists():
            raise ValidationError(
                f"allometry.models path does not exist: {self.species_models}"
            )
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValidationError("registration.scales must be positive")
        for label, v in [("terrain.dtm_cell", self.dtm_cell),
                         ("terrain.chm_cell", self.chm_cell),
                         ("map.cell", self.map_cell),
                         ("terrain.seed_cell", self.seed_cell)]:
            if v <= 0:
                raise ValidationError(f"{label} must be positive")
        if self.max_size < 1:
            raise ValidationError("regression.max_size must be at least 1")


_KEY_MAP = {
    "input.dap": ("dap_path", str),
    "input.lidar": ("lidar_paths", "strlist"),
    "input.bands": ("bands_manifest", str),
    "input.trees": ("trees_path", str),
    "input.plots": ("plots_path", str),
    "registration.scales": ("scales", "floatlist"),
    "registration.refine": ("refine", "bool"),
    "registration.cutoff": ("cutoff_fraction", float),
    "registration.min_inlier": ("min_inlier_fraction", float),
    "registration.seed": ("seed", int),
    "registration.icp_max_iter": ("icp_max_iter", int),
    "registration.icp_tol": ("icp_tol", float),
    "registration.icp_pair_dist": ("icp_pair_dist", float),
    "terrain.seed_cell": ("seed_cell", float),
    "terrain.max_distance": ("max_tin_distance", float),
    "terrain.max_angle": ("max_tin_angle", float),
    "terrain.max_iterations": ("max_tin_iterations", int),
    "terrain.dtm_cell": ("dtm_cell", float),
    "terrain.chm_cell": ("chm_cell", float),
    "terrain.emit_dsm": ("emit_dsm", "bool"),
    "metrics.cover_threshold": ("cover_threshold", float),
    "metrics.corrected_indices": ("corrected_indices", "bool"),
    "metrics.per_pixel": ("per_pixel", "bool"),
    "metrics.from_cloud": ("metrics_from_cloud", "bool"),
    "allometry.unit_to_tonne": ("unit_to_tonne", float),
    "allometry.models": ("species_models", str),
    "regression.candidates": ("candidates", "strlist"),
    "regression.max_size": ("max_size", int),
    "regression.loocv": ("loocv", "bool"),
    "map.cell": ("map_cell", float),
    "map.from_cloud": ("map_from_cloud", "bool"),
    "output.dir": ("out_dir", str),
}


def _convert(value: str, kind):
    if kind is str:
        return value
    if kind is float:
        return float(value)
    if kind is int:
        return int(value)
    if kind == "bool":
        v = value.strip().lower()
        if v in ("true", "yes", "1", "on"):
            return True
        if v in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {value}")
    if kind == "floatlist":
        return tuple(float(p) for p in value.split(",") if p.strip())
    if kind == "strlist":
        return tuple(p.strip() for p in value.split(",") if p.strip())
    raise ValueError(f"unknown kind {kind}")


def parse_config(path: str | Path, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Parse a config file; ``overrides`` maps dotted keys to raw strings."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file does not exist: {path}")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ParseError("expected 'key = value'", path=str(path), line=lineno)
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in _KEY_MAP:
            raise ParseError(f"unknown config key '{key}'", path=str(path), line=lineno)
        raw[key] = value
    if overrides:
        for key, value in overrides.items():
            if key not in _KEY_MAP:
                raise ValidationError(f"unknown config key '{key}'")
            raw[key] = value
    kwargs = {}
    for key, value in raw.items():
        attr, kind = _KEY_MAP[key]
        try:
            kwargs[attr] = _convert(value, kind)
        except ValueError as exc:
            raise ValidationError(f"bad value for {key}: {exc}")
    config = PipelineConfig(**kwargs)
    return config


def write_config(config: PipelineConfig, path: str | Path) -> None:
    reverse = {attr: key for key, (attr, _) in _KEY_MAP.items()}
    lines = ["# agbkit pipeline configuration"]
    for f in fields(config):
        key = reverse.get(f.name)
        if key is None:
            continue
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    Path(path).write_text("\n".join(lines) + "\n")
