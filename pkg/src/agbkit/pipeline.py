"""End-to-end orchestration: strips, registration, terrain, metrics, fit, map.

Every stage reads and writes plain file artifacts so any stage can be rerun
in isolation from the previous stage's cached outputs. A manifest records a
content hash per artifact; reruns with unchanged inputs are byte-identical
(no wall-clock timestamps are ever written into artifacts).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allometry import (
    SPECIES_MODELS,
    load_species_models,
    plot_agb,
    read_tree_records,
    tree_agb,
)
from .cloud import BoundingBox, CloudFormat, PointCloud, load_cloud, save_cloud
from .config import PipelineConfig, PlotDefinition, read_plot_definitions
from .errors import (
    AgbkitError,
    MissingPredictorError,
    StageError,
    ValidationError,
)
from .grid import Raster, read_ascii_grid, read_band_manifest, write_ascii_grid
from .metrics import (
    ALL_METRICS,
    MetricVector,
    SpectralBands,
    spectral_indices,
    structural_metrics,
)
from .regression import (
    DesignMatrix,
    LinearModel,
    SubsetRanking,
    all_subsets,
    design_hash,
    evaluate,
    loocv,
    predict,
    read_model,
    write_model,
)
from .registration import (
    RigidTransform,
    apply_transform,
    evaluate_registration,
    extract_crown_heights,
    icp_refine,
    load_transform,
    register_multiscale,
    save_transform,
)
from .terrain import (
    GroundFilterParams,
    build_chm,
    build_dsm,
    build_dtm,
    filter_ground,
    normalize_cloud,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _record_stage(out_dir: Path, stage: str, artifacts: list[Path]) -> None:
    manifest_path = out_dir / MANIFEST_NAME
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest.setdefault("stages", {})[stage] = {
        "artifacts": {
            str(p.relative_to(out_dir)): _sha256(p) for p in sorted(artifacts)
        }
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def validate_manifest(out_dir: str | Path) -> list[str]:
    """Re-hash every recorded artifact; returns the list of mismatches."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValidationError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    bad = []
    for stage, info in manifest.get("stages", {}).items():
        for rel, recorded in info["artifacts"].items():
            path = out_dir / rel
            if not path.exists():
                bad.append(f"{stage}: {rel} missing")
            elif _sha256(path) != recorded:
                bad.append(f"{stage}: {rel} hash mismatch")
    return bad


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def _residual_sum(moving: PointCloud, reference: PointCloud) -> float:
    from scipy.spatial import cKDTree

    tree = cKDTree(reference.xyz)
    dist, _ = tree.query(moving.xyz)
    return float(dist.sum())


def stage_strips(config: PipelineConfig, out_dir: Path) -> Path:
    """Match LiDAR strips to the first strip and merge into one cloud.

    Per companion strip, the candidate shift is estimated at every configured
    scale and the candidate with the lowest point-to-point residual sum wins.
    """
    strips = [
        load_cloud(p, CloudFormat.BINARY_RECORD) for p in config.lidar_paths
    ]
    merged_path = out_dir / "lidar_merged.bin"
    report_path = out_dir / "strips_report.csv"
    if len(strips) == 1:
        save_cloud(strips[0], merged_path, CloudFormat.BINARY_RECORD)
        report_path.write_text(
            "strip,scale,shift_x,shift_y,shift_z,residual_sum,selected\n"
        )
        _record_stage(out_dir, "strips", [merged_path, report_path])
        return merged_path
    reference = strips[0]
    aligned = [reference]
    rows = []
    for i, strip in enumerate(strips[1:], start=1):
        # correlate over the footprint intersection: strips only share their
        # overlap band, and union-region spectra are dominated by mismatch
        overlap = reference.bounds.intersection(strip.bounds)
        region = (
            overlap.expanded(max(config.scales))
            if overlap is not None else None
        )
        results = register_multiscale(
            reference, strip, list(config.scales),
            refine=False,
            cutoff_fraction=config.cutoff_fraction,
            min_inlier_fraction=config.min_inlier_fraction,
            seed=config.seed,
            region=region,
        )
        best = None
        for scale in sorted(results):
            res = results[scale]
            if not res.ok:
                rows.append((i, scale, "", "", "", "", 0))
                continue
            candidate = apply_transform(strip, res.transform)
            residual = _residual_sum(candidate, reference)
            shift = res.transform.translation
            rows.append((i, scale, repr(float(shift[0])), repr(float(shift[1])),
                         repr(float(shift[2])), repr(residual), 0))
            if best is None or residual < best[0]:
                best = (residual, scale, candidate)
        if best is None:
            raise ValidationError(f"strip {i}: registration failed at every scale")
        _, best_scale, candidate = best
        for idx in range(len(rows) - 1, -1, -1):
            if rows[idx][0] == i and rows[idx][1] == best_scale:
                rows[idx] = rows[idx][:6] + (1,)
                break
        aligned.append(candidate)
    merged = PointCloud(
        np.vstack([c.xyz for c in aligned]),
        source=reference.source,
        intensity=(
            np.concatenate([c.intensity for c in aligned])
            if all(c.intensity is not None for c in aligned) else None
        ),
    )
    save_cloud(merged, merged_path, CloudFormat.BINARY_RECORD)
    lines = ["strip,scale,shift_x,shift_y,shift_z,residual_sum,selected"]
    lines += [",".join(str(v) for v in row) for row in rows]
    report_path.write_text("\n".join(lines) + "\n")
    _record_stage(out_dir, "strips", [merged_path, report_path])
    return merged_path


def stage_register(config: PipelineConfig, out_dir: Path,
                   lidar_path: Path | None = None) -> Path:
    """Multiscale GRPC of the DAP cloud onto the merged LiDAR cloud.

    The finest successful scale provides the working transform; with
    ``refine`` set, a single ICP pass runs from it with a pairing distance of
    twice that scale.
    """
    lidar_path = lidar_path or out_dir / "lidar_merged.bin"
    fixed = load_cloud(lidar_path, CloudFormat.BINARY_RECORD)
    moving = load_cloud(config.dap_path, CloudFormat.BINARY_RECORD)
    results = register_multiscale(
        fixed, moving, list(config.scales),
        refine=False,
        cutoff_fraction=config.cutoff_fraction,
        min_inlier_fraction=config.min_inlier_fraction,
        seed=config.seed,
    )
    ok_scales = sorted(s for s, r in results.items() if r.ok)
    if not ok_scales:
        raise ValidationError("registration failed at every scale")
    finest = ok_scales[0]
    chosen = results[finest].transform
    refined_label = "coarse"
    if config.refine:
        # pair the sparse cloud against the dense one (better conditioned and
        # cheaper than the reverse) and fold the refinement back in
        pair_dist = config.icp_pair_dist or 2.0 * finest
        coarse = apply_transform(moving, chosen)
        refinement = icp_refine(
            coarse, fixed,
            max_iter=config.icp_max_iter, tol=config.icp_tol,
            max_pair_dist=pair_dist,
        )
        chosen = refinement.inverse().compose(chosen)
        refined_label = "fine"
    lines = ["scale,shift_x,shift_y,shift_z,inlier_fraction,residual,error"]
    for scale in sorted(results):
        res = results[scale]
        if res.ok:
            s = res.correlation.shift
            lines.append(
                f"{scale},{s[0]!r},{s[1]!r},{s[2]!r},"
                f"{res.correlation.inlier_fraction!r},{res.correlation.residual!r},"
            )
        else:
            lines.append(f"{scale},,,,,,{type(res.error).__name__}")
    report_path = out_dir / "register_report.csv"
    report_path.write_text("\n".join(lines) + "\n")
    transform_path = out_dir / "transform.txt"
    inlier = results[finest].correlation.inlier_fraction
    save_transform(
        chosen, transform_path,
        comment=f"scale={finest} inlier_fraction={inlier!r} mode={refined_label}",
    )
    registered = apply_transform(moving, chosen)
    registered_path = out_dir / "dap_registered.bin"
    save_cloud(registered, registered_path, CloudFormat.BINARY_RECORD)
    _record_stage(out_dir, "register",
                  [report_path, transform_path, registered_path])
    return registered_path


def stage_terrain(config: PipelineConfig, out_dir: Path,
                  lidar_path: Path | None = None,
                  registered_path: Path | None = None) -> Path:
    """Ground filter, DTM, DAP normalization, CHM (and optional DSM)."""
    lidar_path = lidar_path or out_dir / "lidar_merged.bin"
    registered_path = registered_path or out_dir / "dap_registered.bin"
    lidar = load_cloud(lidar_path, CloudFormat.BINARY_RECORD)
    dap = load_cloud(registered_path, CloudFormat.BINARY_RECORD)
    params = GroundFilterParams(
        seed_cell_size=config.seed_cell,
        max_tin_distance=config.max_tin_distance,
        max_tin_angle=config.max_tin_angle,
        max_iterations=config.max_tin_iterations,
    )
    ground = filter_ground(lidar, params)
    ground_path = out_dir / "ground.bin"
    save_cloud(ground, ground_path, CloudFormat.BINARY_RECORD)
    dtm = build_dtm(ground, config.dtm_cell)
    dtm_path = out_dir / "dtm.asc"
    write_ascii_grid(dtm, dtm_path)
    normalized, dropped = normalize_cloud(dap, dtm)
    log.info("normalization dropped %d points over nodata terrain", dropped)
    normalized_path = out_dir / "dap_normalized.bin"
    save_cloud(normalized, normalized_path, CloudFormat.BINARY_RECORD)
    chm = build_chm(normalized, config.chm_cell)
    chm_path = out_dir / "chm.asc"
    write_ascii_grid(chm, chm_path)
    artifacts = [ground_path, dtm_path, normalized_path, chm_path]
    stats_path = out_dir / "terrain_report.csv"
    stats_path.write_text(
        "ground_points,normalized_points,dropped_over_nodata\n"
        f"{len(ground)},{len(normalized)},{dropped}\n"
    )
    artifacts.append(stats_path)
    if config.emit_dsm:
        dsm = build_dsm(dap, config.chm_cell)
        dsm_path = out_dir / "dsm.asc"
        write_ascii_grid(dsm, dsm_path)
        artifacts.append(dsm_path)
    _record_stage(out_dir, "terrain", artifacts)
    return chm_path


def _metric_row(vector: MetricVector) -> list[str]:
    return [
        "" if not vector.defined(name) else repr(vector[name])
        for name in ALL_METRICS
    ]


def stage_metrics(config: PipelineConfig, out_dir: Path,
                  normalized_path: Path | None = None,
                  chm_path: Path | None = None) -> Path:
    """Per-plot spectral indices and structural metrics."""
    bands = SpectralBands(read_band_manifest(config.bands_manifest))
    plots = read_plot_definitions(config.plots_path)
    if config.metrics_from_cloud:
        normalized_path = normalized_path or out_dir / "dap_normalized.bin"
        structural_source: PointCloud | Raster = load_cloud(
            normalized_path, CloudFormat.BINARY_RECORD
        )
    else:
        chm_path = chm_path or out_dir / "chm.asc"
        structural_source = read_ascii_grid(chm_path, band_name="height")
    lines = ["plot_id," + ",".join(ALL_METRICS)]
    for plot in plots:
        footprint = plot.footprint()
        spectral = spectral_indices(
            bands, footprint,
            corrected=config.corrected_indices,
            per_pixel=config.per_pixel,
            tag=plot.plot_id,
        )
        structural = structural_metrics(
            structural_source, footprint,
            cover_threshold=config.cover_threshold,
            tag=plot.plot_id,
        )
        vector = spectral.merge(structural)
        lines.append(plot.plot_id + "," + ",".join(_metric_row(vector)))
    metrics_path = out_dir / "plot_metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n")
    _record_stage(out_dir, "metrics", [metrics_path])
    return metrics_path


def stage_tree_agb(config: PipelineConfig, out_dir: Path) -> Path:
    """Per-tree biomass components and per-plot observed AGB density."""
    trees = read_tree_records(config.trees_path)
    plots = read_plot_definitions(config.plots_path)
    models = (
        load_species_models(config.species_models)
        if config.species_models else SPECIES_MODELS
    )
    tree_lines = [
        "# mass unit: kg; dbh unit: cm",
        "id,species,height,dbh_cm,stem_kg,branch_kg,leaf_kg,pod_kg,total_kg,clamped",
    ]
    for t in trees:
        comp = tree_agb(t.species, t.height, dbh_override=t.dbh, models=models)
        def cell(v):
            return "" if v is None else repr(float(v))
        tree_lines.append(
            f"{t.id},{t.species.value},{t.height!r},{comp.dbh_used!r},"
            f"{cell(comp.stem)},{cell(comp.branch)},{cell(comp.leaf)},"
            f"{cell(comp.pod)},{comp.total!r},{'+'.join(comp.clamped)}"
        )
    tree_path = out_dir / "tree_agb.csv"
    tree_path.write_text("\n".join(tree_lines) + "\n")
    plot_lines = ["plot_id,n_trees,agb_t_ha"]
    for plot in plots:
        result = plot_agb(
            trees, plot.side * plot.side,
            footprint=plot.footprint(),
            unit_to_tonne=config.unit_to_tonne,
            models=models,
        )
        plot_lines.append(f"{plot.plot_id},{result.n_trees},{result.density_t_ha!r}")
    plot_path = out_dir / "plot_agb.csv"
    plot_path.write_text("\n".join(plot_lines) + "\n")
    _record_stage(out_dir, "tree_agb", [tree_path, plot_path])
    return plot_path


def load_design_matrix(metrics_path: str | Path,
                       agb_path: str | Path | None = None,
                       response_column: str = "agb_t_ha") -> DesignMatrix:
    """Join the plot metric table with observed AGB into a design matrix.

    Without ``agb_path`` the response column must live in the metrics file.
    """
    with open(metrics_path, newline="") as fh:
        rows = [row for row in csv.DictReader(fh) if row.get("plot_id")]
    if not rows:
        raise ValidationError(f"no metric rows in {metrics_path}")
    response_by_plot: dict[str, float] = {}
    if agb_path is not None:
        with open(agb_path, newline="") as fh:
            for row in csv.DictReader(fh):
                response_by_plot[row["plot_id"]] = float(row[response_column])
    columns = [c for c in rows[0] if c not in ("plot_id", response_column)]
    data = []
    response = []
    ids = []
    for row in rows:
        plot_id = row["plot_id"]
        if agb_path is not None:
            if plot_id not in response_by_plot:
                raise ValidationError(f"plot {plot_id} missing from {agb_path}")
            response.append(response_by_plot[plot_id])
        else:
            if response_column not in row:
                raise ValidationError(
                    f"metrics file lacks response column '{response_column}'"
                )
            response.append(float(row[response_column]))
        data.append([
            float(row[c]) if row[c] not in ("", None) else float("nan")
            for c in columns
        ])
        ids.append(plot_id)
    return DesignMatrix(tuple(columns), np.array(data), np.array(response), tuple(ids))


def _write_ranking(ranking: SubsetRanking, path: Path) -> None:
    lines = ["rank,size,columns,r_squared,rmse,rrmse,adj_r_squared,best_of_size"]
    best_ids = {id(entry) for entry in ranking.best_per_size.values()}
    for rank, entry in enumerate(ranking.ranked, start=1):
        lines.append(
            f"{rank},{len(entry.columns)},{'+'.join(entry.columns)},"
            f"{entry.r_squared!r},{entry.rmse!r},"
            f"{'' if entry.rrmse is None else repr(entry.rrmse)},"
            f"{'' if entry.adj_r_squared is None else repr(entry.adj_r_squared)},"
            f"{1 if id(entry) in best_ids else 0}"
        )
    for columns, reason in ranking.failures:
        lines.append(f",,{'+'.join(columns)},,,,,excluded: {reason.splitlines()[0]}")
    path.write_text("\n".join(lines) + "\n")


def stage_fit(config: PipelineConfig, out_dir: Path,
              metrics_path: Path | None = None,
              agb_path: Path | None = None) -> Path:
    """All-subsets selection and the final OLS fit."""
    metrics_path = metrics_path or out_dir / "plot_metrics.csv"
    agb_path = agb_path or out_dir / "plot_agb.csv"
    design = load_design_matrix(metrics_path, agb_path)
    candidates = [c for c in config.candidates if c in design.columns]
    if not candidates:
        raise ValidationError("no candidate columns present in the metric table")
    ranking = all_subsets(design, max_size=config.max_size, candidates=candidates)
    best = ranking.best
    model = best.model
    model = LinearModel(
        predictors=model.predictors,
        coefficients=model.coefficients,
        intercept=model.intercept,
        r_squared=model.r_squared,
        rmse=model.rmse,
        rrmse=model.rrmse,
        n=model.n,
        adj_r_squared=model.adj_r_squared,
        aic=model.aic,
        degenerate=model.degenerate,
        n_dropped=model.n_dropped,
        source_hash=design_hash(design),
    )
    comment = "selected by all-subsets training R2"
    if config.loocv:
        cv_r2, cv_rmse, cv_rrmse = loocv(design, model.predictors)
        comment += (
            f"; loocv (beyond the published in-sample protocol): "
            f"r2={cv_r2!r} rmse={cv_rmse!r}"
        )
    model_path = out_dir / "model.txt"
    write_model(model, model_path, comment=comment)
    ranking_path = out_dir / "ranking.csv"
    _write_ranking(ranking, ranking_path)
    _record_stage(out_dir, "fit", [model_path, ranking_path])
    return model_path


def map_agb(
    chm: Raster,
    bands: SpectralBands,
    model: LinearModel,
    cell_size: float = 15.0,
    cover_threshold: float = 2.0,
    corrected_indices: bool = False,
    min_coverage: float = 0.5,
    nodata: float = -9999.0,
) -> Raster:
    """Wall-to-wall AGB raster: per output cell, compute the model's metrics
    over the cell footprint and predict; undefined metrics give nodata.

    The output grid is anchored at the CHM origin. ``cell_size`` must be a
    positive integer multiple of the CHM cell; edge cells are computed only
    when at least ``min_coverage`` of their area has valid CHM data.
    Negative predictions clamp to zero.
    """
    if cell_size <= 0:
        raise ValidationError("cell_size must be positive")
    ratio = cell_size / chm.cell_size
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValidationError(
            f"map cell {cell_size} is not a positive multiple of CHM cell {chm.cell_size}"
        )
    ratio = int(round(ratio))
    nrows_out = math.ceil(chm.nrows / ratio)
    ncols_out = math.ceil(chm.ncols / ratio)
    needs_spectral = any(p in model.predictors for p in
                         ("ARVI", "DVI", "GNDVI", "NDVI", "OSAVI", "RGRI", "NormG"))
    chm_band = chm.band()
    out = np.full((nrows_out, ncols_out), nodata)
    expected = float(ratio * ratio)
    for i in range(nrows_out):
        r0, r1 = i * ratio, min((i + 1) * ratio, chm.nrows)
        for j in range(ncols_out):
            c0, c1 = j * ratio, min((j + 1) * ratio, chm.ncols)
            block = chm_band[r0:r1, c0:c1]
            valid = block[block != chm.nodata]
            if valid.size / expected < min_coverage:
                continue
            x0 = chm.origin_x + c0 * chm.cell_size
            y1 = chm.origin_y - r0 * chm.cell_size
            footprint = BoundingBox(
                (x0, y1 - cell_size, -1e12), (x0 + cell_size, y1, 1e12)
            )
            values: dict[str, float] = {}
            undefined: set[str] = set()
            heights = valid.astype(float)
            h25, h50, h75, h95 = np.percentile(heights, [25, 50, 75, 95],
                                               method="linear")
            values.update(h25=float(h25), h50=float(h50),
                          h75=float(h75), h95=float(h95))
            positive = heights[heights > 0]
            if positive.size:
                values["hmean"] = float(positive.mean())
            else:
                undefined.add("hmean")
            canopy = heights[heights > cover_threshold]
            if canopy.size >= 2 and canopy.mean() != 0:
                values["hcv"] = float(canopy.std(ddof=1) / canopy.mean())
            else:
                undefined.add("hcv")
            if needs_spectral:
                try:
                    spectral = spectral_indices(
                        bands, footprint, corrected=corrected_indices
                    )
                except ValidationError:
                    continue
                values.update(spectral.values)
                undefined |= set(spectral.undefined)
            vector = MetricVector(values, frozenset(undefined), f"cell_{i}_{j}")
            try:
                prediction = predict(model, vector)
            except MissingPredictorError:
                continue
            out[i, j] = prediction.agb
    return Raster(chm.origin_x, chm.origin_y, cell_size, {"agb_t_ha": out}, nodata)


def stage_map(config: PipelineConfig, out_dir: Path,
              chm_path: Path | None = None,
              model_path: Path | None = None) -> Path:
    chm_path = chm_path or out_dir / "chm.asc"
    model_path = model_path or out_dir / "model.txt"
    chm = read_ascii_grid(chm_path, band_name="height")
    bands = SpectralBands(read_band_manifest(config.bands_manifest))
    model = read_model(model_path)
    agb = map_agb(
        chm, bands, model,
        cell_size=config.map_cell,
        cover_threshold=config.cover_threshold,
        corrected_indices=config.corrected_indices,
    )
    map_path = out_dir / "agb_map.asc"
    write_ascii_grid(agb, map_path)
    _record_stage(out_dir, "map", [map_path])
    return map_path


@dataclass(frozen=True)
class RunReport:
    out_dir: str
    stages: tuple[str, ...]
    artifacts: tuple[str, ...]


_STAGE_SEQUENCE = ("strips", "register", "terrain", "metrics", "tree_agb", "fit", "map")


def run_pipeline(config: PipelineConfig) -> RunReport:
    """Execute every stage in order; stage failures halt with the stage name
    while prior artifacts stay intact on disk."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage_fns = {
        "strips": lambda: stage_strips(config, out_dir),
        "register": lambda: stage_register(config, out_dir),
        "terrain": lambda: stage_terrain(config, out_dir),
        "metrics": lambda: stage_metrics(config, out_dir),
        "tree_agb": lambda: stage_tree_agb(config, out_dir),
        "fit": lambda: stage_fit(config, out_dir),
        "map": lambda: stage_map(config, out_dir),
    }
    done = []
    for stage in _STAGE_SEQUENCE:
        try:
            stage_fns[stage]()
        except AgbkitError as exc:
            raise StageError(stage, exc) from exc
        done.append(stage)
    manifest = json.loads((out_dir / MANIFEST_NAME).read_text())
    artifacts = tuple(
        sorted(
            rel
            for info in manifest["stages"].values()
            for rel in info["artifacts"]
        )
    )
    return RunReport(str(out_dir), tuple(done), artifacts)


# ---------------------------------------------------------------------------
# Figure-data emission
# ---------------------------------------------------------------------------


def emit_figure_data(config: PipelineConfig, out_dir: str | Path) -> list[Path]:
    """Write plottable CSV bundles from the stage artifacts.

    Produces per-scale height-vs-height scatters with their correlation
    summary, the best-subset-per-size table, and the predicted-vs-observed
    table; the AGB raster is already grid-shaped.
    """
    out_dir = Path(out_dir)
    figures = out_dir / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    report_path = out_dir / "register_report.csv"
    dtm_path = out_dir / "dtm.asc"
    if not report_path.exists() or not dtm_path.exists():
        raise ValidationError("registration/terrain artifacts missing; run those stages first")
    trees = read_tree_records(config.trees_path)
    measured = np.array([t.height for t in trees])
    crowns = [t.crown for t in trees]
    dtm = read_ascii_grid(dtm_path, band_name="elevation")
    moving = load_cloud(config.dap_path, CloudFormat.BINARY_RECORD)
    eval_lines = ["scale,pearson_r,r_squared,rmse,slope,intercept,n"]
    with open(report_path, newline="") as fh:
        scale_rows = [row for row in csv.DictReader(fh) if not row.get("error")]
    for row in scale_rows:
        scale = float(row["scale"])
        shift = np.array([float(row["shift_x"]), float(row["shift_y"]),
                          float(row["shift_z"])])
        registered = apply_transform(moving, RigidTransform.from_translation(shift))
        normalized, _ = normalize_cloud(registered, dtm)
        extracted = extract_crown_heights(normalized, crowns)
        ok = ~np.isnan(extracted)
        label = f"{scale:g}".replace(".", "p")
        scatter = figures / f"height_scatter_{label}.csv"
        lines = ["tree_id,measured,extracted"]
        for t, m, e in zip(trees, measured, extracted):
            if not np.isnan(e):
                lines.append(f"{t.id},{float(m)!r},{float(e)!r}")
        scatter.write_text("\n".join(lines) + "\n")
        written.append(scatter)
        if ok.sum() >= 3 and np.std(measured[ok]) > 0:
            ev = evaluate_registration(extracted[ok], measured[ok])
            eval_lines.append(
                f"{scale:g},{ev.pearson_r!r},{ev.r_squared!r},{ev.rmse!r},"
                f"{ev.slope!r},{ev.intercept!r},{ev.n}"
            )
    eval_path = figures / "registration_evaluation.csv"
    eval_path.write_text("\n".join(eval_lines) + "\n")
    written.append(eval_path)

    ranking_path = out_dir / "ranking.csv"
    if ranking_path.exists():
        with open(ranking_path, newline="") as fh:
            ranked = [row for row in csv.DictReader(fh) if row.get("rank")]
        best_rows = [r for r in ranked if r["best_of_size"] == "1"]
        best_rows.sort(key=lambda r: int(r["size"]))
        lines = ["size,columns,r_squared,rmse"]
        lines += [
            f"{r['size']},{r['columns']},{r['r_squared']},{r['rmse']}"
            for r in best_rows
        ]
        subset_path = figures / "subset_ranking.csv"
        subset_path.write_text("\n".join(lines) + "\n")
        written.append(subset_path)

    model_path = out_dir / "model.txt"
    metrics_path = out_dir / "plot_metrics.csv"
    agb_path = out_dir / "plot_agb.csv"
    if model_path.exists() and metrics_path.exists() and agb_path.exists():
        model = read_model(model_path)
        design = load_design_matrix(metrics_path, agb_path)
        x, y, kept_ids, _ = design.select(model.predictors)
        predicted = x @ np.array(model.coefficients) + model.intercept
        lines = ["plot_id,observed,predicted"]
        lines += [
            f"{pid},{float(obs)!r},{float(pred)!r}"
            for pid, obs, pred in zip(kept_ids, y, predicted)
        ]
        pvo_path = figures / "predicted_vs_observed.csv"
        pvo_path.write_text("\n".join(lines) + "\n")
        written.append(pvo_path)
    _record_stage(out_dir, "figures", written)
    return written
