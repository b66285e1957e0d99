"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 stage failure, 4 resource limit.
The --threads flag bounds worker counts only; results never depend on it.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .cloud import CloudFormat, load_cloud, save_cloud
from .config import PipelineConfig, parse_config
from .errors import AgbkitError, StageError, ValidationError
from .grid import read_ascii_grid, read_band_manifest, write_ascii_grid
from .metrics import SpectralBands
from .pipeline import (
    emit_figure_data,
    map_agb,
    run_pipeline,
    stage_fit,
    stage_map,
    stage_metrics,
    stage_register,
    stage_strips,
    stage_terrain,
    stage_tree_agb,
    validate_manifest,
)
from .regression import read_model
from .synthetic import SceneParams, generate_synthetic_scene, write_scene
from .terrain import GroundFilterParams, build_chm, build_dsm, build_dtm, filter_ground, normalize_cloud


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="pipeline config file")
    parser.add_argument("--out-dir", help="output directory override")
    parser.add_argument("--seed", type=int, help="random seed override")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker bound (affects speed only, never results)")
    parser.add_argument("--verbose", action="store_true")


def _build_config(args, require_config: bool = True) -> PipelineConfig:
    overrides: dict[str, str] = {}
    if args.out_dir:
        overrides["output.dir"] = args.out_dir
    if args.seed is not None:
        overrides["registration.seed"] = str(args.seed)
    if args.config:
        return parse_config(args.config, overrides)
    if require_config:
        raise ValidationError("--config is required for this command")
    config = PipelineConfig()
    if args.out_dir:
        config = PipelineConfig(out_dir=args.out_dir)
    return config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="agbkit",
        description="DAP/LiDAR fusion, canopy height models, and forest AGB mapping",
    )
    parser.add_argument("--version", action="version", version=f"agbkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="align a moving cloud onto a fixed cloud")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--scales", default="2,3,4,5,10")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--cutoff", type=float, default=0.25)
    p.add_argument("--min-inlier", type=float, default=0.25)
    p.add_argument("--out", required=True, help="transform file")
    p.add_argument("--report", help="per-scale report CSV")
    p.add_argument("--apply", help="write the registered moving cloud here")
    _add_common(p)

    p = sub.add_parser("terrain", help="ground filtering and raster products")
    tsub = p.add_subparsers(dest="terrain_command", required=True)
    tp = tsub.add_parser("filter-ground")
    tp.add_argument("--cloud", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--seed-cell", type=float, default=20.0)
    tp.add_argument("--max-distance", type=float, default=1.0)
    tp.add_argument("--max-angle", type=float, default=20.0)
    tp.add_argument("--max-iterations", type=int, default=20)
    _add_common(tp)
    tp = tsub.add_parser("dtm")
    tp.add_argument("--ground", required=True)
    tp.add_argument("--cell", type=float, default=0.5)
    tp.add_argument("--out", required=True)
    _add_common(tp)
    tp = tsub.add_parser("normalize")
    tp.add_argument("--cloud", required=True)
    tp.add_argument("--dtm", required=True)
    tp.add_argument("--out", required=True)
    _add_common(tp)
    tp = tsub.add_parser("chm")
    tp.add_argument("--cloud", required=True, help="normalized cloud")
    tp.add_argument("--cell", type=float, default=0.1)
    tp.add_argument("--out", required=True)
    tp.add_argument("--emit-dsm", help="also write the absolute DSM here")
    tp.add_argument("--absolute-cloud", help="raw (pre-normalization) cloud for the DSM")
    _add_common(tp)

    p = sub.add_parser("metrics", help="per-plot spectral and structural metrics")
    p.add_argument("--bands", required=True, help="band manifest")
    p.add_argument("--cloud", help="normalized cloud (structural source)")
    p.add_argument("--chm", help="CHM raster (structural source)")
    p.add_argument("--plots", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cover-threshold", type=float, default=2.0)
    p.add_argument("--corrected-indices", action="store_true")
    p.add_argument("--per-pixel", action="store_true")
    _add_common(p)

    p = sub.add_parser("tree-agb", help="per-tree biomass and plot densities")
    p.add_argument("--trees", required=True)
    p.add_argument("--plots", required=True)
    p.add_argument("--models", help="species model table override")
    p.add_argument("--out-dir-results", dest="agb_out", required=True)
    _add_common(p)

    p = sub.add_parser("fit", help="all-subsets selection and OLS fit")
    p.add_argument("--metrics", required=True)
    p.add_argument("--agb", help="plot AGB table (else response column in metrics)")
    p.add_argument("--response", default="agb_t_ha")
    p.add_argument("--candidates", help="comma-separated predictor names")
    p.add_argument("--max-size", type=int, default=3)
    p.add_argument("--loocv", action="store_true")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--ranking", help="ranking CSV")
    _add_common(p)

    p = sub.add_parser("map", help="wall-to-wall AGB raster")
    p.add_argument("--chm", required=True)
    p.add_argument("--bands", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--cell", type=float, default=15.0)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic verification scene")
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--extent", type=float, default=200.0)
    p.add_argument("--trees", type=int, default=120)
    p.add_argument("--dap-density", type=float, default=42.45)
    p.add_argument("--lidar-density", type=float, default=0.627)
    p.add_argument("--strips", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("emit-figures", help="write plottable CSV bundles")
    _add_common(p)

    p = sub.add_parser("validate", help="re-check artifact hashes in a run dir")
    _add_common(p)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except AgbkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "register":
        from .registration import icp_refine, register_multiscale, save_transform, apply_transform

        fixed = load_cloud(args.fixed, CloudFormat.BINARY_RECORD)
        moving = load_cloud(args.moving, CloudFormat.BINARY_RECORD)
        scales = [float(s) for s in args.scales.split(",") if s.strip()]
        results = register_multiscale(
            fixed, moving, scales,
            refine=False,
            cutoff_fraction=args.cutoff,
            min_inlier_fraction=args.min_inlier,
            seed=args.seed or 0,
        )
        ok_scales = sorted(s for s, r in results.items() if r.ok)
        if not ok_scales:
            raise ValidationError("registration failed at every scale")
        finest = ok_scales[0]
        chosen = results[finest].transform
        if args.refine:
            chosen = icp_refine(fixed, moving, chosen, max_pair_dist=2.0 * finest)
        inlier = results[finest].correlation.inlier_fraction
        save_transform(chosen, args.out,
                       comment=f"scale={finest} inlier_fraction={inlier!r}")
        if args.report:
            lines = ["scale,shift_x,shift_y,shift_z,inlier_fraction,residual,error"]
            for scale in sorted(results):
                res = results[scale]
                if res.ok:
                    s = res.correlation.shift
                    lines.append(
                        f"{scale},{s[0]!r},{s[1]!r},{s[2]!r},"
                        f"{res.correlation.inlier_fraction!r},"
                        f"{res.correlation.residual!r},"
                    )
                else:
                    lines.append(f"{scale},,,,,,{type(res.error).__name__}")
            Path(args.report).write_text("\n".join(lines) + "\n")
        if args.apply:
            save_cloud(apply_transform(moving, chosen), args.apply,
                       CloudFormat.BINARY_RECORD)
        for scale in sorted(results):
            res = results[scale]
            if res.ok:
                s = res.correlation.shift
                print(f"scale {scale:g}: shift ({s[0]:.3f}, {s[1]:.3f}, {s[2]:.3f}) m "
                      f"inliers {res.correlation.inlier_fraction:.2f}")
            else:
                print(f"scale {scale:g}: {res.error}")
        return 0

    if args.command == "terrain":
        return _dispatch_terrain(args)

    if args.command == "metrics":
        config = PipelineConfig(
            bands_manifest=args.bands,
            plots_path=args.plots,
            cover_threshold=args.cover_threshold,
            corrected_indices=args.corrected_indices,
            per_pixel=args.per_pixel,
            metrics_from_cloud=args.cloud is not None,
        )
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        stage_metrics(
            config, out.parent,
            normalized_path=Path(args.cloud) if args.cloud else None,
            chm_path=Path(args.chm) if args.chm else None,
        )
        produced = out.parent / "plot_metrics.csv"
        if produced != out:
            produced.replace(out)
        print(f"wrote {out}")
        return 0

    if args.command == "tree-agb":
        config = PipelineConfig(
            trees_path=args.trees,
            plots_path=args.plots,
            species_models=args.models or "",
        )
        out_dir = Path(args.agb_out)
        out_dir.mkdir(parents=True, exist_ok=True)
        stage_tree_agb(config, out_dir)
        print(f"wrote {out_dir / 'tree_agb.csv'} and {out_dir / 'plot_agb.csv'}")
        return 0

    if args.command == "fit":
        candidates = (
            tuple(c.strip() for c in args.candidates.split(",") if c.strip())
            if args.candidates else PipelineConfig().candidates
        )
        config = PipelineConfig(
            candidates=candidates, max_size=args.max_size, loocv=args.loocv,
        )
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        stage_fit(
            config, out.parent,
            metrics_path=Path(args.metrics),
            agb_path=Path(args.agb) if args.agb else None,
        )
        produced = out.parent / "model.txt"
        if produced != out:
            produced.replace(out)
        if args.ranking:
            ranked = out.parent / "ranking.csv"
            if str(ranked) != args.ranking:
                ranked.replace(args.ranking)
        print(f"wrote {out}")
        return 0

    if args.command == "map":
        chm = read_ascii_grid(args.chm, band_name="height")
        bands = SpectralBands(read_band_manifest(args.bands))
        model = read_model(args.model)
        raster = map_agb(chm, bands, model, cell_size=args.cell)
        write_ascii_grid(raster, args.out)
        print(f"wrote {args.out}")
        return 0

    if args.command == "run":
        config = _build_config(args)
        report = run_pipeline(config)
        print(f"completed stages: {', '.join(report.stages)}")
        print(f"artifacts under {report.out_dir}: {len(report.artifacts)}")
        return 0

    if args.command == "synth":
        params = SceneParams(
            extent=args.extent,
            tree_count=args.trees,
            dap_density=args.dap_density,
            lidar_density=args.lidar_density,
            lidar_strip_count=args.strips,
        )
        scene = generate_synthetic_scene(args.seed or 42, params)
        write_scene(scene, args.scene_dir)
        print(f"wrote scene to {args.scene_dir} (config: {args.scene_dir}/pipeline.cfg)")
        return 0

    if args.command == "emit-figures":
        config = _build_config(args)
        written = emit_figure_data(config, config.out_dir)
        for path in written:
            print(f"wrote {path}")
        return 0

    if args.command == "validate":
        config = _build_config(args)
        problems = validate_manifest(config.out_dir)
        if problems:
            for problem in problems:
                print(problem, file=sys.stderr)
            return 3
        print("manifest ok")
        return 0

    raise ValidationError(f"unknown command {args.command}")


def _dispatch_terrain(args) -> int:
    cmd = args.terrain_command
    if cmd == "filter-ground":
        cloud = load_cloud(args.cloud, CloudFormat.BINARY_RECORD)
        params = GroundFilterParams(
            seed_cell_size=args.seed_cell,
            max_tin_distance=args.max_distance,
            max_tin_angle=args.max_angle,
            max_iterations=args.max_iterations,
        )
        ground = filter_ground(cloud, params)
        save_cloud(ground, args.out, CloudFormat.BINARY_RECORD)
        print(f"{len(ground)} / {len(cloud)} points classified ground -> {args.out}")
        return 0
    if cmd == "dtm":
        ground = load_cloud(args.ground, CloudFormat.BINARY_RECORD)
        dtm = build_dtm(ground, args.cell)
        write_ascii_grid(dtm, args.out)
        print(f"wrote {args.out}")
        return 0
    if cmd == "normalize":
        cloud = load_cloud(args.cloud, CloudFormat.BINARY_RECORD)
        dtm = read_ascii_grid(args.dtm, band_name="elevation")
        normalized, dropped = normalize_cloud(cloud, dtm)
        save_cloud(normalized, args.out, CloudFormat.BINARY_RECORD)
        print(f"wrote {args.out} ({dropped} points dropped over nodata)")
        return 0
    if cmd == "chm":
        cloud = load_cloud(args.cloud, CloudFormat.BINARY_RECORD)
        chm = build_chm(cloud, args.cell)
        write_ascii_grid(chm, args.out)
        print(f"wrote {args.out}")
        if args.emit_dsm:
            source = (
                load_cloud(args.absolute_cloud, CloudFormat.BINARY_RECORD)
                if args.absolute_cloud else cloud
            )
            dsm = build_dsm(source, args.cell)
            write_ascii_grid(dsm, args.emit_dsm)
            print(f"wrote {args.emit_dsm}")
        return 0
    raise ValidationError(f"unknown terrain command {cmd}")


if __name__ == "__main__":
    sys.exit(main())
