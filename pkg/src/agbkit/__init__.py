"""agbkit: DAP/LiDAR point-cloud fusion, canopy height models, and
plot-to-landscape forest above-ground biomass estimation."""

__version__ = "0.1.0"

from .cloud import (
    BoundingBox,
    CloudFormat,
    Point3D,
    PointCloud,
    Source,
    VoxelSignal,
    crop,
    load_cloud,
    save_cloud,
    voxelize,
)
from .grid import Raster, read_ascii_grid, read_band_manifest, write_ascii_grid
from .registration import (
    PhaseCorrelationResult,
    RegistrationEvaluation,
    RigidTransform,
    apply_transform,
    evaluate_registration,
    grpc_translation,
    icp_refine,
    register_multiscale,
)
from .terrain import (
    GroundFilterParams,
    TriangulatedSurface,
    build_chm,
    build_dsm,
    build_dtm,
    filter_ground,
    normalize_cloud,
)
from .metrics import MetricVector, SpectralBands, spectral_indices, structural_metrics
from .allometry import (
    AgbComponents,
    Species,
    TreeRecord,
    dbh_from_height,
    plot_agb,
    tree_agb,
)
from .regression import (
    DesignMatrix,
    LinearModel,
    all_subsets,
    combined_agb_model,
    evaluate,
    fit_ols,
    predict,
)
from .config import PipelineConfig, PlotDefinition
from .pipeline import map_agb, run_pipeline
from .synthetic import SceneParams, generate_synthetic_scene
