"""Spectral vegetation indices and structural height metrics.

Indices are evaluated on footprint-mean reflectances (mean first, then the
index formula), which is stable under noisy pixels; ``per_pixel=True``
switches to index-then-mean for sensitivity checks.

Index formulas, on band reflectances:

    ARVI  = (nir - p_rb) / (nir + p_rb),  p_rb = red - 0.5 * (blue - red)
    DVI   = nir - red
    GNDVI = (nir - green) / (nir + green)
    NDVI  = (nir - red) / (nir + red)
    OSAVI = (nir - red) / (nir + red + 0.16)
    RGRI  = red - green
    NormG = green / (red + green + green)

RGRI and NormG look like typos in their source (a "ratio" computed as a
difference; a denominator repeating green) but are implemented as printed;
``corrected=True`` switches to red/green and green/(red + green + blue).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import BoundingBox, PointCloud
from .errors import ValidationError
from .grid import Raster

log = logging.getLogger(__name__)

BAND_NAMES = ("blue", "green", "red", "red_edge", "nir")
SPECTRAL_METRICS = ("ARVI", "DVI", "GNDVI", "NDVI", "OSAVI", "RGRI", "NormG")
STRUCTURAL_METRICS = ("h25", "h50", "h75", "h95", "hmean", "hcv")
ALL_METRICS = SPECTRAL_METRICS + STRUCTURAL_METRICS


@dataclass(frozen=True)
class SpectralBands:
    """Five co-registered reflectance grids (blue, green, red, red_edge, nir).

    Reflectances are expected in [0, 1]; out-of-range values are accepted
    with a warning. The red-edge band is carried but feeds no index formula.
    """

    raster: Raster

    def __post_init__(self):
        missing = [b for b in BAND_NAMES if b not in self.raster.bands]
        if missing:
            raise ValidationError(f"band grids missing: {missing}")
        for name in BAND_NAMES:
            arr = self.raster.bands[name]
            valid = arr[arr != self.raster.nodata]
            if valid.size and (valid.min() < 0 or valid.max() > 1):
                log.warning(
                    "band '%s' has reflectances outside [0, 1] (%.3f..%.3f)",
                    name, valid.min(), valid.max(),
                )

    def footprint_values(self, footprint: BoundingBox) -> dict[str, np.ndarray]:
        """Per-band values of in-footprint cells, joint-masked for nodata."""
        r = self.raster
        cx = r.centers_x()
        cy = r.centers_y()
        mn, mx = footprint.min_array, footprint.max_array
        cols = np.flatnonzero((cx >= mn[0]) & (cx <= mx[0]))
        rows = np.flatnonzero((cy >= mn[1]) & (cy <= mx[1]))
        if len(cols) == 0 or len(rows) == 0:
            raise ValidationError("footprint covers no band cells")
        block = {b: r.bands[b][np.ix_(rows, cols)].ravel() for b in BAND_NAMES}
        valid = np.ones(len(rows) * len(cols), dtype=bool)
        for b in BAND_NAMES:
            valid &= block[b] != r.nodata
        if not valid.any():
            raise ValidationError("footprint covers only nodata band cells")
        return {b: block[b][valid] for b in BAND_NAMES}


@dataclass(frozen=True)
class MetricVector:
    """Named scalar metrics plus the set of undefined names and a tag."""

    values: dict[str, float]
    undefined: frozenset[str] = frozenset()
    tag: str = ""

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def get(self, name: str) -> float | None:
        if name in self.undefined:
            return None
        return self.values.get(name)

    def defined(self, name: str) -> bool:
        return name in self.values and name not in self.undefined

    def merge(self, other: "MetricVector") -> "MetricVector":
        return MetricVector(
            {**self.values, **other.values},
            self.undefined | other.undefined,
            self.tag or other.tag,
        )


def _index_formulas(blue, green, red, nir, corrected: bool):
    """Each entry: (numerator, denominator); denominator None = no division."""
    p_rb = red - 0.5 * (blue - red)
    table = {
        "ARVI": (nir - p_rb, nir + p_rb),
        "DVI": (nir - red, None),
        "GNDVI": (nir - green, nir + green),
        "NDVI": (nir - red, nir + red),
        "OSAVI": (nir - red, nir + red + 0.16),
    }
    if corrected:
        table["RGRI"] = (red, green)
        table["NormG"] = (green, red + green + blue)
    else:
        table["RGRI"] = (red - green, None)
        table["NormG"] = (green, red + green + green)
    return table


def spectral_indices(
    bands: SpectralBands,
    footprint: BoundingBox,
    corrected: bool = False,
    per_pixel: bool = False,
    tag: str = "",
) -> MetricVector:
    """Vegetation indices over the footprint.

    A zero denominator marks that single index undefined rather than failing
    the whole evaluation; an empty footprint is an error.
    """
    cells = bands.footprint_values(footprint)
    values: dict[str, float] = {}
    undefined: set[str] = set()
    if per_pixel:
        formulas = _index_formulas(
            cells["blue"], cells["green"], cells["red"], cells["nir"], corrected
        )
        for name, (num, den) in formulas.items():
            if den is None:
                values[name] = float(np.mean(num))
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(den != 0, num / np.where(den == 0, 1, den), np.nan)
            good = ~np.isnan(ratio)
            if good.any():
                values[name] = float(np.mean(ratio[good]))
            else:
                values[name] = float("nan")
                undefined.add(name)
    else:
        means = {b: float(np.mean(cells[b])) for b in BAND_NAMES}
        formulas = _index_formulas(
            means["blue"], means["green"], means["red"], means["nir"], corrected
        )
        for name, (num, den) in formulas.items():
            if den is None:
                values[name] = float(num)
            elif den == 0:
                values[name] = float("nan")
                undefined.add(name)
            else:
                values[name] = float(num / den)
    return MetricVector(values, frozenset(undefined), tag)


def _footprint_heights(
    source: PointCloud | Raster, footprint: BoundingBox
) -> np.ndarray:
    if isinstance(source, PointCloud):
        if len(source) == 0:
            return np.empty(0)
        inside = footprint.contains_xy(source.xyz[:, :2])
        return source.xyz[inside, 2]
    cx = source.centers_x()
    cy = source.centers_y()
    mn, mx = footprint.min_array, footprint.max_array
    cols = (cx >= mn[0]) & (cx <= mx[0])
    rows = (cy >= mn[1]) & (cy <= mx[1])
    block = source.band()[np.ix_(rows, cols)].ravel()
    return block[block != source.nodata]


def structural_metrics(
    source: PointCloud | Raster,
    footprint: BoundingBox,
    cover_threshold: float = 2.0,
    tag: str = "",
) -> MetricVector:
    """Height percentiles, mean of non-ground heights, and canopy-cover CV.

    Percentiles use linear interpolation at quantile position (n - 1) * p.
    hmean averages the heights above zero; hcv is the coefficient of
    variation (sample standard deviation over mean) of heights above
    ``cover_threshold`` and is undefined with fewer than two such samples.
    """
    heights = np.asarray(_footprint_heights(source, footprint), dtype=float)
    if heights.size == 0:
        raise ValidationError("footprint contains no height samples")
    values: dict[str, float] = {}
    undefined: set[str] = set()
    h25, h50, h75, h95 = np.percentile(heights, [25, 50, 75, 95], method="linear")
    values.update(h25=float(h25), h50=float(h50), h75=float(h75), h95=float(h95))
    positive = heights[heights > 0]
    if positive.size:
        values["hmean"] = float(positive.mean())
    else:
        values["hmean"] = float("nan")
        undefined.add("hmean")
    canopy = heights[heights > cover_threshold]
    if canopy.size >= 2 and canopy.mean() != 0:
        values["hcv"] = float(canopy.std(ddof=1) / canopy.mean())
    else:
        values["hcv"] = float("nan")
        undefined.add("hcv")
    return MetricVector(values, frozenset(undefined), tag)
