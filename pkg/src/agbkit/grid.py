"""Georeferenced raster grids and ESRI ASCII grid exchange.

A Raster stores one or more named bands on a shared grid. The origin is the
upper-left corner (x of the left edge, y of the top edge); rows run top to
bottom, matching the ESRI ASCII row order. Cell (row, col) has its center at
(origin_x + (col + 0.5) * cell, origin_y - (row + 0.5) * cell).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_NODATA = -9999.0


@dataclass(frozen=True)
class Raster:
    origin_x: float
    origin_y: float
    cell_size: float
    bands: dict[str, np.ndarray]
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValidationError("cell_size must be positive")
        if not self.bands:
            raise ValidationError("raster needs at least one band")
        shapes = {b.shape for b in self.bands.values()}
        if len(shapes) != 1:
            raise ValidationError(f"bands disagree on grid shape: {shapes}")
        fixed = {}
        for name, arr in self.bands.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
            arr.flags.writeable = False
            fixed[name] = arr
        object.__setattr__(self, "bands", fixed)

    @property
    def nrows(self) -> int:
        return next(iter(self.bands.values())).shape[0]

    @property
    def ncols(self) -> int:
        return next(iter(self.bands.values())).shape[1]

    @property
    def band_names(self) -> tuple[str, ...]:
        return tuple(self.bands)

    def band(self, name: str | None = None) -> np.ndarray:
        """A band by name; with no name, the single band of a 1-band raster."""
        if name is None:
            if len(self.bands) != 1:
                raise ValidationError(
                    f"raster has bands {self.band_names}; specify one"
                )
            return next(iter(self.bands.values()))
        if name not in self.bands:
            raise ValidationError(f"no band named '{name}' (have {self.band_names})")
        return self.bands[name]

    def centers_x(self) -> np.ndarray:
        return self.origin_x + (np.arange(self.ncols) + 0.5) * self.cell_size

    def centers_y(self) -> np.ndarray:
        return self.origin_y - (np.arange(self.nrows) + 0.5) * self.cell_size

    def center_of(self, row: int | np.ndarray, col: int | np.ndarray):
        x = self.origin_x + (np.asarray(col) + 0.5) * self.cell_size
        y = self.origin_y - (np.asarray(row) + 0.5) * self.cell_size
        return x, y

    def valid_mask(self, name: str | None = None) -> np.ndarray:
        return self.band(name) != self.nodata

    def cell_index(self, x, y):
        """floor-quantized (row, col) of world coordinates; may be out of range."""
        col = np.floor((np.asarray(x, dtype=float) - self.origin_x) / self.cell_size).astype(int)
        row = np.floor((self.origin_y - np.asarray(y, dtype=float)) / self.cell_size).astype(int)
        return row, col


def _fmt(v: float) -> str:
    # repr round-trips float64 exactly and is byte-deterministic
    return repr(float(v))


def write_ascii_grid(raster: Raster, path: str | Path, band: str | None = None) -> None:
    """Write one band as an ESRI ASCII grid (row-major, top row first)."""
    data = raster.band(band)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    yll = raster.origin_y - raster.nrows * raster.cell_size
    lines = [
        f"ncols {raster.ncols}",
        f"nrows {raster.nrows}",
        f"xllcorner {_fmt(raster.origin_x)}",
        f"yllcorner {_fmt(yll)}",
        f"cellsize {_fmt(raster.cell_size)}",
        f"NODATA_value {_fmt(raster.nodata)}",
    ]
    body = "\n".join(" ".join(_fmt(v) for v in row) for row in data)
    path.write_text("\n".join(lines) + "\n" + body + "\n")


def read_ascii_grid(path: str | Path, band_name: str = "value") -> Raster:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"grid file does not exist: {path}")
    header: dict[str, float] = {}
    rows: list[np.ndarray] = []
    expect = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize"}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            key = parts[0].lower()
            if key in expect | {"nodata_value"} and len(parts) == 2 and len(rows) == 0:
                try:
                    header[key] = float(parts[1])
                except ValueError:
                    raise ParseError(f"bad header value for {key}", path=str(path), line=lineno)
                continue
            try:
                rows.append(np.array([float(p) for p in parts], dtype=np.float64))
            except ValueError:
                raise ParseError("unparseable grid value", path=str(path), line=lineno)
    missing = expect - set(header)
    if missing:
        raise ParseError(f"missing header keys: {sorted(missing)}", path=str(path))
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    flat = np.concatenate(rows) if rows else np.empty(0)
    if flat.size != nrows * ncols:
        raise ParseError(
            f"expected {nrows * ncols} values, found {flat.size}", path=str(path)
        )
    data = flat.reshape(nrows, ncols)
    cell = header["cellsize"]
    origin_y = header["yllcorner"] + nrows * cell
    return Raster(
        origin_x=header["xllcorner"],
        origin_y=origin_y,
        cell_size=cell,
        bands={band_name: data},
        nodata=header.get("nodata_value", DEFAULT_NODATA),
    )


def write_band_manifest(raster: Raster, directory: str | Path, stem: str) -> Path:
    """One .asc per band plus a manifest listing band names and files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{stem}.bands"
    entries = []
    for name in raster.band_names:
        fname = f"{stem}_{name}.asc"
        single = Raster(raster.origin_x, raster.origin_y, raster.cell_size,
                        {name: raster.bands[name]}, raster.nodata)
        write_ascii_grid(single, directory / fname, band=name)
        entries.append(f"{name} {fname}")
    manifest.write_text("\n".join(entries) + "\n")
    return manifest


def read_band_manifest(path: str | Path) -> Raster:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"band manifest does not exist: {path}")
    base = path.parent
    bands: dict[str, np.ndarray] = {}
    geometry = None
    nodata = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("manifest line must be '<band> <file>'", path=str(path), line=lineno)
        name, fname = parts
        single = read_ascii_grid(base / fname, band_name=name)
        geom = (single.origin_x, single.origin_y, single.cell_size,
                single.nrows, single.ncols)
        if geometry is None:
            geometry, nodata = geom, single.nodata
        elif geom != geometry:
            raise ValidationError(
                f"band '{name}' grid geometry {geom} differs from {geometry}"
            )
        bands[name] = single.band(name)
    if not bands:
        raise ParseError("manifest lists no bands", path=str(path))
    ox, oy, cell, _, _ = geometry
    return Raster(ox, oy, cell, bands, nodata)
