"""Point-cloud data model: attributed 3D points, bounding boxes, voxel grids.

Clouds are stored as immutable numpy arrays (coordinates float64, colors
uint8, intensity float32). All coordinates are assumed to live in a shared
projected metric CRS; an optional CRS tag is carried but never transformed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInputError,
    EmptyCloudError,
    ParseError,
    ResourceLimitError,
    ValidationError,
)

#: Hard cap on allocated voxels (after power-of-two padding).
DEFAULT_MAX_VOXELS = 512 ** 3

_BINARY_MAGIC = b"AGBPCL01"
_FIELD_COLOR = 1
_FIELD_INTENSITY = 2
_FIELD_GROUND = 4


class Source(enum.Enum):
    """Origin of a cloud: photogrammetric (colored) or laser (intensity)."""

    DAP = "dap"
    LIDAR = "lidar"


class CloudFormat(enum.Enum):
    XYZ_TEXT = "xyz_text"
    BINARY_RECORD = "binary_record"


@dataclass(frozen=True)
class Point3D:
    """A single attributed point; mostly a convenience view into a cloud."""

    x: float
    y: float
    z: float
    color: tuple[int, int, int] | None = None
    intensity: float | None = None
    ground: bool | None = None


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, closed on every face. min <= max per axis."""

    minimum: tuple[float, float, float]
    maximum: tuple[float, float, float]

    def __post_init__(self):
        mn = np.asarray(self.minimum, dtype=float)
        mx = np.asarray(self.maximum, dtype=float)
        if mn.shape != (3,) or mx.shape != (3,):
            raise ValidationError("bounding box corners must be 3-vectors")
        if not (np.all(np.isfinite(mn)) and np.all(np.isfinite(mx))):
            raise ValidationError("bounding box corners must be finite")
        if np.any(mn > mx):
            raise ValidationError(f"bounding box min {tuple(mn)} exceeds max {tuple(mx)}")
        object.__setattr__(self, "minimum", tuple(float(v) for v in mn))
        object.__setattr__(self, "maximum", tuple(float(v) for v in mx))

    @classmethod
    def of_points(cls, xyz: np.ndarray) -> "BoundingBox":
        if len(xyz) == 0:
            raise EmptyCloudError("cannot take bounds of an empty point set")
        return cls(tuple(xyz.min(axis=0)), tuple(xyz.max(axis=0)))

    @property
    def min_array(self) -> np.ndarray:
        return np.array(self.minimum, dtype=float)

    @property
    def max_array(self) -> np.ndarray:
        return np.array(self.maximum, dtype=float)

    @property
    def extent(self) -> np.ndarray:
        return self.max_array - self.min_array

    def horizontal_area(self) -> float:
        ext = self.extent
        return float(ext[0] * ext[1])

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the closed box."""
        xyz = np.atleast_2d(xyz)
        return np.all((xyz >= self.min_array) & (xyz <= self.max_array), axis=1)

    def contains_xy(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        mn, mx = self.min_array, self.max_array
        return (
            (xy[:, 0] >= mn[0]) & (xy[:, 0] <= mx[0])
            & (xy[:, 1] >= mn[1]) & (xy[:, 1] <= mx[1])
        )

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            tuple(np.minimum(self.min_array, other.min_array)),
            tuple(np.maximum(self.max_array, other.max_array)),
        )

    def intersection(self, other: "BoundingBox") -> "BoundingBox | None":
        mn = np.maximum(self.min_array, other.min_array)
        mx = np.minimum(self.max_array, other.max_array)
        if np.any(mn > mx):
            return None
        return BoundingBox(tuple(mn), tuple(mx))

    def expanded(self, margin: float) -> "BoundingBox":
        return BoundingBox(
            tuple(self.min_array - margin), tuple(self.max_array + margin)
        )


def _readonly(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is not None:
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Immutable attributed point cloud.

    Attributes
    ----------
    xyz : (n, 3) float64 array of coordinates in meters.
    source : Source kind (DAP or LIDAR).
    color : optional (n, 3) uint8 RGB, typical for DAP points.
    intensity : optional (n,) float32, typical for LiDAR returns.
    ground : optional (n,) bool ground-classification flags.
    crs : optional CRS tag, stored verbatim and never transformed.
    """

    xyz: np.ndarray
    source: Source = Source.DAP
    color: np.ndarray | None = None
    intensity: np.ndarray | None = None
    ground: np.ndarray | None = None
    crs: str | None = None
    _bounds: BoundingBox | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise ValidationError("point coordinates must be finite (no NaN/Inf)")
        object.__setattr__(self, "xyz", _readonly(xyz))
        n = len(xyz)
        for name, dtype, shape in (
            ("color", np.uint8, (n, 3)),
            ("intensity", np.float32, (n,)),
            ("ground", bool, (n,)),
        ):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=dtype)
            if arr.shape != shape:
                raise ValidationError(f"{name} array must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, _readonly(arr))
        if self.intensity is not None and np.any(self.intensity < 0):
            raise ValidationError("intensity values must be non-negative")
        if n:
            object.__setattr__(self, "_bounds", BoundingBox.of_points(xyz))

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def bounds(self) -> BoundingBox:
        if self._bounds is None:
            raise EmptyCloudError("empty cloud has no bounds")
        return self._bounds

    @property
    def density(self) -> float:
        """Points per square meter of the horizontal bounding-box footprint."""
        area = self.bounds.horizontal_area()
        if area <= 0:
            return float("inf") if len(self) else 0.0
        return len(self) / area

    def point(self, i: int) -> Point3D:
        return Point3D(
            *map(float, self.xyz[i]),
            color=tuple(int(c) for c in self.color[i]) if self.color is not None else None,
            intensity=float(self.intensity[i]) if self.intensity is not None else None,
            ground=bool(self.ground[i]) if self.ground is not None else None,
        )

    def take(self, index: np.ndarray) -> "PointCloud":
        """New cloud holding the selected rows; attributes follow along."""
        return PointCloud(
            self.xyz[index],
            source=self.source,
            color=self.color[index] if self.color is not None else None,
            intensity=self.intensity[index] if self.intensity is not None else None,
            ground=self.ground[index] if self.ground is not None else None,
            crs=self.crs,
        )

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        """Same attributes on replaced coordinates (bounds recomputed)."""
        return PointCloud(
            xyz,
            source=self.source,
            color=self.color,
            intensity=self.intensity,
            ground=self.ground,
            crs=self.crs,
        )

    def with_ground(self, ground: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.xyz,
            source=self.source,
            color=self.color,
            intensity=self.intensity,
            ground=ground,
            crs=self.crs,
        )


@dataclass(frozen=True)
class VoxelSignal:
    """3D density grid over a region: the operand of phase correlation.

    ``values[i, j, k]`` counts the points whose floor-quantized cell index is
    (i, j, k) relative to ``origin``; dims are zero-padded up to powers of two
    so the grid can go straight into a discrete Fourier transform.
    """

    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int]
    values: np.ndarray

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValidationError("voxel_size must be positive")
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != tuple(self.dims):
            raise ValidationError(f"values shape {values.shape} != dims {self.dims}")
        if np.any(values < 0):
            raise ValidationError("voxel values must be non-negative")
        for d in self.dims:
            if d < 2 or (d & (d - 1)) != 0:
                raise ValidationError(f"dims must be powers of two >= 2, got {self.dims}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "values", _readonly(values))

    @property
    def origin_array(self) -> np.ndarray:
        return np.array(self.origin, dtype=float)

    @property
    def total_mass(self) -> float:
        return float(self.values.sum())

    def normalized(self) -> "VoxelSignal":
        """Unit-mass copy; degenerate (zero-mass) signals are returned as-is."""
        mass = self.total_mass
        if mass == 0:
            return self
        return VoxelSignal(self.origin, self.voxel_size, self.dims, self.values / mass)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def crop(cloud: PointCloud, box: BoundingBox) -> PointCloud:
    """Points with all coordinates inside the closed box; source preserved."""
    if len(cloud) == 0:
        return cloud
    return cloud.take(box.contains(cloud.xyz))


def voxelize(
    cloud: PointCloud,
    voxel_size: float,
    region: BoundingBox,
    max_voxels: int = DEFAULT_MAX_VOXELS,
) -> VoxelSignal:
    """Count points per voxel over ``region`` and pad dims to powers of two.

    Cell assignment is floor((coord - origin) / voxel_size); points exactly on
    the max face fall into the last cell. Points outside the region are
    excluded. Raises DegenerateInputError when the raw grid is thinner than
    2 cells on any axis and ResourceLimitError when the padded grid would
    exceed ``max_voxels``.
    """
    if voxel_size <= 0:
        raise ValidationError("voxel_size must be positive")
    extent = region.extent
    raw_dims = np.maximum(np.ceil(extent / voxel_size - 1e-12).astype(int), 1)
    if np.any(raw_dims < 2):
        raise DegenerateInputError(
            f"voxel grid of dims {tuple(raw_dims)} is degenerate (every axis needs >= 2 cells)"
        )
    dims = tuple(_next_pow2(int(d)) for d in raw_dims)
    n_voxels = int(np.prod([int(d) for d in dims], dtype=np.int64))
    if n_voxels > max_voxels:
        raise ResourceLimitError(
            f"{n_voxels} voxels exceed the limit of {max_voxels}; increase voxel_size"
        )
    values = np.zeros(dims, dtype=np.float64)
    if len(cloud):
        inside = region.contains(cloud.xyz)
        pts = cloud.xyz[inside]
        if len(pts):
            idx = np.floor((pts - region.min_array) / voxel_size).astype(np.int64)
            # points exactly on the max face belong to the last raw cell
            idx = np.minimum(idx, raw_dims - 1)
            flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), dims)
            counts = np.bincount(flat, minlength=n_voxels)
            values = counts.reshape(dims).astype(np.float64)
    return VoxelSignal(tuple(region.minimum), float(voxel_size), dims, values)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

_XYZ_LAYOUTS = {
    3: ("x", "y", "z"),
    4: ("x", "y", "z", "i"),
    6: ("x", "y", "z", "r", "g", "b"),
}


def load_cloud(
    path: str | Path,
    format: CloudFormat = CloudFormat.XYZ_TEXT,
    source: Source | None = None,
) -> PointCloud:
    """Read a cloud from disk.

    For XYZ_TEXT the attribute layout comes from the optional ``#fields``
    header or is inferred from the column count (3 = bare, 4 = +intensity,
    6 = +rgb). For BINARY_RECORD the 16-byte header fixes layout and source.
    ``source`` overrides the inferred kind.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"cloud file does not exist: {path}")
    if format is CloudFormat.XYZ_TEXT:
        cloud = _load_xyz_text(path)
    elif format is CloudFormat.BINARY_RECORD:
        cloud = _load_binary(path)
    else:
        raise ValidationError(f"unknown cloud format: {format}")
    if source is not None and source is not cloud.source:
        cloud = PointCloud(cloud.xyz, source=source, color=cloud.color,
                           intensity=cloud.intensity, ground=cloud.ground, crs=cloud.crs)
    return cloud


def save_cloud(cloud: PointCloud, path: str | Path,
               format: CloudFormat = CloudFormat.BINARY_RECORD) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format is CloudFormat.XYZ_TEXT:
        _save_xyz_text(cloud, path)
    elif format is CloudFormat.BINARY_RECORD:
        _save_binary(cloud, path)
    else:
        raise ValidationError(f"unknown cloud format: {format}")


def _load_xyz_text(path: Path) -> PointCloud:
    fields: tuple[str, ...] | None = None
    rows: list[list[float]] = []
    n_cols = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.lower().startswith("fields"):
                    fields = tuple(body.split()[1:])
                continue
            parts = line.split()
            if fields is None and n_cols is None:
                if len(parts) not in _XYZ_LAYOUTS:
                    raise ParseError(
                        f"unsupported column count {len(parts)}", path=str(path), line=lineno
                    )
            if fields is not None and len(parts) != len(fields):
                raise ParseError(
                    f"expected {len(fields)} fields, found {len(parts)}",
                    path=str(path), line=lineno,
                )
            if n_cols is not None and len(parts) != n_cols:
                raise ParseError(
                    f"inconsistent column count {len(parts)} (first row had {n_cols})",
                    path=str(path), line=lineno,
                )
            n_cols = len(parts)
            try:
                values = [float(p) for p in parts]
            except ValueError:
                raise ParseError("unparseable numeric field", path=str(path), line=lineno)
            if not all(np.isfinite(values[:3])):
                raise ParseError("non-finite coordinate", path=str(path), line=lineno)
            rows.append(values)
    if not rows:
        raise EmptyCloudError(f"no points in {path}")
    names = fields if fields is not None else _XYZ_LAYOUTS[n_cols]
    data = np.asarray(rows, dtype=np.float64)
    cols = {name: data[:, i] for i, name in enumerate(names)}
    for req in ("x", "y", "z"):
        if req not in cols:
            raise ParseError(f"header is missing required field '{req}'", path=str(path))
    xyz = np.column_stack([cols["x"], cols["y"], cols["z"]])
    color = None
    intensity = None
    if all(k in cols for k in ("r", "g", "b")):
        rgb = np.column_stack([cols["r"], cols["g"], cols["b"]])
        if np.any((rgb < 0) | (rgb > 255)):
            raise ParseError("color channel outside 0-255", path=str(path))
        color = rgb.astype(np.uint8)
    if "i" in cols:
        intensity = cols["i"].astype(np.float32)
    source = Source.LIDAR if intensity is not None else Source.DAP
    return PointCloud(xyz, source=source, color=color, intensity=intensity)


def _save_xyz_text(cloud: PointCloud, path: Path) -> None:
    names = ["x", "y", "z"]
    columns: list[np.ndarray] = [cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]]
    if cloud.color is not None:
        names += ["r", "g", "b"]
        columns += [cloud.color[:, 0], cloud.color[:, 1], cloud.color[:, 2]]
    if cloud.intensity is not None:
        names += ["i"]
        columns += [cloud.intensity]
    with open(path, "w") as fh:
        fh.write("#fields " + " ".join(names) + "\n")
        for row in zip(*columns):
            fh.write(" ".join(repr(float(v)) if isinstance(v, (float, np.floating))
                              else str(int(v)) for v in row) + "\n")


def _record_dtype(mask: int) -> np.dtype:
    spec = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if mask & _FIELD_COLOR:
        spec += [("r", "u1"), ("g", "u1"), ("b", "u1")]
    if mask & _FIELD_INTENSITY:
        spec += [("i", "<f4")]
    if mask & _FIELD_GROUND:
        spec += [("gf", "u1")]
    return np.dtype(spec)


def _save_binary(cloud: PointCloud, path: Path) -> None:
    mask = 0
    if cloud.color is not None:
        mask |= _FIELD_COLOR
    if cloud.intensity is not None:
        mask |= _FIELD_INTENSITY
    if cloud.ground is not None:
        mask |= _FIELD_GROUND
    header = _BINARY_MAGIC + bytes([0 if cloud.source is Source.DAP else 1, mask]) + b"\x00" * 6
    assert len(header) == 16
    rec = np.zeros(len(cloud), dtype=_record_dtype(mask))
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    if mask & _FIELD_COLOR:
        rec["r"], rec["g"], rec["b"] = cloud.color[:, 0], cloud.color[:, 1], cloud.color[:, 2]
    if mask & _FIELD_INTENSITY:
        rec["i"] = cloud.intensity
    if mask & _FIELD_GROUND:
        rec["gf"] = cloud.ground.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def _load_binary(path: Path) -> PointCloud:
    blob = path.read_bytes()
    if len(blob) < 16:
        raise ParseError("file shorter than the 16-byte header", path=str(path), offset=len(blob))
    if blob[:8] != _BINARY_MAGIC:
        raise ParseError(f"bad magic {blob[:8]!r}", path=str(path), offset=0)
    source = Source.DAP if blob[8] == 0 else Source.LIDAR
    mask = blob[9]
    dtype = _record_dtype(mask)
    body = blob[16:]
    if len(body) == 0:
        raise EmptyCloudError(f"no records in {path}")
    if len(body) % dtype.itemsize != 0:
        raise ParseError(
            f"body size {len(body)} is not a multiple of record size {dtype.itemsize}",
            path=str(path), offset=16 + len(body) - len(body) % dtype.itemsize,
        )
    rec = np.frombuffer(body, dtype=dtype)
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]])
    if not np.all(np.isfinite(xyz)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(xyz), axis=1))[0])
        raise ParseError("non-finite coordinate", path=str(path), offset=16 + bad * dtype.itemsize)
    color = None
    intensity = None
    ground = None
    if mask & _FIELD_COLOR:
        color = np.column_stack([rec["r"], rec["g"], rec["b"]])
    if mask & _FIELD_INTENSITY:
        intensity = rec["i"].copy()
    if mask & _FIELD_GROUND:
        ground = rec["gf"].astype(bool)
    return PointCloud(xyz, source=source, color=color, intensity=intensity, ground=ground)
