"""Species-specific height-to-diameter conversion and component biomass models.

Conventions: tree height H in meters, stem diameter D in centimeters, biomass
in kilograms. These are the only units under which the embedded coefficient
magnitudes are plausible and they match standard Chinese allometric guideline
practice; the plot-level conversion to tonnes is a configurable factor.

Model forms:
    height -> D:  power a*H^b | quadratic a*H^2 + b*H + c | exponential a*e^(b*H)
    component:    d2h_power c*(D^2*H)^e | shifted_square c*(D-s)^2
                  | d_power_offset c*D^e + k | d_square_offset c*D^2 + k
                  | shifted_cube c*(s+D)^3

Components whose printed polynomial goes negative at small diameters (for
example a leaf term c*D^2 + k with k < 0) clamp to zero with a warning flag;
small trees are valid inputs and the negative range is a fit-domain artifact.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import BoundingBox
from .errors import ParseError, ValidationError

KG_TO_TONNE = 1e-3

COMPONENT_ORDER = ("stem", "branch", "leaf", "pod")


class Species(enum.Enum):
    PY = "PY"  # Pinus yunnanensis
    PA = "PA"  # Picea asperata
    TC = "TC"  # Tsuga chinensis
    CO = "CO"  # Cyclobalanopsis oxyodon
    AF = "AF"  # Acer forrestii
    PD = "PD"  # Populus davidiana
    QA = "QA"  # Quercus aliena
    AN = "AN"  # Alnus nepalensis


def parse_species(text: str) -> Species:
    """Case- and punctuation-insensitive parse of the species abbreviation."""
    key = "".join(ch for ch in text.upper() if ch.isalpha())
    try:
        return Species[key]
    except KeyError:
        raise ValidationError(f"unknown species code '{text}'")


@dataclass(frozen=True)
class HeightDiameterModel:
    kind: str
    coeffs: tuple[float, ...]

    def diameter(self, height: float) -> float:
        a = self.coeffs
        if self.kind == "power":
            return a[0] * height ** a[1]
        if self.kind == "quadratic":
            return a[0] * height * height + a[1] * height + a[2]
        if self.kind == "exponential":
            return a[0] * math.exp(a[1] * height)
        raise ValidationError(f"unknown height-diameter model kind '{self.kind}'")


@dataclass(frozen=True)
class ComponentFormula:
    kind: str
    coeffs: tuple[float, ...]

    def value(self, d: float, h: float) -> float:
        a = self.coeffs
        if self.kind == "d2h_power":
            return a[0] * (d * d * h) ** a[1]
        if self.kind == "shifted_square":
            return a[0] * (d - a[1]) ** 2
        if self.kind == "d_power_offset":
            return a[0] * d ** a[1] + a[2]
        if self.kind == "d_square_offset":
            return a[0] * d * d + a[1]
        if self.kind == "shifted_cube":
            return a[0] * (a[1] + d) ** 3
        raise ValidationError(f"unknown component formula kind '{self.kind}'")


@dataclass(frozen=True)
class SpeciesModel:
    species: Species
    height_diameter: HeightDiameterModel
    components: dict[str, ComponentFormula]
    total: ComponentFormula | None = None  # direct total; else sum of components


def _d2h(c, e):
    return ComponentFormula("d2h_power", (c, e))


# Broadleaf generic component set shared by AN and QA.
_BROADLEAF = {
    "stem": _d2h(0.02739, 0.898869),
    "branch": _d2h(0.01497, 0.875639),
    "leaf": _d2h(0.01059, 0.66681),
    "pod": _d2h(0.0121, 0.854295),
}

SPECIES_MODELS: dict[Species, SpeciesModel] = {
    Species.AN: SpeciesModel(
        Species.AN,
        HeightDiameterModel("quadratic", (0.0091, 1.1147, 7.0082)),
        dict(_BROADLEAF),
    ),
    Species.QA: SpeciesModel(
        Species.QA,
        HeightDiameterModel("power", (0.5289, 0.9858)),
        dict(_BROADLEAF),
    ),
    Species.CO: SpeciesModel(
        Species.CO,
        HeightDiameterModel("power", (0.8169, 1.2791)),
        {
            "stem": ComponentFormula("shifted_square", (0.3507, 1.1948)),
            "branch": ComponentFormula("d_power_offset", (0.03017, 2.3643, 0.051)),
            "leaf": ComponentFormula("d_square_offset", (0.01813, -0.2477)),
        },
    ),
    Species.AF: SpeciesModel(
        Species.AF,
        HeightDiameterModel("power", (0.3399, 1.6976)),
        {
            "stem": _d2h(0.02739, 0.898869),
            "branch": ComponentFormula("d_square_offset", (0.0633, 2.6259)),
            "leaf": ComponentFormula("shifted_cube", (3.5207e-4, 15.9739)),
            "pod": ComponentFormula("shifted_square", (0.054124, 3.502)),
        },
    ),
    Species.TC: SpeciesModel(
        Species.TC,
        HeightDiameterModel("power", (1.8482, 1.067)),
        {
            "stem": ComponentFormula("shifted_square", (0.3274, 3.6998)),
            "branch": _d2h(0.01497, 0.875639),
            "leaf": _d2h(0.01059, 0.66681),
            "pod": _d2h(0.0121, 0.854295),
        },
    ),
    Species.PD: SpeciesModel(
        Species.PD,
        HeightDiameterModel("power", (1.5542, 1.0014)),
        {},
        total=_d2h(0.07052, 0.9381716),
    ),
    # The published conifer table repeats one label while leaving this
    # species without a row; the exponential-diameter row is the unique
    # consistent assignment and is flagged in exported metadata.
    Species.PY: SpeciesModel(
        Species.PY,
        HeightDiameterModel("exponential", (11.666, 0.0544)),
        {
            "stem": _d2h(0.0105, 1.0652),
            "branch": _d2h(0.8775, 0.9894),
            "leaf": _d2h(0.033, 0.9352),
            "pod": _d2h(0.043, 0.6628),
        },
    ),
    Species.PA: SpeciesModel(
        Species.PA,
        HeightDiameterModel("power", (3.5113, 0.8022)),
        {
            "stem": _d2h(0.02091, 0.9285),
            "branch": _d2h(0.1336, 0.8870),
            "leaf": _d2h(0.007974, 0.8998),
            "pod": _d2h(0.011332, 0.9285),
        },
    ),
}


@dataclass(frozen=True)
class AgbComponents:
    """Component biomass (kg): stem, branch, leaf, pod; None when the species
    model has no such term. ``clamped`` names components forced up to zero."""

    species: Species
    dbh_used: float
    total: float
    stem: float | None = None
    branch: float | None = None
    leaf: float | None = None
    pod: float | None = None
    clamped: tuple[str, ...] = ()
    formula_id: str = ""

    def present(self) -> dict[str, float]:
        out = {}
        for name in COMPONENT_ORDER:
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


def dbh_from_height(species: Species, height: float,
                    models: dict[Species, SpeciesModel] | None = None) -> float:
    """Diameter at breast height (cm) from the species' fitted curve."""
    if height <= 0:
        raise ValidationError(f"height must be positive, got {height}")
    table = models if models is not None else SPECIES_MODELS
    return float(table[species].height_diameter.diameter(height))


def tree_agb(species: Species, height: float, dbh_override: float | None = None,
             models: dict[Species, SpeciesModel] | None = None) -> AgbComponents:
    """Component and total biomass (kg) for one tree."""
    if height <= 0:
        raise ValidationError(f"height must be positive, got {height}")
    table = models if models is not None else SPECIES_MODELS
    model = table[species]
    d = float(dbh_override) if dbh_override is not None else dbh_from_height(
        species, height, models=table
    )
    parts: dict[str, float] = {}
    clamped: list[str] = []
    for name, formula in model.components.items():
        v = formula.value(d, height)
        if v < 0:
            clamped.append(name)
            v = 0.0
        parts[name] = v
    if model.total is not None:
        total = model.total.value(d, height)
        if total < 0:
            clamped.append("total")
            total = 0.0
    else:
        total = sum(parts.values())
    return AgbComponents(
        species=species,
        dbh_used=d,
        total=float(total),
        stem=parts.get("stem"),
        branch=parts.get("branch"),
        leaf=parts.get("leaf"),
        pod=parts.get("pod"),
        clamped=tuple(clamped),
        formula_id=f"{species.value}:{model.height_diameter.kind}",
    )


# ---------------------------------------------------------------------------
# Tree records and plot aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeRecord:
    id: str
    species: Species
    x: float
    y: float
    height: float
    dbh: float | None = None
    crown: np.ndarray | None = None  # (k, 2) xy vertex ring

    def __post_init__(self):
        if self.height <= 0:
            raise ValidationError(f"tree {self.id}: height must be positive")
        if self.crown is not None:
            ring = np.asarray(self.crown, dtype=float).reshape(-1, 2)
            if len(ring) < 3:
                raise ValidationError(f"tree {self.id}: crown ring needs >= 3 vertices")
            if _ring_self_intersects(ring):
                raise ValidationError(f"tree {self.id}: crown ring self-intersects")
            ring.flags.writeable = False
            object.__setattr__(self, "crown", ring)


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def _ring_self_intersects(ring: np.ndarray) -> bool:
    n = len(ring)
    for i in range(n):
        a1, a2 = ring[i], ring[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue  # shared-endpoint neighbors
            if _segments_cross(a1, a2, ring[j], ring[(j + 1) % n]):
                return True
    return False


@dataclass(frozen=True)
class PlotAgb:
    density_t_ha: float
    n_trees: int
    per_tree: tuple[AgbComponents, ...]


def plot_agb(
    trees: list[TreeRecord],
    plot_area: float,
    footprint: BoundingBox | None = None,
    unit_to_tonne: float = KG_TO_TONNE,
    models: dict[Species, SpeciesModel] | None = None,
) -> PlotAgb:
    """Summed tree biomass over a plot, as tonnes per hectare.

    With a footprint, only trees whose stem position falls inside it count.
    An empty plot is valid and yields zero density.
    """
    if plot_area <= 0:
        raise ValidationError("plot_area must be positive")
    selected = trees
    if footprint is not None:
        selected = [
            t for t in trees
            if bool(footprint.contains_xy(np.array([[t.x, t.y]]))[0])
        ]
    per_tree = tuple(
        tree_agb(t.species, t.height, dbh_override=t.dbh, models=models)
        for t in selected
    )
    total_tonnes = sum(c.total for c in per_tree) * unit_to_tonne
    hectares = plot_area / 10_000.0
    return PlotAgb(
        density_t_ha=float(total_tonnes / hectares),
        n_trees=len(per_tree),
        per_tree=per_tree,
    )


# ---------------------------------------------------------------------------
# Tree-record CSV and model-table text exchange
# ---------------------------------------------------------------------------


def read_tree_records(path: str | Path) -> list[TreeRecord]:
    """CSV: id,species,x,y,height[,dbh][,crown_wkt], header required."""
    import csv

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"tree record file does not exist: {path}")
    records: list[TreeRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("missing CSV header", path=str(path), line=1)
        required = {"id", "species", "x", "y", "height"}
        missing = required - set(reader.fieldnames)
        if missing:
            raise ParseError(f"missing columns: {sorted(missing)}", path=str(path), line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                dbh = row.get("dbh") or None
                crown = row.get("crown_wkt") or None
                records.append(TreeRecord(
                    id=row["id"],
                    species=parse_species(row["species"]),
                    x=float(row["x"]),
                    y=float(row["y"]),
                    height=float(row["height"]),
                    dbh=float(dbh) if dbh else None,
                    crown=_parse_wkt_polygon(crown) if crown else None,
                ))
            except (ValueError, ValidationError) as exc:
                raise ParseError(f"bad tree record: {exc}", path=str(path), line=lineno)
    return records


def write_tree_records(records: list[TreeRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["id,species,x,y,height,dbh,crown_wkt"]
    for t in records:
        dbh = repr(float(t.dbh)) if t.dbh is not None else ""
        crown = _format_wkt_polygon(t.crown) if t.crown is not None else ""
        lines.append(
            f"{t.id},{t.species.value},{t.x!r},{t.y!r},{t.height!r},{dbh},{crown}"
        )
    path.write_text("\n".join(lines) + "\n")


def _parse_wkt_polygon(text: str) -> np.ndarray:
    body = text.strip()
    upper = body.upper()
    if not upper.startswith("POLYGON"):
        raise ValidationError(f"crown must be a WKT POLYGON, got '{text[:30]}'")
    inner = body[body.index("((") + 2: body.rindex("))")]
    pts = []
    for pair in inner.split(","):
        xy = pair.split()
        if len(xy) != 2:
            raise ValidationError(f"bad WKT coordinate pair '{pair}'")
        pts.append((float(xy[0]), float(xy[1])))
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]  # store the ring open
    return np.array(pts)


def _format_wkt_polygon(ring: np.ndarray) -> str:
    pts = [f"{float(x)!r} {float(y)!r}" for x, y in ring]
    pts.append(pts[0])
    return '"POLYGON((' + ", ".join(pts) + '))"'


def dump_species_models(path: str | Path,
                        models: dict[Species, SpeciesModel] | None = None) -> None:
    """Structured text so corrected coefficients can be swapped without rebuild."""
    table = models if models is not None else SPECIES_MODELS
    lines = [
        "# species model table: D in cm, H in m, biomass in kg",
        "# <species> dbh <kind> <coeffs...> | <species> <component|total> <kind> <coeffs...>",
    ]
    for sp in Species:
        if sp not in table:
            continue
        m = table[sp]
        hd = m.height_diameter
        lines.append(f"{sp.value} dbh {hd.kind} " + " ".join(repr(c) for c in hd.coeffs))
        for name in COMPONENT_ORDER:
            if name in m.components:
                f = m.components[name]
                lines.append(
                    f"{sp.value} {name} {f.kind} " + " ".join(repr(c) for c in f.coeffs)
                )
        if m.total is not None:
            lines.append(
                f"{sp.value} total {m.total.kind} "
                + " ".join(repr(c) for c in m.total.coeffs)
            )
    Path(path).write_text("\n".join(lines) + "\n")


def load_species_models(path: str | Path) -> dict[Species, SpeciesModel]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"species model file does not exist: {path}")
    dbh: dict[Species, HeightDiameterModel] = {}
    comps: dict[Species, dict[str, ComponentFormula]] = {}
    totals: dict[Species, ComponentFormula] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 4:
            raise ParseError("model line needs species, slot, kind, coefficients",
                             path=str(path), line=lineno)
        try:
            sp = parse_species(parts[0])
            slot, kind = parts[1], parts[2]
            coeffs = tuple(float(p) for p in parts[3:])
        except (ValueError, ValidationError) as exc:
            raise ParseError(str(exc), path=str(path), line=lineno)
        if slot == "dbh":
            dbh[sp] = HeightDiameterModel(kind, coeffs)
        elif slot == "total":
            totals[sp] = ComponentFormula(kind, coeffs)
        elif slot in COMPONENT_ORDER:
            comps.setdefault(sp, {})[slot] = ComponentFormula(kind, coeffs)
        else:
            raise ParseError(f"unknown model slot '{slot}'", path=str(path), line=lineno)
    models: dict[Species, SpeciesModel] = {}
    for sp, hd in dbh.items():
        models[sp] = SpeciesModel(sp, hd, comps.get(sp, {}), total=totals.get(sp))
    if not models:
        raise ParseError("model file defines no species", path=str(path))
    return models
