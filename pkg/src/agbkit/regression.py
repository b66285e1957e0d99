"""All-subsets OLS model selection and fit-quality statistics.

Fits solve min ||[X 1] b - y|| through a rank-revealing orthogonal
decomposition (SVD-backed least squares, never normal equations) and report

    R2    = 1 - sum((x - xhat)^2) / sum((x - xbar)^2)
    RMSE  = sqrt(sum((x - xhat)^2) / n)
    rRMSE = RMSE / xbar * 100%

on the training sample. Ranking uses plain (unadjusted) R2; adjusted R2 and
AIC ride along as extra columns. A zero-variance response reports R2 = 0
with a degenerate flag rather than NaN.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import qr as _pivoted_qr

from .errors import (
    CollinearityError,
    MissingPredictorError,
    ParseError,
    ValidationError,
)
from .metrics import MetricVector

MAX_CANDIDATE_COLUMNS = 20


@dataclass(frozen=True)
class DesignMatrix:
    """Observations by named predictor columns plus the response (t/ha).

    NaN marks an undefined metric; rows containing NaN in the columns used by
    a fit are dropped (and counted) at fit time.
    """

    columns: tuple[str, ...]
    data: np.ndarray  # (n, k)
    response: np.ndarray  # (n,)
    row_ids: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        response = np.asarray(self.response, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != len(self.columns):
            raise ValidationError(
                f"data shape {data.shape} does not match {len(self.columns)} columns"
            )
        if response.shape != (data.shape[0],):
            raise ValidationError("response length must equal the row count")
        if len(set(self.columns)) != len(self.columns):
            raise ValidationError("duplicate column names")
        ids = self.row_ids or tuple(str(i) for i in range(data.shape[0]))
        if len(ids) != data.shape[0]:
            raise ValidationError("row_ids length must equal the row count")
        data.flags.writeable = False
        response.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "row_ids", ids)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def select(self, columns: list[str] | tuple[str, ...]):
        """(X, y, kept_row_ids, n_dropped) for the requested columns."""
        missing = [c for c in columns if c not in self.columns]
        if missing:
            raise MissingPredictorError(f"columns not in design matrix: {missing}")
        idx = [self.columns.index(c) for c in columns]
        x = self.data[:, idx]
        keep = ~np.isnan(x).any(axis=1) & ~np.isnan(self.response)
        dropped = int((~keep).sum())
        kept_ids = tuple(r for r, k in zip(self.row_ids, keep) if k)
        return x[keep], self.response[keep], kept_ids, dropped


@dataclass(frozen=True)
class LinearModel:
    """prediction = intercept + sum(coefficient * predictor)."""

    predictors: tuple[str, ...]
    coefficients: tuple[float, ...]
    intercept: float
    r_squared: float
    rmse: float
    rrmse: float | None
    n: int
    adj_r_squared: float | None = None
    aic: float | None = None
    degenerate: bool = False
    n_dropped: int = 0
    source_hash: str = ""

    def linear_value(self, values: dict[str, float]) -> float:
        total = self.intercept
        for name, coef in zip(self.predictors, self.coefficients):
            total += coef * values[name]
        return total


@dataclass(frozen=True)
class Prediction:
    agb: float
    clamped: bool


def _fit_statistics(y: np.ndarray, predicted: np.ndarray):
    n = len(y)
    ss_res = float(np.sum((y - predicted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    degenerate = ss_tot == 0.0
    r_squared = 0.0 if degenerate else 1.0 - ss_res / ss_tot
    rmse = math.sqrt(ss_res / n)
    ybar = float(y.mean())
    rrmse = None if ybar == 0 else rmse / ybar * 100.0
    return r_squared, rmse, rrmse, degenerate, ss_res


def fit_ols(design: DesignMatrix, columns: list[str] | tuple[str, ...]) -> LinearModel:
    """Least-squares fit of the response on the selected columns.

    Raises CollinearityError, naming the dependent columns, when the selected
    block (with intercept) is rank deficient; requires n > k + 1 rows after
    dropping undefined rows.
    """
    columns = tuple(columns)
    if not columns:
        raise ValidationError("select at least one column")
    x, y, kept_ids, dropped = design.select(columns)
    n, k = x.shape
    if n <= k + 1:
        raise ValidationError(
            f"need more than {k + 1} complete rows for {k} predictors, have {n}"
        )
    a = np.column_stack([x, np.ones(n)])
    solution, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
    if rank < k + 1:
        _, r_diag, pivots = _pivoted_qr(a, mode="economic", pivoting=True)
        small = np.abs(np.diag(r_diag)) <= np.abs(r_diag[0, 0]) * 1e-10
        dependent = tuple(
            columns[p] for p, s in zip(pivots, small) if s and p < k
        )
        raise CollinearityError(
            f"columns are linearly dependent: {dependent or columns}", dependent or columns
        )
    predicted = a @ solution
    r_squared, rmse, rrmse, degenerate, ss_res = _fit_statistics(y, predicted)
    adj = None
    if not degenerate and n - k - 1 > 0:
        adj = 1.0 - (1.0 - r_squared) * (n - 1) / (n - k - 1)
    aic = None
    if ss_res > 0:
        aic = n * math.log(ss_res / n) + 2 * (k + 1)
    coeffs = tuple(float(c) for c in solution[:k])
    if degenerate:
        # unique LS solution is all-zero slopes with the mean intercept, but
        # keep whatever the solver returned if the system was consistent
        pass
    return LinearModel(
        predictors=columns,
        coefficients=coeffs,
        intercept=float(solution[k]),
        r_squared=r_squared,
        rmse=rmse,
        rrmse=rrmse,
        n=n,
        adj_r_squared=adj,
        aic=aic,
        degenerate=degenerate,
        n_dropped=dropped,
    )


@dataclass(frozen=True)
class SubsetEntry:
    columns: tuple[str, ...]
    r_squared: float
    rmse: float
    rrmse: float | None
    adj_r_squared: float | None
    model: LinearModel


@dataclass(frozen=True)
class SubsetRanking:
    ranked: tuple[SubsetEntry, ...]
    best_per_size: dict[int, SubsetEntry]
    failures: tuple[tuple[tuple[str, ...], str], ...]

    @property
    def best(self) -> SubsetEntry:
        return self.ranked[0]


def all_subsets(
    design: DesignMatrix,
    max_size: int = 3,
    candidates: list[str] | None = None,
    column_limit: int = MAX_CANDIDATE_COLUMNS,
) -> SubsetRanking:
    """Fit every non-empty predictor subset of size <= max_size.

    Subsets rank by training R2 descending with lexicographic column-name
    tie-break, so identical inputs always produce identical rankings. Fits
    that fail (collinearity, too few rows) are excluded with a recorded
    reason.
    """
    if max_size < 1:
        raise ValidationError("max_size must be at least 1")
    names = sorted(candidates if candidates is not None else design.columns)
    missing = [c for c in names if c not in design.columns]
    if missing:
        raise MissingPredictorError(f"candidate columns not in design matrix: {missing}")
    if len(names) > column_limit:
        raise ValidationError(
            f"{len(names)} candidate columns exceed the limit of {column_limit}"
        )
    entries: list[SubsetEntry] = []
    failures: list[tuple[tuple[str, ...], str]] = []
    for size in range(1, min(max_size, len(names)) + 1):
        for combo in itertools.combinations(names, size):
            try:
                model = fit_ols(design, combo)
            except (CollinearityError, ValidationError) as exc:
                failures.append((combo, str(exc)))
                continue
            entries.append(SubsetEntry(
                columns=combo,
                r_squared=model.r_squared,
                rmse=model.rmse,
                rrmse=model.rrmse,
                adj_r_squared=model.adj_r_squared,
                model=model,
            ))
    if not entries:
        raise ValidationError("every candidate subset failed to fit")
    entries.sort(key=lambda e: (-e.r_squared, e.columns))
    best_per_size: dict[int, SubsetEntry] = {}
    for entry in entries:
        size = len(entry.columns)
        if size not in best_per_size:
            best_per_size[size] = entry
    return SubsetRanking(tuple(entries), best_per_size, tuple(failures))


def predict(model: LinearModel, metrics: MetricVector | dict[str, float]) -> Prediction:
    """Apply the model; negative biomass clamps to zero with a flag."""
    if isinstance(metrics, MetricVector):
        values = {}
        for name in model.predictors:
            if not metrics.defined(name):
                raise MissingPredictorError(f"metric '{name}' missing or undefined")
            values[name] = metrics[name]
    else:
        missing = [n for n in model.predictors if n not in metrics
                   or metrics[n] is None or np.isnan(metrics[n])]
        if missing:
            raise MissingPredictorError(f"metrics missing or undefined: {missing}")
        values = metrics
    raw = model.linear_value(values)
    if raw < 0:
        return Prediction(0.0, True)
    return Prediction(float(raw), False)


def evaluate(model: LinearModel, design: DesignMatrix):
    """(r_squared, rmse, rrmse) of the raw linear predictions on the design."""
    x, y, _, _ = design.select(model.predictors)
    n = len(y)
    if n < 1:
        raise ValidationError("no complete rows to evaluate on")
    predicted = x @ np.array(model.coefficients) + model.intercept
    r_squared, rmse, rrmse, _, _ = _fit_statistics(y, predicted)
    return r_squared, rmse, rrmse


def loocv(design: DesignMatrix, columns: list[str] | tuple[str, ...]):
    """Leave-one-out statistics (an extension beyond the published in-sample
    evaluation): (r_squared, rmse, rrmse) of held-out predictions."""
    columns = tuple(columns)
    x, y, _, _ = design.select(columns)
    n = len(y)
    if n <= len(columns) + 2:
        raise ValidationError("too few rows for leave-one-out evaluation")
    held_out = np.empty(n)
    for i in range(n):
        mask = np.ones(n, dtype=bool)
        mask[i] = False
        a = np.column_stack([x[mask], np.ones(n - 1)])
        sol, _, rank, _ = np.linalg.lstsq(a, y[mask], rcond=None)
        if rank < len(columns) + 1:
            raise CollinearityError("leave-one-out fold is rank deficient", columns)
        held_out[i] = x[i] @ sol[:-1] + sol[-1]
    r_squared, rmse, rrmse, _, _ = _fit_statistics(y, held_out)
    return r_squared, rmse, rrmse


# ---------------------------------------------------------------------------
# Built-in published model and the model file format
# ---------------------------------------------------------------------------


def combined_agb_model() -> LinearModel:
    """The published plot-level predictor combining spectral and structural
    metrics: AGB = 4398*OSAVI - 17410*DVI + 4.018*h75 - 57.78 (t/ha)."""
    return LinearModel(
        predictors=("OSAVI", "DVI", "h75"),
        coefficients=(4398.0, -17410.0, 4.018),
        intercept=-57.78,
        r_squared=0.81,
        rmse=11.99,
        rrmse=9.71,
        n=34,
        source_hash="builtin",
    )


def write_model(model: LinearModel, path: str | Path, comment: str = "") -> None:
    """Structured text: predictors, coefficients, intercept, fit statistics,
    and a data-hash provenance line (content-derived, so reruns are
    byte-identical)."""
    lines = []
    if comment:
        lines.append("# " + comment)
    for name, coef in zip(model.predictors, model.coefficients):
        lines.append(f"predictor {name} {coef!r}")
    lines.append(f"intercept {model.intercept!r}")
    lines.append(f"r_squared {model.r_squared!r}")
    lines.append(f"rmse {model.rmse!r}")
    lines.append(f"rrmse {'' if model.rrmse is None else repr(model.rrmse)}")
    lines.append(f"n {model.n}")
    if model.adj_r_squared is not None:
        lines.append(f"adj_r_squared {model.adj_r_squared!r}")
    if model.aic is not None:
        lines.append(f"aic {model.aic!r}")
    lines.append(f"source_hash {model.source_hash or '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_model(path: str | Path) -> LinearModel:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"model file does not exist: {path}")
    predictors: list[str] = []
    coefficients: list[float] = []
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "predictor":
            if len(parts) != 3:
                raise ParseError("predictor line needs name and coefficient",
                                 path=str(path), line=lineno)
            predictors.append(parts[1])
            coefficients.append(float(parts[2]))
        elif len(parts) >= 1:
            fields[parts[0]] = parts[1] if len(parts) > 1 else ""
    if not predictors or "intercept" not in fields:
        raise ParseError("model file needs predictors and an intercept", path=str(path))
    rrmse_text = fields.get("rrmse", "")
    return LinearModel(
        predictors=tuple(predictors),
        coefficients=tuple(coefficients),
        intercept=float(fields["intercept"]),
        r_squared=float(fields.get("r_squared", "nan")),
        rmse=float(fields.get("rmse", "nan")),
        rrmse=float(rrmse_text) if rrmse_text else None,
        n=int(fields.get("n", "0")),
        adj_r_squared=float(fields["adj_r_squared"]) if "adj_r_squared" in fields else None,
        aic=float(fields["aic"]) if "aic" in fields else None,
        source_hash=fields.get("source_hash", ""),
    )


def design_hash(design: DesignMatrix) -> str:
    """Content hash of a design matrix, for model provenance."""
    digest = hashlib.sha256()
    digest.update(",".join(design.columns).encode())
    digest.update(design.data.tobytes())
    digest.update(design.response.tobytes())
    return digest.hexdigest()[:16]
