"""Village data model: ingestion, derived spatial covariates, standardization.

Houses live in planar meter coordinates (geodetic input must be projected
upstream). Two covariates are derived from geometry alone: the number of
other houses within a fixed radius, and the distance to the village's
convex-hull boundary plus a fixed offset. Coordinates are rescaled so the
village diameter is 1; continuous covariates are centered and scaled.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist, squareform

DENSITY_RADIUS_M = 100.0
PERIMETER_OFFSET_M = 50.0

_CONSTANT_SD_TOL = 1e-12


class HouseStatus(Enum):
    UNKNOWN = "unknown"
    INFESTED = "infested"
    CLEAR = "clear"


class CovariateSet(Enum):
    """Which covariates enter the design matrix.

    GLOBAL_ONLY uses only what the geocoordinates give us (intercept,
    density, distance to perimeter); ALL adds the declared survey
    covariates on top.
    """

    GLOBAL_ONLY = "global"
    ALL = "all"


@dataclass(frozen=True)
class CovariateSchema:
    """Declares each survey covariate as continuous or categorical."""

    continuous: tuple[str, ...] = ()
    categorical: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def names(self) -> tuple[str, ...]:
        return self.continuous + tuple(self.categorical)

    @staticmethod
    def from_json(obj: dict) -> "CovariateSchema":
        cont: list[str] = []
        cat: dict[str, tuple[str, ...]] = {}
        for name, spec in obj.get("covariates", {}).items():
            kind = spec.get("type")
            if kind == "continuous":
                cont.append(name)
            elif kind == "categorical":
                levels = spec.get("levels")
                if not levels or len(levels) < 2:
                    raise VillageError(
                        f"categorical covariate {name!r} needs >= 2 declared levels"
                    )
                cat[name] = tuple(levels)
            else:
                raise VillageError(f"covariate {name!r} has unknown type {kind!r}")
        return CovariateSchema(continuous=tuple(cont), categorical=cat)

    def to_json(self) -> dict:
        out: dict = {"covariates": {}}
        for name in self.continuous:
            out["covariates"][name] = {"type": "continuous"}
        for name, levels in self.categorical.items():
            out["covariates"][name] = {"type": "categorical", "levels": list(levels)}
        return out


@dataclass(frozen=True)
class HouseRecord:
    id: str
    x_m: float
    y_m: float
    covariates: Mapping[str, object] = field(default_factory=dict)
    status: HouseStatus = HouseStatus.UNKNOWN
    true_status: Optional[int] = None


@dataclass(frozen=True)
class ColumnStats:
    """Per-column scaling record: mean/sd used, and whether scaling applied."""

    name: str
    mean: float
    sd: float
    scaled: bool
    constant: bool


class VillageError(ValueError):
    """Raised on malformed village input (schema, parsing, geometry)."""


def standardize(values: Sequence[float] | np.ndarray) -> tuple[np.ndarray, float, float]:
    """Center and scale a column to mean 0, sd 1 (n-1 divisor).

    Constant columns map to all zeros with sd recorded as 0, so degenerate
    subsamples never abort downstream inference.
    """
    col = np.asarray(values, dtype=float)
    if col.size == 0:
        raise VillageError("cannot standardize an empty column")
    if not np.all(np.isfinite(col)):
        raise VillageError("cannot standardize a column with non-finite entries")
    mean = float(np.mean(col))
    sd = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
    if sd <= _CONSTANT_SD_TOL * max(1.0, abs(mean)):
        return np.zeros_like(col), mean, 0.0
    return (col - mean) / sd, mean, sd


def derive_density(
    coords_m: np.ndarray, radius_m: float = DENSITY_RADIUS_M
) -> np.ndarray:
    """Count of *other* houses within ``radius_m`` (closed ball) per house."""
    if radius_m <= 0:
        raise VillageError("density radius must be positive")
    coords_m = np.asarray(coords_m, dtype=float)
    n = coords_m.shape[0]
    if n == 1:
        return np.zeros(1)
    dists = squareform(pdist(coords_m))
    within = (dists <= radius_m).sum(axis=1) - 1  # drop self
    return within.astype(float)


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def derive_distance_to_perimeter(
    coords_m: np.ndarray, offset_m: float = PERIMETER_OFFSET_M
) -> np.ndarray:
    """Distance to the nearest point of the convex-hull boundary, plus offset.

    Hull vertices get exactly ``offset_m``. Degenerate (collinear) villages
    fall back to point-to-segment distance against the span of the two most
    distant houses, keeping the operation total.
    """
    coords_m = np.asarray(coords_m, dtype=float)
    n = coords_m.shape[0]
    try:
        if n < 3:
            raise QhullError("fewer than 3 points")
        hull = ConvexHull(coords_m)
        verts = coords_m[hull.vertices]
        edges = [(verts[i], verts[(i + 1) % len(verts)]) for i in range(len(verts))]
    except QhullError:
        dists = squareform(pdist(coords_m)) if n > 1 else np.zeros((1, 1))
        i, j = np.unravel_index(np.argmax(dists), dists.shape)
        edges = [(coords_m[i], coords_m[j])]
    dist = np.full(n, np.inf)
    for a, b in edges:
        dist = np.minimum(dist, _point_segment_distance(coords_m, a, b))
    return dist + offset_m


@dataclass(frozen=True)
class VillageFrame:
    """Immutable per-village dataset ready for inference.

    ``design_matrix`` rows follow ``houses`` order; columns follow
    ``column_names`` (intercept first, then derived covariates, then any
    survey covariates with categoricals one-hot encoded against an
    alphabetical reference level).
    """

    houses: tuple[HouseRecord, ...]
    scaled_coords: np.ndarray
    design_matrix: np.ndarray
    column_names: tuple[str, ...]
    covariate_stats: tuple[ColumnStats, ...]
    diameter_m: float
    covariate_set: CovariateSet
    schema: CovariateSchema

    def __post_init__(self):
        self.scaled_coords.setflags(write=False)
        self.design_matrix.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.houses)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(h.id for h in self.houses)

    @property
    def id_to_index(self) -> dict[str, int]:
        return {h.id: i for i, h in enumerate(self.houses)}

    @property
    def true_status(self) -> Optional[np.ndarray]:
        vals = [h.true_status for h in self.houses]
        if any(v is None for v in vals):
            return None
        return np.asarray(vals, dtype=np.int8)

    def raw_coords(self) -> np.ndarray:
        return np.array([[h.x_m, h.y_m] for h in self.houses], dtype=float)

    def with_covariate_set(self, selector: CovariateSet) -> "VillageFrame":
        """Re-encode the same houses under a different covariate selector."""
        if selector is self.covariate_set:
            return self
        return build_frame(self.houses, self.schema, selector)


def _encode_covariates(
    houses: Sequence[HouseRecord], schema: CovariateSchema
) -> tuple[list[np.ndarray], list[str], list[bool]]:
    """Survey covariate columns (raw, pre-scaling), names, and is-continuous flags."""
    cols: list[np.ndarray] = []
    names: list[str] = []
    continuous_flags: list[bool] = []
    for name in schema.continuous:
        vals = []
        for h in houses:
            try:
                vals.append(float(h.covariates[name]))
            except (KeyError, TypeError, ValueError):
                raise VillageError(
                    f"house {h.id!r}: continuous covariate {name!r} missing or non-numeric"
                ) from None
        cols.append(np.asarray(vals))
        names.append(name)
        continuous_flags.append(True)
    for name, levels in schema.categorical.items():
        ordered = sorted(levels)
        observed = []
        for h in houses:
            val = h.covariates.get(name)
            if val is None:
                raise VillageError(f"house {h.id!r}: categorical covariate {name!r} missing")
            val = str(val)
            if val not in levels:
                raise VillageError(
                    f"house {h.id!r}: level {val!r} of {name!r} not in declared levels {sorted(levels)}"
                )
            observed.append(val)
        # first alphabetical level is the reference; one indicator per remaining level
        for level in ordered[1:]:
            cols.append(np.array([1.0 if v == level else 0.0 for v in observed]))
            names.append(f"{name}[{level}]")
            continuous_flags.append(False)
    return cols, names, continuous_flags


def build_frame(
    houses: Sequence[HouseRecord],
    schema: CovariateSchema,
    selector: CovariateSet,
) -> VillageFrame:
    """Assemble a VillageFrame: derive covariates, scale coordinates, standardize."""
    houses = tuple(houses)
    if len(houses) < 2:
        raise VillageError("a village needs at least 2 houses")
    seen: set[str] = set()
    for h in houses:
        if h.id in seen:
            raise VillageError(f"duplicate house id {h.id!r}")
        seen.add(h.id)
        if not (math.isfinite(h.x_m) and math.isfinite(h.y_m)):
            raise VillageError(f"house {h.id!r}: non-finite coordinate")

    coords = np.array([[h.x_m, h.y_m] for h in houses], dtype=float)
    diameter = float(pdist(coords).max())
    if diameter <= 0.0:
        raise VillageError("all houses are co-located; cannot scale coordinates")
    scaled = (coords - coords.min(axis=0)) / diameter

    density = derive_density(coords)
    dist_perim = derive_distance_to_perimeter(coords)

    raw_cols = [density, dist_perim]
    names = ["density", "dist_perimeter"]
    cont_flags = [True, True]
    if selector is CovariateSet.ALL:
        extra_cols, extra_names, extra_flags = _encode_covariates(houses, schema)
        raw_cols += extra_cols
        names += extra_names
        cont_flags += extra_flags

    n = len(houses)
    cols = [np.ones(n)]
    stats = [ColumnStats("intercept", 0.0, 1.0, False, False)]
    for raw, name, is_cont in zip(raw_cols, names, cont_flags):
        if is_cont:
            scaled_col, mean, sd = standardize(raw)
            cols.append(scaled_col)
            stats.append(ColumnStats(name, mean, sd, True, sd == 0.0))
        else:
            cols.append(raw.astype(float))
            sd = float(np.std(raw, ddof=1)) if n > 1 else 0.0
            stats.append(ColumnStats(name, float(np.mean(raw)), sd, False, sd == 0.0))

    design = np.column_stack(cols)
    return VillageFrame(
        houses=houses,
        scaled_coords=scaled,
        design_matrix=design,
        column_names=("intercept",) + tuple(names),
        covariate_stats=tuple(stats),
        diameter_m=diameter,
        covariate_set=selector,
        schema=schema,
    )


def _parse_status(raw: str) -> HouseStatus:
    val = raw.strip().lower()
    if val in ("", "unknown"):
        return HouseStatus.UNKNOWN
    if val == "infested":
        return HouseStatus.INFESTED
    if val == "clear":
        return HouseStatus.CLEAR
    raise VillageError(f"unknown status value {raw!r}")


def default_schema_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".schema.json")


def read_schema(path: Path) -> CovariateSchema:
    with open(path, "r", encoding="utf-8") as fh:
        return CovariateSchema.from_json(json.load(fh))


def load_village(
    path: str | Path,
    selector: CovariateSet = CovariateSet.ALL,
    schema_path: str | Path | None = None,
) -> VillageFrame:
    """Load a village CSV (+ sidecar covariate schema) into a VillageFrame.

    Required columns: ``id,x_m,y_m``. Optional: ``status``
    (infested|clear|unknown), ``true_status`` (0|1). Every other column must
    be declared in the sidecar schema. Rows with missing cells are dropped,
    with a warning, before any derivation.
    """
    path = Path(path)
    if not path.exists():
        raise VillageError(f"village file not found: {path}")
    if schema_path is None:
        schema_path = default_schema_path(path)
    schema_path = Path(schema_path)
    schema = read_schema(schema_path) if schema_path.exists() else CovariateSchema()

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise VillageError(f"{path}: empty CSV")
        header = [h.strip() for h in reader.fieldnames]
        for required in ("id", "x_m", "y_m"):
            if required not in header:
                raise VillageError(f"{path}: missing required column {required!r}")
        known = {"id", "x_m", "y_m", "status", "true_status"}
        covariate_cols = [c for c in header if c not in known]
        declared = set(schema.names)
        undeclared = [c for c in covariate_cols if c not in declared]
        if undeclared:
            raise VillageError(
                f"{path}: covariate columns {undeclared} not declared in schema {schema_path.name}"
            )
        missing_cols = [c for c in declared if c not in covariate_cols]
        if missing_cols:
            raise VillageError(f"{path}: schema covariates {missing_cols} absent from CSV")

        houses: list[HouseRecord] = []
        dropped = 0
        for row in reader:
            cells = {k.strip(): (v.strip() if v is not None else "") for k, v in row.items()}
            essential = [cells.get("id", ""), cells.get("x_m", ""), cells.get("y_m", "")]
            essential += [cells.get(c, "") for c in covariate_cols]
            if any(v == "" for v in essential):
                dropped += 1
                continue
            try:
                x = float(cells["x_m"])
                y = float(cells["y_m"])
            except ValueError:
                raise VillageError(
                    f"{path}: non-numeric coordinate for house {cells['id']!r}"
                ) from None
            status = _parse_status(cells.get("status", ""))
            true_raw = cells.get("true_status", "")
            true_status = None
            if true_raw != "":
                if true_raw not in ("0", "1"):
                    raise VillageError(
                        f"{path}: true_status must be 0 or 1, got {true_raw!r}"
                    )
                true_status = int(true_raw)
            covs = {c: cells[c] for c in covariate_cols}
            houses.append(
                HouseRecord(
                    id=cells["id"], x_m=x, y_m=y, covariates=covs,
                    status=status, true_status=true_status,
                )
            )
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing values", stacklevel=2)
    return build_frame(houses, schema, selector)


def write_village_csv(
    frame_houses: Sequence[HouseRecord],
    schema: CovariateSchema,
    csv_path: str | Path,
    include_true_status: bool = True,
) -> None:
    """Write houses + sidecar schema in the format ``load_village`` reads."""
    csv_path = Path(csv_path)
    cov_names = list(schema.names)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["id", "x_m", "y_m", "status"]
        if include_true_status:
            header.append("true_status")
        writer.writerow(header + cov_names)
        for h in frame_houses:
            row = [h.id, repr(h.x_m), repr(h.y_m), h.status.value]
            if include_true_status:
                row.append("" if h.true_status is None else str(h.true_status))
            row += [str(h.covariates[c]) for c in cov_names]
            writer.writerow(row)
    with open(default_schema_path(csv_path), "w", encoding="utf-8") as fh:
        json.dump(schema.to_json(), fh, indent=2)
        fh.write("\n")
