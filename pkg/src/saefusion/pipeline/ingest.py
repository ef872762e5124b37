"""Input readers with file and line context on every rejected record."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import orjson
import pandas as pd
from pydantic import ValidationError

from ..errors import InputError
from ..models import CensusCell, DirectEstimate, Region, RegionSet, SurveyRecord, VariogramModel

logger = logging.getLogger(__name__)

SURVEY_COLUMNS = ("region_id", "size_class", "type_class", "y")
CENSUS_COLUMNS = ("region_id", "size_class", "type_class", "N")
GRID_COLUMNS = ("x", "y", "value")
DIRECT_COLUMNS = ("region_id", "n_i", "tau_tilde", "var_tau", "usable", "population_count")
BLOCK_MEAN_COLUMNS = ("region_id", "block_mean", "status")
BOOTSTRAP_AREA_COLUMNS = ("model", "replicate", "region_id", "truth_log", "eblup_log")


class CsvTable:
    """A parsed CSV plus the file line of each data row."""

    def __init__(self, path: Path, frame: pd.DataFrame, first_data_line: int) -> None:
        self.path = path
        self.frame = frame
        self.first_data_line = first_data_line

    def line(self, row: int) -> int:
        return self.first_data_line + row

    def error(self, row: int, message: str) -> InputError:
        return InputError(message, path=self.path, line=self.line(row))

    def rows(self) -> Iterable[tuple[int, dict[str, Any]]]:
        for row, record in enumerate(self.frame.to_dict(orient="records")):
            yield row, record


def _require_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise InputError(f"no {what} file configured")
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} file not found", path=path)
    return path


def _leading_comment_lines(path: Path) -> int:
    count = 0
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            count += 1
    return count


def read_csv_table(
    path: Path | None,
    what: str,
    required: Iterable[str],
    *,
    dtype: dict[str, Any] | None = None,
) -> CsvTable:
    """Read a headed CSV, skipping provenance comment lines, and check its columns."""
    path = _require_file(path, what)
    skipped = _leading_comment_lines(path)
    try:
        frame = pd.read_csv(path, comment="#", dtype=dtype, skip_blank_lines=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot parse {what}: {exc}", path=path) from exc
    header_line = skipped + 1
    missing = [name for name in required if name not in frame.columns]
    if missing:
        raise InputError(f"{what} lacks required columns {missing}", path=path, line=header_line)
    return CsvTable(path, frame, header_line + 1)


def _numeric(table: CsvTable, column: str, *, positive: bool = False) -> np.ndarray:
    values = pd.to_numeric(table.frame[column], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if positive:
        bad |= values <= 0
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        need = "a positive number" if positive else "a finite number"
        found = table.frame[column][row]
        raise table.error(row, f"column {column!r} must hold {need}, got {found!r}")
    return values


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())


# ---- regions -------------------------------------------------------------


def _rings(geometry: dict[str, Any]) -> list[list[tuple[float, float]]]:
    if geometry.get("type") != "Polygon":
        raise ValueError(f"geometry type {geometry.get('type')!r} is not Polygon")
    rings = []
    for ring in geometry.get("coordinates") or []:
        points = [(float(pt[0]), float(pt[1])) for pt in ring]
        if len(points) > 1 and points[0] == points[-1]:
            points = points[:-1]
        rings.append(points)
    return rings


def read_regions(
    path: Path | None, *, group_property: str = "group_id", crs_note: str = ""
) -> RegionSet:
    """
    Load a GeoJSON FeatureCollection of projected polygons.

    Each feature needs `region_id` and `population_count` properties; the
    optional `group_property` feeds the grouped aggregation.
    """
    path = _require_file(path, "regions")
    try:
        document = orjson.loads(path.read_bytes())
    except orjson.JSONDecodeError as exc:
        raise InputError(f"invalid GeoJSON: {exc}", path=path) from exc
    if not isinstance(document, dict) or document.get("type") != "FeatureCollection":
        raise InputError("regions file must hold a GeoJSON FeatureCollection", path=path)
    features = document.get("features") or []
    if not features:
        raise InputError("regions file holds no features", path=path)

    regions: list[Region] = []
    for index, feature in enumerate(features):
        props = feature.get("properties") or {}
        if props.get("region_id") is None:
            raise InputError(f"feature {index} has no region_id property", path=path)
        group = props.get(group_property)
        try:
            regions.append(
                Region(
                    id=props["region_id"],
                    rings=_rings(feature.get("geometry") or {}),
                    population_count=props.get("population_count", 0),
                    group_id=str(group) if group is not None else None,
                )
            )
        except (ValidationError, ValueError, TypeError, IndexError) as exc:
            message = _validation_message(exc) if isinstance(exc, ValidationError) else str(exc)
            raise InputError(
                f"feature {index} ({props['region_id']}): {message}", path=path
            ) from exc
    try:
        region_set = RegionSet(regions=regions, crs_note=crs_note or document.get("crs_note", ""))
    except ValidationError as exc:
        raise InputError(_validation_message(exc), path=path) from exc
    logger.debug("read %d regions from %s", len(region_set), path)
    return region_set


# ---- survey and census ---------------------------------------------------


def read_survey(path: Path | None) -> list[SurveyRecord]:
    table = read_csv_table(path, "survey", SURVEY_COLUMNS, dtype={"region_id": str})
    records = []
    for row, raw in table.rows():
        try:
            record = SurveyRecord(**{key: raw[key] for key in SURVEY_COLUMNS})
        except ValidationError as exc:
            raise table.error(row, _validation_message(exc)) from exc
        if not np.isfinite(record.y):
            raise table.error(row, "y must be finite")
        records.append(record)
    return records


def read_census(path: Path | None) -> list[CensusCell]:
    table = read_csv_table(path, "census", CENSUS_COLUMNS, dtype={"region_id": str})
    cells = []
    seen: set[tuple[str, int, int]] = set()
    for row, raw in table.rows():
        try:
            cell = CensusCell(
                region_id=raw["region_id"],
                size_class=raw["size_class"],
                type_class=raw["type_class"],
                population=raw["N"],
            )
        except ValidationError as exc:
            raise table.error(row, _validation_message(exc)) from exc
        if cell.cell in seen:
            raise table.error(row, f"duplicate census cell {cell.cell}")
        seen.add(cell.cell)
        cells.append(cell)
    return cells


# ---- grid and covariates -------------------------------------------------


def read_grid(path: Path | None, *, positive: bool = False) -> np.ndarray:
    """n x 3 array of (x, y, value); `positive` enforces values > 0 for log-scale work."""
    table = read_csv_table(path, "grid", GRID_COLUMNS)
    if table.frame.empty:
        raise InputError("grid file holds no points", path=table.path)
    return np.column_stack(
        [
            _numeric(table, "x"),
            _numeric(table, "y"),
            _numeric(table, "value", positive=positive),
        ]
    )


def read_covariates(path: Path | None, columns: Iterable[str]) -> pd.DataFrame:
    """Region-indexed covariate table restricted to the requested columns."""
    columns = list(columns)
    table = read_csv_table(path, "covariates", ["region_id", *columns], dtype={"region_id": str})
    duplicated = table.frame["region_id"].duplicated()
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise table.error(row, f"duplicate region {table.frame['region_id'][row]}")
    for column in columns:
        table.frame[column] = _numeric(table, column)
    return table.frame.set_index("region_id")[columns]


# ---- intermediate artifacts ---------------------------------------------


def _optional_float(value: Any) -> float | None:
    return None if value is None or pd.isna(value) else float(value)


def read_direct_estimates(path: Path | None) -> list[DirectEstimate]:
    table = read_csv_table(path, "direct estimates", DIRECT_COLUMNS, dtype={"region_id": str})
    estimates = []
    for row, raw in table.rows():
        try:
            estimates.append(
                DirectEstimate(
                    region_id=raw["region_id"],
                    n_i=int(raw["n_i"]),
                    tau_tilde=float(raw["tau_tilde"]),
                    var_tau=float(raw["var_tau"]),
                    log_mu_tilde=_optional_float(raw.get("log_mu_tilde")),
                    var_log=_optional_float(raw.get("var_log")),
                    usable=str(raw["usable"]).strip().lower() == "true",
                    population_count=int(raw["population_count"]),
                    reason=None if pd.isna(raw.get("reason")) else str(raw.get("reason")),
                )
            )
        except (ValidationError, ValueError, TypeError) as exc:
            message = _validation_message(exc) if isinstance(exc, ValidationError) else str(exc)
            raise table.error(row, message) from exc
        est = estimates[-1]
        if est.usable and (est.log_mu_tilde is None or est.var_log is None):
            raise table.error(row, "usable area lacks log_mu_tilde or var_log")
    return estimates


def read_block_means(path: Path | None, column: str = "block_mean") -> pd.DataFrame:
    """Region-indexed upscaled covariate; regions with status other than ok are dropped."""
    table = read_csv_table(path, "block means", BLOCK_MEAN_COLUMNS, dtype={"region_id": str})
    frame = table.frame
    ok = frame["status"].astype(str) == "ok"
    values = pd.to_numeric(frame["block_mean"], errors="coerce")
    bad = ok & ~np.isfinite(values.to_numpy(dtype=float))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise table.error(row, "block mean of an ok region must be finite")
    kept = frame.loc[ok, ["region_id"]].assign(**{column: values[ok]})
    return kept.set_index("region_id")


def read_variogram(
    path: Path | None, what: str = "variogram"
) -> tuple[VariogramModel, dict[str, Any]]:
    """Fitted model plus the rest of a variogram JSON artifact."""
    path = _require_file(path, what)
    try:
        document = orjson.loads(path.read_bytes())
        model = VariogramModel(**document["model"])
    except (orjson.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"invalid {what} document: {exc}", path=path) from exc
    except ValidationError as exc:
        raise InputError(_validation_message(exc), path=path) from exc
    return model, document


def read_bootstrap_areas(path: Path | None, model: str) -> pd.DataFrame:
    """Long-format replicate truths and EBLUPs of one model."""
    table = read_csv_table(
        path, "bootstrap areas", BOOTSTRAP_AREA_COLUMNS, dtype={"region_id": str}
    )
    for column in ("replicate", "truth_log", "eblup_log"):
        table.frame[column] = _numeric(table, column)
    return table.frame[table.frame["model"] == model]


__all__ = [
    "SURVEY_COLUMNS",
    "CENSUS_COLUMNS",
    "GRID_COLUMNS",
    "CsvTable",
    "read_csv_table",
    "read_regions",
    "read_survey",
    "read_census",
    "read_grid",
    "read_covariates",
    "read_direct_estimates",
    "read_block_means",
    "read_variogram",
    "read_bootstrap_areas",
]
