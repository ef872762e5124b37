"""File persistence helpers for pipeline artifacts."""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import Any

import orjson
import pandas as pd
from pydantic import BaseModel

from . import get_version
from .models import RegionSet

DIRECT_ESTIMATES = "direct_estimates.csv"
COVERAGE_REPORT = "coverage_report.json"
EMPIRICAL_VARIOGRAM = "empirical_variogram.csv"
VARIOGRAM = "variogram.json"
VARIOGRAM_SIMULATION = "variogram_simulation.json"
CV_CURVE = "cv_curve.csv"
FAMILY_COMPARISON = "family_comparison.csv"
BLOCK_MEANS = "block_means.csv"
FIT_REPORT = "fit_report.json"
PREDICTIONS = "predictions.csv"
BOOTSTRAP_SUMMARY = "bootstrap_summary.json"
BOOTSTRAP_MSE = "bootstrap_mse.csv"
BOOTSTRAP_REPLICATES = "bootstrap_replicates.csv"
BOOTSTRAP_AREAS = "bootstrap_areas.csv"
LR_TEST = "lr_test.json"
LR_REPLICATES = "lr_replicates.csv"
SCENARIO_MANIFEST = "scenario_manifest.json"
SCENARIO_CONFIG = "scenario.env"
DIAGNOSTICS_DIR = "diagnostics"

CSV_FLOAT_FORMAT = "%.12g"
JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY


class Provenance(BaseModel):
    tool: str = "saefusion"
    version: str = ""
    config_hash: str = ""
    master_seed: int = 0

    @classmethod
    def current(cls, config_hash: str, master_seed: int) -> "Provenance":
        return cls(version=get_version(), config_hash=config_hash, master_seed=master_seed)

    def header(self) -> str:
        return (
            f"# {self.tool} version={self.version} "
            f"config_hash={self.config_hash} master_seed={self.master_seed}"
        )


def _default(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_json(payload: Any) -> bytes:
    return orjson.dumps(payload, default=_default, option=JSON_OPTIONS) + b"\n"


class ArtifactStorage:
    """Typed helpers over the output directory; every write is atomic."""

    def __init__(self, out_dir: str | Path, provenance: Provenance) -> None:
        self.out_dir = Path(out_dir)
        self.provenance = provenance
        self.written: list[Path] = []

    # ---- Path helpers ----------------------------------------------------
    def path(self, name: str) -> Path:
        return self.out_dir / name

    def diagnostics_path(self, name: str) -> Path:
        return self.out_dir / DIAGNOSTICS_DIR / name

    # ---- Writers ---------------------------------------------------------
    def _write_bytes(self, target: Path, data: bytes) -> Path:
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(f".{target.name}.tmp")
        tmp.write_bytes(data)
        os.replace(tmp, target)
        self.written.append(target)
        return target

    def write_csv(self, name: str, frame: pd.DataFrame, *, directory: str | None = None) -> Path:
        buffer = io.StringIO()
        buffer.write(self.provenance.header() + "\n")
        frame.to_csv(buffer, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        target = self.out_dir / directory / name if directory else self.path(name)
        return self._write_bytes(target, buffer.getvalue().encode("utf-8"))

    def write_json(
        self, name: str, payload: dict[str, Any], *, directory: str | None = None
    ) -> Path:
        document = {**payload, "provenance": self.provenance.model_dump()}
        target = self.out_dir / directory / name if directory else self.path(name)
        return self._write_bytes(target, dumps_json(document))

    def write_geojson(self, name: str, regions: RegionSet) -> Path:
        features = []
        for region in regions.regions:
            features.append(
                {
                    "type": "Feature",
                    "properties": {
                        "region_id": region.id,
                        "population_count": region.population_count,
                        "group_id": region.group_id,
                    },
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": [
                            [list(pt) for pt in ring] + [list(ring[0])] for ring in region.rings
                        ],
                    },
                }
            )
        document = {
            "type": "FeatureCollection",
            "crs_note": regions.crs_note,
            "provenance": self.provenance.model_dump(),
            "features": features,
        }
        return self._write_bytes(self.path(name), dumps_json(document))

    def write_text(self, name: str, text: str) -> Path:
        body = self.provenance.header() + "\n" + text
        return self._write_bytes(self.path(name), body.encode("utf-8"))

    def write_svg(self, name: str, data: bytes) -> Path:
        return self._write_bytes(self.diagnostics_path(name), data)


__all__ = [
    "DIRECT_ESTIMATES",
    "COVERAGE_REPORT",
    "EMPIRICAL_VARIOGRAM",
    "VARIOGRAM",
    "VARIOGRAM_SIMULATION",
    "CV_CURVE",
    "FAMILY_COMPARISON",
    "BLOCK_MEANS",
    "FIT_REPORT",
    "PREDICTIONS",
    "BOOTSTRAP_SUMMARY",
    "BOOTSTRAP_MSE",
    "BOOTSTRAP_REPLICATES",
    "BOOTSTRAP_AREAS",
    "LR_TEST",
    "LR_REPLICATES",
    "SCENARIO_MANIFEST",
    "SCENARIO_CONFIG",
    "DIAGNOSTICS_DIR",
    "Provenance",
    "dumps_json",
    "ArtifactStorage",
]
