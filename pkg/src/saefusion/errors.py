"""Exception hierarchy shared by the library and the pipeline front end."""

from __future__ import annotations

from pathlib import Path
from typing import Any


class SaeFusionError(Exception):
    """Base error carrying a machine-readable code and structured details."""

    code = "saefusion_error"

    def __init__(self, message: str, *, details: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.details: dict[str, Any] = details or {}

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


class ConfigError(SaeFusionError):
    code = "config_invalid"


class InputError(SaeFusionError):
    """Ingestion failure pinned to a file and, when known, a 1-based line."""

    code = "input_invalid"

    def __init__(
        self,
        message: str,
        *,
        path: str | Path | None = None,
        line: int | None = None,
        details: dict[str, Any] | None = None,
    ) -> None:
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}", details=details)
        self.path = str(path) if path is not None else None
        self.line = line


class GeometryError(SaeFusionError):
    code = "geometry_invalid"


class VariogramFitError(SaeFusionError):
    code = "variogram_fit_failed"

    def __init__(self, message: str, *, best_residual: float | None = None) -> None:
        super().__init__(message, details={"best_residual": best_residual})
        self.best_residual = best_residual


class KrigingError(SaeFusionError):
    code = "kriging_singular"


class DesignError(SaeFusionError):
    code = "design_invalid"


class RankDeficientError(DesignError):
    code = "rank_deficient"

    def __init__(self, columns: list[str]) -> None:
        super().__init__(
            f"design matrix is rank deficient; collinear columns: {', '.join(columns)}",
            details={"columns": columns},
        )
        self.columns = columns


class InadmissibleThetaError(SaeFusionError):
    code = "theta_inadmissible"


class ConvergenceError(SaeFusionError):
    code = "reml_not_converged"

    def __init__(
        self, message: str, *, best_point: tuple[float, ...], gradient_norm: float
    ) -> None:
        super().__init__(
            message,
            details={"best_point": list(best_point), "gradient_norm": gradient_norm},
        )
        self.best_point = best_point
        self.gradient_norm = gradient_norm


class SimulationError(SaeFusionError):
    code = "simulation_failed"


class BootstrapError(SaeFusionError):
    code = "bootstrap_failed"


__all__ = [
    "SaeFusionError",
    "ConfigError",
    "InputError",
    "GeometryError",
    "VariogramFitError",
    "KrigingError",
    "DesignError",
    "RankDeficientError",
    "InadmissibleThetaError",
    "ConvergenceError",
    "SimulationError",
    "BootstrapError",
]
