"""Empirical variograms, parametric families, OLS fitting, and CV neighborhood selection."""

from __future__ import annotations

import logging
from typing import Literal, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import pdist
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .errors import ConfigError, GeometryError, VariogramFitError
from .models import (
    CvCurve,
    EmpiricalVariogram,
    FailureRecord,
    FamilyComparison,
    FamilyScore,
    VariogramModel,
)
from .pipeline.defaults import (
    DEFAULT_NU_GRID,
    DEFAULT_VARIOGRAM_BINS,
    MAX_LAG_DIAGONAL_FRACTION,
)

logger = logging.getLogger(__name__)

Family = Literal["matern", "exponential", "spherical"]

# Lags below this fraction of the range are treated as zero separation.
TINY_LAG = 1e-12
CV_TIE_TOLERANCE = 1e-12
FLAT_SILL_FRACTION = 1.0 - 1e-6
FLAT_RESIDUAL_TOLERANCE = 1e-10
# Robust estimator bias correction constants.
CH_A = 0.457
CH_B = 0.494


def _as_output(h: np.ndarray | float, values: np.ndarray) -> np.ndarray | float:
    return float(values) if np.ndim(h) == 0 else values


def _correlation(u: np.ndarray, model: VariogramModel) -> np.ndarray:
    corr = np.ones_like(u)
    pos = u > TINY_LAG
    up = u[pos]
    if model.family == "matern":
        nu = model.smoothness
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            values = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * up**nu * kv(nu, up)
        # kv underflows to 0 far beyond the range
        values = np.where(np.isfinite(values), values, 0.0)
        corr[pos] = np.clip(values, 0.0, 1.0)
    elif model.family == "exponential":
        corr[pos] = np.exp(-up)
    else:
        corr[pos] = np.where(up < 1.0, 1.0 - 1.5 * up + 0.5 * up**3, 0.0)
    return corr


def variogram_gamma(h: np.ndarray | float, model: VariogramModel) -> np.ndarray | float:
    """Semivariance of any supported family; gamma(0) = 0."""
    lags = np.asarray(h, dtype=float)
    if np.any(lags < 0):
        raise ValueError("lag distances must be nonnegative")
    flat = np.atleast_1d(lags)
    corr = _correlation(flat / model.range, model)
    values = model.partial_sill * (1.0 - corr) + model.nugget * (flat > 0)
    return _as_output(h, values.reshape(lags.shape))


def matern_gamma(h: np.ndarray | float, model: VariogramModel) -> np.ndarray | float:
    """
    Matern semivariance with the (h / range) parameterization, c = 1.

    gamma(h) = nugget * 1(h > 0)
               + partial_sill * (1 - 2^(1-nu) / Gamma(nu) * (h/range)^nu * K_nu(h/range))
    """
    return variogram_gamma(h, model.model_copy(update={"family": "matern"}))


def default_max_lag(xy: np.ndarray) -> float:
    extent = np.ptp(np.asarray(xy, dtype=float)[:, :2], axis=0)
    return float(np.hypot(extent[0], extent[1]) * MAX_LAG_DIAGONAL_FRACTION)


def empirical_variogram(
    points: np.ndarray,
    kind: Literal["classical", "robust"] = "classical",
    max_lag: float | None = None,
    n_bins: int = DEFAULT_VARIOGRAM_BINS,
) -> EmpiricalVariogram:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] < 3:
        raise ValueError("empirical_variogram needs at least 2 (x, y, value) points")
    xy, z = pts[:, :2], pts[:, 2]
    if np.all(xy == xy[0]):
        raise GeometryError("all variogram points are coincident")
    if max_lag is None:
        max_lag = default_max_lag(xy)
    if max_lag <= 0:
        raise ValueError("max_lag must be positive")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")

    d = pdist(xy)
    i, j = np.triu_indices(xy.shape[0], k=1)
    diff = z[i] - z[j]
    valid = (d > 0) & (d <= max_lag)
    if not valid.any():
        raise ValueError("no point pairs within max_lag")
    d, diff = d[valid], diff[valid]
    width = max_lag / n_bins
    idx = np.clip(np.ceil(d / width).astype(int) - 1, 0, n_bins - 1)

    counts = np.bincount(idx, minlength=n_bins)
    lag_sums = np.bincount(idx, weights=d, minlength=n_bins)
    if kind == "classical":
        sq = np.bincount(idx, weights=diff**2, minlength=n_bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            semivariances = sq / (2.0 * counts)
    else:
        roots = np.bincount(idx, weights=np.sqrt(np.abs(diff)), minlength=n_bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            semivariances = (roots / counts) ** 4 / (CH_A + CH_B / counts) / 2.0
    keep = counts > 0
    return EmpiricalVariogram(
        lags=lag_sums[keep] / counts[keep],
        semivariances=semivariances[keep],
        pair_counts=counts[keep],
        kind=kind,
        max_lag=float(max_lag),
        bin_width=float(width),
    )


def fit_residual(emp: EmpiricalVariogram, model: VariogramModel) -> float:
    predicted = np.asarray(variogram_gamma(emp.lags, model))
    return float(np.sum((predicted - emp.semivariances) ** 2))


def _fit_single_nu(
    emp: EmpiricalVariogram, family: Family, nu: float
) -> tuple[VariogramModel | None, float]:
    h, g = emp.lags, emp.semivariances
    g_scale = max(float(np.max(np.abs(g))), 1e-300)
    h_scale = max(float(np.max(h)), 1e-300)

    def residuals(p: np.ndarray) -> np.ndarray:
        model = VariogramModel(
            family=family,
            nugget=p[0] * g_scale,
            partial_sill=p[1] * g_scale,
            range=p[2] * h_scale,
            smoothness=nu,
        )
        return (np.asarray(variogram_gamma(h, model)) - g) / g_scale

    lower = np.array([0.0, 0.0, 1e-4])
    upper = np.array([10.0, 10.0, 10.0])
    first = float(np.clip(g[0] / g_scale, 0.0, 1.0))
    starts = [
        (0.0, 1.0, 0.1),
        (0.0, 1.0, 0.3),
        (0.0, 1.0, 1.0),
        (first, max(1.0 - first, 0.05), 0.3),
    ]
    best: tuple[VariogramModel | None, float] = (None, np.inf)
    for x0 in starts:
        try:
            result = least_squares(
                residuals,
                np.asarray(x0, dtype=float),
                bounds=(lower, upper),
                method="trf",
                xtol=1e-14,
                ftol=1e-14,
                gtol=1e-14,
                max_nfev=5000,
            )
        except (ValueError, FloatingPointError) as exc:
            logger.debug("variogram start %s failed: %s", x0, exc)
            continue
        if result.status <= 0 or not np.isfinite(result.cost):
            logger.debug("variogram start %s ended with status %s", x0, result.status)
            continue
        p = result.x
        model = VariogramModel(
            family=family,
            nugget=float(p[0] * g_scale),
            partial_sill=float(p[1] * g_scale),
            range=float(p[2] * h_scale),
            smoothness=nu,
        )
        ssr = fit_residual(emp, model)
        if ssr < best[1]:
            best = (model, ssr)
    return best


def _collapse_flat(emp: EmpiricalVariogram, model: VariogramModel) -> VariogramModel:
    """A sill reached before the first lag is indistinguishable from a pure nugget."""
    if model.partial_sill <= 0:
        return model
    at_first = float(variogram_gamma(float(emp.lags[0]), model))
    if at_first >= FLAT_SILL_FRACTION * model.sill:
        return model.model_copy(update={"nugget": model.sill, "partial_sill": 0.0})
    nugget_only = model.model_copy(
        update={"nugget": float(np.mean(emp.semivariances)), "partial_sill": 0.0}
    )
    slack = FLAT_RESIDUAL_TOLERANCE * float(np.sum(emp.semivariances**2))
    if fit_residual(emp, nugget_only) <= fit_residual(emp, model) + slack:
        return nugget_only
    return model


def fit_ols(
    emp: EmpiricalVariogram,
    family: Family = "matern",
    fix_smoothness: float | None = None,
    nu_grid: Sequence[float] = DEFAULT_NU_GRID,
) -> VariogramModel:
    """Bounded multi-start least squares; Matern smoothness picked over a fixed grid."""
    if len(emp.lags) < 4:
        raise VariogramFitError(f"need at least 4 bins, got {len(emp.lags)}")
    if fix_smoothness is not None:
        nus = [float(fix_smoothness)]
    elif family == "matern":
        nus = [float(nu) for nu in nu_grid]
    else:
        nus = [0.5]

    best_model: VariogramModel | None = None
    best_ssr = np.inf
    for nu in nus:
        model, ssr = _fit_single_nu(emp, family, nu)
        if model is not None and ssr < best_ssr:
            best_model, best_ssr = model, ssr
    if best_model is None:
        raise VariogramFitError("variogram fit failed from every start", best_residual=None)
    model = _collapse_flat(emp, best_model)
    logger.debug("fitted %s variogram %s (ssr=%.3e)", family, model.to_document(), best_ssr)
    return model


def cv_neighborhood(
    points: np.ndarray,
    model: VariogramModel,
    candidates: Sequence[int],
    folds: int = 5,
    rng: np.random.Generator | None = None,
) -> CvCurve:
    from .kriging import krige_points

    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if not candidates:
        raise ConfigError("candidates must be nonempty")
    if folds < 2 or n < folds:
        raise ConfigError("cv_neighborhood needs folds >= 2 and at least `folds` points")
    rng = rng if rng is not None else np.random.default_rng(0)
    xy, z = pts[:, :2], pts[:, 2]
    fold_of = np.empty(n, dtype=int)
    fold_of[rng.permutation(n)] = np.arange(n) % folds
    min_train = n - int(np.bincount(fold_of, minlength=folds).max())

    evaluated: list[int] = []
    rmse: list[float] = []
    skipped: list[int] = []
    notes: list[str] = []
    for q in sorted(set(int(c) for c in candidates)):
        if q > min_train:
            skipped.append(q)
            notes.append(f"q={q} exceeds the smallest training fold ({min_train} points)")
            logger.warning("skipping neighborhood %d: smallest training fold has %d", q, min_train)
            continue
        fold_rmse = []
        for k in range(folds):
            test = fold_of == k
            train = ~test
            predicted = krige_points(xy[test], xy[train], z[train], model, q)
            fold_rmse.append(float(np.sqrt(np.mean((predicted - z[test]) ** 2))))
        evaluated.append(q)
        rmse.append(float(np.mean(fold_rmse)))
    if not evaluated:
        raise ConfigError("every neighborhood candidate exceeds the training fold size")

    selected, best = evaluated[0], rmse[0]
    for q, value in zip(evaluated[1:], rmse[1:]):
        if value < best - CV_TIE_TOLERANCE:
            selected, best = q, value
    return CvCurve(candidates=evaluated, rmse=rmse, selected=selected, skipped=skipped, notes=notes)


def compare_families(
    points: np.ndarray,
    families: Sequence[Family],
    q: int,
    folds: int,
    rng: np.random.Generator,
    *,
    kind: Literal["classical", "robust"] = "classical",
    max_lag: float | None = None,
    n_bins: int = DEFAULT_VARIOGRAM_BINS,
    nu_grid: Sequence[float] = DEFAULT_NU_GRID,
) -> FamilyComparison:
    """Score each family by its OLS fit and by kriging CV RMSE on shared folds."""
    emp = empirical_variogram(points, kind=kind, max_lag=max_lag, n_bins=n_bins)
    fold_seed = int(rng.integers(0, 2**63 - 1))
    scores: list[FamilyScore] = []
    for index, family in enumerate(families):
        try:
            model = fit_ols(emp, family=family, nu_grid=nu_grid)
            curve = cv_neighborhood(points, model, [q], folds, np.random.default_rng(fold_seed))
        except (VariogramFitError, ConfigError) as exc:
            scores.append(
                FamilyScore(
                    family=family,
                    error=FailureRecord(
                        index=index, key=family, code=exc.code, message=exc.message
                    ),
                )
            )
            continue
        scores.append(
            FamilyScore(
                family=family,
                model=model,
                fit_residual=fit_residual(emp, model),
                cv_rmse=curve.rmse[0],
            )
        )
    ranked = [score for score in scores if score.cv_rmse is not None]
    if not ranked:
        raise VariogramFitError("no variogram family could be fitted")
    best = ranked[0]
    for score in ranked[1:]:
        if score.cv_rmse < best.cv_rmse - CV_TIE_TOLERANCE:  # type: ignore[operator]
            best = score
    return FamilyComparison(scores=scores, best=best.family)


__all__ = [
    "Family",
    "variogram_gamma",
    "matern_gamma",
    "default_max_lag",
    "empirical_variogram",
    "fit_residual",
    "fit_ols",
    "cv_neighborhood",
    "compare_families",
]
