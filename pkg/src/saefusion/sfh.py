"""Log-scale Fay-Herriot models with independent or SAR random effects, fitted by REML."""

from __future__ import annotations

import logging
import math
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve, qr
from scipy.optimize import approx_fprime, minimize

from .errors import ConvergenceError, DesignError, InadmissibleThetaError, RankDeficientError
from .models import (
    AreaPrediction,
    ConvergenceReport,
    CovariateScaling,
    Design,
    DirectEstimate,
    ModelSpec,
    MseSource,
    SfhFit,
)
from .pipeline.defaults import DEFAULT_VAR_LOG_FLOOR, REML_STARTS, RHO_SHRINK

logger = logging.getLogger(__name__)

INTERCEPT = "intercept"
INADMISSIBLE_PENALTY = 1e12
BOUNDARY_FRACTION = 1e-6
GRADIENT_TOLERANCE = 1e-4


# ---- design --------------------------------------------------------------


def apply_scaling(values: np.ndarray, column: str, scaling: CovariateScaling) -> np.ndarray:
    """Standardize a covariate with stored means and SDs; unscaled columns pass through."""
    values = np.asarray(values, dtype=float)
    if column not in scaling.means:
        return values
    return (values - scaling.means[column]) / scaling.sds[column]


def build_design(
    direct: Sequence[DirectEstimate],
    covariates: pd.DataFrame | None,
    spec: ModelSpec,
    *,
    var_floor: float = DEFAULT_VAR_LOG_FLOOR,
    scaling: CovariateScaling | None = None,
) -> Design:
    """
    Response, design matrix and sampling variances over usable areas.

    `covariates` is indexed by region id. Standardization uses the usable
    areas only unless a stored `scaling` is passed in.
    """
    usable = [est for est in direct if est.usable]
    if not usable:
        raise DesignError("no usable areas for the area-level model")
    ids = [est.region_id for est in usable]
    y = np.array([est.log_mu_tilde for est in usable], dtype=float)
    v_eps = np.maximum(np.array([est.var_log for est in usable], dtype=float), var_floor)
    population = np.array([est.population_count for est in usable], dtype=float)

    columns: list[str] = []
    blocks: list[np.ndarray] = []
    if spec.intercept:
        columns.append(INTERCEPT)
        blocks.append(np.ones(len(ids)))
    fitted_scaling = CovariateScaling()
    for name in spec.covariates:
        if covariates is None or name not in covariates.columns:
            raise DesignError(f"covariate column {name!r} is missing", details={"column": name})
        missing = [rid for rid in ids if rid not in covariates.index]
        if missing:
            raise DesignError(
                f"covariate {name!r} has no value for regions {missing[:5]}",
                details={"column": name, "regions": missing},
            )
        values = covariates.loc[ids, name].to_numpy(dtype=float)
        if not np.all(np.isfinite(values)):
            raise DesignError(f"covariate {name!r} has missing values", details={"column": name})
        if spec.standardize:
            if scaling is not None and name in scaling.means:
                mean, sd = scaling.means[name], scaling.sds[name]
            else:
                mean = float(values.mean())
                sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
            if not sd > 0:
                raise DesignError(f"covariate {name!r} is constant", details={"column": name})
            fitted_scaling.means[name] = mean
            fitted_scaling.sds[name] = sd
            values = (values - mean) / sd
        columns.append(name)
        blocks.append(values)
    if not blocks:
        raise DesignError("design has no columns (no intercept and no covariates)")
    return Design(
        region_ids=ids,
        y=y,
        X=np.column_stack(blocks),
        v_eps=v_eps,
        columns=columns,
        scaling=fitted_scaling,
        population=population,
    )


def check_rank(X: np.ndarray, columns: Sequence[str] | None = None) -> None:
    names = list(columns) if columns is not None else [f"x{j}" for j in range(X.shape[1])]
    _, r, pivot = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        raise RankDeficientError(names)
    tol = max(X.shape) * np.finfo(float).eps * diag[0]
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        raise RankDeficientError(sorted(names[p] for p in pivot[rank:]))


# ---- covariance and likelihood ------------------------------------------


def admissible_rho_interval(W: np.ndarray) -> tuple[float, float]:
    """(1/lambda_min, 1/lambda_max) of W, shrunk inward."""
    eig = np.linalg.eigvals(W).real
    lam_min, lam_max = float(eig.min()), float(eig.max())
    if lam_min >= 0 or lam_max <= 0:
        return (-1.0 + RHO_SHRINK, 1.0 - RHO_SHRINK)
    return (1.0 / lam_min + RHO_SHRINK, 1.0 / lam_max - RHO_SHRINK)


def sar_covariance(sigma2_v: float, rho: float, W: np.ndarray) -> np.ndarray:
    """G = sigma2_v [(I - rho W)(I - rho W)']^-1."""
    m = W.shape[0]
    if rho == 0.0:
        return sigma2_v * np.eye(m)
    a = np.eye(m) - rho * W
    try:
        a_inv = np.linalg.solve(a, np.eye(m))
    except np.linalg.LinAlgError as exc:
        raise InadmissibleThetaError(f"I - rho W is singular at rho={rho}") from exc
    return sigma2_v * (a_inv @ a_inv.T)


def _profile(
    theta: tuple[float, float],
    y: np.ndarray,
    X: np.ndarray,
    v_eps: np.ndarray,
    W: np.ndarray | None,
) -> dict[str, Any]:
    sigma2_v, rho = theta
    if sigma2_v < 0 or not np.isfinite(sigma2_v) or not np.isfinite(rho):
        raise InadmissibleThetaError(f"inadmissible theta {theta}")
    m = y.shape[0]
    if W is None:
        G = sigma2_v * np.eye(m)
    else:
        G = sar_covariance(sigma2_v, rho, W)
    V = G + np.diag(v_eps)
    try:
        chol = cho_factor(V, lower=True)
    except LinAlgError as exc:
        raise InadmissibleThetaError(f"V(theta) is not positive definite at {theta}") from exc
    logdet_v = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    vi_x = cho_solve(chol, X)
    xt_vi_x = X.T @ vi_x
    sign, logdet_x = np.linalg.slogdet(xt_vi_x)
    if sign <= 0:
        raise InadmissibleThetaError(f"X'V^-1 X is not positive definite at {theta}")
    beta = np.linalg.solve(xt_vi_x, vi_x.T @ y)
    resid = y - X @ beta
    quad = float(resid @ cho_solve(chol, resid))
    return {
        "loglik": -0.5 * (logdet_v + float(logdet_x) + quad),
        "beta": beta,
        "beta_cov": np.linalg.inv(xt_vi_x),
        "G": G,
        "V": V,
        "chol": chol,
    }


def restricted_loglik(
    theta: tuple[float, float],
    y: np.ndarray,
    X: np.ndarray,
    v_eps: np.ndarray,
    W: np.ndarray | None,
) -> float:
    """REML log-likelihood with beta profiled out (additive constants dropped)."""
    check_rank(X)
    return float(_profile(theta, y, X, v_eps, W)["loglik"])


def gls_beta(
    y: np.ndarray, X: np.ndarray, V: np.ndarray, columns: Sequence[str] | None = None
) -> np.ndarray:
    check_rank(X, columns)
    try:
        chol = cho_factor(V, lower=True)
    except LinAlgError as exc:
        raise InadmissibleThetaError("covariance matrix is not positive definite") from exc
    vi_x = cho_solve(chol, X)
    return np.linalg.solve(X.T @ vi_x, vi_x.T @ y)


# ---- REML ---------------------------------------------------------------


def _start_grid(
    y: np.ndarray, X: np.ndarray, v_eps: np.ndarray, sar: bool, bounds: list[tuple[float, float]]
) -> list[np.ndarray]:
    beta_ols, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid_var = float(np.var(y - X @ beta_ols, ddof=min(X.shape[1], y.size - 1)))
    base = max(resid_var - float(np.mean(v_eps)), 0.05 * resid_var, 1e-6)
    sigmas = [min(base * f, bounds[0][1]) for f in (0.1, 0.5, 1.0, 2.0, 5.0)]
    if not sar:
        return [np.array([s]) for s in sigmas]
    lo, hi = bounds[1]
    rhos = np.linspace(lo, hi, 7)[1:-1]
    return [np.array([s, r]) for s in sigmas for r in rhos]


def _projected_gradient_norm(
    fun: Any, x: np.ndarray, bounds: list[tuple[float, float]]
) -> float:
    grad = approx_fprime(x, fun, 1e-7)
    for j, (lo, hi) in enumerate(bounds):
        if x[j] <= lo + 1e-12 and grad[j] > 0:
            grad[j] = 0.0
        if x[j] >= hi - 1e-12 and grad[j] < 0:
            grad[j] = 0.0
    return float(np.linalg.norm(grad))


def reml_fit(
    y: np.ndarray,
    X: np.ndarray,
    v_eps: np.ndarray,
    W: np.ndarray | None,
    spec: ModelSpec,
    *,
    columns: Sequence[str] | None = None,
    region_ids: Sequence[str] | None = None,
    scaling: CovariateScaling | None = None,
    starts: int = REML_STARTS,
) -> SfhFit:
    """Maximize the restricted likelihood over (sigma2_v[, rho]) by bounded multi-start L-BFGS-B."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    v_eps = np.asarray(v_eps, dtype=float)
    m, k = X.shape
    names = list(columns) if columns is not None else [f"x{j}" for j in range(k)]
    if m < k + 2:
        raise DesignError(f"need at least {k + 2} usable areas for {k} coefficients, got {m}")
    check_rank(X, names)
    sar = spec.random_effect == "sar"
    if sar and W is None:
        raise DesignError("SAR random effects need a contiguity matrix")
    W_used = W if sar else None

    scale = max(float(np.var(y, ddof=1)), float(np.mean(v_eps)), 1e-8)
    bounds: list[tuple[float, float]] = [(0.0, 10.0 * scale)]
    rho_interval = (0.0, 0.0)
    if sar:
        rho_interval = admissible_rho_interval(W_used)
        bounds.append(rho_interval)

    def objective(p: np.ndarray) -> float:
        theta = (float(p[0]), float(p[1]) if sar else 0.0)
        try:
            return -_profile(theta, y, X, v_eps, W_used)["loglik"]
        except InadmissibleThetaError:
            return INADMISSIBLE_PENALTY

    grid = _start_grid(y, X, v_eps, sar, bounds)
    values = np.array([objective(p) for p in grid])
    order = np.argsort(values, kind="stable")[:starts]

    best: Any = None
    iterations = 0
    for idx in order:
        x0 = grid[idx]
        result = minimize(
            objective,
            x0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"ftol": 1e-12, "gtol": 1e-8, "maxiter": 500},
        )
        iterations += int(result.nit)
        logger.debug("REML start %s -> %s (f=%.8f, %s)", x0, result.x, result.fun, result.message)
        if best is None or result.fun < best.fun:
            best = result

    method = "L-BFGS-B"
    grad_norm = _projected_gradient_norm(objective, best.x, bounds)
    converged = bool(best.success) or grad_norm <= GRADIENT_TOLERANCE * (1.0 + abs(best.fun))
    if not converged:
        fallback = minimize(
            objective,
            best.x,
            method="Nelder-Mead",
            bounds=bounds,
            options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 2000},
        )
        iterations += int(fallback.nit)
        if fallback.success and fallback.fun <= best.fun:
            best, method = fallback, "Nelder-Mead"
            grad_norm = _projected_gradient_norm(objective, best.x, bounds)
            converged = True
    if not converged or best.fun >= INADMISSIBLE_PENALTY:
        raise ConvergenceError(
            "REML did not converge from any start",
            best_point=tuple(float(v) for v in best.x),
            gradient_norm=grad_norm,
        )

    sigma2_v = float(best.x[0])
    rho = float(best.x[1]) if sar else 0.0
    boundary = sigma2_v <= BOUNDARY_FRACTION * scale
    if boundary:
        sigma2_v = 0.0
    profile = _profile((sigma2_v, rho), y, X, v_eps, W_used)
    logger.debug(
        "REML optimum sigma2_v=%.6g rho=%.6g loglik=%.6f boundary=%s",
        sigma2_v, rho, profile["loglik"], boundary,
    )
    return SfhFit(
        region_ids=list(region_ids) if region_ids is not None else [str(i) for i in range(m)],
        random_effect=spec.random_effect,
        beta=profile["beta"],
        beta_names=names,
        beta_cov=profile["beta_cov"],
        sigma2_v=sigma2_v,
        rho=rho,
        loglik=float(profile["loglik"]),
        v_eps=v_eps,
        W=W if W is not None else np.zeros((m, m)),
        G=profile["G"],
        V=profile["V"],
        boundary=boundary,
        rho_interval=rho_interval,
        scaling=scaling or CovariateScaling(),
        convergence=ConvergenceReport(
            success=True,
            method=method,
            starts=len(order),
            iterations=iterations,
            objective=float(best.fun),
            gradient_norm=grad_norm,
            message=str(getattr(best, "message", "")),
        ),
    )


def fit_design(design: Design, W: np.ndarray | None, spec: ModelSpec) -> SfhFit:
    return reml_fit(
        design.y,
        design.X,
        design.v_eps,
        W,
        spec,
        columns=design.columns,
        region_ids=design.region_ids,
        scaling=design.scaling,
    )


# ---- prediction ---------------------------------------------------------


def eblup_all(fit: SfhFit, y: np.ndarray, X: np.ndarray) -> np.ndarray:
    synthetic = X @ fit.beta
    chol = cho_factor(fit.V, lower=True)
    return synthetic + fit.G @ cho_solve(chol, np.asarray(y, dtype=float) - synthetic)


def eblup(fit: SfhFit, y: np.ndarray, X: np.ndarray, i: int) -> float:
    """Spatial EBLUP x_i'beta + [G V^-1 (y - X beta)]_i on the log scale."""
    return float(eblup_all(fit, y, X)[i])


def naive_mse(fit: SfhFit) -> np.ndarray:
    """Plug-in diag(G - G V^-1 G); a diagnostic, not the reported MSE."""
    chol = cho_factor(fit.V, lower=True)
    return np.diag(fit.G - fit.G @ cho_solve(chol, fit.G)).copy()


def back_transform(
    region_id: str,
    eblup_log: float,
    mse_log: float,
    population_count: float,
    mse_source: MseSource = "bootstrap",
) -> AreaPrediction:
    if mse_log < 0:
        raise ValueError("mse_log must be nonnegative")
    mu_hat = math.exp(eblup_log + mse_log / 2.0)
    tau_hat = population_count * mu_hat
    return AreaPrediction(
        region_id=region_id,
        eblup_log=eblup_log,
        mse_log=mse_log,
        mse_source=mse_source,
        mu_hat=mu_hat,
        tau_hat=tau_hat,
        rmse_total=tau_hat * math.sqrt(math.expm1(mse_log)),
    )


def fit_report(fit: SfhFit) -> dict[str, Any]:
    se = np.sqrt(np.clip(np.diag(fit.beta_cov), 0.0, None))
    return {
        "random_effect": fit.random_effect,
        "coefficients": [
            {"name": name, "estimate": float(b), "se": float(s), "se_source": "gls-plugin"}
            for name, b, s in zip(fit.beta_names, fit.beta, se)
        ],
        "theta": {"sigma2_v": fit.sigma2_v, "rho": fit.rho},
        "rho_interval": list(fit.rho_interval),
        "loglik_restricted": fit.loglik,
        "boundary": fit.boundary,
        "n_areas": len(fit.region_ids),
        "convergence": fit.convergence.model_dump(),
        "scaling": fit.scaling.model_dump(),
    }


__all__ = [
    "INTERCEPT",
    "apply_scaling",
    "build_design",
    "check_rank",
    "admissible_rho_interval",
    "sar_covariance",
    "restricted_loglik",
    "gls_beta",
    "reml_fit",
    "fit_design",
    "eblup_all",
    "eblup",
    "naive_mse",
    "back_transform",
    "fit_report",
]
