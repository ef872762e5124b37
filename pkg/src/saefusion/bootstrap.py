"""Double parametric bootstrap: SEs, percentile CIs, EBLUP MSEs and the Monte Carlo LR test."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from time import perf_counter
from typing import Callable, Literal, TypeVar

import numpy as np

from .errors import BootstrapError, ConfigError, SaeFusionError
from .models import (
    BootstrapRun,
    Design,
    FailureRecord,
    LrTestResult,
    ModelSpec,
    ParameterSummary,
    PredictionStatus,
    SfhFit,
)
from .pipeline.defaults import DEFAULT_LEVEL, SUCCESS_THRESHOLD
from .sfh import INTERCEPT, apply_scaling, eblup_all, reml_fit
from .simulate import CovariateRound
from .utils import (
    LANE_COVARIATE,
    LANE_RANDOM_EFFECT,
    LANE_RESTRICTED,
    LANE_SAMPLING_ERROR,
    percentile_interval,
    substream,
)

logger = logging.getLogger(__name__)

LR_TOLERANCE = 1e-8
RHO = "rho"
SIGMA2_V = "sigma2_v"

T = TypeVar("T")


@dataclass
class BootstrapInputs:
    """Everything a replicate needs besides its random streams."""

    design: Design
    W: np.ndarray | None
    spec: ModelSpec
    covariate_round: CovariateRound | None = None
    covariate: str | None = None
    workers: int = 1
    success_threshold: float = SUCCESS_THRESHOLD

    def simulates_covariate(self) -> bool:
        return (
            self.covariate_round is not None
            and self.covariate is not None
            and self.covariate in self.design.columns
        )


def _elapsed_ms(start: float) -> int:
    return int((perf_counter() - start) * 1000)


def _parallel_map(fn: Callable[[int], T], indices: range, workers: int) -> list[T]:
    """Ordered map; results come back in index order whatever the scheduling."""
    if workers <= 1:
        return [fn(index) for index in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, indices))


def _failure(index: int, exc: Exception) -> FailureRecord:
    code = exc.code if isinstance(exc, SaeFusionError) else type(exc).__name__
    message = exc.message if isinstance(exc, SaeFusionError) else str(exc)
    logger.warning("replicate %d failed: %s", index, message)
    return FailureRecord(index=index, key=str(index), code=code, message=message)


def _aggregate_reasons(failures: list[FailureRecord]) -> dict[str, int]:
    return dict(sorted(Counter(f.code for f in failures).items()))


def _random_effects(
    sigma2_v: float, rho: float, W: np.ndarray | None, rng: np.random.Generator, m: int
) -> np.ndarray:
    """u* = (I - rho W)^-1 v* with v* ~ N(0, sigma2_v I)."""
    v = rng.normal(0.0, np.sqrt(sigma2_v), m)
    if W is None or rho == 0.0:
        return v
    return np.linalg.solve(np.eye(m) - rho * W, v)


def simulated_design(inputs: BootstrapInputs, rng: np.random.Generator) -> np.ndarray:
    """Actual design with the upscaled covariate column replaced by one simulated round."""
    design = inputs.design
    covariate_round, covariate = inputs.covariate_round, inputs.covariate
    if covariate_round is None or covariate is None:
        return design.X
    predictions = covariate_round.draw(rng)
    by_id = {pred.region_id: pred for pred in predictions}
    values = np.empty(len(design.region_ids))
    for idx, region_id in enumerate(design.region_ids):
        pred = by_id.get(region_id)
        if pred is None or pred.status is not PredictionStatus.ok or pred.block_mean is None:
            reason = pred.error.message if pred is not None and pred.error else "not upscaled"
            raise BootstrapError(f"simulated covariate missing for region {region_id}: {reason}")
        values[idx] = pred.block_mean
    X = design.X.copy()
    column = design.columns.index(covariate)
    X[:, column] = apply_scaling(values, covariate, design.scaling)
    return X


def parameter_vector(fit: SfhFit) -> np.ndarray:
    extra = [fit.sigma2_v, fit.rho] if fit.random_effect == "sar" else [fit.sigma2_v]
    return np.concatenate([fit.beta, extra])


def parameter_names(fit: SfhFit) -> list[str]:
    extra = [SIGMA2_V, RHO] if fit.random_effect == "sar" else [SIGMA2_V]
    return list(fit.beta_names) + extra


# ---- Algorithm 1 --------------------------------------------------------


def run_algorithm1(
    fit: SfhFit, inputs: BootstrapInputs, B: int, master_seed: int
) -> BootstrapRun:
    """
    Double parametric bootstrap of the fitted model.

    Replicate b draws its covariate round, random effects and sampling errors
    from substreams (b, lane) of the master seed, refits the model and records
    its parameters plus per-area (true, predicted) log means.
    """
    if B < 1:
        raise ConfigError("bootstrap needs at least one replicate")
    design = inputs.design
    m = len(design.region_ids)
    W = inputs.W if fit.random_effect == "sar" else None
    spec = inputs.spec.model_copy(update={"random_effect": fit.random_effect})
    simulate_x = inputs.simulates_covariate()
    names = parameter_names(fit)

    def replicate(b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray] | FailureRecord:
        start = perf_counter()
        try:
            X_b = (
                simulated_design(inputs, substream(master_seed, b, LANE_COVARIATE))
                if simulate_x
                else design.X
            )
            u = _random_effects(
                fit.sigma2_v, fit.rho, W, substream(master_seed, b, LANE_RANDOM_EFFECT), m
            )
            truth = X_b @ fit.beta + u
            eps = substream(master_seed, b, LANE_SAMPLING_ERROR).normal(
                0.0, np.sqrt(design.v_eps)
            )
            y_b = truth + eps
            refit = reml_fit(
                y_b,
                X_b,
                design.v_eps,
                W,
                spec,
                columns=design.columns,
                region_ids=design.region_ids,
                scaling=design.scaling,
            )
            prediction = eblup_all(refit, y_b, X_b)
        except (SaeFusionError, np.linalg.LinAlgError) as exc:
            return _failure(b, exc)
        logger.debug("replicate %d done in %d ms", b, _elapsed_ms(start))
        return parameter_vector(refit), truth, prediction

    results = _parallel_map(replicate, range(1, B + 1), inputs.workers)
    failures = [r for r in results if isinstance(r, FailureRecord)]
    kept = [(b, r) for b, r in zip(range(1, B + 1), results) if not isinstance(r, FailureRecord)]
    if not kept:
        raise BootstrapError(
            f"all {B} bootstrap replicates failed",
            details={"reasons": _aggregate_reasons(failures)},
        )
    run = BootstrapRun(
        B=B,
        master_seed=master_seed,
        region_ids=list(design.region_ids),
        parameter_names=names,
        replicate_ids=np.array([b for b, _ in kept], dtype=int),
        estimates=np.vstack([r[0] for _, r in kept]),
        truths=np.vstack([r[1] for _, r in kept]),
        predictions=np.vstack([r[2] for _, r in kept]),
        failures=failures,
        success_threshold=inputs.success_threshold,
    )
    if run.unreliable:
        logger.warning(
            "bootstrap unreliable: %d of %d replicates succeeded (threshold %.0f%%)",
            run.n_success,
            B,
            100 * inputs.success_threshold,
        )
    return run


def summarize_se_ci(
    run: BootstrapRun, level: float = DEFAULT_LEVEL, estimates: dict[str, float] | None = None
) -> list[ParameterSummary]:
    """Sample SD and type-7 percentile interval of every parameter's replicates."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if run.n_success == 0:
        raise BootstrapError("no successful replicates to summarize")
    if not run.se_defined:
        logger.warning("only %d successful replicate; standard errors are undefined", run.n_success)
    lower, upper = percentile_interval(run.estimates, level, axis=0)
    summaries = []
    for j, name in enumerate(run.parameter_names):
        column = run.estimates[:, j]
        se = float(np.std(column, ddof=1)) if run.se_defined else float("nan")
        summaries.append(
            ParameterSummary(
                name=name,
                estimate=(estimates or {}).get(name),
                se=se,
                lower=float(lower[j]),
                upper=float(upper[j]),
                level=level,
                n=run.n_success,
            )
        )
    return summaries


def mse_eblup(run: BootstrapRun) -> np.ndarray:
    """Per-area mean squared error of replicate EBLUPs against replicate truths."""
    if run.n_success == 0:
        raise BootstrapError("no successful replicates for the MSE")
    squared = (run.predictions - run.truths) ** 2
    # Sorting first makes the sum independent of replicate order.
    return np.sort(squared, axis=0).sum(axis=0) / run.n_success


# ---- Algorithm 2 --------------------------------------------------------


def _restricted_problem(
    inputs: BootstrapInputs, parameter: str
) -> tuple[ModelSpec, ModelSpec, list[int]]:
    """(restricted spec, unrestricted spec, design columns kept under the null)."""
    design = inputs.design
    columns = list(range(len(design.columns)))
    if parameter == RHO:
        if inputs.W is None:
            raise ConfigError("testing rho needs a contiguity matrix")
        restricted = inputs.spec.model_copy(update={"random_effect": "independent"})
        unrestricted = inputs.spec.model_copy(update={"random_effect": "sar"})
        return restricted, unrestricted, columns
    if parameter == INTERCEPT or parameter not in design.columns:
        raise ConfigError(
            f"cannot test {parameter!r}; choose 'rho' or one of "
            f"{[c for c in design.columns if c != INTERCEPT]}"
        )
    drop = design.columns.index(parameter)
    kept = [j for j in columns if j != drop]
    if not kept:
        raise ConfigError("the restricted model would have no fixed effects")
    return inputs.spec, inputs.spec, kept


def _fit(
    y: np.ndarray, X: np.ndarray, inputs: BootstrapInputs, spec: ModelSpec, columns: list[str]
) -> SfhFit:
    W = inputs.W if spec.random_effect == "sar" else None
    return reml_fit(
        y,
        X,
        inputs.design.v_eps,
        W,
        spec,
        columns=columns,
        region_ids=inputs.design.region_ids,
        scaling=inputs.design.scaling,
    )


def lr_p_value(l_obs: float, replicate_stats: np.ndarray) -> float:
    """(1 + #{l*_b >= l_obs}) / (B + 1), counting l_obs itself as entry zero."""
    stats = np.asarray(replicate_stats, dtype=float)
    return float((1 + np.count_nonzero(stats >= l_obs)) / (stats.size + 1))


def run_algorithm2(
    inputs: BootstrapInputs,
    parameter: str,
    B: int,
    master_seed: int,
    *,
    covariate_source: Literal["simulated", "observed"] = "simulated",
) -> LrTestResult:
    """Monte Carlo likelihood-ratio test of `parameter` = 0 by simulation under the null."""
    if B < 1:
        raise ConfigError("the LR test needs at least one replicate")
    design = inputs.design
    m = len(design.region_ids)
    restricted, unrestricted, kept = _restricted_problem(inputs, parameter)
    columns_1 = list(design.columns)
    columns_0 = [design.columns[j] for j in kept]

    null_fit = _fit(design.y, design.X[:, kept], inputs, restricted, columns_0)
    alt_fit = _fit(design.y, design.X, inputs, unrestricted, columns_1)
    l_obs = alt_fit.loglik - null_fit.loglik
    if l_obs < -LR_TOLERANCE:
        if parameter == RHO:
            raise BootstrapError(
                f"restricted likelihood exceeds unrestricted (l_obs={l_obs:.3e}); "
                "optimizer failure suspected"
            )
        logger.warning(
            "negative l_obs=%.4g for %s; REML likelihoods of different designs differ "
            "by a design-dependent offset",
            l_obs,
            parameter,
        )
    logger.info("LR test of %s: l_obs=%.6f", parameter, l_obs)

    simulate_x = inputs.simulates_covariate() and not (
        parameter == inputs.covariate and covariate_source == "observed"
    )
    W_null = inputs.W if restricted.random_effect == "sar" else None

    def replicate(b: int) -> float | FailureRecord:
        start = perf_counter()
        try:
            X_b = (
                simulated_design(inputs, substream(master_seed, b, LANE_COVARIATE))
                if simulate_x
                else design.X
            )
            X0_b = X_b[:, kept]
            rng = substream(master_seed, b, LANE_RESTRICTED)
            u = _random_effects(null_fit.sigma2_v, null_fit.rho, W_null, rng, m)
            y_b = X0_b @ null_fit.beta + u + rng.normal(0.0, np.sqrt(design.v_eps))
            l0 = _fit(y_b, X0_b, inputs, restricted, columns_0).loglik
            l1 = _fit(y_b, X_b, inputs, unrestricted, columns_1).loglik
        except (SaeFusionError, np.linalg.LinAlgError) as exc:
            return _failure(b, exc)
        logger.debug("LR replicate %d done in %d ms", b, _elapsed_ms(start))
        return float(l1 - l0)

    results = _parallel_map(replicate, range(1, B + 1), inputs.workers)
    failures = [r for r in results if isinstance(r, FailureRecord)]
    stats = [r for r in results if not isinstance(r, FailureRecord)]
    if not stats:
        raise BootstrapError(
            f"all {B} LR replicates failed", details={"reasons": _aggregate_reasons(failures)}
        )
    if len(stats) < inputs.success_threshold * B:
        logger.warning("LR test unreliable: %d of %d replicates succeeded", len(stats), B)
    return LrTestResult(
        parameter=parameter,
        l_obs=float(l_obs),
        replicate_stats=stats,
        p_value=lr_p_value(l_obs, np.asarray(stats)),
        B=B,
        n_success=len(stats),
        restricted=restricted.random_effect if parameter == RHO else f"without {parameter}",
        unrestricted=unrestricted.random_effect if parameter == RHO else "full design",
        failures=failures,
    )


__all__ = [
    "BootstrapInputs",
    "simulated_design",
    "parameter_vector",
    "parameter_names",
    "run_algorithm1",
    "summarize_se_ci",
    "mse_eblup",
    "lr_p_value",
    "run_algorithm2",
]
