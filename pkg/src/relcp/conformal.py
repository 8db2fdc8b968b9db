"""Distribution-free baselines over calibration residuals.

Three classic constructions sharing one weighted empirical quantile
primitive: a split method with one static pool, an exponentially weighted
variant for slowly drifting errors, and a sliding-window variant that keeps
only the most recent residuals. Intervals are two-sided, built from signed
residual quantiles at levels alpha/2 and 1 - alpha/2, with a finite-sample
correction that appends a virtual +inf point carrying the largest single
weight (the weighted generalization of the ceil((n+1)(1-alpha))/n rule).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ResidualSet
from .intervals import IntervalSet


@dataclass(frozen=True)
class WeightedSample:
    """Values with non-negative weights, at least one strictly positive."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if values.ndim != 1 or values.shape != weights.shape:
            raise ValueError("values and weights must be matching 1-D arrays")
        if len(values) == 0:
            raise ValueError("sample is empty")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        if not np.any(weights > 0):
            raise ValueError("at least one weight must be strictly positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)


def weighted_quantile(sample: WeightedSample, level: float) -> float:
    """Conservative weighted empirical quantile.

    Returns the smallest value v whose normalized cumulative weight reaches
    ``level`` after a virtual +inf point with weight equal to the largest
    single weight is appended; if the virtual point is the one selected,
    the largest finite value is returned.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    order = np.argsort(sample.values, kind="stable")
    values = sample.values[order]
    weights = sample.weights[order]
    total = weights.sum() + weights.max()
    cum = np.cumsum(weights) / total
    idx = int(np.searchsorted(cum, level, side="left"))
    if idx >= len(values):
        return float(values[-1])
    return float(values[idx])


def two_sided_offsets(
    values: np.ndarray, weights: np.ndarray, alpha: float
) -> tuple[float, float]:
    """Signed-residual interval offsets at levels alpha/2 and 1 - alpha/2.

    The lower tail mirrors the conservative rule by negating the values, so
    both tails err on the wide side.
    """
    sample = WeightedSample(values=values, weights=weights)
    upper = weighted_quantile(sample, 1.0 - alpha / 2)
    mirrored = WeightedSample(values=-sample.values, weights=sample.weights)
    lower = -weighted_quantile(mirrored, 1.0 - alpha / 2)
    return lower, upper


def _check_inputs(
    cal_residuals: ResidualSet,
    forecasts: np.ndarray,
    target_steps: np.ndarray,
    alpha: float,
) -> tuple[np.ndarray, np.ndarray]:
    forecasts = np.asarray(forecasts, dtype=np.float64)
    target_steps = np.asarray(target_steps, dtype=np.int64)
    if forecasts.ndim != 2 or forecasts.shape[1] != cal_residuals.n_nodes:
        raise ValueError(
            f"forecasts must be (T', {cal_residuals.n_nodes}), got {forecasts.shape}"
        )
    if target_steps.shape != (forecasts.shape[0],):
        raise ValueError("target_steps must have one entry per forecast row")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return forecasts, target_steps


def _require_pool(n_cal: int, alpha: float) -> None:
    needed = math.ceil(1.0 / alpha)
    if n_cal < needed:
        raise ValueError(
            f"need at least {needed} calibration residuals per node for "
            f"alpha={alpha}, got {n_cal}"
        )


def scp_intervals(
    cal_residuals: ResidualSet,
    forecasts: np.ndarray,
    target_steps: np.ndarray,
    alpha: float,
) -> IntervalSet:
    """Split conformal: one static per-node pool, constant offsets."""
    forecasts, target_steps = _check_inputs(cal_residuals, forecasts, target_steps, alpha)
    _require_pool(cal_residuals.residuals.shape[0], alpha)
    n_nodes = cal_residuals.n_nodes
    unit = np.ones(cal_residuals.residuals.shape[0])
    lower = np.empty(n_nodes)
    upper = np.empty(n_nodes)
    for i in range(n_nodes):
        lower[i], upper[i] = two_sided_offsets(
            cal_residuals.residuals[:, i], unit, alpha
        )
    return IntervalSet(
        lower=forecasts + lower[None, :],
        upper=forecasts + upper[None, :],
        target_steps=target_steps,
        alpha=alpha,
    )


def _streaming_pools(
    cal_residuals: ResidualSet,
    test_residuals: ResidualSet | None,
    streaming: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Pool values (S, N) and their step indices, calibration first."""
    if streaming and test_residuals is None:
        raise ValueError("streaming evaluation requires the observed test residuals")
    values = cal_residuals.residuals
    steps = cal_residuals.target_steps
    if streaming:
        values = np.vstack([values, test_residuals.residuals])
        steps = np.concatenate([steps, test_residuals.target_steps])
    return values, steps


def nexcp_intervals(
    cal_residuals: ResidualSet,
    forecasts: np.ndarray,
    target_steps: np.ndarray,
    alpha: float,
    rho: float,
    streaming: bool = False,
    test_residuals: ResidualSet | None = None,
) -> IntervalSet:
    """Exponentially weighted pools: residual at step s weighs rho^(t - s).

    With a static pool the normalized quantile is invariant to rescaling all
    weights by rho per step, so the offsets are constant over the test range
    and computed once. Streaming mode lets residuals observed before each
    test step join the pool.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    forecasts, target_steps = _check_inputs(cal_residuals, forecasts, target_steps, alpha)
    _require_pool(cal_residuals.residuals.shape[0], alpha)
    pool_values, pool_steps = _streaming_pools(cal_residuals, test_residuals, streaming)
    n_nodes = cal_residuals.n_nodes
    lower = np.empty_like(forecasts)
    upper = np.empty_like(forecasts)
    if not streaming:
        t0 = int(target_steps[0])
        weights = rho ** (t0 - pool_steps).astype(np.float64)
        for i in range(n_nodes):
            lo, hi = two_sided_offsets(pool_values[:, i], weights, alpha)
            lower[:, i] = lo
            upper[:, i] = hi
    else:
        for row, t in enumerate(target_steps):
            visible = pool_steps < t
            weights = rho ** (int(t) - pool_steps[visible]).astype(np.float64)
            for i in range(n_nodes):
                lo, hi = two_sided_offsets(pool_values[visible, i], weights, alpha)
                lower[row, i] = lo
                upper[row, i] = hi
    return IntervalSet(
        lower=forecasts + lower,
        upper=forecasts + upper,
        target_steps=target_steps,
        alpha=alpha,
    )


def seqcp_intervals(
    cal_residuals: ResidualSet,
    forecasts: np.ndarray,
    target_steps: np.ndarray,
    alpha: float,
    window_k: int,
    streaming: bool = False,
    test_residuals: ResidualSet | None = None,
) -> IntervalSet:
    """Sliding-window pools: unit weights on the K most recent residuals."""
    needed = math.ceil(1.0 / alpha)
    if window_k < needed:
        raise ValueError(
            f"window_k must be at least ceil(1/alpha) = {needed}, got {window_k}"
        )
    forecasts, target_steps = _check_inputs(cal_residuals, forecasts, target_steps, alpha)
    pool_values, pool_steps = _streaming_pools(cal_residuals, test_residuals, streaming)
    n_nodes = cal_residuals.n_nodes
    lower = np.empty_like(forecasts)
    upper = np.empty_like(forecasts)
    if not streaming:
        recent = pool_values[-window_k:]
        unit = np.ones(recent.shape[0])
        for i in range(n_nodes):
            lo, hi = two_sided_offsets(recent[:, i], unit, alpha)
            lower[:, i] = lo
            upper[:, i] = hi
    else:
        for row, t in enumerate(target_steps):
            visible = np.nonzero(pool_steps < t)[0][-window_k:]
            unit = np.ones(len(visible))
            for i in range(n_nodes):
                lo, hi = two_sided_offsets(pool_values[visible, i], unit, alpha)
                lower[row, i] = lo
                upper[row, i] = hi
    return IntervalSet(
        lower=forecasts + lower,
        upper=forecasts + upper,
        target_steps=target_steps,
        alpha=alpha,
    )
