"""Prediction-interval construction from predicted quantiles and the
evaluation metric suite (coverage gap, interval width, Winkler score).

All metrics average over nodes and time steps; interval boundaries count as
covered (closed intervals).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_LEVEL_ATOL = 1e-9


@dataclass(frozen=True)
class PredictionInterval:
    """A single per-node, per-step interval at confidence level 1 - alpha."""

    lower: float
    upper: float
    node: int
    target_step: int
    alpha: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"lower {self.lower} exceeds upper {self.upper}")


@dataclass(frozen=True)
class IntervalSet:
    """Dense (T', N) lower/upper bounds sharing one confidence level."""

    lower: np.ndarray
    upper: np.ndarray
    target_steps: np.ndarray
    alpha: float
    beta_fallback: bool = False

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        steps = np.asarray(self.target_steps, dtype=np.int64)
        if lower.shape != upper.shape or lower.ndim != 2:
            raise ValueError("lower/upper must be matching 2-D arrays")
        if steps.shape != (lower.shape[0],):
            raise ValueError("target_steps length must match interval rows")
        if np.any(lower > upper + 1e-12):
            raise ValueError("found an interval with lower > upper")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "target_steps", steps)

    def at(self, row: int, node: int) -> PredictionInterval:
        return PredictionInterval(
            lower=float(self.lower[row, node]),
            upper=float(self.upper[row, node]),
            node=node,
            target_step=int(self.target_steps[row]),
            alpha=self.alpha,
        )

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower


def _level_index(levels: np.ndarray, level: float) -> int | None:
    hits = np.nonzero(np.abs(levels - level) <= _LEVEL_ATOL)[0]
    return int(hits[0]) if len(hits) else None


def quantile_at_level(
    levels: np.ndarray, values: np.ndarray, level: float, interpolate: bool = True
) -> np.ndarray:
    """Pick (or linearly interpolate) the quantile at ``level``.

    ``values`` has the grid on its last axis; off-grid levels interpolate
    between the two adjacent grid levels when ``interpolate`` is set.
    """
    idx = _level_index(levels, level)
    if idx is not None:
        return values[..., idx]
    if not interpolate:
        raise ValueError(f"level {level} is not on the quantile grid")
    if not levels[0] <= level <= levels[-1]:
        raise ValueError(f"level {level} outside the grid range, cannot interpolate")
    hi = int(np.searchsorted(levels, level))
    lo = hi - 1
    w = (level - levels[lo]) / (levels[hi] - levels[lo])
    return (1.0 - w) * values[..., lo] + w * values[..., hi]


def build_interval(
    forecast: float,
    levels: np.ndarray,
    quantiles: np.ndarray,
    alpha: float,
    interpolate: bool = True,
) -> tuple[float, float]:
    """Plain interval: forecast plus the alpha/2 and 1-alpha/2 quantiles."""
    lo = quantile_at_level(levels, quantiles, alpha / 2, interpolate)
    hi = quantile_at_level(levels, quantiles, 1 - alpha / 2, interpolate)
    return float(forecast + lo), float(forecast + hi)


def _beta_offsets(levels: np.ndarray, alpha: float) -> tuple[list[int], int, int] | None:
    """Admissible grid-step offsets for the shifted quantile pair."""
    lo_idx = _level_index(levels, alpha / 2)
    hi_idx = _level_index(levels, 1 - alpha / 2)
    if lo_idx is None or hi_idx is None:
        return None
    n = len(levels)
    offsets = [j for j in range(-lo_idx, n - hi_idx)]
    # search order implements the tie rule: smallest width, then beta
    # closest to zero, then the smaller beta
    offsets.sort(key=lambda j: (abs(j), j))
    return offsets, lo_idx, hi_idx


def build_interval_beta(
    forecast: float,
    levels: np.ndarray,
    quantiles: np.ndarray,
    alpha: float,
) -> tuple[float, float, float]:
    """Width-minimizing interval over grid-aligned quantile-pair shifts.

    Keeps the nominal coverage mass 1 - alpha while sliding both interval
    endpoints by a common offset beta restricted to grid levels. Returns
    (lower, upper, beta); when no admissible shift exists the plain
    interval is returned with beta = nan (diagnostic fallback).
    """
    admissible = _beta_offsets(levels, alpha)
    if admissible is None:
        lower, upper = build_interval(forecast, levels, quantiles, alpha)
        return lower, upper, float("nan")
    offsets, lo_idx, hi_idx = admissible
    best_j = offsets[0]
    best_width = quantiles[hi_idx + best_j] - quantiles[lo_idx + best_j]
    for j in offsets[1:]:
        width = quantiles[hi_idx + j] - quantiles[lo_idx + j]
        if width < best_width:
            best_width = width
            best_j = j
    return (
        float(forecast + quantiles[lo_idx + best_j]),
        float(forecast + quantiles[hi_idx + best_j]),
        float(levels[lo_idx + best_j] - levels[lo_idx]),
    )


def intervals_from_quantiles(
    forecasts: np.ndarray,
    target_steps: np.ndarray,
    levels: np.ndarray,
    quantile_values: np.ndarray,
    alpha: float,
    mode: str = "plain",
) -> IntervalSet:
    """Vectorized interval construction for a (T', N, levels) quantile block."""
    if mode not in ("plain", "beta"):
        raise ValueError(f"unknown interval mode {mode!r}")
    levels = np.asarray(levels, dtype=np.float64)
    fallback = False
    if mode == "plain":
        lo = quantile_at_level(levels, quantile_values, alpha / 2)
        hi = quantile_at_level(levels, quantile_values, 1 - alpha / 2)
    else:
        admissible = _beta_offsets(levels, alpha)
        if admissible is None:
            lo = quantile_at_level(levels, quantile_values, alpha / 2)
            hi = quantile_at_level(levels, quantile_values, 1 - alpha / 2)
            fallback = True
        else:
            offsets, lo_idx, hi_idx = admissible
            lo = quantile_values[..., lo_idx + offsets[0]]
            hi = quantile_values[..., hi_idx + offsets[0]]
            best_width = hi - lo
            for j in offsets[1:]:
                width_j = (
                    quantile_values[..., hi_idx + j] - quantile_values[..., lo_idx + j]
                )
                better = width_j < best_width
                lo = np.where(better, quantile_values[..., lo_idx + j], lo)
                hi = np.where(better, quantile_values[..., hi_idx + j], hi)
                best_width = np.where(better, width_j, best_width)
    return IntervalSet(
        lower=forecasts + lo,
        upper=forecasts + hi,
        target_steps=target_steps,
        alpha=alpha,
        beta_fallback=fallback,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def coverage_mask(intervals: IntervalSet, actuals: np.ndarray) -> np.ndarray:
    actuals = np.asarray(actuals, dtype=np.float64)
    if actuals.shape != intervals.lower.shape:
        raise ValueError(
            f"actuals shape {actuals.shape} does not match intervals "
            f"{intervals.lower.shape}"
        )
    return (actuals >= intervals.lower) & (actuals <= intervals.upper)


def delta_cov(intervals: IntervalSet, actuals: np.ndarray, alpha: float) -> float:
    """Achieved minus target coverage, in percentage points."""
    covered = coverage_mask(intervals, actuals)
    return float(100.0 * (covered.mean() - (1.0 - alpha)))


def pi_width(intervals: IntervalSet) -> float:
    """Mean interval width over nodes and steps."""
    return float(intervals.widths.mean())


def winkler(intervals: IntervalSet, actuals: np.ndarray, alpha: float) -> float:
    """Interval width plus 2/alpha-scaled penalties for missed observations."""
    actuals = np.asarray(actuals, dtype=np.float64)
    width = intervals.widths
    below = np.maximum(intervals.lower - actuals, 0.0)
    above = np.maximum(actuals - intervals.upper, 0.0)
    return float((width + (2.0 / alpha) * (below + above)).mean())


@dataclass(frozen=True)
class MetricReport:
    """Node-and-step averaged interval metrics with a per-node breakdown."""

    alpha: float
    delta_cov: float
    pi_width: float
    winkler: float
    n_steps: int
    per_node_delta_cov: tuple[float, ...] = field(default=())
    per_node_pi_width: tuple[float, ...] = field(default=())
    per_node_winkler: tuple[float, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "delta_cov": self.delta_cov,
            "pi_width": self.pi_width,
            "winkler": self.winkler,
            "n_steps": self.n_steps,
            "per_node": {
                "delta_cov": list(self.per_node_delta_cov),
                "pi_width": list(self.per_node_pi_width),
                "winkler": list(self.per_node_winkler),
            },
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def evaluate_intervals(
    intervals: IntervalSet, actuals: np.ndarray, alpha: float | None = None
) -> MetricReport:
    """Compute the full metric suite for one interval set."""
    if alpha is None:
        alpha = intervals.alpha
    actuals = np.asarray(actuals, dtype=np.float64)
    covered = coverage_mask(intervals, actuals)
    width = intervals.widths
    below = np.maximum(intervals.lower - actuals, 0.0)
    above = np.maximum(actuals - intervals.upper, 0.0)
    winkler_terms = width + (2.0 / alpha) * (below + above)
    return MetricReport(
        alpha=alpha,
        delta_cov=float(100.0 * (covered.mean() - (1.0 - alpha))),
        pi_width=float(width.mean()),
        winkler=float(winkler_terms.mean()),
        n_steps=int(intervals.lower.shape[0]),
        per_node_delta_cov=tuple(
            (100.0 * (covered.mean(axis=0) - (1.0 - alpha))).tolist()
        ),
        per_node_pi_width=tuple(width.mean(axis=0).tolist()),
        per_node_winkler=tuple(winkler_terms.mean(axis=0).tolist()),
    )


REPORT_CSV_FIELDS = (
    "dataset",
    "base_model",
    "method",
    "alpha",
    "delta_cov",
    "pi_width",
    "winkler",
    "seed",
)


def write_report_csv(
    path: str | Path,
    rows: list[dict],
) -> None:
    """Write aligned metric rows (one per method/alpha/seed cell)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in REPORT_CSV_FIELDS})
