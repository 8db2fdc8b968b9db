"""Data model for collections of correlated time series.

Holds the universal data carrier (a T x N matrix of scalar observations per
node, plus optional exogenous covariates), chronological train/val/cal/test
splits, standard scaling, sliding-window batching, and residual extraction.
All containers are immutable after construction and safe to share across
workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TimeSeriesCollection:
    """A collection of N aligned scalar time series over T steps.

    Args:
        values: (T, N) observations, one column per node. Must be finite.
        covariates: optional (T, N, d_u) exogenous covariates sharing
            the time and node axes of ``values``.
    """

    values: np.ndarray
    covariates: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D (T, N), got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("values contain NaN or Inf")
        object.__setattr__(self, "values", values)
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=np.float64)
            if cov.ndim != 3 or cov.shape[:2] != values.shape:
                raise ValueError(
                    f"covariates must have shape (T, N, d_u) matching values "
                    f"{values.shape}, got {cov.shape}"
                )
            if not np.isfinite(cov).all():
                raise ValueError("covariates contain NaN or Inf")
            object.__setattr__(self, "covariates", cov)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_covariates(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[2]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split fractions. train + cal + test must sum to 1."""

    train_frac: float = 0.4
    cal_frac: float = 0.4
    test_frac: float = 0.2
    val_frac_of_cal: float = 0.25

    def __post_init__(self):
        for name in ("train_frac", "cal_frac", "test_frac"):
            f = getattr(self, name)
            if not 0.0 < f < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {f}")
        if abs(self.train_frac + self.cal_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("train_frac + cal_frac + test_frac must equal 1")
        if not 0.0 <= self.val_frac_of_cal < 1.0:
            raise ValueError(
                f"val_frac_of_cal must be in [0, 1), got {self.val_frac_of_cal}"
            )


@dataclass(frozen=True)
class SplitIndex:
    """Contiguous, ordered step ranges: train < val < cal < test."""

    train: range
    val: range
    cal: range
    test: range

    def __post_init__(self):
        blocks = [self.train, self.val, self.cal, self.test]
        pos = blocks[0].start
        for r in blocks:
            if r.start != pos:
                raise ValueError("split ranges must be contiguous and ordered")
            pos = r.stop
        if any(len(r) == 0 for r in (self.train, self.cal, self.test)):
            raise ValueError("train, cal and test ranges must be non-empty")


def make_splits(n_steps: int, spec: SplitSpec) -> SplitIndex:
    """Partition [0, n_steps) chronologically into train/val/cal/test.

    Boundaries fall at floor(frac * n_steps); the validation block is carved
    from the front of the raw calibration block.

    Raises:
        ValueError: if ``n_steps`` is too small to give every requested
            range at least one step.
    """
    if n_steps < 10:
        raise ValueError(f"need at least 10 steps to split, got {n_steps}")
    train_end = int(np.floor(spec.train_frac * n_steps))
    cal_end = int(np.floor((spec.train_frac + spec.cal_frac) * n_steps))
    raw_cal = range(train_end, cal_end)
    val_len = int(np.floor(spec.val_frac_of_cal * len(raw_cal)))
    if spec.val_frac_of_cal > 0.0 and val_len == 0:
        raise ValueError("calibration block too short to carve a validation slice")
    index = SplitIndex(
        train=range(0, train_end),
        val=range(train_end, train_end + val_len),
        cal=range(train_end + val_len, cal_end),
        test=range(cal_end, n_steps),
    )
    return index


@dataclass(frozen=True)
class Scaler:
    """Affine standardizer x -> (x - mean) / std with std floored at 1e-8."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0.0:
            raise ValueError(f"std must be strictly positive, got {self.std}")

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.std + self.mean


def fit_scaler(collection: TimeSeriesCollection, steps: range) -> Scaler:
    """Fit a single global scaler over all node values in ``steps``.

    Values are pooled across nodes and steps (population standard deviation)
    so relative magnitudes between nodes are preserved.
    """
    if len(steps) == 0:
        raise ValueError("cannot fit a scaler on an empty range")
    block = collection.values[steps.start : steps.stop]
    mean = float(block.mean())
    std = float(block.std())
    return Scaler(mean=mean, std=max(std, STD_FLOOR))


def fit_covariate_scalers(
    collection: TimeSeriesCollection, steps: range
) -> list[Scaler]:
    """Fit one pooled scaler per covariate dimension over ``steps``."""
    if collection.covariates is None:
        return []
    if len(steps) == 0:
        raise ValueError("cannot fit a scaler on an empty range")
    block = collection.covariates[steps.start : steps.stop]
    scalers = []
    for d in range(block.shape[2]):
        std = float(block[..., d].std())
        scalers.append(Scaler(mean=float(block[..., d].mean()), std=max(std, STD_FLOOR)))
    return scalers


@dataclass(frozen=True)
class WindowBatch:
    """A batch of sliding windows.

    inputs: (B, W, N, d_in) with the node value as feature 0 followed by
        covariates; targets: (B, N) values at ``target_steps``, where
        target_steps[b] = last input step of sample b + horizon.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_steps: np.ndarray


def admissible_targets(steps: range, window: int, horizon: int) -> np.ndarray:
    """Target steps whose full input window and target lie inside ``steps``."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    if len(steps) < window + horizon:
        raise ValueError(
            f"range of length {len(steps)} too short for window {window} "
            f"+ horizon {horizon}"
        )
    first = steps.start + window - 1 + horizon
    return np.arange(first, steps.stop)


def window_arrays(
    collection: TimeSeriesCollection,
    window: int,
    horizon: int,
    steps: range,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Materialize all admissible windows in ``steps``.

    Returns (inputs (S, W, N, d_in), targets (S, N), target_steps (S,)).
    """
    targets_idx = admissible_targets(steps, window, horizon)
    values = collection.values
    n = collection.n_nodes
    d_in = 1 + collection.n_covariates
    starts = targets_idx - horizon - window + 1
    inputs = np.empty((len(starts), window, n, d_in), dtype=np.float64)
    for b, s in enumerate(starts):
        inputs[b, :, :, 0] = values[s : s + window]
        if collection.covariates is not None:
            inputs[b, :, :, 1:] = collection.covariates[s : s + window]
    targets = values[targets_idx]
    return inputs, targets, targets_idx


def window_iter(
    collection: TimeSeriesCollection,
    window: int,
    horizon: int,
    steps: range,
    batch_size: int,
) -> Iterator[WindowBatch]:
    """Iterate over all admissible windows in chronological order.

    Every target step with a full input window inside ``steps`` appears
    exactly once; the final batch may be smaller than ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    inputs, targets, target_steps = window_arrays(collection, window, horizon, steps)
    for lo in range(0, len(target_steps), batch_size):
        hi = min(lo + batch_size, len(target_steps))
        yield WindowBatch(
            inputs=inputs[lo:hi],
            targets=targets[lo:hi],
            target_steps=target_steps[lo:hi],
        )


@dataclass(frozen=True)
class ResidualSet:
    """Point-forecast residuals (actual minus prediction) per node and step.

    residuals: (T', N) in data units; target_steps: the T' step indices the
    rows refer to; horizon: the forecasting horizon the rows were produced at.
    """

    residuals: np.ndarray
    target_steps: np.ndarray
    horizon: int

    def __post_init__(self):
        res = np.asarray(self.residuals, dtype=np.float64)
        steps = np.asarray(self.target_steps, dtype=np.int64)
        if res.ndim != 2:
            raise ValueError(f"residuals must be 2-D, got shape {res.shape}")
        if steps.shape != (res.shape[0],):
            raise ValueError("target_steps length must match residual rows")
        if self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")
        object.__setattr__(self, "residuals", res)
        object.__setattr__(self, "target_steps", steps)

    @property
    def n_nodes(self) -> int:
        return self.residuals.shape[1]


def compute_residuals(
    actuals: np.ndarray,
    forecasts: np.ndarray,
    target_steps: Sequence[int] | np.ndarray,
    horizon: int,
) -> ResidualSet:
    """Elementwise actual - forecast, the conformity scores of a forecaster."""
    actuals = np.asarray(actuals, dtype=np.float64)
    forecasts = np.asarray(forecasts, dtype=np.float64)
    if actuals.shape != forecasts.shape:
        raise ValueError(
            f"shape mismatch: actuals {actuals.shape} vs forecasts {forecasts.shape}"
        )
    return ResidualSet(
        residuals=actuals - forecasts,
        target_steps=np.asarray(target_steps, dtype=np.int64),
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# CSV ingestion: wide format, first column the integer step index, one column
# per node afterwards. Covariate files share the same layout and row count.
# ---------------------------------------------------------------------------


def write_csv(collection: TimeSeriesCollection, path: str | Path) -> None:
    """Write the value matrix in wide CSV format with a header row."""
    path = Path(path)
    n = collection.n_nodes
    header = ["step"] + [f"node_{i}" for i in range(n)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(collection.n_steps):
            writer.writerow([t] + [repr(float(v)) for v in collection.values[t]])


def _read_wide_csv(path: Path) -> np.ndarray:
    with path.open("r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: expected a step column plus node columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns")
            rows.append([float(v) for v in row[1:]])
    return np.asarray(rows, dtype=np.float64)


def read_csv(
    values_path: str | Path,
    covariate_paths: Sequence[str | Path] = (),
) -> TimeSeriesCollection:
    """Load a collection from wide CSVs, one optional file per covariate."""
    values = _read_wide_csv(Path(values_path))
    covariates = None
    if covariate_paths:
        layers = [_read_wide_csv(Path(p)) for p in covariate_paths]
        for p, layer in zip(covariate_paths, layers):
            if layer.shape != values.shape:
                raise ValueError(
                    f"covariate file {p} has shape {layer.shape}, "
                    f"expected {values.shape}"
                )
        covariates = np.stack(layers, axis=2)
    return TimeSeriesCollection(values=values, covariates=covariates)
