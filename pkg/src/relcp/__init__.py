"""Conformal prediction intervals for correlated time series.

Given the residuals of any pre-trained point forecaster over a collection
of series, this package builds calibrated prediction intervals either from
classic weighted-quantile pools or from a graph-based quantile network
that learns which series inform each other's uncertainty.
"""

__version__ = "0.1.0"

from .conformal import (
    WeightedSample,
    nexcp_intervals,
    scp_intervals,
    seqcp_intervals,
    weighted_quantile,
)
from .data import (
    ResidualSet,
    Scaler,
    SplitIndex,
    SplitSpec,
    TimeSeriesCollection,
    compute_residuals,
    fit_scaler,
    make_splits,
    window_iter,
)
from .gpvar import GPVARParams, Graph, community_graph, normalize_propagation, simulate_gpvar
from .intervals import (
    IntervalSet,
    MetricReport,
    PredictionInterval,
    build_interval,
    build_interval_beta,
    delta_cov,
    evaluate_intervals,
    intervals_from_quantiles,
    pi_width,
    winkler,
)
from .quantile_net import (
    QuantileGrid,
    QuantilePrediction,
    RelQNConfig,
    RelQNModel,
    pinball_loss,
    predict_quantiles,
    relqn_forward,
    train_relqn,
)

__all__ = [
    "GPVARParams",
    "Graph",
    "IntervalSet",
    "MetricReport",
    "PredictionInterval",
    "QuantileGrid",
    "QuantilePrediction",
    "RelQNConfig",
    "RelQNModel",
    "ResidualSet",
    "Scaler",
    "SplitIndex",
    "SplitSpec",
    "TimeSeriesCollection",
    "WeightedSample",
    "build_interval",
    "build_interval_beta",
    "community_graph",
    "compute_residuals",
    "delta_cov",
    "evaluate_intervals",
    "fit_scaler",
    "intervals_from_quantiles",
    "make_splits",
    "nexcp_intervals",
    "normalize_propagation",
    "pi_width",
    "pinball_loss",
    "predict_quantiles",
    "relqn_forward",
    "scp_intervals",
    "seqcp_intervals",
    "simulate_gpvar",
    "train_relqn",
    "weighted_quantile",
    "window_iter",
    "winkler",
]
