"""Config-driven experiment orchestration.

A run is described by one JSON document and proceeds through cacheable
stages: simulate (or ingest) the dataset, train the base point forecaster
and save its calibration/test residuals, then calibrate the chosen
uncertainty method on the cached residuals and evaluate it on the test
range. Residual caches are the contract between stages, so any method can
consume the residuals of any base model. Every stage records its artifacts
in a manifest keyed by the config hash, and a fixed seed reproduces the
metric reports exactly in single-threaded mode.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import AdaptationConfig, rolling_adaptive_eval, write_fold_breakdown
from .conformal import nexcp_intervals, scp_intervals, seqcp_intervals
from .data import (
    ResidualSet,
    SplitIndex,
    SplitSpec,
    TimeSeriesCollection,
    compute_residuals,
    make_splits,
    read_csv,
)
from .forecaster import (
    ForecasterConfig,
    PointForecaster,
    forecast,
    save_checkpoint,
    train_point_forecaster,
)
from .gpvar import (
    GPVARParams,
    Graph,
    community_graph,
    normalize_propagation,
    read_sidecar_graph,
    simulate_gpvar,
    write_dataset,
)
from .graph_learning import export_edge_list
from .intervals import (
    IntervalSet,
    evaluate_intervals,
    intervals_from_quantiles,
    write_report_csv,
)
from .quantile_net import (
    QuantileGrid,
    RelQNConfig,
    RelQNModel,
    load_relqn_checkpoint,
    predict_quantiles,
    save_relqn_checkpoint,
    train_relqn,
)

METHODS = ("scp", "nexcp", "seqcp", "cornn", "corel")


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration (exit code 2)."""


class MissingArtifactError(Exception):
    """A required cached artifact is absent or stale (exit code 3)."""


class NumericalError(Exception):
    """Training or simulation left the finite range (exit code 4)."""


@dataclass(frozen=True)
class GPVARDatasetConfig:
    """Benchmark generator settings.

    The defaults reproduce the reference controlled-environment setup:
    unnormalized adjacency in the filter and the filter starting one lag
    behind the most recent state (see ``simulate_gpvar``).
    """

    n_nodes: int = 60
    n_communities: int = 5
    n_steps: int = 40000
    burn_in: int = 100
    theta: tuple = ((2.5, -2.0, -0.5), (1.0, 3.0, 0.0))
    a: float = 0.5
    b: float = 0.5
    sigma: float = 0.4
    filter_matrix: str = "adjacency"
    filter_lag_offset: int = 1
    seed: int = 0

    def params(self) -> GPVARParams:
        return GPVARParams(theta=np.asarray(self.theta), a=self.a, b=self.b, sigma=self.sigma)


@dataclass(frozen=True)
class CSVDatasetConfig:
    values_csv: str = ""
    covariate_csvs: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset_kind: str = "gpvar"
    gpvar: GPVARDatasetConfig = field(default_factory=GPVARDatasetConfig)
    csv: CSVDatasetConfig = field(default_factory=CSVDatasetConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    base_model_kind: str = "rnn"
    base_model: ForecasterConfig = field(default_factory=ForecasterConfig)
    method: str = "scp"
    nexcp_rho: float = 0.99
    seqcp_window: int = 100
    streaming_pool: bool = False
    relqn: RelQNConfig = field(default_factory=RelQNConfig)
    use_value_covariate: bool = True
    alphas: tuple[float, ...] = (0.1,)
    interval_mode: str = "plain"
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    true_graph: bool = False
    output_dir: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self):
        if self.dataset_kind not in ("gpvar", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset_kind!r}")
        if self.base_model_kind not in ("rnn", "stgnn"):
            raise ConfigError(f"unknown base model kind {self.base_model_kind!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.interval_mode not in ("plain", "beta"):
            raise ConfigError(f"unknown interval mode {self.interval_mode!r}")
        if not self.alphas:
            raise ConfigError("at least one alpha is required")
        for a in self.alphas:
            if not 0.0 < a < 1.0:
                raise ConfigError(f"alpha must be in (0, 1), got {a}")


def config_to_dict(config: ExperimentConfig) -> dict:
    out = asdict(config)
    out["relqn"]["grid"] = list(config.relqn.grid.levels)
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    seed = int(raw.get("seed", 0))
    try:
        gpvar_raw = dict(raw.get("gpvar", {}))
        gpvar_raw.setdefault("seed", seed)
        if "theta" in gpvar_raw:
            gpvar_raw["theta"] = tuple(tuple(row) for row in gpvar_raw["theta"])
        csv_raw = dict(raw.get("csv", {}))
        if "covariate_csvs" in csv_raw:
            csv_raw["covariate_csvs"] = tuple(csv_raw["covariate_csvs"])
        base_raw = dict(raw.get("base_model", {}))
        base_raw.setdefault("seed", seed + 1)
        relqn_raw = dict(raw.get("relqn", {}))
        relqn_raw.setdefault("seed", seed + 2)
        if "grid" in relqn_raw:
            relqn_raw["grid"] = QuantileGrid(levels=tuple(relqn_raw["grid"]))
        adapt_raw = dict(raw.get("adaptation", {}))
        adapt_raw.setdefault("seed", seed + 3)
        kind = raw.get("base_model_kind", "rnn")
        base_raw["use_graph"] = kind == "stgnn"
        config = ExperimentConfig(
            name=raw.get("name", "experiment"),
            dataset_kind=raw.get("dataset_kind", "gpvar"),
            gpvar=GPVARDatasetConfig(**gpvar_raw),
            csv=CSVDatasetConfig(**csv_raw),
            split=SplitSpec(**raw.get("split", {})),
            base_model_kind=kind,
            base_model=ForecasterConfig(**base_raw),
            method=raw.get("method", "scp"),
            nexcp_rho=float(raw.get("nexcp_rho", 0.99)),
            seqcp_window=int(raw.get("seqcp_window", 100)),
            streaming_pool=bool(raw.get("streaming_pool", False)),
            relqn=RelQNConfig(**relqn_raw),
            use_value_covariate=bool(raw.get("use_value_covariate", True)),
            alphas=tuple(float(a) for a in raw.get("alphas", (0.1,))),
            interval_mode=raw.get("interval_mode", "plain"),
            adaptation=AdaptationConfig(**adapt_raw),
            true_graph=bool(raw.get("true_graph", False)),
            output_dir=raw.get("output_dir", "runs/experiment"),
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2))


def _digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that affects results (the output path does not)."""
    payload = config_to_dict(config)
    payload.pop("output_dir", None)
    return _digest(payload)


def dataset_hash(config: ExperimentConfig) -> str:
    payload = config_to_dict(config)
    return _digest({"dataset_kind": payload["dataset_kind"],
                    "gpvar": payload["gpvar"], "csv": payload["csv"]})


def forecaster_hash(config: ExperimentConfig) -> str:
    """Covers exactly the inputs that shape the residual caches, so any
    uncertainty method can reuse them."""
    payload = config_to_dict(config)
    return _digest({
        "dataset": dataset_hash(config),
        "split": payload["split"],
        "base_model_kind": payload["base_model_kind"],
        "base_model": payload["base_model"],
    })


def relqn_hash(config: ExperimentConfig) -> str:
    payload = config_to_dict(config)
    return _digest({
        "forecaster": forecaster_hash(config),
        "relqn": payload["relqn"],
        "method": payload["method"],
        "true_graph": payload["true_graph"],
        "use_value_covariate": payload["use_value_covariate"],
    })


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _manifest_path(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "manifest.json"


def _load_manifest(config: ExperimentConfig) -> dict:
    path = _manifest_path(config)
    if path.exists():
        return json.loads(path.read_text())
    return {"config_hash": config_hash(config), "version": __version__, "stages": {}}


def _record_stage(
    config: ExperimentConfig, stage: str, artifacts: dict[str, str], elapsed: float
) -> None:
    manifest = _load_manifest(config)
    manifest["config_hash"] = config_hash(config)
    manifest["version"] = __version__
    manifest["stages"][stage] = {
        "artifacts": artifacts,
        "elapsed_seconds": elapsed,
    }
    path = _manifest_path(config)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2))


def verify_manifest(config: ExperimentConfig) -> dict:
    """Check that every recorded artifact exists under the current hash."""
    manifest = _load_manifest(config)
    if manifest["config_hash"] != config_hash(config):
        raise MissingArtifactError(
            "manifest was produced by a different configuration"
        )
    for stage, info in manifest["stages"].items():
        for name, path in info["artifacts"].items():
            if not Path(path).exists():
                raise MissingArtifactError(f"{stage}/{name}: missing artifact {path}")
    return manifest


# ---------------------------------------------------------------------------
# Residual caches
# ---------------------------------------------------------------------------


def write_residual_csv(residuals: ResidualSet, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"node_{i}" for i in range(residuals.n_nodes)])
        for row, step in enumerate(residuals.target_steps):
            writer.writerow(
                [int(step)] + [repr(float(v)) for v in residuals.residuals[row]]
            )


def read_residual_csv(path: str | Path, horizon: int) -> ResidualSet:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"residual cache {path} does not exist")
    steps = []
    rows = []
    with path.open("r", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            steps.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    return ResidualSet(
        residuals=np.asarray(rows, dtype=np.float64),
        target_steps=np.asarray(steps, dtype=np.int64),
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _paths(config: ExperimentConfig) -> dict[str, Path]:
    out = Path(config.output_dir)
    return {
        "data_dir": out / "data",
        "values_csv": out / "data" / "values.csv",
        "sidecar": out / "data" / "sidecar.json",
        "forecaster_dir": out / "forecaster",
        "checkpoint": out / "forecaster" / "checkpoint.npz",
        "residuals_cal": out / "forecaster" / "residuals_cal.csv",
        "residuals_test": out / "forecaster" / "residuals_test.csv",
        "residual_meta": out / "forecaster" / "residuals_meta.json",
        "eval_dir": out / "evaluation",
        "relqn_checkpoint": out / "evaluation" / "relqn_checkpoint.npz",
        "learned_graph": out / "evaluation" / "learned_graph.csv",
        "report_csv": out / "evaluation" / "report.csv",
        "adapt_dir": out / "adaptation",
    }


def cmd_simulate(config: ExperimentConfig) -> dict[str, str]:
    """Materialize the dataset: generate the synthetic benchmark or verify
    the configured CSV files exist."""
    started = time.perf_counter()
    paths = _paths(config)
    if config.dataset_kind == "csv":
        if not config.csv.values_csv:
            raise ConfigError("csv dataset needs a values_csv path")
        for p in (config.csv.values_csv, *config.csv.covariate_csvs):
            if not Path(p).exists():
                raise MissingArtifactError(f"dataset file {p} does not exist")
        artifacts = {"values_csv": str(config.csv.values_csv)}
        _record_stage(config, "simulate", artifacts, time.perf_counter() - started)
        return artifacts

    g = config.gpvar
    graph = normalize_propagation(community_graph(g.n_nodes, g.n_communities))
    rng = np.random.default_rng(g.seed)
    try:
        collection = simulate_gpvar(
            g.params(),
            graph,
            g.n_steps,
            burn_in=g.burn_in,
            rng=rng,
            filter_matrix=g.filter_matrix,
            filter_lag_offset=g.filter_lag_offset,
        )
    except RuntimeError as exc:
        raise NumericalError(str(exc)) from exc
    paths["data_dir"].mkdir(parents=True, exist_ok=True)
    write_dataset(
        collection, graph, g.params(), g.seed, g.burn_in,
        paths["values_csv"], paths["sidecar"],
        filter_matrix=g.filter_matrix,
        filter_lag_offset=g.filter_lag_offset,
    )
    artifacts = {"values_csv": str(paths["values_csv"]), "sidecar": str(paths["sidecar"])}
    _record_stage(config, "simulate", artifacts, time.perf_counter() - started)
    return artifacts


def load_dataset(config: ExperimentConfig) -> tuple[TimeSeriesCollection, Graph | None]:
    paths = _paths(config)
    if config.dataset_kind == "csv":
        if not Path(config.csv.values_csv).exists():
            raise MissingArtifactError(
                f"dataset file {config.csv.values_csv} does not exist; "
                "point values_csv at an existing file"
            )
        collection = read_csv(config.csv.values_csv, config.csv.covariate_csvs)
        return collection, None
    if not paths["values_csv"].exists():
        raise MissingArtifactError(
            f"dataset {paths['values_csv']} does not exist; run simulate first"
        )
    collection = read_csv(paths["values_csv"])
    graph = read_sidecar_graph(paths["sidecar"]) if paths["sidecar"].exists() else None
    return collection, graph


def _splits(config: ExperimentConfig, n_steps: int) -> SplitIndex:
    try:
        return make_splits(n_steps, config.split)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _extended_range(block: range, window: int, horizon: int) -> range:
    """Extend a block backwards so every step in it becomes a target."""
    return range(block.start - (window - 1 + horizon), block.stop)


def cmd_train_forecaster(config: ExperimentConfig, resume: bool = False) -> dict[str, str]:
    """Train the base point predictor and cache residuals for the
    calibration and test blocks (every step of each block is a target; the
    input windows may reach into earlier data)."""
    started = time.perf_counter()
    paths = _paths(config)
    collection, graph = load_dataset(config)
    split = _splits(config, collection.n_steps)
    base = config.base_model

    paths["forecaster_dir"].mkdir(parents=True, exist_ok=True)
    model: PointForecaster | None = None
    if resume and paths["checkpoint"].exists() and paths["residual_meta"].exists():
        meta = json.loads(paths["residual_meta"].read_text())
        if meta.get("stage_hash") == forecaster_hash(config):
            artifacts = _load_manifest(config)["stages"].get("train_forecaster", {})
            if artifacts:
                return artifacts["artifacts"]
    try:
        model = train_point_forecaster(collection, split, base, graph=graph)
    except RuntimeError as exc:
        raise NumericalError(str(exc)) from exc
    save_checkpoint(model, paths["checkpoint"])

    for block, cache_key in ((split.cal, "residuals_cal"), (split.test, "residuals_test")):
        ext = _extended_range(block, base.window, base.horizon)
        preds, target_steps = forecast(model, collection, ext)
        actuals = collection.values[target_steps]
        residuals = compute_residuals(actuals, preds, target_steps, base.horizon)
        write_residual_csv(residuals, paths[cache_key])

    paths["residual_meta"].write_text(
        json.dumps(
            {
                "horizon": base.horizon,
                "window": base.window,
                "stage_hash": forecaster_hash(config),
                "best_val_mae": model.metadata.get("best_val_mae"),
                "epochs_run": model.metadata.get("epochs_run"),
            },
            indent=2,
        )
    )
    artifacts = {
        "checkpoint": str(paths["checkpoint"]),
        "residuals_cal": str(paths["residuals_cal"]),
        "residuals_test": str(paths["residuals_test"]),
        "residual_meta": str(paths["residual_meta"]),
    }
    _record_stage(config, "train_forecaster", artifacts, time.perf_counter() - started)
    return artifacts


def _load_residual_caches(config: ExperimentConfig) -> tuple[ResidualSet, ResidualSet]:
    paths = _paths(config)
    if not paths["residual_meta"].exists():
        raise MissingArtifactError(
            "residual caches not found; run train-forecaster first"
        )
    meta = json.loads(paths["residual_meta"].read_text())
    if meta.get("stage_hash") != forecaster_hash(config):
        raise MissingArtifactError(
            "residual caches were produced by a different configuration"
        )
    horizon = int(meta["horizon"])
    cal = read_residual_csv(paths["residuals_cal"], horizon)
    test = read_residual_csv(paths["residuals_test"], horizon)
    return cal, test


def _value_covariates(
    collection: TimeSeriesCollection, residuals: ResidualSet
) -> np.ndarray:
    return collection.values[residuals.target_steps][:, :, None]


def _train_relqn_for(
    config: ExperimentConfig,
    collection: TimeSeriesCollection,
    cal: ResidualSet,
    graph: Graph | None,
    resume: bool = False,
) -> RelQNModel:
    paths = _paths(config)
    if resume and paths["relqn_checkpoint"].exists():
        model = load_relqn_checkpoint(paths["relqn_checkpoint"])
        if model.metadata.get("stage_hash") == relqn_hash(config):
            return model
    relqn_config = config.relqn
    if config.method == "cornn" and not relqn_config.local_only:
        relqn_config = replace(relqn_config, local_only=True)
    fixed = None
    if config.method == "corel" and config.true_graph:
        if graph is None:
            raise ConfigError("true-graph evaluation needs a dataset with a known graph")
        fixed = graph.adjacency
    covs = _value_covariates(collection, cal) if config.use_value_covariate else None
    try:
        model = train_relqn(cal, covs, relqn_config, fixed_graph=fixed)
    except RuntimeError as exc:
        raise NumericalError(str(exc)) from exc
    model.metadata["stage_hash"] = relqn_hash(config)
    paths["eval_dir"].mkdir(parents=True, exist_ok=True)
    save_relqn_checkpoint(model, paths["relqn_checkpoint"])
    return model


def _relqn_test_intervals(
    config: ExperimentConfig,
    model: RelQNModel,
    collection: TimeSeriesCollection,
    cal: ResidualSet,
    test: ResidualSet,
    forecasts_test: np.ndarray,
    alpha: float,
) -> IntervalSet:
    history = model.config.window + model.config.horizon
    stream = ResidualSet(
        residuals=np.vstack([cal.residuals[-history:], test.residuals]),
        target_steps=np.concatenate([cal.target_steps[-history:], test.target_steps]),
        horizon=test.horizon,
    )
    covs = _value_covariates(collection, stream) if config.use_value_covariate else None
    pred = predict_quantiles(model, stream, covs)
    keep = np.isin(pred.target_steps, test.target_steps)
    if not keep.all():
        # only evaluate rows inside the test block
        pred_values = pred.values[keep]
        pred_steps = pred.target_steps[keep]
    else:
        pred_values, pred_steps = pred.values, pred.target_steps
    row_of_step = {int(s): i for i, s in enumerate(test.target_steps)}
    rows = np.asarray([row_of_step[int(s)] for s in pred_steps])
    return intervals_from_quantiles(
        forecasts=forecasts_test[rows],
        target_steps=pred_steps,
        levels=pred.levels,
        quantile_values=pred_values,
        alpha=alpha,
        mode=config.interval_mode,
    )


def _merge_report_rows(path: Path, rows: list[dict]) -> None:
    """Update the run's aligned report, replacing rows with the same
    (method, alpha, seed) key so several methods can share one run dir."""
    merged: dict[tuple, dict] = {}
    if path.exists():
        with path.open("r", newline="") as fh:
            for row in csv.DictReader(fh):
                merged[(row["method"], row["alpha"], row["seed"])] = row
    for row in rows:
        merged[(str(row["method"]), str(row["alpha"]), str(row["seed"]))] = row
    write_report_csv(path, [merged[k] for k in sorted(merged)])


def cmd_calibrate_evaluate(config: ExperimentConfig, resume: bool = False) -> dict[str, str]:
    """Run the configured uncertainty method on the cached calibration
    residuals, build test intervals and write metric reports."""
    started = time.perf_counter()
    paths = _paths(config)
    collection, graph = load_dataset(config)
    cal, test = _load_residual_caches(config)
    actuals_test = collection.values[test.target_steps]
    forecasts_test = actuals_test - test.residuals
    paths["eval_dir"].mkdir(parents=True, exist_ok=True)

    model: RelQNModel | None = None
    if config.method in ("cornn", "corel"):
        model = _train_relqn_for(config, collection, cal, graph, resume=resume)
        if config.method == "corel" and not config.true_graph:
            export_edge_list(
                model.module.edge_scores.detach(),
                model.config.k_neighbors,
                paths["learned_graph"],
                n_dummies=model.config.n_dummies,
            )

    artifacts: dict[str, str] = {}
    rows = []
    for alpha in config.alphas:
        if config.method == "scp":
            intervals = scp_intervals(cal, forecasts_test, test.target_steps, alpha)
        elif config.method == "nexcp":
            intervals = nexcp_intervals(
                cal, forecasts_test, test.target_steps, alpha, config.nexcp_rho,
                streaming=config.streaming_pool,
                test_residuals=test if config.streaming_pool else None,
            )
        elif config.method == "seqcp":
            intervals = seqcp_intervals(
                cal, forecasts_test, test.target_steps, alpha, config.seqcp_window,
                streaming=config.streaming_pool,
                test_residuals=test if config.streaming_pool else None,
            )
        else:
            intervals = _relqn_test_intervals(
                config, model, collection, cal, test, forecasts_test, alpha
            )
        eval_rows = np.searchsorted(test.target_steps, intervals.target_steps)
        report = evaluate_intervals(intervals, actuals_test[eval_rows], alpha)
        report_path = paths["eval_dir"] / f"report_{config.method}_alpha{alpha:g}.json"
        report.to_json(report_path)
        artifacts[f"report_alpha{alpha:g}"] = str(report_path)
        rows.append(
            {
                "dataset": config.name,
                "base_model": config.base_model_kind,
                "method": config.method + ("_trueA" if config.true_graph else ""),
                "alpha": alpha,
                "delta_cov": report.delta_cov,
                "pi_width": report.pi_width,
                "winkler": report.winkler,
                "seed": config.seed,
            }
        )
    _merge_report_rows(paths["report_csv"], rows)
    artifacts["report_csv"] = str(paths["report_csv"])
    if model is not None:
        artifacts["relqn_checkpoint"] = str(paths["relqn_checkpoint"])
        if config.method == "corel" and not config.true_graph:
            artifacts["learned_graph"] = str(paths["learned_graph"])
    _record_stage(config, "calibrate_evaluate", artifacts, time.perf_counter() - started)
    return artifacts


def cmd_adapt_evaluate(config: ExperimentConfig, resume: bool = False) -> dict[str, str]:
    """Rolling fold-wise evaluation with embedding adaptation, reported
    next to the frozen-model baseline from the same stream."""
    started = time.perf_counter()
    if config.method != "corel":
        raise ConfigError("adaptation requires the corel method")
    paths = _paths(config)
    collection, graph = load_dataset(config)
    cal, test = _load_residual_caches(config)
    model = _train_relqn_for(config, collection, cal, graph, resume=resume)

    history = model.config.window + model.config.horizon
    stream = ResidualSet(
        residuals=np.vstack([cal.residuals[-history:], test.residuals]),
        target_steps=np.concatenate([cal.target_steps[-history:], test.target_steps]),
        horizon=test.horizon,
    )
    covs = _value_covariates(collection, stream) if config.use_value_covariate else None
    alpha = config.alphas[0]
    adapted, frozen, fold_rows = rolling_adaptive_eval(
        model, stream, covs, alpha, config.adaptation, n_context_rows=history
    )
    paths["adapt_dir"].mkdir(parents=True, exist_ok=True)
    adapted_path = paths["adapt_dir"] / f"report_adapted_alpha{alpha:g}.json"
    frozen_path = paths["adapt_dir"] / f"report_frozen_alpha{alpha:g}.json"
    folds_path = paths["adapt_dir"] / "folds.csv"
    adapted.to_json(adapted_path)
    frozen.to_json(frozen_path)
    write_fold_breakdown(folds_path, fold_rows)
    artifacts = {
        "report_adapted": str(adapted_path),
        "report_frozen": str(frozen_path),
        "folds": str(folds_path),
    }
    _record_stage(config, "adapt_evaluate", artifacts, time.perf_counter() - started)
    return artifacts


def run_pipeline(config: ExperimentConfig, resume: bool = False) -> dict[str, str]:
    """simulate -> train-forecaster -> calibrate-evaluate in one call."""
    cmd_simulate(config)
    cmd_train_forecaster(config, resume=resume)
    return cmd_calibrate_evaluate(config, resume=resume)


# ---------------------------------------------------------------------------
# Consolidated reporting
# ---------------------------------------------------------------------------


def cmd_report(
    run_dirs: list[str | Path],
    out_path: str | Path,
    long_format: bool = False,
) -> list[dict]:
    """Merge per-run report CSVs into one table.

    Rows are keyed by (dataset, base model, method, alpha) with mean and
    standard deviation across seeds. ``long_format`` instead emits one
    (key, metric, value, seed) row per entry, convenient for plotting.
    """
    entries = []
    for run_dir in run_dirs:
        report = Path(run_dir) / "evaluation" / "report.csv"
        if not report.exists():
            raise MissingArtifactError(f"no report found under {run_dir}")
        with report.open("r", newline="") as fh:
            entries.extend(list(csv.DictReader(fh)))
    if not entries:
        raise MissingArtifactError("no report rows found")

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if long_format:
        fields = ["dataset", "base_model", "method", "alpha", "metric", "value", "seed"]
        rows = []
        for e in entries:
            for metric in ("delta_cov", "pi_width", "winkler"):
                rows.append(
                    {
                        "dataset": e["dataset"],
                        "base_model": e["base_model"],
                        "method": e["method"],
                        "alpha": e["alpha"],
                        "metric": metric,
                        "value": e[metric],
                        "seed": e["seed"],
                    }
                )
        with out_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
        return rows

    groups: dict[tuple, list[dict]] = {}
    for e in entries:
        key = (e["dataset"], e["base_model"], e["method"], e["alpha"])
        groups.setdefault(key, []).append(e)
    rows = []
    for key in sorted(groups):
        cell = groups[key]
        row = {
            "dataset": key[0],
            "base_model": key[1],
            "method": key[2],
            "alpha": key[3],
            "n_seeds": len(cell),
        }
        for metric in ("delta_cov", "pi_width", "winkler"):
            vals = np.asarray([float(e[metric]) for e in cell])
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std())
        rows.append(row)
    fields = list(rows[0].keys())
    with out_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return rows
