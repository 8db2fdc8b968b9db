"""Base point predictors and their training loop.

Two variants share one contract: a per-node recurrent model (a gated
recurrent unit over each series with shared weights) and a graph variant
that encodes each series temporally, then mixes node states through
message-passing layers over a fixed adjacency before the readout. Both are
trained on mean absolute error with Adam, early-stopped on validation MAE,
and produce forecasts in data units for any step range; their residuals
feed the conformal stage.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .data import (
    Scaler,
    SplitIndex,
    TimeSeriesCollection,
    fit_covariate_scalers,
    fit_scaler,
    window_arrays,
)
from .gpvar import Graph
from .nn import (
    MLP,
    MessagePassingLayer,
    load_numpy_state_dict,
    neighbor_mean_operator,
    seed_everything,
    state_dict_to_numpy,
)

EVAL_BATCH = 256


@dataclass(frozen=True)
class ForecasterConfig:
    """Hyperparameters of a point forecaster.

    ``horizon`` counts steps past the last observed input: 1 predicts the
    next observation. The graph fields are only read when ``use_graph``.
    """

    hidden_size: int = 32
    window: int = 5
    horizon: int = 1
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    use_graph: bool = False
    mp_layers: int = 2
    embedding_size: int = 16
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")


class RecurrentPointModel(nn.Module):
    """Shared-weight GRU over each node's window, MLP readout to one value."""

    def __init__(self, d_in: int, hidden_size: int):
        super().__init__()
        self.gru = nn.GRU(d_in, hidden_size, num_layers=1, batch_first=True)
        self.readout = MLP(hidden_size, hidden_size, 1)

    def encode(self, x: Tensor) -> Tensor:
        # x: (B, W, N, d_in) -> node states (B, N, hidden)
        b, w, n, d = x.shape
        flat = x.permute(0, 2, 1, 3).reshape(b * n, w, d)
        _, state = self.gru(flat)
        return state.squeeze(0).reshape(b, n, -1)

    def forward(self, x: Tensor) -> Tensor:
        return self.readout(self.encode(x)).squeeze(-1)


class GraphPointModel(nn.Module):
    """Time-then-space variant: per-node GRU with a learnable node embedding
    appended to each input step, message passing over a fixed graph, readout."""

    def __init__(
        self,
        n_nodes: int,
        d_in: int,
        hidden_size: int,
        embedding_size: int,
        mp_layers: int,
    ):
        super().__init__()
        self.embeddings = nn.Parameter(torch.randn(n_nodes, embedding_size) * 0.1)
        self.gru = nn.GRU(d_in + embedding_size, hidden_size, num_layers=1, batch_first=True)
        self.mp_layers = nn.ModuleList(
            MessagePassingLayer(hidden_size) for _ in range(mp_layers)
        )
        self.readout = MLP(hidden_size, hidden_size, 1)

    def encode(self, x: Tensor) -> Tensor:
        b, w, n, d = x.shape
        emb = self.embeddings.expand(b, w, n, -1)
        full = torch.cat([x, emb], dim=-1)
        flat = full.permute(0, 2, 1, 3).reshape(b * n, w, d + self.embeddings.shape[1])
        _, state = self.gru(flat)
        return state.squeeze(0).reshape(b, n, -1)

    def forward(self, x: Tensor, adjacency: Tensor) -> Tensor:
        h = self.encode(x)
        operator = neighbor_mean_operator(adjacency)
        for layer in self.mp_layers:
            h = layer(h, operator)
        return self.readout(h).squeeze(-1)


@dataclass
class PointForecaster:
    """A trained point predictor bundled with its scalers and metadata."""

    module: nn.Module
    config: ForecasterConfig
    scaler: Scaler
    covariate_scalers: list[Scaler]
    n_nodes: int
    d_in: int
    adjacency: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def adjacency_tensor(self, dtype=torch.float32) -> Tensor | None:
        if self.adjacency is None:
            return None
        return torch.as_tensor(self.adjacency, dtype=dtype)


def _scaled_collection(
    collection: TimeSeriesCollection,
    scaler: Scaler,
    covariate_scalers: list[Scaler],
) -> TimeSeriesCollection:
    values = scaler.transform(collection.values)
    covariates = None
    if collection.covariates is not None:
        covariates = np.stack(
            [
                covariate_scalers[d].transform(collection.covariates[..., d])
                for d in range(collection.n_covariates)
            ],
            axis=2,
        )
    return TimeSeriesCollection(values=values, covariates=covariates)


def _model_output(module: nn.Module, x: Tensor, adjacency: Tensor | None) -> Tensor:
    if isinstance(module, GraphPointModel):
        return module(x, adjacency)
    return module(x)


def train_point_forecaster(
    collection: TimeSeriesCollection,
    split: SplitIndex,
    config: ForecasterConfig,
    graph: Graph | None = None,
) -> PointForecaster:
    """Fit a point predictor on the training range.

    Minimizes mean absolute error (in scaled units) with Adam, early
    stopping on validation-range MAE with the configured patience and
    restoring the best weights. Fully seeded: a rerun with the same inputs
    and a single thread reproduces the parameters bit for bit.
    """
    if config.use_graph and graph is None:
        raise ValueError("graph variant requires an adjacency graph")
    if len(split.train) < config.window + config.horizon:
        raise ValueError("training range shorter than window + horizon")

    rng = seed_everything(config.seed)
    scaler = fit_scaler(collection, split.train)
    cov_scalers = fit_covariate_scalers(collection, split.train)
    scaled = _scaled_collection(collection, scaler, cov_scalers)

    inputs, targets, _ = window_arrays(scaled, config.window, config.horizon, split.train)
    x_train = torch.as_tensor(inputs, dtype=torch.float32)
    y_train = torch.as_tensor(targets, dtype=torch.float32)

    has_val = len(split.val) >= config.window + config.horizon
    if has_val:
        val_inputs, val_targets, _ = window_arrays(
            scaled, config.window, config.horizon, split.val
        )
        x_val = torch.as_tensor(val_inputs, dtype=torch.float32)
        y_val = torch.as_tensor(val_targets, dtype=torch.float32)

    n_nodes = collection.n_nodes
    d_in = 1 + collection.n_covariates
    if config.use_graph:
        module: nn.Module = GraphPointModel(
            n_nodes, d_in, config.hidden_size, config.embedding_size, config.mp_layers
        )
        adjacency = torch.as_tensor(graph.adjacency, dtype=torch.float32)
    else:
        module = RecurrentPointModel(d_in, config.hidden_size)
        adjacency = None

    optimizer = torch.optim.Adam(module.parameters(), lr=config.learning_rate)
    loss_fn = nn.L1Loss()

    best_state = copy.deepcopy(module.state_dict())
    best_val = float("inf")
    epochs_without_improvement = 0
    epochs_run = 0
    n_samples = len(x_train)

    for epoch in range(config.epochs):
        module.train()
        perm = rng.permutation(n_samples)
        for lo in range(0, n_samples, config.batch_size):
            idx = torch.as_tensor(perm[lo : lo + config.batch_size])
            optimizer.zero_grad()
            pred = _model_output(module, x_train[idx], adjacency)
            loss = loss_fn(pred, y_train[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
        epochs_run = epoch + 1
        if not has_val:
            continue
        val_mae = _evaluate_mae(module, x_val, y_val, adjacency)
        if val_mae < best_val:
            best_val = val_mae
            best_state = copy.deepcopy(module.state_dict())
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= config.patience:
                break

    if has_val:
        module.load_state_dict(best_state)
    module.eval()
    return PointForecaster(
        module=module,
        config=config,
        scaler=scaler,
        covariate_scalers=cov_scalers,
        n_nodes=n_nodes,
        d_in=d_in,
        adjacency=None if graph is None else graph.adjacency.copy(),
        metadata={
            "seed": config.seed,
            "epochs_run": epochs_run,
            "best_val_mae": best_val if has_val else float("nan"),
        },
    )


@torch.no_grad()
def _evaluate_mae(
    module: nn.Module, x: Tensor, y: Tensor, adjacency: Tensor | None
) -> float:
    module.eval()
    total = 0.0
    count = 0
    for lo in range(0, len(x), EVAL_BATCH):
        pred = _model_output(module, x[lo : lo + EVAL_BATCH], adjacency)
        batch = y[lo : lo + EVAL_BATCH]
        total += float((pred - batch).abs().sum())
        count += batch.numel()
    return total / count


@torch.no_grad()
def forecast(
    model: PointForecaster,
    collection: TimeSeriesCollection,
    steps: range,
) -> tuple[np.ndarray, np.ndarray]:
    """Forecast every admissible target step in ``steps``.

    Returns (forecasts (T', N) in data units, target_steps (T',)). The
    graph variant applies the adjacency fixed at training time.
    """
    scaled = _scaled_collection(collection, model.scaler, model.covariate_scalers)
    inputs, _, target_steps = window_arrays(
        scaled, model.config.window, model.config.horizon, steps
    )
    x = torch.as_tensor(inputs, dtype=torch.float32)
    adjacency = model.adjacency_tensor()
    model.module.eval()
    outputs = []
    for lo in range(0, len(x), EVAL_BATCH):
        outputs.append(_model_output(model.module, x[lo : lo + EVAL_BATCH], adjacency))
    preds = torch.cat(outputs, dim=0).numpy().astype(np.float64)
    return model.scaler.inverse_transform(preds), target_steps


def forecaster_parameter_hash(model: PointForecaster) -> str:
    from .nn import parameter_hash

    return parameter_hash(model.module)


# ---------------------------------------------------------------------------
# Checkpoints: one .npz holding the parameter tensors (row-major float32)
# plus a JSON metadata entry describing config, scalers and training run.
# ---------------------------------------------------------------------------


def save_checkpoint(model: PointForecaster, path: str | Path) -> None:
    meta = {
        "kind": "graph" if model.config.use_graph else "recurrent",
        "config": asdict(model.config),
        "scaler": {"mean": model.scaler.mean, "std": model.scaler.std},
        "covariate_scalers": [
            {"mean": s.mean, "std": s.std} for s in model.covariate_scalers
        ],
        "n_nodes": model.n_nodes,
        "d_in": model.d_in,
        "metadata": model.metadata,
    }
    arrays = {
        f"param/{name}": arr for name, arr in state_dict_to_numpy(model.module).items()
    }
    if model.adjacency is not None:
        arrays["adjacency"] = model.adjacency.astype(np.float32)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> PointForecaster:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        arrays = {
            name[len("param/") :]: blob[name]
            for name in blob.files
            if name.startswith("param/")
        }
        adjacency = blob["adjacency"].astype(np.float64) if "adjacency" in blob else None
    config = ForecasterConfig(**meta["config"])
    if meta["kind"] == "graph":
        module: nn.Module = GraphPointModel(
            meta["n_nodes"],
            meta["d_in"],
            config.hidden_size,
            config.embedding_size,
            config.mp_layers,
        )
    else:
        module = RecurrentPointModel(meta["d_in"], config.hidden_size)
    load_numpy_state_dict(module, arrays)
    module.eval()
    return PointForecaster(
        module=module,
        config=config,
        scaler=Scaler(**meta["scaler"]),
        covariate_scalers=[Scaler(**s) for s in meta["covariate_scalers"]],
        n_nodes=meta["n_nodes"],
        d_in=meta["d_in"],
        adjacency=adjacency,
        metadata=meta["metadata"],
    )
