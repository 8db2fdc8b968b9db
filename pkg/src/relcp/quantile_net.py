"""Relational quantile regression over forecast residuals.

A hybrid global-local network maps a short window of every node's recent
residuals (plus optional covariates) to that node's quantile curve on a
fixed grid of levels. All processing blocks are shared across nodes; a
small learnable embedding per node is the only local component. Node
states are mixed through message-passing layers over a graph sampled from
learnable edge scores, so the residual history of related series sharpens
each node's error quantiles. Training minimizes the pinball loss summed
over the grid on a calibration residual set; a local-only mode drops
message passing and embeddings entirely.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .data import ResidualSet, Scaler, STD_FLOOR
from .graph_learning import (
    deterministic_adjacency,
    gumbel_topk_sample,
    init_edge_scores,
    straight_through_adjacency,
)
from .nn import (
    MLP,
    MessagePassingLayer,
    load_numpy_state_dict,
    neighbor_mean_operator,
    seed_everything,
    state_dict_to_numpy,
)

PREDICT_BATCH = 256


def pinball_loss(q_hat: float, y: float, alpha: float) -> float:
    """Asymmetric absolute deviation whose minimizer is the alpha-quantile."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if q_hat >= y:
        return (1.0 - alpha) * (q_hat - y)
    return alpha * (y - q_hat)


def pinball_loss_tensor(pred: Tensor, target: Tensor, levels: Tensor) -> Tensor:
    """Mean pinball loss over a batch of quantile curves.

    pred: (..., L); target: (...); levels: (L,).
    """
    diff = target.unsqueeze(-1) - pred
    return torch.maximum(levels * diff, (levels - 1.0) * diff).mean()


@dataclass(frozen=True)
class QuantileGrid:
    """A fixed, strictly increasing set of quantile levels in (0, 1),
    symmetric about one half."""

    levels: tuple[float, ...]

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        if len(levels) == 0:
            raise ValueError("grid must contain at least one level")
        arr = np.asarray(levels)
        if np.any(arr <= 0) or np.any(arr >= 1):
            raise ValueError("levels must lie strictly inside (0, 1)")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("levels must be strictly increasing")
        if not np.allclose(arr + arr[::-1], 1.0, atol=1e-9):
            raise ValueError("levels must be symmetric about 0.5")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def default(cls) -> "QuantileGrid":
        """39 equally spaced levels i/40, i = 1..39."""
        return cls(levels=tuple(i / 40 for i in range(1, 40)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class RelQNConfig:
    """Hyperparameters of the relational quantile network.

    ``local_only`` drops message passing, node embeddings and the graph
    sampler, turning the model into a shared per-node quantile regressor.
    ``sparsify_frac`` is the fraction of non-sampled score entries kept in
    the backward pass (1.0 backpropagates through the whole matrix).
    """

    hidden_size: int = 16
    embedding_size: int = 8
    mp_layers: int = 2
    window: int = 5
    horizon: int = 1
    k_neighbors: int = 20
    n_dummies: int = 0
    grid: QuantileGrid = field(default_factory=QuantileGrid.default)
    epochs: int = 100
    batches_per_epoch: int = 50
    batch_size: int = 64
    learning_rate: float = 3e-3
    lr_decay_factor: float = 0.25
    lr_decay_every: int = 20
    sparsify_frac: float = 0.10
    local_only: bool = False
    val_frac: float = 0.10
    val_alpha: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.mp_layers < 0:
            raise ValueError(f"mp_layers must be >= 0, got {self.mp_layers}")
        if self.window < 1 or self.horizon < 0:
            raise ValueError("window must be >= 1 and horizon >= 0")
        if not 0.0 <= self.val_frac < 1.0:
            raise ValueError(f"val_frac must be in [0, 1), got {self.val_frac}")


class RelationalQuantileNetwork(nn.Module):
    """Encoder + GRU per node, message passing across nodes, quantile head."""

    def __init__(self, n_nodes: int, d_in: int, config: RelQNConfig):
        super().__init__()
        self.n_nodes = n_nodes
        self.d_in = d_in
        self.local_only = config.local_only
        d_v = 0 if config.local_only else config.embedding_size
        h = config.hidden_size
        if not config.local_only:
            self.embeddings = nn.Parameter(torch.randn(n_nodes, d_v) * 0.1)
            self.edge_scores = nn.Parameter(
                init_edge_scores(n_nodes, config.n_dummies)
            )
            self.mp_layers = nn.ModuleList(
                MessagePassingLayer(h) for _ in range(config.mp_layers)
            )
        self.encoder = nn.Sequential(nn.Linear(d_in + d_v, h), nn.ReLU())
        self.gru = nn.GRU(h, h, num_layers=1, batch_first=True)
        self.decoder = MLP(h + d_v, h, len(config.grid))

    def forward(self, x: Tensor, operator: Tensor | None) -> Tensor:
        # x: (B, W, N, d_in) scaled features; operator: (N, N) propagation
        # operator (row-normalized adjacency) -> (B, N, L) scaled quantiles
        b, w, n, d = x.shape
        if n != self.n_nodes or d != self.d_in:
            raise ValueError(
                f"expected input (B, W, {self.n_nodes}, {self.d_in}), "
                f"got {tuple(x.shape)}"
            )
        if not self.local_only:
            if operator is None:
                raise ValueError("graph mode requires an adjacency operator")
            if operator.shape != (n, n):
                raise ValueError(
                    f"adjacency must be ({n}, {n}), got {tuple(operator.shape)}"
                )
            emb = self.embeddings.to(x.dtype)
            x = torch.cat([x, emb.expand(b, w, n, -1)], dim=-1)
        h = self.encoder(x)
        flat = h.permute(0, 2, 1, 3).reshape(b * n, w, h.shape[-1])
        _, state = self.gru(flat)
        state = state.squeeze(0).reshape(b, n, -1)
        if not self.local_only:
            for layer in self.mp_layers:
                state = layer(state, operator.to(x.dtype))
            state = torch.cat([state, emb.expand(b, n, -1)], dim=-1)
        return self.decoder(state)


@dataclass
class RelQNModel:
    """A trained relational quantile network with its scalers and metadata."""

    module: RelationalQuantileNetwork
    config: RelQNConfig
    n_nodes: int
    d_in: int
    residual_scaler: Scaler
    covariate_scalers: list[Scaler]
    fixed_adjacency: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def inference_adjacency(self, dtype=torch.float32) -> Tensor | None:
        """The graph used outside training: a fixed override when present,
        otherwise the noise-free top-K of the learned scores."""
        if self.config.local_only:
            return None
        if self.fixed_adjacency is not None:
            return torch.as_tensor(self.fixed_adjacency, dtype=dtype)
        return deterministic_adjacency(
            self.module.edge_scores.detach().to(dtype),
            self.config.k_neighbors,
            n_dummies=self.config.n_dummies,
        )

    def inference_operator(self, dtype=torch.float32) -> Tensor | None:
        adjacency = self.inference_adjacency(dtype)
        return None if adjacency is None else neighbor_mean_operator(adjacency)


@dataclass(frozen=True)
class QuantilePrediction:
    """Predicted quantile curves (T', N, L) in data units, sorted along L."""

    values: np.ndarray
    target_steps: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        steps = np.asarray(self.target_steps, dtype=np.int64)
        levels = np.asarray(self.levels, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != len(levels):
            raise ValueError(f"values must be (T', N, {len(levels)})")
        if steps.shape != (values.shape[0],):
            raise ValueError("target_steps length must match prediction rows")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "target_steps", steps)
        object.__setattr__(self, "levels", levels)


def _check_consecutive(steps: np.ndarray) -> None:
    if len(steps) > 1 and np.any(np.diff(steps) != 1):
        raise ValueError("residual rows must cover consecutive time steps")


def _scale_features(
    residuals: ResidualSet,
    covariates: np.ndarray | None,
    residual_scaler: Scaler,
    covariate_scalers: list[Scaler],
) -> np.ndarray:
    """Stack scaled residuals and covariates into (T', N, d_in)."""
    layers = [residual_scaler.transform(residuals.residuals)]
    if covariates is not None:
        covariates = np.asarray(covariates, dtype=np.float64)
        if covariates.ndim != 3 or covariates.shape[:2] != residuals.residuals.shape:
            raise ValueError(
                f"covariates must be (T', N, d_u) aligned with residuals, "
                f"got {covariates.shape}"
            )
        for d in range(covariates.shape[2]):
            layers.append(covariate_scalers[d].transform(covariates[..., d]))
    return np.stack(layers, axis=2)


def _window_index(
    n_rows: int, window: int, horizon: int
) -> tuple[np.ndarray, np.ndarray]:
    """Admissible target rows and the (S, W) gather index of their inputs."""
    first = window - 1 + horizon
    if n_rows <= first:
        raise ValueError(
            f"need more than {first} residual rows for window {window} "
            f"+ horizon {horizon}, got {n_rows}"
        )
    targets = np.arange(first, n_rows)
    starts = targets - horizon - window + 1
    gather = starts[:, None] + np.arange(window)[None, :]
    return targets, gather


def relqn_forward(
    model: RelQNModel,
    residual_window: np.ndarray,
    covariates: np.ndarray | None = None,
    adjacency: np.ndarray | None = None,
) -> np.ndarray:
    """Apply the network to explicit windows.

    residual_window: (B, W, N) raw residuals; covariates: (B, W, N, d_u);
    returns raw quantile curves (B, N, L) in data units, unsorted.
    """
    residual_window = np.asarray(residual_window, dtype=np.float64)
    if residual_window.ndim != 3:
        raise ValueError(f"residual_window must be (B, W, N), got {residual_window.shape}")
    layers = [model.residual_scaler.transform(residual_window)]
    if covariates is not None:
        covariates = np.asarray(covariates, dtype=np.float64)
        for d in range(covariates.shape[3]):
            layers.append(model.covariate_scalers[d].transform(covariates[..., d]))
    x = torch.as_tensor(np.stack(layers, axis=3), dtype=torch.float32)
    operator = None
    if adjacency is not None:
        operator = neighbor_mean_operator(torch.as_tensor(adjacency, dtype=torch.float32))
    elif not model.config.local_only:
        operator = model.inference_operator()
    model.module.eval()
    with torch.no_grad():
        out = model.module(x, operator).numpy().astype(np.float64)
    return model.residual_scaler.inverse_transform(out)


def train_relqn(
    residuals: ResidualSet,
    covariates: np.ndarray | None,
    config: RelQNConfig,
    fixed_graph: np.ndarray | None = None,
) -> RelQNModel:
    """Fit the quantile network on calibration residuals.

    Minimizes the grid-averaged pinball loss with Adam (learning rate decay
    on a fixed epoch schedule). Each training step draws a fresh graph from
    the edge scores and routes its gradient through the straight-through
    surrogate; ``fixed_graph`` bypasses structure learning entirely. Model
    selection keeps the epoch with the best Winkler score on the trailing
    validation slice of the calibration rows.
    """
    _check_consecutive(residuals.target_steps)
    n_rows, n_nodes = residuals.residuals.shape
    if n_rows < config.window + config.horizon:
        raise ValueError("calibration residuals span fewer steps than window + horizon")

    rng = seed_everything(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed)

    res_std = float(residuals.residuals.std())
    residual_scaler = Scaler(
        mean=float(residuals.residuals.mean()), std=max(res_std, STD_FLOOR)
    )
    cov_scalers = []
    if covariates is not None:
        covariates = np.asarray(covariates, dtype=np.float64)
        for d in range(covariates.shape[2]):
            std = float(covariates[..., d].std())
            cov_scalers.append(
                Scaler(mean=float(covariates[..., d].mean()), std=max(std, STD_FLOOR))
            )
    features = _scale_features(residuals, covariates, residual_scaler, cov_scalers)
    scaled_targets = residual_scaler.transform(residuals.residuals)

    targets_idx, gather = _window_index(n_rows, config.window, config.horizon)
    windows = features[gather].astype(np.float32)  # (S, W, N, d_in)
    target_arr = scaled_targets[targets_idx].astype(np.float32)  # (S, N)

    n_val_rows = int(np.floor(config.val_frac * n_rows))
    val_row_start = n_rows - n_val_rows
    train_mask = targets_idx < val_row_start
    train_pos = np.nonzero(train_mask)[0]
    val_pos = np.nonzero(~train_mask)[0]
    if len(train_pos) == 0:
        raise ValueError("no training windows left after carving the validation slice")

    d_in = features.shape[2]
    module = RelationalQuantileNetwork(n_nodes, d_in, config)
    if fixed_graph is not None:
        fixed_graph = np.asarray(fixed_graph, dtype=np.float64)
        if fixed_graph.shape != (n_nodes, n_nodes):
            raise ValueError(f"fixed_graph must be ({n_nodes}, {n_nodes})")

    levels = torch.as_tensor(np.asarray(config.grid.levels), dtype=torch.float32)
    x_all = torch.as_tensor(windows)
    y_all = torch.as_tensor(target_arr)
    fixed_op = (
        neighbor_mean_operator(torch.as_tensor(fixed_graph, dtype=torch.float32))
        if fixed_graph is not None
        else None
    )

    optimizer = torch.optim.Adam(module.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.lr_decay_every, gamma=config.lr_decay_factor
    )

    uses_sampler = not config.local_only and fixed_graph is None
    best_state = copy.deepcopy(module.state_dict())
    best_val = float("inf")
    best_epoch = 0
    val_levels = config.grid.as_array()

    for epoch in range(config.epochs):
        module.train()
        perm = rng.permutation(len(train_pos))
        needed = config.batches_per_epoch * config.batch_size
        if needed > len(perm):
            reps = int(np.ceil(needed / len(perm)))
            perm = np.concatenate([rng.permutation(len(train_pos)) for _ in range(reps)])
        order = train_pos[perm[:needed]]
        for b in range(config.batches_per_epoch):
            idx = torch.as_tensor(order[b * config.batch_size : (b + 1) * config.batch_size])
            if config.local_only:
                operator = None
            elif fixed_op is not None:
                operator = fixed_op
            else:
                sampled = gumbel_topk_sample(
                    module.edge_scores,
                    config.k_neighbors,
                    generator=torch_gen,
                    n_dummies=config.n_dummies,
                )
                adj, score_mask = straight_through_adjacency(
                    sampled, config.sparsify_frac, generator=torch_gen
                )
                # degree of the drawn sample is a constant of the sample
                inv_degree = 1.0 / sampled.hard_adjacency.sum(-1, keepdim=True).clamp(min=1.0)
                operator = adj * inv_degree
            optimizer.zero_grad()
            pred = module(x_all[idx], operator)
            loss = pinball_loss_tensor(pred, y_all[idx], levels)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            if uses_sampler and module.edge_scores.grad is not None:
                module.edge_scores.grad.mul_(score_mask)
            optimizer.step()
        scheduler.step()

        if len(val_pos) > 0:
            val_winkler = _validation_winkler(
                module, x_all, y_all, val_pos, fixed_op, config, val_levels
            )
            if val_winkler < best_val:
                best_val = val_winkler
                best_epoch = epoch + 1
                best_state = copy.deepcopy(module.state_dict())

    if len(val_pos) > 0:
        module.load_state_dict(best_state)
    module.eval()
    return RelQNModel(
        module=module,
        config=config,
        n_nodes=n_nodes,
        d_in=d_in,
        residual_scaler=residual_scaler,
        covariate_scalers=cov_scalers,
        fixed_adjacency=fixed_graph,
        metadata={
            "seed": config.seed,
            "epochs_run": config.epochs,
            "best_epoch": best_epoch,
            "best_val_winkler_scaled": best_val if len(val_pos) else float("nan"),
        },
    )


@torch.no_grad()
def _validation_winkler(
    module: RelationalQuantileNetwork,
    x_all: Tensor,
    y_all: Tensor,
    val_pos: np.ndarray,
    fixed_op: Tensor | None,
    config: RelQNConfig,
    levels: np.ndarray,
) -> float:
    """Winkler score of the plain interval on the validation windows
    (scaled residual units; the scale factor does not affect selection)."""
    module.eval()
    if config.local_only:
        operator = None
    elif fixed_op is not None:
        operator = fixed_op
    else:
        operator = neighbor_mean_operator(
            deterministic_adjacency(
                module.edge_scores.detach(),
                config.k_neighbors,
                n_dummies=config.n_dummies,
            )
        )
    alpha = config.val_alpha
    lo_level, hi_level = alpha / 2, 1 - alpha / 2
    lo_idx = int(np.argmin(np.abs(levels - lo_level)))
    hi_idx = int(np.argmin(np.abs(levels - hi_level)))
    total = 0.0
    count = 0
    for lo in range(0, len(val_pos), PREDICT_BATCH):
        idx = torch.as_tensor(val_pos[lo : lo + PREDICT_BATCH])
        pred = module(x_all[idx], operator)
        pred, _ = torch.sort(pred, dim=-1)
        y = y_all[idx]
        lower, upper = pred[..., lo_idx], pred[..., hi_idx]
        width = upper - lower
        below = (lower - y).clamp(min=0.0)
        above = (y - upper).clamp(min=0.0)
        total += float((width + (2.0 / alpha) * (below + above)).sum())
        count += y.numel()
    return total / count


@torch.no_grad()
def predict_quantiles(
    model: RelQNModel,
    residuals: ResidualSet,
    covariates: np.ndarray | None = None,
    deterministic_graph: bool = True,
    generator: torch.Generator | None = None,
) -> QuantilePrediction:
    """Quantile curves for every admissible window of a residual stream.

    Uses the noise-free top-K graph of the learned scores (or the fixed
    override); set ``deterministic_graph`` to False to resample the graph
    instead. The grid axis of the output is sorted non-decreasing.
    """
    _check_consecutive(residuals.target_steps)
    features = _scale_features(
        residuals, covariates, model.residual_scaler, model.covariate_scalers
    )
    n_rows = features.shape[0]
    targets_idx, gather = _window_index(n_rows, model.config.window, model.config.horizon)
    if model.config.local_only:
        operator = None
    elif deterministic_graph or model.fixed_adjacency is not None:
        operator = model.inference_operator()
    else:
        sampled = gumbel_topk_sample(
            model.module.edge_scores.detach(),
            model.config.k_neighbors,
            generator=generator,
            n_dummies=model.config.n_dummies,
        )
        operator = neighbor_mean_operator(sampled.hard_adjacency)
    model.module.eval()
    chunks = []
    for lo in range(0, len(targets_idx), PREDICT_BATCH):
        rows = gather[lo : lo + PREDICT_BATCH]
        x = torch.as_tensor(features[rows], dtype=torch.float32)
        chunks.append(model.module(x, operator).numpy())
    raw = np.concatenate(chunks, axis=0).astype(np.float64)
    raw.sort(axis=-1)
    values = model.residual_scaler.inverse_transform(raw)
    return QuantilePrediction(
        values=values,
        target_steps=residuals.target_steps[targets_idx],
        levels=model.config.grid.as_array(),
    )


# ---------------------------------------------------------------------------
# Checkpointing (same container format as the point forecasters)
# ---------------------------------------------------------------------------


def save_relqn_checkpoint(model: RelQNModel, path: str | Path) -> None:
    config_dict = asdict(model.config)
    config_dict["grid"] = list(model.config.grid.levels)
    meta = {
        "config": config_dict,
        "n_nodes": model.n_nodes,
        "d_in": model.d_in,
        "residual_scaler": {
            "mean": model.residual_scaler.mean,
            "std": model.residual_scaler.std,
        },
        "covariate_scalers": [
            {"mean": s.mean, "std": s.std} for s in model.covariate_scalers
        ],
        "metadata": model.metadata,
    }
    arrays = {
        f"param/{name}": arr for name, arr in state_dict_to_numpy(model.module).items()
    }
    if model.fixed_adjacency is not None:
        arrays["fixed_adjacency"] = model.fixed_adjacency.astype(np.float32)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_relqn_checkpoint(path: str | Path) -> RelQNModel:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        arrays = {
            name[len("param/") :]: blob[name]
            for name in blob.files
            if name.startswith("param/")
        }
        fixed = (
            blob["fixed_adjacency"].astype(np.float64)
            if "fixed_adjacency" in blob
            else None
        )
    config_dict = dict(meta["config"])
    config_dict["grid"] = QuantileGrid(levels=tuple(config_dict["grid"]))
    config = RelQNConfig(**config_dict)
    module = RelationalQuantileNetwork(meta["n_nodes"], meta["d_in"], config)
    load_numpy_state_dict(module, arrays)
    module.eval()
    return RelQNModel(
        module=module,
        config=config,
        n_nodes=meta["n_nodes"],
        d_in=meta["d_in"],
        residual_scaler=Scaler(**meta["residual_scaler"]),
        covariate_scalers=[Scaler(**s) for s in meta["covariate_scalers"]],
        fixed_adjacency=fixed,
        metadata=meta["metadata"],
    )
