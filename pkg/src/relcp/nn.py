"""Shared neural building blocks and reproducibility helpers."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import Tensor, nn


class MLP(nn.Module):
    """Two-layer perceptron with a ReLU hidden layer."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, d_hidden),
            nn.ReLU(),
            nn.Linear(d_hidden, d_out),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def neighbor_mean_operator(adjacency: Tensor) -> Tensor:
    """Row-normalize an adjacency into a mean-aggregation operator.

    Rows with zero degree map to zero rows. For sampled graphs the degree
    is a property of the drawn sample, so callers should pass a constant
    (detached) adjacency here or scale a differentiable adjacency by the
    constant inverse degree themselves.
    """
    degree = adjacency.sum(-1, keepdim=True).clamp(min=1.0)
    return adjacency / degree


class MessagePassingLayer(nn.Module):
    """Neighbor-aggregation message passing with a residual skip.

    h' = h + relu(W_self h + W_nbr (O h)) for a propagation operator O,
    typically the row-normalized adjacency (see neighbor_mean_operator).
    Zeroing every layer parameter reduces the layer to the identity, so a
    stack of these degrades to a purely per-node model.
    """

    def __init__(self, d_hidden: int):
        super().__init__()
        self.self_lin = nn.Linear(d_hidden, d_hidden)
        self.nbr_lin = nn.Linear(d_hidden, d_hidden, bias=False)

    def forward(self, h: Tensor, operator: Tensor) -> Tensor:
        # h: (B, N, d) or (N, d); operator: (N, N)
        neighbor = operator @ h
        return h + torch.relu(self.self_lin(h) + self.nbr_lin(neighbor))


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch's global generator and return a seeded numpy generator."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the named parameter tensors, order-stable."""
    digest = hashlib.sha256()
    for name, param in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def state_dict_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def load_numpy_state_dict(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.asarray(arr)) for name, arr in arrays.items()}
    module.load_state_dict(state)
