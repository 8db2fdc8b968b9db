"""Latent relational structure over a time series collection.

A learnable score matrix parametrizes, row by row, a categorical
distribution over candidate neighbors. Sparse K-neighbor graphs are drawn
by perturbing the scores with Gumbel noise and keeping the top K per row,
which realizes sampling without replacement. Optional dummy columns let a
row select fewer than K real neighbors; selected dummies are discarded
before message passing. Gradients reach the scores through a
straight-through surrogate: the hard adjacency in the forward pass, the
row-softmax probabilities in the backward pass, restricted to a mask of
eligible entries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

DEFAULT_SPARSIFY_FRAC = 0.10
SCORE_INIT_STD = 0.1


def init_edge_scores(
    n_nodes: int, n_dummies: int = 0, generator: torch.Generator | None = None
) -> Tensor:
    """Score matrix (N, N + D) initialized near zero for near-uniform sampling."""
    scores = torch.empty(n_nodes, n_nodes + n_dummies)
    scores.normal_(0.0, SCORE_INIT_STD, generator=generator)
    return scores


def _check_shape(scores: Tensor, n_dummies: int) -> None:
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != n + n_dummies:
        raise ValueError(
            f"scores must be (N, N + dummies), got {tuple(scores.shape)} "
            f"with {n_dummies} dummies"
        )


def _self_mask(scores: Tensor, n_dummies: int) -> Tensor:
    _check_shape(scores, n_dummies)
    masked = scores.clone()
    idx = torch.arange(scores.shape[0])
    masked[idx, idx] = float("-inf")
    return masked


def row_softmax(scores: Tensor, n_dummies: int = 0) -> Tensor:
    """Row-wise softmax of the scores with self-edges masked out."""
    _check_shape(scores, n_dummies)
    idx = torch.arange(scores.shape[0])
    fill = torch.full((len(idx),), float("-inf"), dtype=scores.dtype)
    masked = scores.index_put((idx, idx), fill)
    return torch.softmax(masked, dim=1)


def gumbel_noise(
    shape: tuple[int, ...],
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype).clamp_min(1e-12)
    return -torch.log(-torch.log(u))


def gumbel_topk(
    scores: Tensor,
    k: int,
    generator: torch.Generator | None = None,
    deterministic: bool = False,
) -> Tensor:
    """Row-wise top-k selection of Gumbel-perturbed scores.

    Returns a boolean (R, C) mask with exactly k True per row. With
    ``deterministic`` the noise is skipped and ties break toward the lowest
    column index.
    """
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must be in [1, {scores.shape[1]}], got {k}")
    perturbed = scores.detach().clone()
    if not deterministic:
        perturbed = perturbed + gumbel_noise(
            perturbed.shape, generator, dtype=perturbed.dtype
        )
    order = torch.argsort(perturbed, dim=1, descending=True, stable=True)
    selected = torch.zeros_like(scores, dtype=torch.bool)
    selected.scatter_(1, order[:, :k], True)
    return selected


@dataclass
class SampledGraph:
    """A drawn K-neighbor graph plus the quantities the backward pass needs.

    hard_adjacency: (N, N) binary, dummy columns dropped, row degree <= K;
    soft_weights: (N, N + D) row-softmax probabilities, graph-connected to
    the score matrix; selected: (N, N + D) boolean top-K selection.
    """

    hard_adjacency: Tensor
    soft_weights: Tensor
    selected: Tensor
    n_dummies: int

    @property
    def n_nodes(self) -> int:
        return self.hard_adjacency.shape[0]


def gumbel_topk_sample(
    scores: Tensor,
    k: int,
    generator: torch.Generator | None = None,
    deterministic: bool = False,
    n_dummies: int = 0,
) -> SampledGraph:
    """Draw a K-neighbor graph from the row categoricals of ``scores``.

    Self-edges are masked out before sampling; selected dummy columns are
    discarded, so row degrees can fall below ``k`` when dummies are in play.
    """
    n = scores.shape[0]
    if not 1 <= k <= n - 1 + n_dummies:
        raise ValueError(f"k must be in [1, N - 1 + dummies] = [1, {n - 1 + n_dummies}]")
    soft = row_softmax(scores, n_dummies=n_dummies)
    masked_scores = _self_mask(scores.detach(), n_dummies)
    selected = gumbel_topk(masked_scores, k, generator, deterministic)
    hard = selected[:, :n].to(scores.dtype)
    return SampledGraph(
        hard_adjacency=hard,
        soft_weights=soft,
        selected=selected,
        n_dummies=n_dummies,
    )


def straight_through_adjacency(
    sampled: SampledGraph,
    sparsify_frac: float = DEFAULT_SPARSIFY_FRAC,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Differentiable adjacency plus the score-gradient eligibility mask.

    The returned adjacency equals the hard sample in the forward pass and
    routes gradients as if it were the soft row-softmax. The mask marks the
    score entries allowed to receive gradient: the sampled edges plus a
    uniformly random ``sparsify_frac`` fraction of the non-sampled real
    (non-dummy) entries, resampled on every call. Callers multiply the
    score gradient by the mask after the backward pass.
    """
    if not 0.0 <= sparsify_frac <= 1.0:
        raise ValueError(f"sparsify_frac must be in [0, 1], got {sparsify_frac}")
    n = sampled.n_nodes
    soft_real = sampled.soft_weights[:, :n]
    # grouping matters: the surrogate term must cancel exactly in the forward
    adjacency = sampled.hard_adjacency.detach() + (soft_real - soft_real.detach())

    selected_real = sampled.selected[:, :n]
    eye = torch.eye(n, dtype=torch.bool)
    eligible = ~selected_real & ~eye
    mask_real = selected_real.clone()
    n_eligible = int(eligible.sum())
    n_extra = int(round(sparsify_frac * n_eligible))
    if n_extra > 0:
        flat_idx = torch.nonzero(eligible.reshape(-1), as_tuple=False).squeeze(1)
        perm = torch.randperm(len(flat_idx), generator=generator)
        chosen = flat_idx[perm[:n_extra]]
        mask_real.reshape(-1)[chosen] = True
    mask = torch.zeros_like(sampled.selected, dtype=sampled.soft_weights.dtype)
    mask[:, :n] = mask_real.to(mask.dtype)
    return adjacency, mask


def deterministic_adjacency(scores: Tensor, k: int, n_dummies: int = 0) -> Tensor:
    """Noise-free top-K adjacency of the scores (dummies discarded)."""
    sampled = gumbel_topk_sample(
        scores, k, generator=None, deterministic=True, n_dummies=n_dummies
    )
    return sampled.hard_adjacency


def export_edge_list(
    scores: Tensor,
    k: int,
    path: str | Path,
    n_dummies: int = 0,
) -> None:
    """Write the deterministic top-K graph as an inspectable edge list CSV."""
    scores = scores.detach()
    adjacency = deterministic_adjacency(scores, k, n_dummies=n_dummies)
    soft = row_softmax(scores, n_dummies=n_dummies)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "target", "score", "probability"])
        for i, j in torch.nonzero(adjacency, as_tuple=False).tolist():
            writer.writerow(
                [i, j, float(scores[i, j]), float(soft[i, j])]
            )
