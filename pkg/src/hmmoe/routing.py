"""Two-level routing: a dense global router over expert groups and sparse
top-k local routers inside each group.

Routing is per sample: router logits are computed from the sequence mean of
the stream's own features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, add, index, matmul, mean_pool, mul, reshape, scatter_rows, softmax


def pooled_features(features: Tensor) -> Tensor:
    """``[B, S, D] -> [B, D]`` sequence mean."""
    if features.ndim != 3:
        raise DimensionError(f"router input must be [B, S, D], got {features.shape}")
    b, _, d = features.shape
    return reshape(mean_pool(features, 1), (b, d))


def _router_logits(features: Tensor, weight: Tensor) -> Tensor:
    pooled = pooled_features(features)
    if weight.ndim != 2 or weight.shape[0] != pooled.shape[1]:
        raise DimensionError(
            f"router weight {weight.shape} does not accept features {features.shape}")
    return matmul(pooled, weight)


def route_global(features: Tensor, w_gr: Tensor) -> Tensor:
    """Per-sample softmax weights over expert groups, shape ``[B, G]``."""
    return softmax(_router_logits(features, w_gr), axis=-1)


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, highest first.

    Ties go to the lower index (stable sort of the negated values).
    """
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


@dataclass
class LocalRouting:
    """Selection made by one local router for one batch."""

    probs: Tensor               # [B, M]
    selected: np.ndarray        # [B, k], best first
    mask: np.ndarray            # [B, M] 0/1
    combine_weights: Tensor     # probs * mask
    _rows: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    def rows_for(self, expert: int) -> np.ndarray:
        """Ascending sample indices that selected ``expert``."""
        rows = self._rows.get(expert)
        if rows is None:
            rows = self._rows[expert] = np.flatnonzero(self.mask[:, expert])
        return rows


def local_routing_from_logits(logits: Tensor, k: int) -> LocalRouting:
    m = logits.shape[-1]
    if not 1 <= k <= m:
        raise ConfigurationError(f"top-k must satisfy 1 <= k <= M, got k={k}, M={m}", "hmmoe.k")
    probs = softmax(logits, axis=-1)
    selected = top_k_indices(probs.data, k)
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, selected, 1.0, axis=-1)
    return LocalRouting(probs=probs, selected=selected, mask=mask,
                        combine_weights=mul(probs, mask))


def route_local(features: Tensor, w_lr: Tensor, k: int) -> LocalRouting:
    """Softmax over the group's experts, keeping the top-k raw probabilities."""
    if not 1 <= k <= w_lr.shape[-1]:
        raise ConfigurationError(
            f"top-k must satisfy 1 <= k <= M, got k={k}, M={w_lr.shape[-1]}", "hmmoe.k")
    return local_routing_from_logits(_router_logits(features, w_lr), k)


def dispatch(routing: LocalRouting, expert: int, x: Tensor) -> Tensor | None:
    """Rows of ``x`` routed to ``expert``; ``None`` if no sample selected it."""
    rows = routing.rows_for(expert)
    if rows.size == 0:
        return None
    if rows.size == routing.batch_size:
        return x
    return index(x, rows)


def combine_group(expert_outputs: Sequence[Tensor | None], routing: LocalRouting) -> Tensor:
    """Weighted sum of selected expert outputs, per sample.

    ``expert_outputs[j]`` holds expert ``j``'s output on exactly the rows
    ``routing.rows_for(j)`` (in that order), or ``None`` when no sample
    selected it.
    """
    if len(expert_outputs) != routing.num_experts:
        raise ContractError(
            f"{len(expert_outputs)} expert outputs for a router over {routing.num_experts} experts")
    b = routing.batch_size
    total = None
    for j, out in enumerate(expert_outputs):
        rows = routing.rows_for(j)
        if rows.size == 0:
            if out is not None:
                raise ContractError(f"expert {j} was evaluated but no sample selected it")
            continue
        if out is None or out.shape[0] != rows.size:
            got = None if out is None else out.shape
            raise ContractError(f"expert {j} output {got} does not cover its {rows.size} rows")
        w = index(routing.combine_weights, (rows, j))
        term = mul(reshape(w, (rows.size,) + (1,) * (out.ndim - 1)), out)
        if rows.size != b:
            term = scatter_rows(term, rows, b)
        if total is not None and total.shape != term.shape:
            raise ContractError(f"expert outputs disagree in shape: {total.shape} vs {term.shape}")
        total = term if total is None else add(total, term)
    if total is None:
        raise ContractError("no expert was selected by any sample")
    return total
