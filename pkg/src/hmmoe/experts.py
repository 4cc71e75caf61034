"""The three expert architectures of the heterogeneous groups.

* single-modal adapter: ``x + relu(x W_down + b_down) W_up + b_up``
* cross-modal attention: low-rank attention with queries from one modality
  and keys/values from the other
* channel attention: low-rank adapter path gated per channel by
  sequence-pooled cross-modal statistics

All experts map ``[B, S, D]`` of their query/target modality to the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DimensionError, EmptySequenceError
from .params import ParameterStore
from .tensor import (
    Tensor,
    add,
    add_scalar,
    matmul,
    mean_pool,
    mul,
    relu,
    scale,
    sigmoid,
    softmax,
    transpose,
)


class ExpertKind(str, Enum):
    SINGLE = "single"
    CROSS = "cross"
    CHANNEL = "channel"

    @property
    def multimodal(self) -> bool:
        return self is not ExpertKind.SINGLE

    @classmethod
    def parse(cls, value: "str | ExpertKind") -> "ExpertKind":
        if isinstance(value, ExpertKind):
            return value
        key = str(value).strip().lower()
        aliases = {
            "single": cls.SINGLE, "singlemodal": cls.SINGLE, "single_modal": cls.SINGLE,
            "cross": cls.CROSS, "crossattention": cls.CROSS, "cross_attention": cls.CROSS,
            "channel": cls.CHANNEL, "channelattention": cls.CHANNEL,
            "channel_attention": cls.CHANNEL,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ConfigurationError(f"unknown expert kind {value!r}") from None


@dataclass
class ExpertParams:
    kind: ExpertKind
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor
    w_q: Tensor | None = None
    w_k: Tensor | None = None
    w_v: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {"w_down": self.w_down, "b_down": self.b_down,
               "w_up": self.w_up, "b_up": self.b_up}
        if self.kind is ExpertKind.CROSS:
            out.update(w_q=self.w_q, w_k=self.w_k, w_v=self.w_v)
        return out

    def register(self, store: ParameterStore, prefix: str) -> "ExpertParams":
        for name, t in self.tensors().items():
            store.add(f"{prefix}.{name}", t)
        return self


def expert_param_count(kind: ExpertKind, dim: int, rank: int) -> int:
    """Closed-form parameter count of one expert."""
    n = 2 * dim * rank + rank + dim
    if ExpertKind.parse(kind) is ExpertKind.CROSS:
        n += 3 * rank * rank
    return n


def init_expert(kind: ExpertKind | str, dim: int, rank: int,
                rng: np.random.Generator) -> ExpertParams:
    """Fan-in uniform down/attention projections, zero up-projection and biases.

    The zero up-projection makes every fresh expert output-neutral.
    """
    kind = ExpertKind.parse(kind)
    if not 1 <= rank < dim:
        raise ConfigurationError(f"rank must satisfy 1 <= r < D, got r={rank}, D={dim}", "hmmoe.r")
    bound = 1.0 / math.sqrt(dim)
    p = ExpertParams(
        kind=kind,
        w_down=Tensor(rng.uniform(-bound, bound, (dim, rank))),
        b_down=Tensor(np.zeros(rank)),
        w_up=Tensor(np.zeros((rank, dim))),
        b_up=Tensor(np.zeros(dim)),
    )
    if kind is ExpertKind.CROSS:
        rb = 1.0 / math.sqrt(rank)
        p.w_q = Tensor(rng.uniform(-rb, rb, (rank, rank)))
        p.w_k = Tensor(rng.uniform(-rb, rb, (rank, rank)))
        p.w_v = Tensor(rng.uniform(-rb, rb, (rank, rank)))
    return p


def _check_input(x: Tensor, p: ExpertParams, what: str) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{what} must be [B, S, D], got shape {x.shape}")
    if x.shape[-1] != p.dim:
        raise DimensionError(f"{what} has feature dim {x.shape[-1]}, expert expects {p.dim}")


def _check_pair(x: Tensor, ctx: Tensor, p: ExpertParams) -> None:
    _check_input(x, p, "query/target")
    _check_input(ctx, p, "context")
    if x.shape[0] != ctx.shape[0]:
        raise DimensionError(f"batch mismatch between {x.shape} and {ctx.shape}")
    if ctx.shape[1] == 0:
        raise EmptySequenceError("context modality has an empty sequence")


def down_project(x: Tensor, p: ExpertParams) -> Tensor:
    return relu(add(matmul(x, p.w_down), p.b_down))


def single_modal_forward(x: Tensor, p: ExpertParams) -> Tensor:
    _check_input(x, p, "input")
    return add(x, add(matmul(down_project(x, p), p.w_up), p.b_up))


def cross_attention_forward(query: Tensor, context: Tensor, p: ExpertParams) -> Tensor:
    """Attend from the query modality to the context modality in rank-r space.

    The residual inside the up-projection is the query-side low-rank feature,
    the only choice that keeps shapes consistent when sequence lengths differ.
    """
    _check_pair(query, context, p)
    q_low = down_project(query, p)
    c_low = down_project(context, p)
    scores = scale(matmul(matmul(q_low, p.w_q), transpose(matmul(c_low, p.w_k))),
                   1.0 / math.sqrt(p.rank))
    attn = softmax(scores, axis=-1)
    mixed = add(matmul(attn, matmul(c_low, p.w_v)), q_low)
    return add(matmul(mixed, p.w_up), p.b_up)


def channel_gate(target: Tensor, context: Tensor) -> Tensor:
    """``sigmoid(pool(pool(context) * target))`` with shape ``[B, 1, D]``."""
    if target.shape[1] == 0:
        raise EmptySequenceError("target modality has an empty sequence")
    if context.shape[1] == 0:
        raise EmptySequenceError("context modality has an empty sequence")
    return sigmoid(mean_pool(mul(mean_pool(context, 1), target), 1))


def channel_attention_forward(target: Tensor, context: Tensor, p: ExpertParams) -> Tensor:
    _check_input(target, p, "target")
    _check_pair(target, context, p)
    gate = channel_gate(target, context)
    low = matmul(down_project(target, p), p.w_up)
    return add(mul(low, add_scalar(gate, 1.0)), p.b_up)


def expert_forward(p: ExpertParams, x: Tensor, context: Tensor | None = None) -> Tensor:
    if p.kind is ExpertKind.SINGLE:
        return single_modal_forward(x, p)
    if context is None:
        raise DimensionError(f"{p.kind.value} expert needs a context modality")
    if p.kind is ExpertKind.CROSS:
        return cross_attention_forward(x, context, p)
    return channel_attention_forward(x, context, p)
