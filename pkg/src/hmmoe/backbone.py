"""Frozen two-stream transformer encoder with adapter layers and a trainable head.

Each stream runs ``L`` post-norm encoder blocks (single-head self-attention,
4x feed-forward). An adapter layer follows every block and mixes the two
streams; the head reads the concatenated sequence means of both streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError
from .layer import MODALITIES, HmmoeConfig, HmmoeLayer, RoutingDecision, hmmoe_param_count
from .params import ParameterStore, derive_rng
from .tensor import (
    Tape,
    Tensor,
    add,
    concat,
    cross_entropy,
    layer_norm,
    matmul,
    mean_pool,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

FFN_MULT = 4


def block_param_count(dim: int) -> int:
    """One encoder block of one stream: q/k/v/out, bias-free FFN, two norms."""
    return 4 * dim * dim + 2 * FFN_MULT * dim * dim + 4 * dim


def head_param_count(dim: int, classes: int) -> int:
    return 2 * dim * classes + classes


def model_param_count(layers: int, dim: int, classes: int,
                      hmmoe: HmmoeConfig | None) -> dict[str, int]:
    frozen = 2 * layers * block_param_count(dim)
    trainable = head_param_count(dim, classes)
    if hmmoe is not None:
        trainable += layers * hmmoe_param_count(hmmoe)
    return {"trainable": trainable, "frozen": frozen}


class EncoderBlock:
    def __init__(self, store: ParameterStore, prefix: str, dim: int, rng: np.random.Generator):
        def dense(name, fan_in, shape):
            return store.add(f"{prefix}.{name}", rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape),
                             frozen=True)

        def const(name, value, n):
            return store.add(f"{prefix}.{name}", np.full(n, value), frozen=True)

        h = FFN_MULT * dim
        self.dim = dim
        self.w_q = dense("attn.w_q", dim, (dim, dim))
        self.w_k = dense("attn.w_k", dim, (dim, dim))
        self.w_v = dense("attn.w_v", dim, (dim, dim))
        self.w_o = dense("attn.w_o", dim, (dim, dim))
        self.ln1_g = const("ln1.gain", 1.0, dim)
        self.ln1_b = const("ln1.bias", 0.0, dim)
        self.w_1 = dense("ffn.w_1", dim, (dim, h))
        self.w_2 = dense("ffn.w_2", h, (h, dim))
        self.ln2_g = const("ln2.gain", 1.0, dim)
        self.ln2_b = const("ln2.bias", 0.0, dim)

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = matmul(x, self.w_q), matmul(x, self.w_k), matmul(x, self.w_v)
        att = softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(self.dim)), axis=-1)
        h = layer_norm(add(x, matmul(matmul(att, v), self.w_o)), self.ln1_g, self.ln1_b)
        f = matmul(relu(matmul(h, self.w_1)), self.w_2)
        return layer_norm(add(h, f), self.ln2_g, self.ln2_b)


class Model:
    def __init__(self, layers: int, dim: int, classes: int,
                 hmmoe: HmmoeConfig | None, seed: int):
        self.layers = layers
        self.dim = dim
        self.classes = classes
        self.hmmoe_config = hmmoe
        self.seed = seed
        self.store = ParameterStore()
        self.blocks: list[dict[str, EncoderBlock]] = []
        self.adapters: list[HmmoeLayer] = []
        for i in range(layers):
            self.blocks.append({
                mod: EncoderBlock(self.store, f"backbone.l{i}.{mod}", dim,
                                  derive_rng(seed, "backbone", i, mod))
                for mod in MODALITIES
            })
        if hmmoe is not None:
            for i in range(layers):
                self.adapters.append(HmmoeLayer(hmmoe, self.store, f"hmmoe.l{i}",
                                                rng=derive_rng(seed, "hmmoe", i)))
        rng = derive_rng(seed, "head")
        bound = 1.0 / math.sqrt(2 * dim)
        self.w_head = self.store.add("head.w", rng.uniform(-bound, bound, (2 * dim, classes)))
        self.b_head = self.store.add("head.b", np.zeros(classes))

    def forward(self, v_tokens, a_tokens, use_adapters: bool = True,
                decisions: list[RoutingDecision] | None = None) -> Tensor:
        """Logits ``[B, C]``; routing decisions are appended to ``decisions``."""
        v = v_tokens if isinstance(v_tokens, Tensor) else Tensor(v_tokens)
        a = a_tokens if isinstance(a_tokens, Tensor) else Tensor(a_tokens)
        for name, t in (("visual", v), ("audio", a)):
            if t.ndim != 3 or t.shape[-1] != self.dim:
                raise DimensionError(f"{name} tokens must be [B, S, {self.dim}], got {t.shape}")
        if v.shape[0] != a.shape[0]:
            raise DimensionError(f"batch mismatch: visual {v.shape} vs audio {a.shape}")
        for i, block in enumerate(self.blocks):
            v, a = block["v"](v), block["a"](a)
            if use_adapters and self.adapters:
                v, a, decs = self.adapters[i](v, a, layer=i)
                if decisions is not None:
                    decisions.extend(decs)
        b = v.shape[0]
        pooled = concat([reshape(mean_pool(v, 1), (b, self.dim)),
                         reshape(mean_pool(a, 1), (b, self.dim))], axis=-1)
        return add(matmul(pooled, self.w_head), self.b_head)

    __call__ = forward


def build_model(layers: int, dim: int, hmmoe: HmmoeConfig | None, classes: int,
                seed: int = 0) -> Model:
    """Randomly initialized, frozen backbone plus adapters after every block.

    Backbone and head weights depend only on ``seed``, never on the adapter
    configuration, so adapted and adapter-free builds share them exactly.
    """
    if layers < 1:
        raise ConfigurationError(f"need at least one layer, got {layers}", "model.L")
    if dim < 2:
        raise ConfigurationError(f"model dim must be >= 2, got {dim}", "model.D")
    if classes < 2:
        raise ConfigurationError(f"need at least two classes, got {classes}", "model.C")
    if hmmoe is not None and hmmoe.dim != dim:
        raise ConfigurationError(f"adapter dim {hmmoe.dim} != model dim {dim}", "hmmoe.D")
    return Model(layers, dim, classes, hmmoe, seed)


def model_forward(v_tokens, a_tokens, model: Model, **kw) -> Tensor:
    return model.forward(v_tokens, a_tokens, **kw)


# -- optimization -------------------------------------------------------------


@dataclass
class SGD:
    lr: float = 1e-2

    def step(self, store: ParameterStore) -> None:
        for _, p in store.trainable_items():
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, store: ParameterStore) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in store.trainable_items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr=lr)
    if name == "sgd":
        return SGD(lr=lr)
    raise ConfigurationError(f"unknown optimizer {name!r}", "training.optimizer")


def train_step(model: Model, v_tokens, a_tokens, labels, optimizer) -> float:
    """One cross-entropy step; only trainable parameters move."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= model.classes):
        raise DataError(f"labels must lie in [0, {model.classes})")
    params = model.store.trainable()
    with Tape() as tape:
        loss = cross_entropy(model.forward(v_tokens, a_tokens), labels)
    tape.backward(loss, params)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    optimizer.step(model.store)
    return value


def trainable_fraction(layers: int, dim: int, classes: int, hmmoe: HmmoeConfig | None) -> float:
    counts = model_param_count(layers, dim, classes, hmmoe)
    return counts["trainable"] / (counts["trainable"] + counts["frozen"])


def search_budget(layers: int, classes: int, low: float, high: float,
                  dims=(32, 48, 64, 96, 128, 192, 256), ranks=(2, 4, 8, 16, 32),
                  groups=None, k: int = 1) -> list[tuple[int, int, float]]:
    """``(D, r, fraction)`` for every grid point whose closed-form trainable
    fraction lies in ``[low, high]``, closest to the band centre first."""
    hits = []
    for dim in dims:
        for rank in ranks:
            if rank >= dim:
                continue
            kw = {} if groups is None else {"groups": groups}
            frac = trainable_fraction(layers, dim, classes, HmmoeConfig(dim, rank, k=k, **kw))
            if low <= frac <= high:
                hits.append((dim, rank, frac))
    centre = (low + high) / 2
    return sorted(hits, key=lambda h: (abs(h[2] - centre), h[0], h[1]))
