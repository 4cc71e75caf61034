"""The heterogeneous multi-modal MoE adapter layer.

For the visual stream ``V`` (audio is symmetric with roles swapped)::

    V_out = sum_g G_g(V) * sum_{j in topk_g(V)} P_gj(V) * E_gj(V, A)

where ``G`` is the dense global router over groups, ``P_g`` the local router
of group ``g`` and multi-modal experts see ``V`` as query/target and ``A`` as
context. There is no residual around the layer.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .experts import ExpertKind, ExpertParams, expert_forward, expert_param_count, init_expert
from .params import ParameterStore, derive_rng
from .routing import LocalRouting, combine_group, dispatch, route_global, route_local
from .tensor import Tensor, add, index, mul, reshape

MODALITIES = ("v", "a")

DEFAULT_GROUPS = ((ExpertKind.SINGLE, 2), (ExpertKind.CROSS, 2), (ExpertKind.CHANNEL, 2))


@dataclass(frozen=True)
class HmmoeConfig:
    dim: int
    rank: int
    groups: tuple[tuple[ExpertKind, int], ...] = DEFAULT_GROUPS
    k: int = 1
    share_across_modalities: bool = False

    def __post_init__(self):
        groups = tuple((ExpertKind.parse(kind), int(m)) for kind, m in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise ConfigurationError("at least one expert group is required", "hmmoe.groups")
        for i, (_, m) in enumerate(groups):
            if m < 1:
                raise ConfigurationError(f"group {i} needs at least one expert", f"hmmoe.groups[{i}]")
        if not 1 <= self.rank < self.dim:
            raise ConfigurationError(
                f"rank must satisfy 1 <= r < D, got r={self.rank}, D={self.dim}", "hmmoe.r")
        if not 1 <= self.k <= min(m for _, m in groups):
            raise ConfigurationError(
                f"k={self.k} must lie in [1, min group size {min(m for _, m in groups)}]", "hmmoe.k")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_experts(self) -> int:
        return sum(m for _, m in self.groups)

    def describe(self) -> str:
        return "+".join(f"{m}x{kind.value}" for kind, m in self.groups) + f"/r{self.rank}/k{self.k}"

    def to_dict(self) -> dict:
        return {"r": self.rank, "groups": [[kind.value, m] for kind, m in self.groups],
                "k": self.k, "share_across_modalities": self.share_across_modalities}

    @classmethod
    def from_dict(cls, d: Mapping, dim: int) -> "HmmoeConfig":
        """Build from the ``hmmoe`` JSON section (``D`` comes from the model)."""
        allowed = {"r", "groups", "k", "share_across_modalities", "D"}
        for key in d:
            if key not in allowed:
                raise ConfigurationError(f"unknown key 'hmmoe.{key}'", f"hmmoe.{key}")
        if "r" not in d:
            raise ConfigurationError("missing required field 'hmmoe.r'", "hmmoe.r")
        groups = d.get("groups", [[k.value, m] for k, m in DEFAULT_GROUPS])
        if not isinstance(groups, list):
            raise ConfigurationError("hmmoe.groups must be a list", "hmmoe.groups")
        parsed = []
        for i, g in enumerate(groups):
            if not (isinstance(g, (list, tuple)) and len(g) == 2 and isinstance(g[1], int)):
                raise ConfigurationError(
                    f"hmmoe.groups[{i}] must be [kind, count]", f"hmmoe.groups[{i}]")
            parsed.append((ExpertKind.parse(g[0]), g[1]))
        return cls(dim=int(d.get("D", dim)), rank=_int(d["r"], "hmmoe.r"),
                   groups=tuple(parsed), k=_int(d.get("k", 1), "hmmoe.k"),
                   share_across_modalities=bool(d.get("share_across_modalities", False)))

    @classmethod
    def from_json(cls, text: str, dim: int) -> "HmmoeConfig":
        return cls.from_dict(json.loads(text), dim)


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"'{path}' must be an integer, got {value!r}", path)
    return value


@dataclass
class RoutingDecision:
    """Global and per-group local routing of one stream for one batch."""

    modality: str
    group_weights: Tensor
    groups: list[LocalRouting]
    kinds: list[ExpertKind]
    layer: int | None = None

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "modality": self.modality,
            "group_weights": self.group_weights.data.tolist(),
            "groups": [
                {"group": gi, "kind": kind.value,
                 "selection_frequency": r.mask.mean(axis=0).tolist(),
                 "selected": r.selected.tolist()}
                for gi, (kind, r) in enumerate(zip(self.kinds, self.groups))
            ],
        }


class HmmoeLayer:
    """Routers and expert groups for both streams of one backbone layer."""

    def __init__(self, config: HmmoeConfig, store: ParameterStore, prefix: str,
                 rng: np.random.Generator | None = None, seed: int = 0):
        self.config = config
        self.prefix = prefix
        rng = rng if rng is not None else derive_rng(seed, prefix)
        d = config.dim
        self.global_router: dict[str, Tensor] = {}
        self.local_routers: dict[str, list[Tensor]] = {}
        self.experts: dict[str, list[list[ExpertParams]]] = {}
        shared: dict[tuple[int, int], ExpertParams] = {}
        bound = 1.0 / math.sqrt(d)
        for mod in MODALITIES:
            self.global_router[mod] = store.add(
                f"{prefix}.{mod}.router", rng.uniform(-bound, bound, (d, config.num_groups)))
            self.local_routers[mod] = []
            self.experts[mod] = []
            for gi, (kind, m) in enumerate(config.groups):
                tag = f"g{gi}_{kind.value}"
                self.local_routers[mod].append(
                    store.add(f"{prefix}.{mod}.{tag}.router", rng.uniform(-bound, bound, (d, m))))
                group = []
                for j in range(m):
                    if config.share_across_modalities and kind.multimodal:
                        if (gi, j) not in shared:
                            shared[(gi, j)] = init_expert(kind, d, config.rank, rng).register(
                                store, f"{prefix}.shared.{tag}.e{j}")
                        group.append(shared[(gi, j)])
                    else:
                        group.append(init_expert(kind, d, config.rank, rng).register(
                            store, f"{prefix}.{mod}.{tag}.e{j}"))
                self.experts[mod].append(group)

    def _stream(self, mod: str, x: Tensor, ctx: Tensor, layer: int | None):
        cfg = self.config
        b = x.shape[0]
        weights = route_global(x, self.global_router[mod])
        routings, out = [], None
        for gi, (kind, _) in enumerate(cfg.groups):
            routing = route_local(x, self.local_routers[mod][gi], cfg.k)
            outputs = []
            for j, p in enumerate(self.experts[mod][gi]):
                xs = dispatch(routing, j, x)
                if xs is None:
                    outputs.append(None)
                    continue
                cs = dispatch(routing, j, ctx) if kind.multimodal else None
                outputs.append(expert_forward(p, xs, cs))
            group_out = combine_group(outputs, routing)
            g = reshape(index(weights, (slice(None), gi)), (b, 1, 1))
            term = mul(g, group_out)
            out = term if out is None else add(out, term)
            routings.append(routing)
        decision = RoutingDecision(mod, weights, routings, [k for k, _ in cfg.groups], layer)
        return out, decision

    def forward(self, v: Tensor, a: Tensor, layer: int | None = None):
        """Return ``(v_out, a_out, [visual decision, audio decision])``."""
        d = self.config.dim
        for name, t in (("visual", v), ("audio", a)):
            if t.ndim != 3 or t.shape[-1] != d:
                raise DimensionError(f"{name} features must be [B, S, {d}], got {t.shape}")
        if v.shape[0] != a.shape[0]:
            raise DimensionError(f"batch mismatch: visual {v.shape} vs audio {a.shape}")
        v_out, dv = self._stream("v", v, a, layer)
        a_out, da = self._stream("a", a, v, layer)
        return v_out, a_out, [dv, da]

    __call__ = forward


def hmmoe_forward(v: Tensor, a: Tensor, layer: HmmoeLayer, layer_index: int | None = None):
    return layer.forward(v, a, layer_index)


# -- parameter accounting ----------------------------------------------------


def hmmoe_param_count(config: HmmoeConfig) -> int:
    """Closed-form trainable count of one layer (both streams)."""
    d, r = config.dim, config.rank
    per_stream = d * config.num_groups
    shared = 0
    for kind, m in config.groups:
        per_stream += d * m
        n = m * expert_param_count(kind, d, r)
        if config.share_across_modalities and kind.multimodal:
            shared += n
        else:
            per_stream += n
    return 2 * per_stream + shared


@dataclass
class ParameterLedger:
    trainable: int = 0
    frozen: int = 0
    breakdown: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def by_component(self, depth: int = 1) -> dict[str, dict[str, int]]:
        """Aggregate the breakdown on the first ``depth`` name segments."""
        out: dict[str, dict[str, int]] = defaultdict(lambda: {"trainable": 0, "frozen": 0})
        for owner, counts in self.breakdown.items():
            key = ".".join(owner.split(".")[:depth])
            out[key]["trainable"] += counts["trainable"]
            out[key]["frozen"] += counts["frozen"]
        return dict(out)

    def to_dict(self) -> dict:
        return {"trainable": self.trainable, "frozen": self.frozen, "total": self.total,
                "fraction": self.fraction, "components": self.by_component(1),
                "breakdown": self.breakdown}


def count_parameters(obj) -> ParameterLedger:
    """Exact counts by enumerating a store (or any object with ``.store``)."""
    store: ParameterStore = obj if isinstance(obj, ParameterStore) else obj.store
    ledger = ParameterLedger()
    for name, t in store.items():
        owner = name.rsplit(".", 1)[0] if "." in name else name
        slot = ledger.breakdown.setdefault(owner, {"trainable": 0, "frozen": 0})
        if store.is_frozen(name):
            ledger.frozen += t.size
            slot["frozen"] += t.size
        else:
            ledger.trainable += t.size
            slot["trainable"] += t.size
    return ledger


# -- expert utilization ------------------------------------------------------


@dataclass(frozen=True)
class UtilizationRow:
    layer: int
    modality: str
    group: int
    expert_index: int
    frequency: float


class UtilizationCounter:
    """Streaming selection counts keyed by (layer, modality, group)."""

    def __init__(self):
        self.counts: dict[tuple[int, str, int], np.ndarray] = {}
        self.samples: dict[tuple[int, str, int], int] = defaultdict(int)

    def add(self, decision: RoutingDecision) -> None:
        if decision.layer is None or decision.modality is None:
            raise ContractError("routing decision is not tagged with a layer and modality")
        for gi, routing in enumerate(decision.groups):
            key = (decision.layer, decision.modality, gi)
            hits = routing.mask.sum(axis=0)
            prev = self.counts.get(key)
            self.counts[key] = hits if prev is None else prev + hits
            self.samples[key] += routing.batch_size

    def rows(self) -> list[UtilizationRow]:
        out = []
        order = {m: i for i, m in enumerate(MODALITIES)}
        for key in sorted(self.counts, key=lambda k: (k[0], order.get(k[1], 99), k[1], k[2])):
            n = self.samples[key]
            for j, c in enumerate(self.counts[key]):
                out.append(UtilizationRow(key[0], key[1], key[2], j, float(c) / n if n else 0.0))
        return out


def utilization_stats(decisions: Iterable[RoutingDecision],
                      num_layers: int | None = None) -> list[UtilizationRow]:
    """Selection frequency of every expert per layer, modality and group."""
    counter = UtilizationCounter()
    for d in decisions:
        if num_layers is not None and d.layer is not None and not 0 <= d.layer < num_layers:
            raise ContractError(f"decision tagged with layer {d.layer}, model has {num_layers}")
        counter.add(d)
    return counter.rows()


UTILIZATION_COLUMNS = ("layer", "modality", "group", "expert_index", "frequency")


def utilization_csv(rows: Iterable[UtilizationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(UTILIZATION_COLUMNS)
    for r in rows:
        w.writerow([r.layer, r.modality, r.group, r.expert_index, repr(r.frequency)])
    return buf.getvalue()


def check_utilization(rows: Iterable[UtilizationRow], k: int, tol: float = 1e-9) -> bool:
    """Every (layer, modality, group) frequency vector sums to ``k``."""
    sums: dict[tuple, float] = defaultdict(float)
    for r in rows:
        if not 0.0 <= r.frequency <= 1.0:
            return False
        sums[(r.layer, r.modality, r.group)] += r.frequency
    return all(math.isclose(s, k, rel_tol=0.0, abs_tol=tol) for s in sums.values())
