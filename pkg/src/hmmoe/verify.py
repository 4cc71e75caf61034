"""Built-in verification suites run by ``hmmoe verify``."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import Adam, build_model, model_param_count, train_step
from .experts import ExpertKind, expert_forward, init_expert
from .gradcheck import finite_difference_check
from .layer import HmmoeConfig, HmmoeLayer, count_parameters, hmmoe_param_count
from .params import ParameterStore, derive_rng
from .routing import combine_group, dispatch, local_routing_from_logits, route_global, route_local
from .tensor import Tape, Tensor, mul, softmax, sum_

GRAD_TOL = 1e-4
SUM_TOL = 1e-12
TOL_ENV = "HMMOE_TOL_OVERRIDE"

MICRO = dict(batch=2, seq_v=3, seq_a=4, dim=8, rank=2, experts=2, k=2)


def tolerance(default: float) -> float:
    """``default`` unless ``HMMOE_TOL_OVERRIDE`` is set (testing only)."""
    raw = os.environ.get(TOL_ENV)
    return float(raw) if raw else default


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float
    detail: str = ""


def randomize(store: ParameterStore, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every trainable parameter with random values.

    Zero-initialized up-projections would make many gradients vanish
    identically; gradient checks need every path active.
    """
    for _, t in store.trainable_items():
        t.data = rng.uniform(-scale, scale, t.shape) + 0.0


def micro_inputs(seed: int = 0, batch: int = 2, seq_v: int = 3, seq_a: int = 4, dim: int = 8):
    rng = derive_rng(seed, "micro-inputs")
    return (Tensor(rng.standard_normal((batch, seq_v, dim))),
            Tensor(rng.standard_normal((batch, seq_a, dim))))


def micro_layer(seed: int = 0, groups=None, k: int | None = None) -> tuple[HmmoeLayer, ParameterStore]:
    m = MICRO["experts"]
    groups = groups or ((ExpertKind.SINGLE, m), (ExpertKind.CROSS, m), (ExpertKind.CHANNEL, m))
    cfg = HmmoeConfig(MICRO["dim"], MICRO["rank"], groups, k or MICRO["k"])
    store = ParameterStore()
    layer = HmmoeLayer(cfg, store, "hmmoe", rng=derive_rng(seed, "micro-layer"))
    randomize(store, derive_rng(seed, "micro-randomize"))
    return layer, store


def _projection(shape, seed: int, tag: str) -> Tensor:
    return Tensor(derive_rng(seed, "projection", tag).standard_normal(shape))


def gradcheck_suite(seed: int = 0) -> list[CheckResult]:
    tol = tolerance(GRAD_TOL)
    v, a = micro_inputs(seed)
    d, r = MICRO["dim"], MICRO["rank"]
    results = []

    def record(name, f, store):
        rep = finite_difference_check(f, store, 1e-5)
        results.append(CheckResult(name, rep.passed(tol), rep.max_rel_error, tol,
                                   f"worst {rep.worst_param}{list(rep.worst_index or [])}"))

    for kind in ExpertKind:
        store = ParameterStore()
        p = init_expert(kind, d, r, derive_rng(seed, "gc", kind.value)).register(store, "e")
        randomize(store, derive_rng(seed, "gc-rand", kind.value))
        proj = _projection(v.shape, seed, kind.value)
        ctx = a if kind.multimodal else None
        record(f"expert/{kind.value}",
               lambda s, p=p, ctx=ctx, proj=proj: sum_(mul(expert_forward(p, v, ctx), proj)),
               store)

    store = ParameterStore()
    w_gr = store.add("w_gr", derive_rng(seed, "gc-gr").uniform(-1, 1, (d, 3)))
    proj = _projection((v.shape[0], 3), seed, "global")
    record("router/global", lambda s: sum_(mul(route_global(v, w_gr), proj)), store)

    store = ParameterStore()
    m = MICRO["experts"]
    w_lr = store.add("w_lr", derive_rng(seed, "gc-lr").uniform(-1, 1, (d, m)))
    experts = [init_expert(ExpertKind.SINGLE, d, r, derive_rng(seed, "gc-le", j)).register(
        store, f"e{j}") for j in range(m)]
    randomize(store, derive_rng(seed, "gc-lr-rand"))
    proj = _projection(v.shape, seed, "local")

    def local_loss(s):
        routing = route_local(v, w_lr, MICRO["k"])
        outs = [None if (x := dispatch(routing, j, v)) is None else expert_forward(e, x)
                for j, e in enumerate(experts)]
        return sum_(mul(combine_group(outs, routing), proj))

    record("router/local+combine", local_loss, store)

    layer, store = micro_layer(seed)
    pv, pa = _projection(v.shape, seed, "layer-v"), _projection(a.shape, seed, "layer-a")

    def layer_loss(s):
        vo, ao, _ = layer(v, a)
        return sum_(mul(vo, pv)) + sum_(mul(ao, pa))

    record("layer/hmmoe", layer_loss, store)
    return results


def invariant_suite(seed: int = 0) -> list[CheckResult]:
    tol = tolerance(SUM_TOL)
    rng = derive_rng(seed, "invariants")
    results = []

    z = rng.normal(0, 5, (64, 7))
    err = float(np.abs(softmax(Tensor(z)).data.sum(axis=-1) - 1).max())
    results.append(CheckResult("softmax sums to one", err <= tol, err, tol))

    layer, _ = micro_layer(seed, k=1)
    v, a = micro_inputs(seed)
    _, _, decisions = layer(v, a)
    gw = max(float(np.abs(d.group_weights.data.sum(-1) - 1).max()) for d in decisions)
    results.append(CheckResult("group weights categorical", gw <= tol, gw, tol))
    ep = max(float(np.abs(g.probs.data.sum(-1) - 1).max()) for d in decisions for g in d.groups)
    results.append(CheckResult("expert probs categorical", ep <= tol, ep, tol))
    exact_k = all((g.mask.sum(-1) == 1).all() for d in decisions for g in d.groups)
    results.append(CheckResult("exactly k selected", exact_k, 0.0, 0.0))

    logits = np.round(rng.normal(0, 2, (16, 5)) * 64) / 64
    base = local_routing_from_logits(Tensor(logits), 2)
    shifted = local_routing_from_logits(Tensor(logits + 3.0), 2)
    diff = float(np.abs(base.probs.data - shifted.probs.data).max())
    same = bool((base.selected == shifted.selected).all())
    results.append(CheckResult("logit shift invariance", diff == 0.0 and same, diff, 0.0))

    results.append(_unselected_zero_grad(seed))

    # identity needs k == M so each group's combine weights sum to one
    cfg = HmmoeConfig(8, 2, ((ExpertKind.SINGLE, 2), (ExpertKind.SINGLE, 2)), k=2)
    ident = HmmoeLayer(cfg, ParameterStore(), "id", rng=derive_rng(seed, "identity"))
    vo, ao, _ = ident(v, a)
    e = max(float(np.abs(vo.data - v.data).max()), float(np.abs(ao.data - a.data).max()))
    results.append(CheckResult("single-modal layer is identity at init", e <= max(tol, 1e-15),
                               e, max(tol, 1e-15)))

    results.append(_freeze_contract(seed, steps=5))
    return results


def _unselected_zero_grad(seed: int) -> CheckResult:
    layer, store = micro_layer(seed, k=1)
    v, a = micro_inputs(seed)
    with Tape() as tape:
        vo, ao, decs = layer(v, a)
        loss = sum_(vo) + sum_(ao)
    tape.backward(loss, store.trainable())
    ok = True
    for dec in decs:
        for gi, routing in enumerate(dec.groups):
            for j, p in enumerate(layer.experts[dec.modality][gi]):
                if routing.rows_for(j).size == 0:
                    ok &= all(not np.any(t.grad) for t in p.tensors().values())
    return CheckResult("unselected experts get zero gradient", bool(ok), 0.0, 0.0)


def _freeze_contract(seed: int, steps: int) -> CheckResult:
    model = build_model(1, 8, HmmoeConfig(8, 2, k=1), 2, seed=seed)
    before = model.store.digest()
    rng = derive_rng(seed, "freeze")
    opt = Adam(lr=1e-2)
    for _ in range(steps):
        train_step(model, rng.standard_normal((4, 3, 8)), rng.standard_normal((4, 2, 8)),
                   rng.integers(0, 2, 4), opt)
    ok = model.store.digest() == before
    return CheckResult("frozen digest unchanged", ok, 0.0, 0.0, f"{steps} steps")


def ledger_suite(seed: int = 0) -> list[CheckResult]:
    results = []
    configs = [
        HmmoeConfig(8, 2),
        HmmoeConfig(16, 4, ((ExpertKind.SINGLE, 3),), k=2),
        HmmoeConfig(32, 8, ((ExpertKind.CROSS, 1), (ExpertKind.CHANNEL, 4)), k=1),
        HmmoeConfig(12, 3, share_across_modalities=True),
    ]
    for cfg in configs:
        store = ParameterStore()
        HmmoeLayer(cfg, store, "x", rng=derive_rng(seed, "ledger"))
        n = count_parameters(store).trainable
        closed = hmmoe_param_count(cfg)
        results.append(CheckResult(f"layer {cfg.describe()}", n == closed, float(n - closed), 0.0,
                                   f"enumerated {n}, closed form {closed}"))
    for layers, dim, cfg in [(2, 32, HmmoeConfig(32, 8)), (1, 8, None)]:
        model = build_model(layers, dim, cfg, 2, seed=seed)
        led = count_parameters(model)
        closed = model_param_count(layers, dim, 2, cfg)
        ok = (led.trainable, led.frozen) == (closed["trainable"], closed["frozen"])
        results.append(CheckResult(f"model L={layers} D={dim}", ok, led.fraction, 0.0,
                                   f"trainable {led.trainable}, frozen {led.frozen}"))
    return results


SUITES: dict[str, Callable[[int], list[CheckResult]]] = {
    "gradcheck": gradcheck_suite,
    "invariants": invariant_suite,
    "ledger": ledger_suite,
}


def run_suites(scope: str, seed: int = 0) -> list[tuple[str, CheckResult]]:
    names = list(SUITES) if scope == "all" else [scope]
    return [(name, r) for name in names for r in SUITES[name](seed)]
