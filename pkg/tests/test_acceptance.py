"""Acceptance criteria, each at its stated tolerance.

Every test appends one PASS/FAIL line, printed in the terminal summary.
Criteria 6 and 7 train 15 models of 2000 steps and take several minutes.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from hmmoe.backbone import Adam, build_model, model_param_count, search_budget, train_step
from hmmoe.config import RunConfig
from hmmoe.experts import ExpertKind, channel_gate, expert_forward, init_expert
from hmmoe.harness import (
    SyntheticTaskSpec,
    TrainingSpec,
    ablation_report_files,
    generate_task,
    run_ablation,
    train_run,
)
from hmmoe.layer import HmmoeConfig, check_utilization, count_parameters
from hmmoe.params import derive_rng
from hmmoe.routing import combine_group, local_routing_from_logits, route_global, top_k_indices
from hmmoe.tensor import Tape, Tensor, layer_norm, matmul, mean_pool, relu, sigmoid, softmax, sum_
from hmmoe.verify import gradcheck_suite, invariant_suite, micro_inputs, micro_layer

from conftest import ACCEPTANCE_LINES

DESK = dict(layers=2, dim=32, classes=2)
DESK_HMMOE = HmmoeConfig(32, 8)


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


# -- 1 -----------------------------------------------------------------------------


def test_criterion_1_gradient_checks():
    t0 = time.perf_counter()
    results = gradcheck_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.value for r in results)
    names = sorted(r.name for r in results)
    assert names == ["expert/channel", "expert/cross", "expert/single", "layer/hmmoe",
                     "router/global", "router/local+combine"]
    ok = worst < 1e-4 and elapsed < 120
    record(1, ok, f"max rel error {worst:.2e} over {len(results)} checks (< 1e-4), "
                  f"{elapsed:.1f}s (< 120s)")
    assert ok


# -- 2 -----------------------------------------------------------------------------

N_INSTANCES = 100


def _micro(seed):
    r = np.random.default_rng(seed)
    return r, r.standard_normal((2, 3, 8)), r.standard_normal((2, 4, 8))


def _expert(kind, r):
    p = init_expert(kind, 8, 2, r)
    for t in p.tensors().values():
        t.data[...] = r.uniform(-0.5, 0.5, t.shape)
    return p


def _op_matmul(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((3, 8)), r.standard_normal((8, 5))
    return matmul(a, b).data, oracles.matmul(a, b)


def _op_softmax(seed):
    z = np.random.default_rng(seed).normal(0, 3, (4, 6))
    return softmax(z).data, np.array([oracles.softmax(list(row)) for row in z])


def _op_relu(seed):
    x = np.random.default_rng(seed).standard_normal((4, 6))
    return relu(x).data, np.array([oracles.relu(row) for row in x])


def _op_sigmoid(seed):
    x = np.random.default_rng(seed).normal(0, 4, (4, 6))
    return sigmoid(x).data, np.array([[oracles.sigmoid(v) for v in row] for row in x])


def _op_mean_pool(seed):
    _, v, _ = _micro(seed)
    return mean_pool(v).data[:, 0], np.stack([oracles.mean_rows(x) for x in v])


def _op_layer_norm(seed):
    r = np.random.default_rng(seed)
    x, g, b = r.standard_normal((5, 8)), r.standard_normal(8), r.standard_normal(8)
    return layer_norm(x, g, b).data, np.stack([oracles.layer_norm_row(row, g, b) for row in x])


def _expert_op(kind):
    def op(seed):
        r, v, a = _micro(seed)
        p = _expert(kind, r)
        got = expert_forward(p, v, a).data
        return got, np.stack([oracles.expert(p, v[b], a[b]) for b in range(2)])
    return op


def _op_channel_gate(seed):
    _, v, a = _micro(seed)
    return channel_gate(v, a).data[:, 0], np.stack([oracles.channel_gate(v[b], a[b]) for b in range(2)])


def _op_global_router(seed):
    r, v, _ = _micro(seed)
    w = r.standard_normal((8, 3))
    return route_global(v, w).data, np.stack([oracles.router_probs(v[b], w) for b in range(2)])


def _op_top_k(seed):
    r = np.random.default_rng(seed)
    p = r.integers(0, 4, (6, 5)).astype(float)
    k = int(r.integers(1, 6))
    return top_k_indices(p, k).astype(float), np.array([oracles.top_k(list(row), k) for row in p],
                                                       dtype=float)


def _op_combine(seed):
    r = np.random.default_rng(seed)
    routing = local_routing_from_logits(Tensor(r.standard_normal((4, 3))), 2)
    full = [r.standard_normal((4, 3, 8)) for _ in range(3)]
    outs = [None if routing.rows_for(j).size == 0 else Tensor(full[j][routing.rows_for(j)])
            for j in range(3)]
    p = routing.probs.data
    want = np.stack([sum(p[i, j] * full[j][i] for j in oracles.top_k(list(p[i]), 2))
                     for i in range(4)])
    return combine_group(outs, routing).data, want


def _op_layer(seed):
    layer, _ = micro_layer(seed, k=1 + seed % 2)
    v, a = micro_inputs(seed)
    vo, ao, _ = layer(v, a)
    ov, oa = oracles.hmmoe_layer(v.data, a.data, layer)
    return np.concatenate([vo.data, ao.data], 1), np.concatenate([ov, oa], 1)


def _op_encoder_block(seed):
    model = build_model(1, 8, None, 2, seed=seed)
    blk = model.blocks[0]["v"]
    _, v, _ = _micro(seed)
    return blk(Tensor(v)).data, np.stack([oracles.encoder_block(v[b], blk) for b in range(2)])


ORACLE_OPS = {
    "matmul": _op_matmul,
    "softmax": _op_softmax,
    "relu": _op_relu,
    "sigmoid": _op_sigmoid,
    "mean_pool": _op_mean_pool,
    "layer_norm": _op_layer_norm,
    "expert/single": _expert_op(ExpertKind.SINGLE),
    "expert/cross": _expert_op(ExpertKind.CROSS),
    "expert/channel": _expert_op(ExpertKind.CHANNEL),
    "channel_gate": _op_channel_gate,
    "router/global": _op_global_router,
    "router/top_k": _op_top_k,
    "combine_group": _op_combine,
    "hmmoe_layer": _op_layer,
    "encoder_block": _op_encoder_block,
}


def test_criterion_2_oracle_equivalence():
    worst = {}
    for name, op in ORACLE_OPS.items():
        err = 0.0
        for seed in range(N_INSTANCES):
            got, want = op(seed)
            assert got.shape == want.shape, name
            err = max(err, float(np.abs(got - want).max()))
        worst[name] = err
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= 1e-12
    record(2, ok, f"{len(ORACLE_OPS)} ops x {N_INSTANCES} instances, "
                  f"max abs error {err:.2e} ({name}) (<= 1e-12)")
    assert ok, worst


# -- 3 -----------------------------------------------------------------------------


def test_criterion_3_routing_invariants():
    failures = [r.name for r in invariant_suite(seed=0) if not r.passed]
    sum_err, exact_k, shift_ok = 0.0, True, True
    for seed in range(50):
        k = 1 + seed % 2
        layer, store = micro_layer(seed, k=k)
        v, a = micro_inputs(seed)
        with Tape() as tape:
            vo, ao, decs = layer(v, a)
            loss = sum_(vo) + sum_(ao)
        tape.backward(loss, store.trainable())
        for d in decs:
            sum_err = max(sum_err, float(np.abs(d.group_weights.data.sum(-1) - 1).max()))
            for gi, g in enumerate(d.groups):
                sum_err = max(sum_err, float(np.abs(g.probs.data.sum(-1) - 1).max()))
                exact_k &= bool((g.mask.sum(-1) == k).all())
                for j, p in enumerate(layer.experts[d.modality][gi]):
                    if g.rows_for(j).size == 0 and any(np.any(t.grad) for t in p.tensors().values()):
                        failures.append(f"seed {seed}: unselected expert {d.modality}/{gi}/{j} has gradient")
        # dyadic logits and integer shifts are represented exactly
        z = np.round(derive_rng(seed, "shift").normal(0, 2, (8, 4)) * 32) / 32
        base = local_routing_from_logits(Tensor(z), k)
        shifted = local_routing_from_logits(Tensor(z + float(seed - 25)), k)
        shift_ok &= bool(np.array_equal(base.probs.data, shifted.probs.data)
                         and np.array_equal(base.selected, shifted.selected))
    ok = not failures and sum_err <= 1e-12 and exact_k and shift_ok
    record(3, ok, f"sum error {sum_err:.1e} (<= 1e-12), exactly k: {exact_k}, "
                  f"shift invariance exact: {shift_ok}, other failures: {failures or 'none'}")
    assert ok


# -- 4 -----------------------------------------------------------------------------


def test_criterion_4_freeze_contract_and_transparency():
    task = SyntheticTaskSpec(n_train=256, n_test=10)
    train, _ = generate_task(task)
    model = build_model(**DESK, hmmoe=DESK_HMMOE, seed=0)
    before = model.store.digest()
    opt = Adam(lr=1e-2)
    rng = derive_rng(0, "acceptance-freeze")
    for _ in range(50):
        idx = rng.choice(len(train), 32, replace=False)
        train_step(model, train.v[idx], train.a[idx], train.y[idx], opt)
    frozen_ok = model.store.digest() == before

    # transparency needs adapters that start as the identity: single-modal
    # experts only, with every expert selected so the weights sum to one
    ident = HmmoeConfig(32, 8, groups=((ExpertKind.SINGLE, 2),) * 3, k=2)
    adapted = build_model(**DESK, hmmoe=ident, seed=0)
    plain = build_model(**DESK, hmmoe=None, seed=0)
    v, a = train.v[:64], train.a[:64]
    err = float(np.abs(adapted(v, a).data - plain(v, a).data).max())
    ok = frozen_ok and err <= 1e-12
    record(4, ok, f"backbone digest unchanged after 50 steps: {frozen_ok}; "
                  f"init logit gap {err:.1e} (<= 1e-12)")
    assert ok


# -- 5 -----------------------------------------------------------------------------


def _enumerated_matches(layers, dim, classes, cfg):
    led = count_parameters(build_model(layers, dim, cfg, classes))
    closed = model_param_count(layers, dim, classes, cfg)
    return led, (led.trainable, led.frozen) == (closed["trainable"], closed["frozen"])


def test_criterion_5a_desk_default_fraction():
    led, exact = _enumerated_matches(**DESK, cfg=DESK_HMMOE)
    ok = exact and 0.04 <= led.fraction <= 0.12
    record("5a", ok, f"desk default trainable fraction {led.fraction:.4f} "
                     f"({led.trainable}/{led.total}) in [0.04, 0.12]; closed form exact: {exact}")
    assert ok


def test_criterion_5b_scaled_configuration_in_band():
    hits = search_budget(layers=2, classes=2, low=0.05, high=0.08)
    assert hits
    dim, rank, predicted = hits[0]
    cfg = HmmoeConfig(dim, rank)
    led, exact = _enumerated_matches(2, dim, 2, cfg)
    ok = exact and 0.05 <= led.fraction <= 0.08 and led.fraction == predicted
    record("5b", ok, f"L=2 D={dim} r={rank} {cfg.describe()}: trainable fraction "
                     f"{led.fraction:.4f} in [0.05, 0.08]; closed form exact: {exact}")
    assert ok


# -- 6 and 7 -------------------------------------------------------------------------

FUSION_SEEDS = (0, 1, 2, 3, 4)
HETERO = HmmoeConfig(32, 8, groups=((ExpertKind.SINGLE, 1), (ExpertKind.CROSS, 1),
                                    (ExpertKind.CHANNEL, 1)), k=1)
HOMO = HmmoeConfig(32, 8, groups=((ExpertKind.SINGLE, 1),) * 3, k=1)
TASK = SyntheticTaskSpec(noise_std=0.1)
TRAINING = TrainingSpec(steps=2000, batch_size=32, lr=1e-3, seeds=FUSION_SEEDS)


@pytest.fixture(scope="module")
def fusion_runs():
    out, timing = {}, {}
    arms = {"1+1+1": (HETERO, None), "control": (HETERO, "a"), "3xSingle": (HOMO, None)}
    for name, (cfg, zero) in arms.items():
        t0 = time.perf_counter()
        training = replace(TRAINING, zero_modality=zero)
        out[name] = [train_run(DESK["layers"], DESK["dim"], DESK["classes"], cfg, TASK,
                               training, s).test_accuracy for s in FUSION_SEEDS]
        timing[name] = time.perf_counter() - t0
    return out, timing


@pytest.mark.slow
def test_criterion_6_fusion_separation(fusion_runs):
    accs, timing = fusion_runs
    runtime = timing["1+1+1"] + timing["control"]
    fused, control = accs["1+1+1"], accs["control"]
    ok = (min(fused) > 0.9 and all(0.45 <= c <= 0.55 for c in control) and runtime < 600)
    record(6, ok, f"fused accuracies {[round(x, 4) for x in fused]} (> 0.9), "
                  f"audio-zeroed control {[round(x, 4) for x in control]} (in [0.45, 0.55]), "
                  f"{runtime:.0f}s (< 600s)")
    assert ok


@pytest.mark.slow
def test_criterion_7_heterogeneous_beats_homogeneous(fusion_runs):
    accs, _ = fusion_runs
    het, hom = float(np.mean(accs["1+1+1"])), float(np.mean(accs["3xSingle"]))
    ok = het >= hom
    record(7, ok, f"mean accuracy 1+1+1 {het:.4f} >= 3xSingle {hom:.4f} over "
                  f"{len(FUSION_SEEDS)} seeds")
    assert ok


# -- 8 -------------------------------------------------------------------------------


def _sweep_config(dim, rank):
    return RunConfig.from_dict({
        "model": {"L": 2, "D": dim, "C": 2},
        "hmmoe": {"r": rank},
        "task": {"n_train": 256, "n_test": 128},
        "training": {"steps": 20, "batch_size": 32, "eval_every": 10, "seeds": [0, 1, 2]},
    })


def test_criterion_8_ablation_harness():
    problems = []
    sweeps = [("rank", _sweep_config(64, 8), [2, 4, 8, 16, 32]),
              ("expert_count", _sweep_config(32, 8), [1, 2, 3, 4])]
    for kind, cfg, grid in sweeps:
        first = run_ablation(kind, cfg, grid=grid)
        second = run_ablation(kind, cfg, grid=grid)
        files_a, files_b = ablation_report_files(first), ablation_report_files(second)
        if files_a != files_b:
            problems.append(f"{kind}: reports differ between identical runs")
        if len(first.arms) != len(grid) or any(len(a.accuracies) != 3 for a in first.arms):
            problems.append(f"{kind}: incomplete report")
        expected = {"report.json", "ledger.json"} | {
            f"arms/{a.name}/seed{s}/{f}" for a in first.arms for s in a.seeds
            for f in ("metrics.csv", "utilization.csv")}
        if set(files_a) != expected:
            problems.append(f"{kind}: missing files {sorted(expected - set(files_a))}")
        ledgers = [a.ledger["trainable"] for a in first.arms]
        if any(x >= y for x, y in zip(ledgers, ledgers[1:])):
            problems.append(f"{kind}: ledger not strictly increasing {ledgers}")
        for arm in first.arms:
            k = arm.config["k"]
            for run in arm.runs:
                if not run.utilization or not check_utilization(run.utilization, k, 1e-9):
                    problems.append(f"{kind}/{arm.name}/seed{run.seed}: utilization sum != k")
    ok = not problems
    record(8, ok, "rank {2..32} on D=64 and expert count {1..4}: deterministic, complete, "
                  f"strictly increasing ledgers, utilization sums to k; problems: {problems or 'none'}")
    assert ok
