import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hmmoe.errors import ConfigurationError, ContractError, DimensionError
from hmmoe.gradcheck import finite_difference_check
from hmmoe.params import ParameterStore
from hmmoe.routing import (
    combine_group,
    dispatch,
    local_routing_from_logits,
    pooled_features,
    route_global,
    route_local,
    top_k_indices,
)
from hmmoe.tensor import Tensor, index, mul, scale, sum_


def test_global_router_hand_example():
    x = np.array([[[1.0, 0.0], [1.0, 2.0]]])  # mean = [1, 1]
    w = np.array([[0.0, 1.0], [0.0, 1.0]])    # logits [0, 2]
    got = route_global(x, w).data
    e = np.exp([0.0, 2.0])
    np.testing.assert_allclose(got, [e / e.sum()], atol=1e-15)


def test_global_router_matches_oracle(rng):
    x, w = rng.standard_normal((4, 5, 6)), rng.standard_normal((6, 3))
    got = route_global(x, w).data
    for b in range(4):
        np.testing.assert_allclose(got[b], oracles.router_probs(x[b], w), atol=1e-12)
    np.testing.assert_allclose(got.sum(-1), 1.0, rtol=0, atol=1e-12)


def test_pooled_features_rejects_wrong_rank():
    with pytest.raises(DimensionError):
        pooled_features(np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        route_global(np.zeros((1, 2, 4)), np.zeros((3, 2)))


def _subset_oracle(p, k):
    """Best k-subset by exhaustive enumeration, ties to the lexicographically smallest."""
    best = None
    for subset in itertools.combinations(range(len(p)), k):
        key = (-sum(p[i] for i in subset), subset)
        if best is None or key < best[0]:
            best = (key, subset)
    return set(best[1])


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.data())
def test_top_k_matches_subset_enumeration(m, data):
    k = data.draw(st.integers(1, m))
    # values on a coarse grid so ties actually occur
    p = np.array([data.draw(st.integers(0, 3)) for _ in range(m)], dtype=float)[None]
    got = top_k_indices(p, k)[0]
    assert set(got.tolist()) == _subset_oracle(p[0], k)
    assert got.tolist() == oracles.top_k(list(p[0]), k)


def test_top_k_tie_breaks_to_lower_index():
    assert top_k_indices(np.array([[0.25, 0.25, 0.25, 0.25]]), 2).tolist() == [[0, 1]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_local_routing_selects_exactly_k(seed, m):
    r = np.random.default_rng(seed)
    k = int(r.integers(1, m + 1))
    routing = local_routing_from_logits(Tensor(r.standard_normal((4, m))), k)
    assert np.all(routing.mask.sum(-1) == k)
    w = routing.combine_weights.data
    assert np.all(w >= 0) and np.all(w.sum(-1) <= 1 + 1e-12)
    assert np.array_equal(w, routing.probs.data * routing.mask)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-8, 8), min_size=2, max_size=6), st.integers(-20, 20))
def test_local_routing_invariant_to_logit_shift(ints, c):
    z = np.array(ints, dtype=float)[None] / 4.0
    a = local_routing_from_logits(Tensor(z), 1)
    b = local_routing_from_logits(Tensor(z + c), 1)
    assert np.array_equal(a.selected, b.selected)
    np.testing.assert_allclose(a.combine_weights.data, b.combine_weights.data, rtol=0, atol=1e-15)


def test_k_out_of_range_is_configuration_error(rng):
    for k in (0, 4):
        with pytest.raises(ConfigurationError) as e:
            route_local(rng.standard_normal((1, 2, 3)), rng.standard_normal((3, 3)), k)
        assert e.value.field == "hmmoe.k"


def test_dispatch_returns_selected_rows():
    routing = local_routing_from_logits(Tensor(np.array([[1.0, 0], [0, 1.0], [2.0, 0]])), 1)
    x = Tensor(np.arange(6.0).reshape(3, 2, 1))
    assert dispatch(routing, 0, x).data[:, 0, 0].tolist() == [0.0, 4.0]
    assert dispatch(routing, 1, x).data[:, 0, 0].tolist() == [2.0]
    all_rows = local_routing_from_logits(Tensor(np.zeros((3, 2))), 2)
    assert dispatch(all_rows, 1, x) is x
    none = local_routing_from_logits(Tensor(np.array([[1.0, 0]])), 1)
    assert dispatch(none, 1, x[0:1]) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_combine_group_is_masked_weighted_sum(seed):
    r = np.random.default_rng(seed)
    b, m, k = 5, 4, int(r.integers(1, 5))
    routing = local_routing_from_logits(Tensor(r.standard_normal((b, m))), k)
    full = [r.standard_normal((b, 2, 3)) for _ in range(m)]
    outs = [None if routing.rows_for(j).size == 0 else Tensor(full[j][routing.rows_for(j)])
            for j in range(m)]
    got = combine_group(outs, routing).data
    p = routing.probs.data
    for i in range(b):
        expected = sum(p[i, j] * full[j][i] for j in oracles.top_k(list(p[i]), k))
        np.testing.assert_allclose(got[i], expected, rtol=0, atol=1e-12)


def test_combine_group_contract_errors():
    routing = local_routing_from_logits(Tensor(np.array([[1.0, 0.0], [1.0, 0.0]])), 1)
    with pytest.raises(ContractError):
        combine_group([Tensor(np.zeros((2, 1)))], routing)
    with pytest.raises(ContractError):
        combine_group([Tensor(np.zeros((2, 1))), Tensor(np.zeros((1, 1)))], routing)
    with pytest.raises(ContractError):
        combine_group([Tensor(np.zeros((1, 1))), None], routing)


def test_router_gradients_match_finite_differences(rng):
    store = ParameterStore()
    wg = store.add("wg", rng.standard_normal((4, 3)))
    wl = store.add("wl", rng.standard_normal((4, 3)))
    x = Tensor(rng.standard_normal((3, 5, 4)))
    proj = Tensor(rng.standard_normal((3, 3)))
    expert_out = [Tensor(rng.standard_normal((3, 5, 4))) for _ in range(3)]

    def f(_):
        g = route_global(x, wg)
        routing = route_local(x, wl, 2)
        outs = [None if routing.rows_for(j).size == 0 else index(expert_out[j], routing.rows_for(j))
                for j in range(3)]
        return sum_(mul(g, proj)) + scale(sum_(combine_group(outs, routing)), 0.1)

    rep = finite_difference_check(f, store)
    assert rep.max_rel_error < 1e-4
