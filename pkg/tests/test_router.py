from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_expert
from hoe.adapters import task_svd, to_dense
from hoe.errors import DuplicateExpert, IncompatibleModels, InvalidInput
from hoe.numkernel import RngStream, softmax
from hoe.policy import forward
from hoe.router import (
    RouterExpert,
    add_expert,
    assemble,
    hoe_logits,
    infer,
    init_router,
    mix_weights,
    route,
    router_scores,
)
from hoe.simplex import RoutingAssignment


def test_assemble_without_routers(toy_registry):
    base, experts = toy_registry
    m = assemble(base, experts)
    assert m.size == 3 and m.router_registry == []
    a = route(m, [0.8, 0.2])
    assert a.selected == (0, 2) and np.allclose(a.weights, [0.6, 0.4])


def test_assemble_rejects_bad_inputs(toy_registry):
    base, experts = toy_registry
    with pytest.raises(DuplicateExpert):
        assemble(base, [experts[0], experts[0]])
    r = init_router("r", [0.5, 0.5], ("missing", "single0"), base)
    with pytest.raises(IncompatibleModels):
        assemble(base, experts, [r])
    other = random_expert(base, 9, [0.5, 0.5, 0.0], "x")
    with pytest.raises(IncompatibleModels):
        assemble(base, experts + [other])


def test_route_onehot_and_router_vertex(toy_registry):
    base, experts = toy_registry
    r = init_router("router0", [0.5, 0.5], ("merged0", "single0"), base)
    m = assemble(base, experts, [r])
    a = route(m, [1.0, 0.0])
    assert a.omega_r[0] == pytest.approx(1.0)
    # the router shadows the LoRA expert at the same preference
    b = route(m, [0.5, 0.5])
    assert b.omega_r[3] == pytest.approx(1.0)


def test_route_merged_without_router(toy_registry):
    base, experts = toy_registry
    m = assemble(base, experts)
    assert np.allclose(route(m, [0.5, 0.5]).omega_r, [0, 0, 1])


def test_router_scores_examples(small_net):
    r = init_router("r", [0.5, 0.5], ("a", "b"), small_net)
    path = small_net.layers[0].module_path
    r.layers[path] = (np.zeros((2, 4), np.float32), np.array([1.0, 2.0], np.float32))
    assert np.allclose(router_scores(r, path, np.ones(4)), [1, 2])
    rng = RngStream(4, 0)
    w, x = rng.normal((2, 4)).astype(np.float32), rng.normal(4)
    r.layers[path] = (w, np.zeros(2, np.float32))
    oracle = [sum(float(w[i, j]) * x[j] for j in range(4)) for i in range(2)]
    assert np.allclose(router_scores(r, path, x), oracle, atol=1e-6)
    assert np.allclose(router_scores(r, path, np.zeros(4)), [0, 0])


def test_mix_weight_examples(toy_registry):
    base, experts = toy_registry
    r = init_router("router0", [0.5, 0.5], ("merged0", "single0"), base)
    m = assemble(base, experts, [r])
    path = base.layers[1].module_path
    x = np.ones(8)
    onehot = RoutingAssignment((1,), (1.0,), 4)
    assert np.allclose(mix_weights(m, onehot, path, x), [0, 1, 0])
    router_only = RoutingAssignment((3,), (1.0,), 4)
    assert np.allclose(mix_weights(m, router_only, path, x), [0.5, 0, 0.5])
    half = RoutingAssignment((0, 1), (0.5, 0.5), 4)
    assert np.allclose(mix_weights(m, half, path, x), [0.5, 0.5, 0])


@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_mix_weights_on_simplex(seed, a):
    from hoe.policy import init_policy

    base = init_policy(4, 3, 2, RngStream(seed, 1), hidden=(8, 8), output_scale=1.0)
    experts = [random_expert(base, seed + i, p, f"e{i}") for i, p in enumerate([[1, 0], [0, 1], [0.5, 0.5]])]
    r = init_router("r0", [0.25, 0.75], ("e2", "e1"), base, RngStream(seed, 2), scale=3.0)
    m = assemble(base, experts, [r])
    assign = route(m, [a, 1 - a])
    x = RngStream(seed, 3).normal((5, 8))
    om = mix_weights(m, assign, base.layers[1].module_path, x)
    assert np.all(om >= -1e-12) and np.allclose(om.sum(axis=1), 1.0, atol=1e-6)


def test_module_wise_routing(toy_registry):
    base, experts = toy_registry
    r = init_router("router0", [0.5, 0.5], ("merged0", "single0"), base, RngStream(5, 0), scale=3.0)
    m = assemble(base, experts, [r])
    assign = route(m, [0.5, 0.5])
    x = np.tanh(RngStream(5, 1).normal(8))
    o1 = mix_weights(m, assign, base.layers[1].module_path, x)
    o2 = mix_weights(m, assign, base.layers[2].module_path, x)
    assert not np.allclose(o1, o2)


def test_onehot_reduction_lossless(small_net):
    from hoe.adapters import ObjectiveVector

    rng = RngStream(8, 0)
    taus = [ObjectiveVector({l.module_path: rng.normal(l.w_pre.shape).astype(np.float32) for l in small_net.layers}) for _ in range(2)]
    experts = [task_svd(t, 8, 1.0, p, expert_id=f"s{i}") for i, (t, p) in enumerate(zip(taus, [[1, 0], [0, 1]]))]
    m = assemble(small_net, experts)
    obs = rng.normal((100, 4))
    for i, e in enumerate(experts):
        d = to_dense(e).deltas
        dense = small_net.with_weights({k: small_net.weights()[k].astype(np.float64) + d[k] for k in d})
        user = [1.0, 0.0] if i == 0 else [0.0, 1.0]
        assert np.allclose(hoe_logits(m, user, obs), forward(dense, obs).logits, atol=1e-5)
        p_h = softmax(hoe_logits(m, user, obs), axis=1)
        p_d = softmax(forward(dense, obs).logits, axis=1)
        assert 0.5 * np.abs(p_h - p_d).sum(axis=1).max() <= 1e-4


def test_infer_deterministic(toy_registry):
    base, experts = toy_registry
    m = assemble(base, experts)
    a = [infer(m, [0.3, 0.7], np.eye(4)[1], r) for r in [RngStream(2, 0)] for _ in range(20)]
    b = [infer(m, [0.3, 0.7], np.eye(4)[1], r) for r in [RngStream(2, 0)] for _ in range(20)]
    assert a == b
    with pytest.raises(InvalidInput):
        route(m, [0.2, 0.3, 0.5])


def test_add_expert_pads_and_preserves_routing(toy_registry):
    base, experts = toy_registry
    m = assemble(base, experts)
    before = route(m, [0.8, 0.2])
    new = random_expert(base, 9, [0.0, 0.0, 1.0], "third")
    m3 = add_expert(m, new)
    assert m3.lora_registry[2].preference.weights == (0.5, 0.5, 0.0)
    after = route(m3, [0.8, 0.2, 0.0])
    assert np.allclose(after.omega_r[:3], before.omega_r) and after.omega_r[3] == pytest.approx(0.0)
    with pytest.raises(DuplicateExpert):
        add_expert(m, experts[0])
    assert len(m.lora_registry) == 3  # original untouched
