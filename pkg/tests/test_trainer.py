from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import gradient_error, ppo_batch, random_expert
from hoe.errors import InvalidInput
from hoe.numkernel import RngStream
from hoe.policy import forward, init_policy
from hoe.router import assemble, init_router
from hoe.trainer import (
    DenseLearner,
    PpoConfig,
    RouterLearner,
    assigned_experts,
    ppo_loss_and_grads,
    train_dense,
    train_router,
)


def test_ppo_config_validation():
    with pytest.raises(InvalidInput):
        PpoConfig(clip_ratio=1.0)
    with pytest.raises(InvalidInput):
        PpoConfig(gamma=0.0)
    with pytest.raises(InvalidInput):
        PpoConfig(advantage_norm="none")


def _router_learner(small_net):
    experts = [random_expert(small_net, i + 1, p, f"e{i}") for i, p in enumerate([[1, 0], [0, 1], [0.5, 0.5]])]
    model = assemble(small_net, experts)
    r = init_router("r", [0.5, 0.5], ("e2", "e0"), small_net, RngStream(4, 0), scale=1.0)
    return model, RouterLearner(model, r)


@pytest.mark.parametrize("kl", [0.0, 0.3])
def test_dense_gradients_match_finite_differences(small_net, canonical_env, kl):
    cfg = PpoConfig(entropy_coef=0.01, kl_coef=kl)
    learner = DenseLearner(small_net)
    learner.params["value_w"] = RngStream(1, 0).normal(learner.params["value_w"].shape)
    s = ppo_batch(learner, canonical_env, cfg)
    if kl:
        from hoe.numkernel import log_softmax

        s = replace(s, ref_logprobs=log_softmax(forward(small_net, s.obs).logits) + 0.1)
    for key in ["w:layers.0", "w:layers.1", "w:layers.2", "value_w", "value_b"]:
        assert gradient_error(learner, s, cfg, key) < 1e-3, key


def test_router_gradients_match_finite_differences(small_net, canonical_env):
    cfg = PpoConfig(entropy_coef=0.01)
    _, learner = _router_learner(small_net)
    s = ppo_batch(learner, canonical_env, cfg)
    for key in [k for k in learner.params if k.startswith("router:")] + ["value_w", "value_b"]:
        assert gradient_error(learner, s, cfg, key) < 1e-3, key


def test_softplus_head_gradients(canonical_env):
    net = init_policy(4, 3, 2, RngStream(3), hidden=(8, 8), unembed=canonical_env.token_features(),
                      output_scale=1.0, out_activation="softplus")
    cfg = PpoConfig()
    learner = DenseLearner(net)
    s = ppo_batch(learner, canonical_env, cfg)
    for key in ["w:layers.0", "w:layers.2"]:
        assert gradient_error(learner, s, cfg, key) < 1e-3, key


def test_mixed_advantage_gradient_is_linear(small_net, canonical_env):
    cfg = PpoConfig(clip_ratio=0.99, value_coef=0.0)
    learner = DenseLearner(small_net)
    s = ppo_batch(learner, canonical_env, cfg)
    # ratio = 1 everywhere keeps the surrogate linear in the advantages
    cache = learner.forward(s.obs)
    from hoe.numkernel import log_softmax

    s = replace(s, old_logprobs=log_softmax(cache.logits)[np.arange(len(s.actions)), s.actions])
    a = RngStream(5, 0).normal((len(s.actions), 2))
    w = np.array([0.35, 0.65])
    _, mixed = ppo_loss_and_grads(learner, replace(s, advantages=a @ w), cfg)
    parts = [ppo_loss_and_grads(learner, replace(s, advantages=a[:, i]), cfg)[1] for i in range(2)]
    for k in mixed:
        if k.startswith("w:"):
            assert np.allclose(mixed[k], w[0] * parts[0][k] + w[1] * parts[1][k], atol=1e-6)


def test_zero_iteration_router_is_init(small_net, canonical_env):
    model, _ = _router_learner(small_net)
    r, log = train_router(model, [0.5, 0.5], canonical_env, PpoConfig(total_iterations=0), init_scale=0.5)
    init = init_router("router", [0.5, 0.5], assigned_experts(model, [0.5, 0.5]), model.base, RngStream(0, 2000), 0.5)
    assert log.rows == []
    for m in r.layers:
        assert np.array_equal(r.layers[m][0], init.layers[m][0]) and np.array_equal(r.layers[m][1], init.layers[m][1])


def test_router_training_freezes_experts_and_is_deterministic(small_net, canonical_env):
    model, _ = _router_learner(small_net)
    before = [e.checksum() for e in model.lora_registry]
    cfg = PpoConfig(total_iterations=3, batch_episodes=8)
    r1, log1 = train_router(model, [0.5, 0.5], canonical_env, cfg)
    r2, log2 = train_router(model, [0.5, 0.5], canonical_env, cfg)
    assert [e.checksum() for e in model.lora_registry] == before
    assert len(log1.rows) == 3
    assert [x.to_json() for x in log1.rows] == [x.to_json() for x in log2.rows]
    for m in r1.layers:
        assert np.array_equal(r1.layers[m][0], r2.layers[m][0])
    row = json.loads(log1.rows[0].to_json())
    assert set(row) == {"iteration", "mean_rewards", "w", "tch", "scalarized"}
    assert sum(row["w"]) == pytest.approx(1.0)


def test_linear_scalarization_keeps_weights(small_net, canonical_env):
    model, _ = _router_learner(small_net)
    _, log = train_router(model, [0.3, 0.7], canonical_env, PpoConfig(total_iterations=2, batch_episodes=8), scalarization="linear")
    assert all(np.allclose(r.w, [0.3, 0.7]) for r in log.rows)
    with pytest.raises(InvalidInput):
        train_router(model, [0.3, 0.7], canonical_env, PpoConfig(total_iterations=1), scalarization="pareto")


def test_monitor_sees_every_iteration(small_net, canonical_env):
    model, _ = _router_learner(small_net)
    seen = []
    train_router(model, [0.5, 0.5], canonical_env, PpoConfig(total_iterations=4, batch_episodes=4),
                 monitor=lambda it, fn: seen.append((it, fn(np.eye(4)).shape)))
    assert seen == [(i, (4, 3)) for i in range(4)]


def test_dense_training_is_deterministic(canonical_env):
    base = init_policy(4, 3, 2, RngStream(0), hidden=(8,), unembed=canonical_env.token_features(), out_activation="softplus")
    cfg = PpoConfig(total_iterations=2, batch_episodes=8)
    a, _ = train_dense(base, [1, 0], canonical_env, cfg)
    b, _ = train_dense(base, [1, 0], canonical_env, cfg)
    assert all(np.array_equal(x.w_pre, y.w_pre) for x, y in zip(a.layers, b.layers))


def test_single_objective_policies_pick_their_token(canonical_build):
    env = canonical_build.env
    for i, net in enumerate(canonical_build.nets):
        p = np.exp(forward(net, env.all_observations()).logits)
        p /= p.sum(axis=1, keepdims=True)
        assert np.all(p[:, i] > 0.95)
