from __future__ import annotations

import numpy as np
import pytest

from hoe.config import RunConfig
from hoe.env import make_env, EnvSpec
from hoe.numkernel import RngStream
from hoe.policy import init_policy
from hoe import pipeline


@pytest.fixture
def canonical_env():
    return make_env(EnvSpec())


@pytest.fixture
def nonconvex_env():
    return make_env(EnvSpec(frontier_shape="nonconvex"))


@pytest.fixture
def small_net():
    """2-layer, 8-unit toy network with an identity-activated logit head."""
    return init_policy(4, 3, 2, RngStream(11, 0), hidden=(8, 8), output_scale=1.0)


@pytest.fixture(scope="session")
def canonical_build():
    """Seed-0 default pipeline on the canonical env (singles, experts, one router)."""
    return pipeline.build_all(RunConfig())


def random_expert(base, seed: int, pref, expert_id: str, rank: int = 2, scale: float = 0.5):
    from hoe.adapters import ObjectiveVector, task_svd

    rng = RngStream(seed, 0)
    tau = ObjectiveVector({l.module_path: (scale * rng.normal(l.w_pre.shape)).astype(np.float32) for l in base.layers})
    return task_svd(tau, rank, 1.0, pref, expert_id=expert_id)


@pytest.fixture
def toy_registry(small_net):
    """Base toy net plus single-objective and centroid LoRA experts."""
    experts = [
        random_expert(small_net, 1, [1.0, 0.0], "single0"),
        random_expert(small_net, 2, [0.0, 1.0], "single1"),
        random_expert(small_net, 3, [0.5, 0.5], "merged0"),
    ]
    return small_net, experts


def ppo_batch(learner, env, cfg, seed: int = 0, episodes: int = 8):
    """Rollout + per-objective GAE + a fixed mixed advantage, as PpoSamples.

    old log-probs are jittered so some ratios fall outside the clip range.
    """
    from hoe.policy import gae_per_objective
    from hoe.scalarize import mixed_advantage
    from hoe.trainer import PpoSamples

    rng = RngStream(seed, 99)

    def policy_fn(obs):
        c = learner.forward(obs)
        return c.logits, c.values

    batch = gae_per_objective(env.rollout(policy_fn, episodes, rng), cfg.gae_lambda, cfg.gamma)
    adv = mixed_advantage(batch.advantages, np.array([0.3, 0.7]))
    old = batch.logprobs.reshape(-1) + rng.normal(batch.logprobs.size, scale=0.3)
    return PpoSamples(
        obs=env.observe(batch.states.reshape(-1)),
        actions=batch.actions.reshape(-1),
        old_logprobs=old,
        advantages=adv.reshape(-1),
        returns=batch.returns.reshape(-1, env.n_objectives),
    )


def gradient_error(learner, samples, cfg, key: str, h: float = 1e-4, max_entries: int = 40) -> float:
    """Relative error ||analytic - central FD|| / max(||analytic||, ||FD||) over sampled entries of one tensor.

    The value heads read the trunk with the gradient stopped, so trunk and
    router entries are checked against the loss without its value term.
    """
    from dataclasses import replace

    from hoe.trainer import ppo_loss_and_grads

    if not key.startswith("value_"):
        cfg = replace(cfg, value_coef=0.0)

    _, grads = ppo_loss_and_grads(learner, samples, cfg)
    p = learner.params[key]
    flat_idx = np.arange(p.size)
    if p.size > max_entries:
        flat_idx = np.random.default_rng(0).choice(p.size, max_entries, replace=False)
    analytic, numeric = [], []
    for f in flat_idx:
        idx = np.unravel_index(f, p.shape)
        orig = p[idx]
        p[idx] = orig + h
        up = ppo_loss_and_grads(learner, samples, cfg)[0]
        p[idx] = orig - h
        down = ppo_loss_and_grads(learner, samples, cfg)[0]
        p[idx] = orig
        analytic.append(np.asarray(grads[key])[idx])
        numeric.append((up - down) / (2 * h))
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


# criterion number -> (passed, detail, seconds); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail, secs = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  ({secs:.1f}s)  {detail}")
