"""End-to-end build: single-objective training, extraction, merging, routers, sweeps.

Every stage is a pure function of the RunConfig (and earlier stages), so the
CLI commands and the test suite share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from hoe.adapters import (
    LoraExpert,
    ObjectiveVector,
    calibrate_rescale,
    merge,
    objective_vector,
    task_svd,
    to_dense,
)
from hoe.config import RunConfig
from hoe.env import TokenTradeEnv, make_env, oracle_best, within_oracle
from hoe.errors import GateFailed, IncompatibleModels
from hoe.numkernel import RngStream
from hoe.pareto import (
    LogitsFn,
    ParetoPoint,
    dense_policy,
    evaluate,
    hoe_policy,
    mod_policy,
    rs_policy,
    sweep,
)
from hoe.policy import PolicyNetwork, forward, init_policy
from hoe.router import HoeModel, RouterExpert, assemble
from hoe.scalarize import OmdState, linear_scalarize, tch_value
from hoe.simplex import PreferenceLike, PreferenceVector, eval_set_3obj, grid, validate
from hoe.trainer import (
    TrainLog,
    greedy_returns,
    scalar_reward_config,
    train_dense,
    train_router,
    train_single_objective,
)


def build_env(cfg: RunConfig) -> TokenTradeEnv:
    return make_env(cfg.env)


def build_base(cfg: RunConfig, env: TokenTradeEnv) -> PolicyNetwork:
    attribute = cfg.policy.head == "attribute"
    return init_policy(
        env.obs_dim,
        env.vocab_size,
        env.n_objectives,
        RngStream(cfg.seed, 1),
        hidden=cfg.policy.hidden,
        unembed=env.token_features() if attribute else None,
        output_scale=cfg.policy.output_scale,
        out_activation="softplus" if attribute else "identity",
    )


def one_hot(n: int, i: int) -> PreferenceVector:
    w = [0.0] * n
    w[i] = 1.0
    return PreferenceVector(tuple(w))


# --------------------------------------------------------------------------
# stage 1: single-objective policies


@dataclass
class GateRow:
    objective: int
    greedy_return: float
    oracle: float
    passed: bool

    def to_dict(self) -> dict:
        return {"objective": self.objective, "greedy_return": self.greedy_return, "oracle": self.oracle, "passed": self.passed}


def train_singles(cfg: RunConfig, env: TokenTradeEnv, base: PolicyNetwork) -> tuple[list[PolicyNetwork], list[GateRow]]:
    nets, gate = [], []
    for i in range(env.n_objectives):
        net, _ = train_single_objective(base, i, env, cfg.singles)
        r = evaluate(env, lambda obs: forward(net, obs).logits, 1)[i]
        oracle = oracle_best(env, one_hot(env.n_objectives, i), "linear")
        gate.append(GateRow(i, float(r), oracle, within_oracle(r, oracle, cfg.oracle_fraction)))
        nets.append(net)
    return nets, gate


def check_gate(gate: Sequence[GateRow]) -> None:
    failed = [g for g in gate if not g.passed]
    if failed:
        msg = ", ".join(f"objective {g.objective}: {g.greedy_return:.4g} vs oracle {g.oracle:.4g}" for g in failed)
        raise GateFailed(f"single-objective policies below the oracle gate ({msg})")


def objective_vectors(base: PolicyNetwork, nets: Sequence[PolicyNetwork]) -> list[ObjectiveVector]:
    return [objective_vector(n.weights(), base.weights()) for n in nets]


def reference_point(cfg: RunConfig, env: TokenTradeEnv, nets: Sequence[PolicyNetwork]) -> np.ndarray:
    """z*: each single-objective policy's best sampled episode return on its objective, plus a margin."""
    out = []
    for i, net in enumerate(nets):
        batch = env.rollout(lambda obs: (forward(net, obs).logits, None), cfg.omd.z_star_episodes, RngStream(cfg.seed, 5000 + i))
        out.append(batch.episode_returns()[:, i].max())
    return np.asarray(out) + cfg.omd.z_margin


# --------------------------------------------------------------------------
# stage 2: LoRA experts


def greedy_score(env: TokenTradeEnv, base: PolicyNetwork, pref: PreferenceLike):
    """Calibration score: greedy linear-scalarised return of base + expert delta."""
    weights = base.weights()

    def score(expert: LoraExpert) -> float:
        d = to_dense(expert).deltas
        net = base.bare().with_weights({m: weights[m].astype(np.float64) + d[m] for m in weights})
        return float(linear_scalarize(evaluate(env, lambda obs: forward(net, obs).logits, 1), pref))

    return score


def compress(
    cfg: RunConfig, env: TokenTradeEnv, base: PolicyNetwork, tau: ObjectiveVector, pref: PreferenceLike, expert_id: str
) -> tuple[LoraExpert, dict[float, float]]:
    ex = cfg.extraction
    expert = task_svd(tau, ex.rank, 1.0, pref, keep_fraction=ex.keep_fraction, expert_id=expert_id)
    return calibrate_rescale(expert, greedy_score(env, base, pref), ex.rescale_candidates)


def extract_singles(
    cfg: RunConfig, env: TokenTradeEnv, base: PolicyNetwork, nets: Sequence[PolicyNetwork]
) -> tuple[list[LoraExpert], dict]:
    experts, report = [], {}
    for i, tau in enumerate(objective_vectors(base, nets)):
        e, scores = compress(cfg, env, base, tau, one_hot(env.n_objectives, i), f"single{i}")
        experts.append(e)
        report[e.id] = {"rescale": e.rescale, "scores": {repr(k): v for k, v in scores.items()}}
    return experts, report


def merge_experts(
    cfg: RunConfig, env: TokenTradeEnv, base: PolicyNetwork, nets: Sequence[PolicyNetwork], prefs: Sequence[PreferenceLike] | None = None
) -> tuple[list[LoraExpert], dict]:
    taus = objective_vectors(base, nets)
    prefs = cfg.plan.merged_prefs() if prefs is None else [validate(p) for p in prefs]
    experts, report = [], {}
    for j, p in enumerate(prefs):
        tau = merge(taus, p, cfg.extraction.merge_keep_fraction)
        e, scores = compress(cfg, env, base, tau, p, f"merged{j}")
        experts.append(e)
        report[e.id] = {"preference": list(p.weights), "rescale": e.rescale, "scores": {repr(k): v for k, v in scores.items()}}
    return experts, report


# --------------------------------------------------------------------------
# stage 3: router experts


def train_routers(
    cfg: RunConfig,
    env: TokenTradeEnv,
    model: HoeModel,
    z_star,
    prefs: Sequence[PreferenceLike] | None = None,
) -> tuple[list[RouterExpert], list[TrainLog]]:
    """Train each planned router against the frozen LoRA registry (checksum-verified)."""
    prefs = cfg.plan.router_prefs() if prefs is None else [validate(p) for p in prefs]
    before = [e.checksum() for e in model.lora_registry]
    routers, logs = [], []
    for k, p in enumerate(prefs):
        omd = OmdState.init(
            p,
            z_star,
            alpha=cfg.omd.alpha,
            smoothing_mu=cfg.omd.smoothing_mu,
            schedule=cfg.omd.schedule,
            lambda_in_step=cfg.omd.lambda_in_step,
        )
        r, log = train_router(model, p, env, cfg.routers, omd, router_id=f"router{k}", scalarization=cfg.scalarization)
        routers.append(r)
        logs.append(log)
    if [e.checksum() for e in model.lora_registry] != before:
        raise IncompatibleModels("LoRA experts changed during router training")
    return routers, logs


def regret_trace(
    cfg: RunConfig, env: TokenTradeEnv, model: HoeModel, z_star, lam: PreferenceLike, iterations: int
) -> np.ndarray:
    """Per-iteration TCH regret of the greedy-decoded router policy during OMD-STCH training.

    regret_t = oracle_best(tch) - tch(greedy returns after update t); the
    oracle is the best value any stationary policy reaches, so regret_t >= 0.
    """
    pref = validate(lam)
    oracle = oracle_best(env, pref, "tch", z_star)
    out: list[float] = []

    def monitor(it, logits_fn):
        out.append(oracle - float(tch_value(greedy_returns(env, logits_fn), pref, z_star)))

    omd = OmdState.init(pref, z_star, alpha=cfg.omd.alpha, smoothing_mu=cfg.omd.smoothing_mu,
                        schedule=cfg.omd.schedule, lambda_in_step=cfg.omd.lambda_in_step)
    ppo = replace(cfg.routers, total_iterations=iterations)
    train_router(model, pref, env, ppo, omd, scalarization="stch", monitor=monitor)
    return np.asarray(out)


def running_average(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.cumsum(x) / np.arange(1, len(x) + 1)


def moving_average(x, window: int) -> np.ndarray:
    return np.convolve(np.asarray(x, dtype=np.float64), np.ones(window) / window, mode="valid")


# --------------------------------------------------------------------------
# everything at once


@dataclass
class Build:
    cfg: RunConfig
    env: TokenTradeEnv
    base: PolicyNetwork
    nets: list[PolicyNetwork]
    gate: list[GateRow]
    singles: list[LoraExpert]
    merged: list[LoraExpert]
    routers: list[RouterExpert]
    logs: list[TrainLog]
    z_star: np.ndarray
    reports: dict = field(default_factory=dict)

    @property
    def model(self) -> HoeModel:
        return assemble(self.base, self.singles + self.merged, self.routers)

    @property
    def taus(self) -> list[ObjectiveVector]:
        return objective_vectors(self.base, self.nets)


def build_all(cfg: RunConfig, gate: bool = True, with_routers: bool = True) -> Build:
    env = build_env(cfg)
    base = build_base(cfg, env)
    nets, rows = train_singles(cfg, env, base)
    if gate:
        check_gate(rows)
    singles, rep_s = extract_singles(cfg, env, base, nets)
    merged, rep_m = merge_experts(cfg, env, base, nets)
    z = reference_point(cfg, env, nets)
    routers, logs = [], []
    if with_routers:
        routers, logs = train_routers(cfg, env, assemble(base, singles + merged), z)
    return Build(cfg, env, base, nets, rows, singles, merged, routers, logs, z, {"extract": rep_s, "merge": rep_m})


# --------------------------------------------------------------------------
# sweeps


def eval_grid(cfg: RunConfig) -> list[PreferenceVector]:
    if cfg.objectives == 3:
        return eval_set_3obj()
    return grid(cfg.objectives, cfg.eval.grid_step)


def morlhf_oracle_net(cfg: RunConfig, env: TokenTradeEnv, base: PolicyNetwork, pref: PreferenceLike) -> PolicyNetwork:
    return train_dense(base, pref, env, scalar_reward_config(cfg.morlhf), stream=1500)[0]


def morlhf_policy(cfg: RunConfig, env: TokenTradeEnv, base: PolicyNetwork) -> LogitsFn:
    """Per-preference dedicated dense policies, trained lazily with linear PPO."""
    cache: dict[tuple, PolicyNetwork] = {}

    def fn(pref, obs):
        if pref.weights not in cache:
            cache[pref.weights] = morlhf_oracle_net(cfg, env, base, pref)
        return forward(cache[pref.weights], obs).logits

    return fn


def method_policies(
    cfg: RunConfig, env: TokenTradeEnv, model: HoeModel | None, base: PolicyNetwork, nets: Sequence[PolicyNetwork], methods: Sequence[str]
) -> dict[str, LogitsFn]:
    out: dict[str, LogitsFn] = {}
    for m in methods:
        if m == "hoe":
            out[m] = hoe_policy(model)
        elif m == "rs":
            out[m] = rs_policy(base, objective_vectors(base, nets))
        elif m == "mod":
            out[m] = mod_policy(list(nets))
        elif m == "morlhf":
            out[m] = morlhf_policy(cfg, env, base)
        elif m == "base":
            out[m] = dense_policy(base)
        else:
            raise IncompatibleModels(f"unknown method {m!r}")
    return out


def paired_sweep(
    cfg: RunConfig, env: TokenTradeEnv, policies: dict[str, LogitsFn], prefs: Sequence[PreferenceLike] | None = None
) -> list[ParetoPoint]:
    """Every method on the same grid with the same seed and episode budget."""
    prefs = eval_grid(cfg) if prefs is None else prefs
    points = []
    for name, fn in policies.items():
        points += sweep(fn, prefs, env, cfg.eval.episodes, cfg.seed, name)
    return points
