"""PPO training loops: dense single-objective / linear policies and router experts.

Router experts are trained with every LoRA expert frozen; objective weights
come either from smooth-Tchebycheff online mirror descent or from the fixed
preference (linear scalarisation).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from hoe.env import TokenTradeEnv
from hoe.errors import InvalidInput, TrainingDiverged
from hoe.numkernel import DTYPE, RngStream, log_softmax
from hoe.policy import (
    ForwardCache,
    LayerRouting,
    PolicyNetwork,
    RouterLayer,
    TrajectoryBatch,
    backward,
    entropy_and_grad,
    forward,
    gae_per_objective,
)
from hoe.router import HoeModel, RouterExpert, init_router
from hoe.scalarize import OmdState, linear_scalarize, mixed_advantage, omd_update, tch_value
from hoe.simplex import PreferenceLike, nearest_experts, validate


@dataclass
class PpoConfig:
    clip_ratio: float = 0.2
    epochs_per_batch: int = 4
    batch_episodes: int = 64
    learning_rate: float = 0.01
    gae_lambda: float = 0.95
    gamma: float = 1.0
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    total_iterations: int = 60
    seed: int = 0
    # "per_objective": normalise each objective's advantages before mixing;
    # "mixed": mix raw advantages, then normalise the mixture
    advantage_norm: str = "per_objective"
    # optional KL(pi || pi_start) penalty; off by default
    kl_coef: float = 0.0

    def __post_init__(self):
        if not 0 < self.clip_ratio < 1:
            raise InvalidInput(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if not 0 < self.gamma <= 1:
            raise InvalidInput(f"gamma must be in (0, 1], got {self.gamma}")
        if self.advantage_norm not in ("per_objective", "mixed"):
            raise InvalidInput(f"unknown advantage_norm {self.advantage_norm!r}")


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            if k not in params:
                continue
            m = self.m.setdefault(k, np.zeros_like(params[k]))
            v = self.v.setdefault(k, np.zeros_like(params[k]))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------
# learners: parameter sets with a forward pass and exact gradients


class DenseLearner:
    """All plugin weight matrices plus the value heads (biases stay at the base values)."""

    def __init__(self, net: PolicyNetwork):
        self.net = net.bare()
        self.params = {"w:" + l.module_path: l.w_pre.astype(np.float64) for l in self.net.layers}
        self.params["value_w"] = net.value_w.astype(np.float64)
        self.params["value_b"] = net.value_b.astype(np.float64)

    def _weights(self):
        return {l.module_path: self.params["w:" + l.module_path] for l in self.net.layers}

    def forward(self, obs: np.ndarray) -> ForwardCache:
        return forward(self.net, obs, weights=self._weights(), heads=(self.params["value_w"], self.params["value_b"]))

    def grads(self, cache, g_logits, g_values) -> dict[str, np.ndarray]:
        return backward(self.net, cache, None, g_logits, g_values, weights=self._weights(), train_weights=True)

    def result(self) -> PolicyNetwork:
        net = self.net.with_weights({p: w.astype(DTYPE) for p, w in self._weights().items()})
        return net.with_heads(self.params["value_w"], self.params["value_b"])


class RouterLearner:
    """One router expert's per-module scorers plus fresh value heads; LoRA experts frozen."""

    def __init__(self, model: HoeModel, router: RouterExpert):
        self.model = model
        self.net = model.network
        self.router = router
        self.idx = np.array([model.lora_index(a) for a in router.assigned])
        self.params = {}
        for path, (w, b) in router.layers.items():
            self.params[f"router:{path}.w"] = w.astype(np.float64)
            self.params[f"router:{path}.b"] = b.astype(np.float64)
        self.params["value_w"] = np.zeros((model.n_objectives, self.net.value_w.shape[1]))
        self.params["value_b"] = np.zeros(model.n_objectives)

    def routing(self) -> list[LayerRouting]:
        n = len(self.model.lora_registry)
        out = []
        for layer in self.net.layers:
            p = layer.module_path
            rl = RouterLayer(self.params[f"router:{p}.w"], self.params[f"router:{p}.b"], self.idx, 1.0, key=f"router:{p}")
            out.append(LayerRouting(n_experts=n, routers=[rl]))
        return out

    def forward(self, obs: np.ndarray) -> ForwardCache:
        return forward(self.net, obs, self.routing(), heads=(self.params["value_w"], self.params["value_b"]))

    def grads(self, cache, g_logits, g_values) -> dict[str, np.ndarray]:
        return backward(self.net, cache, self.routing(), g_logits, g_values)

    def result(self) -> RouterExpert:
        layers = {
            p: (self.params[f"router:{p}.w"].astype(DTYPE), self.params[f"router:{p}.b"].astype(DTYPE))
            for p in self.router.layers
        }
        return RouterExpert(self.router.id, self.router.preference, self.router.assigned, layers)


# --------------------------------------------------------------------------
# PPO loss


@dataclass
class PpoSamples:
    obs: np.ndarray
    actions: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray  # samples x N
    ref_logprobs: np.ndarray | None = None  # samples x V, for the optional KL term


def ppo_loss_and_grads(learner, s: PpoSamples, cfg: PpoConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Clipped surrogate (minimised as its negative) + entropy + value loss, with exact gradients."""
    cache = learner.forward(s.obs)
    z = cache.logits
    B = z.shape[0]
    lp = log_softmax(z)
    p = np.exp(lp)
    rows = np.arange(B)
    logp = lp[rows, s.actions]
    ratio = np.exp(logp - s.old_logprobs)
    clipped = np.clip(ratio, 1 - cfg.clip_ratio, 1 + cfg.clip_ratio)
    surr = np.minimum(ratio * s.advantages, clipped * s.advantages)
    ent, g_ent = entropy_and_grad(z)
    v_err = cache.values - s.returns
    loss = -surr.mean() - cfg.entropy_coef * ent.mean() + cfg.value_coef * 0.5 * np.mean(np.sum(v_err**2, axis=1))

    # gradient flows only where the unclipped branch is the minimum
    active = ratio * s.advantages <= clipped * s.advantages
    g_logp = np.where(active, -ratio * s.advantages, 0.0) / B
    onehot = np.zeros_like(p)
    onehot[rows, s.actions] = 1.0
    g_logits = g_logp[:, None] * (onehot - p) - cfg.entropy_coef * g_ent / B
    if cfg.kl_coef > 0 and s.ref_logprobs is not None:
        kl = np.sum(p * (lp - s.ref_logprobs), axis=1)
        loss += cfg.kl_coef * kl.mean()
        g_logits += cfg.kl_coef * p * (lp - s.ref_logprobs - kl[:, None]) / B
    g_values = cfg.value_coef * v_err / B
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite PPO loss {loss}")
    return float(loss), learner.grads(cache, g_logits, g_values)


# --------------------------------------------------------------------------
# training loop


@dataclass
class LogRow:
    iteration: int
    mean_rewards: list[float]
    w: list[float]
    tch: float
    scalarized: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(r.to_json() + "\n")


WeightRule = Callable[[np.ndarray], np.ndarray]
Monitor = Callable[[int, Callable[[np.ndarray], np.ndarray]], None]


def _samples(env: TokenTradeEnv, batch: TrajectoryBatch, adv: np.ndarray, ref_lp=None) -> PpoSamples:
    obs = env.observe(batch.states.reshape(-1))
    return PpoSamples(
        obs=obs,
        actions=batch.actions.reshape(-1),
        old_logprobs=batch.logprobs.reshape(-1),
        advantages=adv.reshape(-1),
        returns=batch.returns.reshape(-1, batch.returns.shape[-1]),
        ref_logprobs=ref_lp,
    )


def run_ppo(
    learner,
    env: TokenTradeEnv,
    cfg: PpoConfig,
    lam: PreferenceLike,
    weight_rule: WeightRule,
    z_ref,
    rng: RngStream,
    monitor: Monitor | None = None,
) -> TrainLog:
    """Collect -> per-objective GAE -> objective weights -> mixed advantage -> PPO epochs.

    ``monitor(iteration, logits_fn)`` is called after each update with the
    current policy's observation -> logits map.
    """
    pref = validate(lam)
    opt = Adam(cfg.learning_rate)
    log = TrainLog()
    ref_lp = None
    for it in range(cfg.total_iterations):
        def policy_fn(obs):
            c = learner.forward(obs)
            return c.logits, c.values

        batch = env.rollout(policy_fn, cfg.batch_episodes, rng)
        batch = gae_per_objective(batch, cfg.gae_lambda, cfg.gamma, normalize=cfg.advantage_norm == "per_objective")
        mean_r = batch.episode_returns().mean(axis=0)
        w = weight_rule(mean_r)
        adv = mixed_advantage(batch.advantages, w)
        if cfg.advantage_norm == "mixed":
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        if cfg.kl_coef > 0:
            if ref_lp is None:
                ref_net_lp = log_softmax(learner.forward(env.all_observations()).logits)
            ref_lp = ref_net_lp[batch.states.reshape(-1)]
        samples = _samples(env, batch, adv, ref_lp)
        for _ in range(cfg.epochs_per_batch):
            _, grads = ppo_loss_and_grads(learner, samples, cfg)
            opt.step(learner.params, grads)
        for k, v in learner.params.items():
            if not np.all(np.isfinite(v)):
                raise TrainingDiverged(f"parameter {k} became non-finite at iteration {it}")
        log.rows.append(
            LogRow(
                iteration=it,
                mean_rewards=[float(x) for x in mean_r],
                w=[float(x) for x in w],
                tch=float(tch_value(mean_r, pref, z_ref)),
                scalarized=float(linear_scalarize(mean_r, pref)),
            )
        )
        if monitor is not None:
            monitor(it, lambda obs: learner.forward(obs).logits)
    return log


def _support_weights(lam: PreferenceLike) -> np.ndarray:
    return validate(lam).as_array()


def train_dense(
    base: PolicyNetwork,
    lam: PreferenceLike,
    env: TokenTradeEnv,
    cfg: PpoConfig,
    stream: int = 0,
) -> tuple[PolicyNetwork, TrainLog]:
    """Linear-scalarised PPO on the dense weights, starting from ``base``."""
    pref = validate(lam)
    learner = DenseLearner(base)
    w = _support_weights(pref)
    log = run_ppo(learner, env, cfg, pref, lambda r: w, env.ideal_point() + 0.1, RngStream(cfg.seed, stream))
    return learner.result(), log


def scalar_reward_config(cfg: PpoConfig) -> PpoConfig:
    """PPO on the scalar reward lam . R: advantages are mixed first, then normalised once."""
    return replace(cfg, advantage_norm="mixed")


def train_single_objective(
    base: PolicyNetwork, objective_index: int, env: TokenTradeEnv, cfg: PpoConfig
) -> tuple[PolicyNetwork, TrainLog]:
    N = env.n_objectives
    if not 0 <= objective_index < N:
        raise InvalidInput(f"objective index {objective_index} outside [0, {N})")
    onehot = np.zeros(N)
    onehot[objective_index] = 1.0
    return train_dense(base, onehot, env, cfg, stream=1000 + objective_index)


def assigned_experts(model: HoeModel, lam: PreferenceLike) -> tuple[str, ...]:
    """Ids of the N LoRA experts nearest to ``lam``."""
    pref = validate(lam)
    prefs = [e.preference for e in model.lora_registry]
    k = min(len(pref), len(prefs))
    return tuple(model.lora_registry[i].id for i in nearest_experts(pref, prefs, k))


def train_router(
    model: HoeModel,
    lam: PreferenceLike,
    env: TokenTradeEnv,
    cfg: PpoConfig,
    omd: OmdState | None = None,
    router_id: str = "router",
    init_scale: float = 0.0,
    scalarization: str = "stch",
    monitor: Monitor | None = None,
) -> tuple[RouterExpert, TrainLog]:
    """Train one router expert at ``lam`` over its N nearest (frozen) LoRA experts.

    ``scalarization="stch"`` drives the objective weights by mirror descent
    from ``omd``; ``"linear"`` uses ``lam`` itself for every batch.
    """
    pref = validate(lam)
    rng = RngStream(cfg.seed, 2000)
    router = init_router(router_id, pref, assigned_experts(model, pref), model.base, rng, init_scale)
    if cfg.total_iterations == 0:
        return router, TrainLog()
    learner = RouterLearner(model, router)
    if scalarization == "stch":
        state = omd or OmdState.init(pref, env.ideal_point() + 0.1)
        holder = {"state": state}

        def rule(mean_r):
            holder["state"] = omd_update(holder["state"], pref, mean_r)
            return holder["state"].w

        z_ref = np.asarray(state.z_star)
    elif scalarization == "linear":
        fixed = _support_weights(pref)
        rule = lambda mean_r: fixed  # noqa: E731
        z_ref = np.asarray(omd.z_star) if omd is not None else env.ideal_point() + 0.1
    else:
        raise InvalidInput(f"unknown scalarization {scalarization!r}")
    log = run_ppo(learner, env, cfg, pref, rule, z_ref, RngStream(cfg.seed, 3000), monitor)
    return learner.result(), log


# --------------------------------------------------------------------------
# evaluation helpers


def greedy_returns(env: TokenTradeEnv, logits_fn, episodes: int = 1) -> np.ndarray:
    """Mean per-objective return under argmax action selection."""
    batch = env.rollout(lambda obs: (logits_fn(obs), None), episodes, greedy=True)
    return batch.episode_returns().mean(axis=0)


def dense_logits_fn(net: PolicyNetwork):
    return lambda obs: forward(net, obs).logits


def empirical_max_returns(env: TokenTradeEnv, logits_fns: Sequence, episodes: int = 200, seed: int = 0) -> np.ndarray:
    """Per-objective max episode return of each objective's own expert (sampled)."""
    out = []
    for i, fn in enumerate(logits_fns):
        batch = env.rollout(lambda obs: (fn(obs), None), episodes, RngStream(seed, 4000 + i))
        out.append(batch.episode_returns()[:, i].max())
    return np.asarray(out)
