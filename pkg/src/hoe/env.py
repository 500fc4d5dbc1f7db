"""Synthetic token-emission environments with exactly solvable frontiers.

Each step the agent emits one of V tokens and receives the token's fixed
reward vector; the observation is the previous token (or a start symbol).
Because rewards are per-token and additive, any policy's expected return is
``T * p @ reward_table`` for its average per-step token distribution ``p``,
which makes brute-force optimisation over ``p`` an exact oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from hoe.errors import InvalidInput
from hoe.numkernel import RngStream, log_softmax, sample_categorical_batch
from hoe.policy import TrajectoryBatch
from hoe.scalarize import linear_scalarize, tch_value
from hoe.simplex import PreferenceLike, validate

CANONICAL_CONVEX = ((1.0, 0.0), (0.0, 1.0), (0.6, 0.6))
CANONICAL_NONCONVEX = ((1.0, 0.0), (0.0, 1.0), (0.4, 0.4))


@dataclass(frozen=True)
class EnvSpec:
    vocab_size: int = 3
    n_objectives: int = 2
    horizon: int = 10
    frontier_shape: str = "convex"
    seed: int = 0


@dataclass
class TokenTradeEnv:
    reward_table: np.ndarray  # V x N
    horizon: int
    frontier_shape: str = "convex"
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return int(self.reward_table.shape[0])

    @property
    def n_objectives(self) -> int:
        return int(self.reward_table.shape[1])

    @property
    def obs_dim(self) -> int:
        return self.vocab_size + 1

    @property
    def start_symbol(self) -> int:
        return self.vocab_size

    def observe(self, states: np.ndarray) -> np.ndarray:
        obs = np.zeros((len(states), self.obs_dim))
        obs[np.arange(len(states)), states] = 1.0
        return obs

    def all_observations(self) -> np.ndarray:
        return np.eye(self.obs_dim)

    def token_features(self) -> np.ndarray:
        """Per-token attribute vectors (the reward table), usable as a frozen unembedding."""
        return self.reward_table.copy()

    def ideal_point(self) -> np.ndarray:
        """Best achievable return per objective taken separately."""
        return self.horizon * self.reward_table.max(axis=0)

    def expected_returns(self, logits_fn) -> np.ndarray:
        """Exact expected per-objective return of a stochastic policy (Markov chain over last token)."""
        V, T = self.vocab_size, self.horizon
        probs = np.exp(log_softmax(np.asarray(logits_fn(self.all_observations()), dtype=np.float64)))
        dist = np.zeros(V + 1)
        dist[self.start_symbol] = 1.0
        total = np.zeros(self.n_objectives)
        for _ in range(T):
            step = dist @ probs  # distribution of the token emitted this step
            total += step @ self.reward_table
            dist = np.append(step, 0.0)
        return total

    def rollout(self, policy_fn, episodes: int, rng: RngStream | None = None, greedy: bool = False):
        """Run ``episodes`` parallel episodes.

        ``policy_fn(obs) -> (logits, values)`` with values of shape
        (episodes, N) or None. Greedy mode takes argmax (ties to the lowest index).
        """
        V, T, N = self.vocab_size, self.horizon, self.n_objectives
        states = np.full((episodes, T), self.start_symbol, dtype=np.int64)
        actions = np.zeros((episodes, T), dtype=np.int64)
        logps = np.zeros((episodes, T))
        values = np.zeros((episodes, T, N))
        cur = np.full(episodes, self.start_symbol, dtype=np.int64)
        for t in range(T):
            states[:, t] = cur
            z, v = policy_fn(self.observe(cur))
            lp = log_softmax(z)
            if greedy:
                a = np.argmax(z, axis=1)
            else:
                a = sample_categorical_batch(np.exp(lp), rng)
            actions[:, t] = a
            logps[:, t] = lp[np.arange(episodes), a]
            if v is not None:
                values[:, t] = v
            cur = a
        rewards = self.reward_table[actions]
        return TrajectoryBatch(states=states, actions=actions, logprobs=logps, rewards=rewards, values=values)


def make_env(spec: EnvSpec | dict) -> TokenTradeEnv:
    if isinstance(spec, dict):
        spec = EnvSpec(**spec)
    V, N = spec.vocab_size, spec.n_objectives
    if spec.frontier_shape not in ("convex", "nonconvex"):
        raise InvalidInput(f"frontier_shape must be 'convex' or 'nonconvex', got {spec.frontier_shape!r}")
    if N < 1 or spec.horizon < 1:
        raise InvalidInput("need at least one objective and a positive horizon")
    if V < N + 1:
        raise InvalidInput(f"vocab_size {V} must be at least n_objectives + 1 = {N + 1}")
    if N == 2 and V == 3:
        table = np.array(CANONICAL_CONVEX if spec.frontier_shape == "convex" else CANONICAL_NONCONVEX)
    else:
        table = _random_table(V, N, spec.frontier_shape, RngStream(spec.seed, 7))
    return TokenTradeEnv(table.astype(np.float64), spec.horizon, spec.frontier_shape, spec.seed)


def _random_table(V: int, N: int, shape: str, rng: RngStream) -> np.ndarray:
    """One specialist token per objective, then compromise tokens.

    Convex: compromise points lie beyond the specialists' hull (coordinate
    sum > 1). Nonconvex: they lie inside it (sum < 1), so linear weightings
    never prefer them.
    """
    if N == 1:
        rest = rng.uniform((V - 1, 1)) * 0.9
        return np.vstack([[1.0], rest])
    table = [np.eye(N)]
    for _ in range(V - N):
        d = rng.generator.dirichlet(np.ones(N))
        total = rng.uniform() * 0.25 + (1.05 if shape == "convex" else 0.65)
        table.append(np.clip(d * total, 0.0, 1.0)[None, :])
    return np.vstack(table)


def _simplex_lattice(v: int, resolution: float) -> np.ndarray:
    k = int(round(1.0 / resolution))
    pts = []
    for bars in itertools.combinations(range(k + v - 1), v - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(k + v - 1 - prev - 1)
        pts.append(parts)
    return np.asarray(pts, dtype=np.float64) / k


def oracle_best(
    env: TokenTradeEnv,
    lam: PreferenceLike,
    scalarizer: str = "linear",
    z_star=None,
    resolution: float = 0.01,
) -> float:
    """Best scalarised expected return over per-step token distributions (grid search)."""
    pref = validate(lam)
    grid_pts = _simplex_lattice(env.vocab_size, resolution)
    returns = env.horizon * grid_pts @ env.reward_table
    if scalarizer == "linear":
        vals = linear_scalarize(returns, pref)
    elif scalarizer == "tch":
        if z_star is None:
            raise InvalidInput("tch oracle needs z_star")
        vals = tch_value(returns, pref, z_star)
    else:
        raise InvalidInput(f"unknown scalarizer {scalarizer!r}")
    return float(np.max(vals))


def within_oracle(value: float, oracle: float, fraction: float = 0.95) -> bool:
    """``value`` is within ``1 - fraction`` of |oracle| below the oracle.

    Equals ``value >= fraction * oracle`` for positive oracles and stays
    meaningful for the negative values a Tchebycheff gap produces.
    """
    return bool(value >= oracle - (1.0 - fraction) * abs(oracle) - 1e-12)
