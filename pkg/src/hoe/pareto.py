"""Preference-grid sweeps, Pareto fronts, hypervolume and baseline comparators."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from hoe.adapters import ObjectiveVector
from hoe.env import TokenTradeEnv
from hoe.errors import IncompatibleModels, InvalidInput
from hoe.policy import PolicyNetwork, forward
from hoe.router import HoeModel, hoe_logits, route
from hoe.scalarize import linear_scalarize, tch_value
from hoe.simplex import PreferenceLike, PreferenceVector, validate
from hoe.trainer import PpoConfig, scalar_reward_config, train_dense

# (preference, obs batch) -> logits batch
LogitsFn = Callable[[PreferenceVector, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ParetoPoint:
    preference: PreferenceVector
    mean_rewards: tuple[float, ...]
    episodes: int
    method: str
    seed: int

    def __post_init__(self):
        if self.episodes < 1:
            raise InvalidInput("episodes must be >= 1")
        if not np.all(np.isfinite(self.mean_rewards)):
            raise InvalidInput("mean rewards must be finite")

    @property
    def rewards(self) -> np.ndarray:
        return np.asarray(self.mean_rewards, dtype=np.float64)


@dataclass
class SweepReport:
    points: list[ParetoPoint]
    hypervolume: dict[str, float]
    dominance: dict[str, dict[str, int]]
    reference: tuple[float, ...]
    config: dict = field(default_factory=dict)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(p.method for p in self.points))

    def by_method(self, method: str) -> list[ParetoPoint]:
        return [p for p in self.points if p.method == method]


# --------------------------------------------------------------------------
# policies as logits functions


def hoe_policy(model: HoeModel) -> LogitsFn:
    def fn(pref, obs):
        return hoe_logits(model, pref, obs, route(model, pref))

    return fn


def dense_policy(net: PolicyNetwork) -> LogitsFn:
    return lambda pref, obs: forward(net, obs).logits


def rs_soup(base: PolicyNetwork, taus: Sequence[ObjectiveVector], lam: PreferenceLike) -> PolicyNetwork:
    """Dense policy with weights base + sum_i lam_i * tau_i."""
    pref = validate(lam)
    if len(taus) != len(pref):
        raise IncompatibleModels(f"{len(taus)} objective vectors for a {len(pref)}-objective preference")
    weights = {}
    for layer in base.bare().layers:
        m = layer.module_path
        acc = layer.w_pre.astype(np.float64)
        for w, t in zip(pref.weights, taus):
            if m not in t.deltas or t.deltas[m].shape != layer.w_pre.shape:
                raise IncompatibleModels(f"objective vector does not match module {m}")
            acc = acc + w * t.deltas[m].astype(np.float64)
        weights[m] = acc
    return base.bare().with_weights(weights)


def rs_policy(base: PolicyNetwork, taus: Sequence[ObjectiveVector]) -> LogitsFn:
    cache: dict[tuple, PolicyNetwork] = {}

    def fn(pref, obs):
        if pref.weights not in cache:
            cache[pref.weights] = rs_soup(base, taus, pref)
        return forward(cache[pref.weights], obs).logits

    return fn


def mod_fuse(policies: Sequence[PolicyNetwork], lam: PreferenceLike, state) -> np.ndarray:
    """Preference-weighted sum of the policies' logits."""
    pref = validate(lam)
    if len(policies) != len(pref):
        raise InvalidInput(f"{len(policies)} policies for a {len(pref)}-objective preference")
    obs = np.asarray(state, dtype=np.float64)
    batch = obs if obs.ndim == 2 else obs[None, :]
    out = sum(w * forward(p, batch).logits for w, p in zip(pref.weights, policies))
    return out if obs.ndim == 2 else out[0]


def mod_policy(policies: Sequence[PolicyNetwork]) -> LogitsFn:
    return lambda pref, obs: mod_fuse(policies, pref, obs)


# --------------------------------------------------------------------------
# sweeps


def evaluate(env: TokenTradeEnv, logits_fn: Callable[[np.ndarray], np.ndarray], episodes: int) -> np.ndarray:
    """Mean per-objective return under greedy (argmax) action selection."""
    if episodes < 1:
        raise InvalidInput("episodes must be >= 1")
    batch = env.rollout(lambda obs: (logits_fn(obs), None), episodes, greedy=True)
    return batch.episode_returns().mean(axis=0)


def sweep(
    policy: LogitsFn,
    grid: Sequence[PreferenceLike],
    env: TokenTradeEnv,
    episodes: int = 200,
    seed: int = 0,
    method: str = "hoe",
) -> list[ParetoPoint]:
    if len(grid) == 0:
        raise InvalidInput("empty preference grid")
    points = []
    for p in grid:
        pref = validate(p)
        r = evaluate(env, lambda obs: policy(pref, obs), episodes)
        points.append(ParetoPoint(pref, tuple(float(x) for x in r), episodes, method, seed))
    return points


def dominates(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(points: Sequence) -> list:
    """Non-dominated subset (order preserved). Accepts ParetoPoints or reward vectors."""
    vecs = [p.rewards if isinstance(p, ParetoPoint) else np.asarray(p, dtype=np.float64) for p in points]
    if len({v.shape for v in vecs}) > 1:
        raise InvalidInput("points have different numbers of objectives")
    if not vecs:
        return []
    arr = np.stack(vecs)
    keep = []
    for i, v in enumerate(arr):
        ge = np.all(arr >= v, axis=1) & np.any(arr > v, axis=1)
        if not ge.any():
            keep.append(i)
    return [points[i] for i in keep]


def hypervolume(points, ref_point) -> float:
    """Lebesgue measure of the union of boxes [ref, p]; points not above ref are dropped."""
    ref = np.asarray(ref_point, dtype=np.float64)
    pts = np.asarray([p.rewards if isinstance(p, ParetoPoint) else p for p in points], dtype=np.float64)
    if pts.size == 0:
        return 0.0
    pts = pts.reshape(-1, ref.shape[0])
    pts = pts[np.all(pts > ref, axis=1)]
    return _hv(pts - ref)


def _hv(pts: np.ndarray) -> float:
    """Hypervolume w.r.t. the origin of positive points."""
    if len(pts) == 0:
        return 0.0
    n = pts.shape[1]
    if n == 1:
        return float(pts[:, 0].max())
    if n == 2:
        order = np.argsort(-pts[:, 0], kind="stable")
        total, best_y = 0.0, 0.0
        for x, y in pts[order]:
            if y > best_y:
                total += x * (y - best_y)
                best_y = y
        return float(total)
    # slice along the last coordinate
    zs = np.unique(pts[:, -1])
    total, prev = 0.0, 0.0
    for z in zs:
        active = pts[pts[:, -1] >= z][:, :-1]
        total += (z - prev) * _hv(active)
        prev = z
    return float(total)


def reference_point(points: Sequence[ParetoPoint]) -> np.ndarray:
    """Coordinate-wise minimum minus 5% of the range (a unit margin on flat axes)."""
    arr = np.stack([p.rewards for p in points])
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo - 0.05 * span


def dominance_counts(points: Sequence[ParetoPoint], method: str = "hoe") -> dict[str, int]:
    """Preferences where ``method``'s linear-scalarised return >= each other method's."""
    mine = {p.preference.weights: linear_scalarize(p.rewards, p.preference) for p in points if p.method == method}
    wins: dict[str, int] = {}
    for p in points:
        if p.method == method:
            continue
        theirs = linear_scalarize(p.rewards, p.preference)
        wins.setdefault(p.method, 0)
        if p.preference.weights in mine and mine[p.preference.weights] >= theirs - 1e-9:
            wins[p.method] += 1
    return wins


def build_report(points: list[ParetoPoint], config: dict | None = None, ref=None, focus: str = "hoe") -> SweepReport:
    methods = list(dict.fromkeys(p.method for p in points))
    grids = {m: [p.preference.weights for p in points if p.method == m] for m in methods}
    if len({tuple(g) for g in grids.values()}) > 1:
        raise InvalidInput("methods were evaluated on different preference grids")
    ref = reference_point(points) if ref is None else np.asarray(ref, dtype=np.float64)
    hv = {m: hypervolume([p for p in points if p.method == m], ref) for m in methods}
    dom = {focus: dominance_counts(points, focus)} if focus in methods else {}
    return SweepReport(points, hv, dom, tuple(float(x) for x in ref), dict(config or {}))


# --------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def csv_text(points: Sequence[ParetoPoint], z_star) -> str:
    """method, seed, episodes, lambda_1..N, reward_1..N, linear, tch (9 significant digits)."""
    if not points:
        return ""
    n = len(points[0].preference)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["method", "seed", "episodes"]
        + [f"lambda_{i}" for i in range(n)]
        + [f"reward_{i}" for i in range(n)]
        + ["linear", "tch"]
    )
    for p in points:
        w.writerow(
            [p.method, p.seed, p.episodes]
            + [_fmt(x) for x in p.preference.weights]
            + [_fmt(x) for x in p.mean_rewards]
            + [_fmt(linear_scalarize(p.rewards, p.preference)), _fmt(tch_value(p.rewards, p.preference, z_star))]
        )
    return buf.getvalue()


def morlhf_oracle(
    lam: PreferenceLike,
    env: TokenTradeEnv,
    cfg: PpoConfig,
    base: PolicyNetwork,
    episodes: int = 200,
    method: str = "morlhf",
) -> ParetoPoint:
    """Train a dedicated dense policy at ``lam`` with PPO on the scalar reward lam . R, then evaluate it greedily."""
    pref = validate(lam)
    net, _ = train_dense(base, pref, env, scalar_reward_config(cfg), stream=1500)
    r = evaluate(env, lambda obs: forward(net, obs).logits, episodes)
    return ParetoPoint(pref, tuple(float(x) for x in r), episodes, method, cfg.seed)
