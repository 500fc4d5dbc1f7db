"""Scalarisations of reward vectors and the online-mirror-descent weight state."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from hoe.errors import InvalidInput
from hoe.numkernel import softmax
from hoe.simplex import PreferenceLike, validate


def _lam(lam: PreferenceLike) -> np.ndarray:
    return validate(lam).as_array()


def linear_scalarize(rewards, lam: PreferenceLike) -> np.ndarray | float:
    r = np.asarray(rewards, dtype=np.float64)
    w = _lam(lam)
    if r.shape[-1] != w.shape[0]:
        raise InvalidInput(f"{r.shape[-1]} rewards for {w.shape[0]} weights")
    out = r @ w
    return float(out) if np.ndim(out) == 0 else out


def tch_value(rewards, lam: PreferenceLike, z_star) -> np.ndarray | float:
    """min_i lam_i * (R_i - z*_i) over the objectives with lam_i > 0."""
    r = np.asarray(rewards, dtype=np.float64)
    w = _lam(lam)
    z = np.asarray(z_star, dtype=np.float64)
    if r.shape[-1] != w.shape[0] or z.shape != w.shape:
        raise InvalidInput("rewards, lambda and z_star must share their last dimension")
    active = w > 0
    gaps = (w * (r - z))[..., active]
    out = gaps.min(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def stch_weights(rewards, lam: PreferenceLike, z_star, mu: float = 1.0) -> np.ndarray:
    """softmax(lam_i * (z*_i - R_i) / mu) over the active objectives (zero elsewhere)."""
    if mu <= 0:
        raise InvalidInput(f"mu must be positive, got {mu}")
    r = np.asarray(rewards, dtype=np.float64)
    w = _lam(lam)
    z = np.asarray(z_star, dtype=np.float64)
    active = w > 0
    out = np.zeros_like(w)
    out[active] = softmax((w * (z - r))[active], temperature=mu)
    return out


def mixed_advantage(advantages, w) -> np.ndarray:
    """Per-step weighted sum of per-objective advantages (last axis)."""
    a = np.asarray(advantages, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if a.shape[-1] != w.shape[0]:
        raise InvalidInput(f"advantages have {a.shape[-1]} objectives, w has {w.shape[0]}")
    return a @ w


@dataclass(frozen=True)
class OmdState:
    """Log-space objective weights for smooth-Tchebycheff mirror descent.

    ``lambda_in_step`` selects the increment ``alpha * lam_i * gap_i / mu``
    (default) or ``alpha * gap_i / mu``. ``schedule`` is ``"constant"`` or
    ``"robbins_monro"`` (``alpha / t``).
    """

    log_w: tuple[float, ...]
    alpha: float = 0.1
    z_star: tuple[float, ...] = ()
    smoothing_mu: float = 1.0
    schedule: str = "constant"
    step: int = 0
    lambda_in_step: bool = True

    @classmethod
    def init(cls, lam: PreferenceLike, z_star, alpha: float = 0.1, smoothing_mu: float = 1.0, **kw) -> "OmdState":
        w = _lam(lam)
        active = w > 0
        log_w = np.full(w.shape, -np.inf)
        log_w[active] = -np.log(active.sum())
        return cls(tuple(log_w), alpha, tuple(float(z) for z in z_star), smoothing_mu, **kw)

    @property
    def w(self) -> np.ndarray:
        lw = np.asarray(self.log_w)
        finite = np.isfinite(lw)
        out = np.zeros_like(lw)
        out[finite] = softmax(lw[finite])
        return out

    def step_size(self) -> float:
        if self.schedule == "robbins_monro":
            return self.alpha / (self.step + 1)
        return self.alpha


def omd_update(state: OmdState, lam: PreferenceLike, batch_mean_rewards) -> OmdState:
    """One mirror-descent step in log space followed by renormalisation.

    The reference point is raised to any reward that exceeds it, and the base
    step size is halved whenever a log-weight leaves [-50, 50].
    """
    w = _lam(lam)
    r = np.asarray(batch_mean_rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise InvalidInput("non-finite rewards")
    z = np.maximum(np.asarray(state.z_star, dtype=np.float64), r)
    gap = z - r
    coef = w if state.lambda_in_step else (w > 0).astype(np.float64)
    lw = np.asarray(state.log_w, dtype=np.float64)
    finite = np.isfinite(lw)
    lw = lw.copy()
    lw[finite] += state.step_size() * coef[finite] * gap[finite] / state.smoothing_mu
    # renormalise so exp(log_w) sums to one
    m = lw[finite].max()
    lw[finite] -= m + np.log(np.sum(np.exp(lw[finite] - m)))
    alpha = state.alpha
    if np.any(np.abs(lw[finite]) > 50):
        alpha *= 0.5
        lw[finite] = np.maximum(lw[finite], -50.0)
        lw[finite] -= np.log(np.sum(np.exp(lw[finite])))
    return replace(state, log_w=tuple(lw), z_star=tuple(z), alpha=alpha, step=state.step + 1)
