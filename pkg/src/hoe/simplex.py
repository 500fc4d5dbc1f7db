"""Preference-vector geometry on the probability simplex.

Covers validation, evaluation grids, nearest-preference lookup and the
convex-coordinate solve used by preference routing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from hoe.errors import DegenerateSimplex, EmptyRegistry, InvalidInput, InvalidStep, NotOnSimplex

SUM_TOL = 1e-6
# distances closer than this are treated as ties (broken by lowest index)
TIE_TOL = 1e-12


@dataclass(frozen=True)
class PreferenceVector:
    weights: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def __getitem__(self, i):
        return self.weights[i]

    def as_array(self) -> np.ndarray:
        return np.array(self.weights, dtype=np.float64)

    def padded(self, n: int) -> "PreferenceVector":
        if n < len(self):
            raise InvalidInput(f"cannot pad a {len(self)}-objective preference down to {n}")
        return PreferenceVector(self.weights + (0.0,) * (n - len(self)))

    def __repr__(self) -> str:
        return "PreferenceVector([" + ", ".join(f"{w:.6g}" for w in self.weights) + "])"


PreferenceLike = PreferenceVector | Sequence[float] | np.ndarray


def validate(v: PreferenceLike, tol: float = SUM_TOL) -> PreferenceVector:
    """Return ``v`` as a PreferenceVector, renormalised to sum exactly to one.

    Raises NotOnSimplex for negative entries or a sum more than ``tol`` from 1.
    """
    if isinstance(v, PreferenceVector):
        return v
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.size == 0 or not np.all(np.isfinite(a)):
        raise NotOnSimplex(f"not a finite non-empty vector: {v!r}")
    if np.any(a < 0):
        raise NotOnSimplex(f"negative weight in {a.tolist()}")
    total = float(a.sum())
    if abs(total - 1.0) > tol:
        raise NotOnSimplex(f"weights sum to {total}, not 1")
    if total != 1.0:
        a = a / total
    # adding 0.0 maps -0.0 to +0.0
    return PreferenceVector(tuple(float(x) + 0.0 for x in a))


def grid(n_objectives: int, step: float) -> list[PreferenceVector]:
    """All simplex lattice points with spacing ``step``, lexicographically sorted."""
    if n_objectives < 2:
        raise InvalidInput("grid needs at least two objectives")
    if step <= 0:
        raise InvalidStep(f"step must be positive, got {step}")
    k = int(round(1.0 / step))
    if k < 1 or abs(k * step - 1.0) > 1e-9:
        raise InvalidStep(f"step {step} does not divide 1")
    points = []
    for parts in _compositions(k, n_objectives):
        points.append(PreferenceVector(tuple(p / k for p in parts)))
    points.sort(key=lambda p: p.weights)
    return points


def _compositions(total: int, n: int):
    # stars and bars: choose n-1 bar positions among total+n-1 slots
    for bars in itertools.combinations(range(total + n - 1), n - 1):
        prev = -1
        parts = []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(total + n - 1 - prev - 1)
        yield parts


# the 13 three-objective evaluation weightings, in their published order
_EVAL_3OBJ = (
    (0.0, 0.0, 1.0),
    (0.0, 1.0, 0.0),
    (0.1, 0.1, 0.8),
    (0.1, 0.8, 0.1),
    (0.2, 0.2, 0.6),
    (0.2, 0.4, 0.4),
    (0.2, 0.6, 0.2),
    (0.33, 0.33, 0.33),
    (0.4, 0.4, 0.2),
    (0.4, 0.2, 0.4),
    (0.6, 0.2, 0.2),
    (0.8, 0.1, 0.1),
    (1.0, 0.0, 0.0),
)


def eval_set_3obj() -> list[PreferenceVector]:
    """The fixed 13-point three-objective evaluation set (0.33 triple renormalised)."""
    # listed values are rounded to two decimals; 0.33 * 3 misses 1 by 0.01 plus float error
    return [validate(p, tol=0.015) for p in _EVAL_3OBJ]


def nearest_experts(user: PreferenceLike, registry: Sequence[PreferenceLike], k: int) -> list[int]:
    """Indices of the ``k`` registry entries closest to ``user`` (Euclidean).

    Returned in order of increasing distance; ties go to the lowest index.
    """
    if len(registry) == 0:
        raise EmptyRegistry("registry is empty")
    if not 1 <= k <= len(registry):
        raise InvalidInput(f"k={k} outside [1, {len(registry)}]")
    u = _arr(user)
    pts = np.stack([_arr(r) for r in registry])
    if pts.shape[1] != u.shape[0]:
        raise InvalidInput("user and registry preferences differ in dimension")
    d = np.linalg.norm(pts - u[None, :], axis=1)
    keyed = sorted(range(len(d)), key=lambda i: (np.round(d[i] / TIE_TOL) * TIE_TOL, i))
    return keyed[:k]


@dataclass(frozen=True)
class RoutingAssignment:
    """Sparse convex weights over a registry of ``size`` experts."""

    selected: tuple[int, ...]
    weights: tuple[float, ...]  # aligned with ``selected``
    size: int
    projected: bool = False

    @property
    def omega_r(self) -> np.ndarray:
        out = np.zeros(self.size)
        for i, w in zip(self.selected, self.weights):
            out[i] += w
        return out

    def reconstruct(self, registry: Sequence[PreferenceLike]) -> np.ndarray:
        return sum(w * _arr(registry[i]) for i, w in zip(self.selected, self.weights))

    def remap(self, indices: Sequence[int], size: int) -> "RoutingAssignment":
        return RoutingAssignment(tuple(indices[i] for i in self.selected), self.weights, size, self.projected)


def convex_coords(user: PreferenceLike, selected: Sequence[PreferenceLike]) -> RoutingAssignment:
    """Express ``user`` as a convex combination of ``selected`` preferences.

    If the exact barycentric solve is infeasible (a negative coordinate), the
    closest point of the selected sub-simplex is used instead and the result
    is flagged ``projected``.
    """
    if len(selected) == 0:
        raise EmptyRegistry("no preferences selected")
    u = _arr(user)
    pts = np.stack([_arr(s) for s in selected])
    k = pts.shape[0]
    aug = np.vstack([pts.T, np.ones((1, k))])
    if np.linalg.matrix_rank(aug, tol=1e-10) < k:
        raise DegenerateSimplex("selected preferences are affinely dependent")

    omega = _affine_lstsq(pts, u)
    residual = np.linalg.norm(pts.T @ omega - u)
    if residual <= 1e-9 and np.all(omega >= -1e-10):
        omega = np.clip(omega, 0.0, None)
        omega = omega / omega.sum()
        return RoutingAssignment(tuple(range(k)), tuple(float(w) for w in omega), k, projected=False)
    return RoutingAssignment(tuple(range(k)), tuple(float(w) for w in _simplex_projection(pts, u)), k, projected=True)


def _affine_lstsq(pts: np.ndarray, u: np.ndarray) -> np.ndarray:
    """argmin ||pts.T w - u|| subject to sum(w) = 1 (KKT system)."""
    k = pts.shape[0]
    gram = pts @ pts.T
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = gram
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([pts @ u, [1.0]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:k]


def _simplex_projection(pts: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Minimise reconstruction error over the simplex by enumerating faces.

    The optimum lies in the relative interior of exactly one face, where it
    equals that face's affine least-squares solution; with affinely
    independent points and k <= ~8 the enumeration is exact and cheap.
    """
    k = pts.shape[0]
    best, best_err = None, np.inf
    for size in range(1, k + 1):
        for face in itertools.combinations(range(k), size):
            w = _affine_lstsq(pts[list(face)], u)
            if np.any(w < -1e-12):
                continue
            full = np.zeros(k)
            full[list(face)] = np.clip(w, 0.0, None)
            full /= full.sum()
            err = np.linalg.norm(pts.T @ full - u)
            if err < best_err - 1e-15:
                best, best_err = full, err
    return best


def _arr(p: PreferenceLike) -> np.ndarray:
    if isinstance(p, PreferenceVector):
        return p.as_array()
    return np.asarray(p, dtype=np.float64).reshape(-1)


def as_preferences(items: Iterable[PreferenceLike]) -> list[PreferenceVector]:
    return [validate(p) for p in items]
