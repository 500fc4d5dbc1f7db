"""Objective vectors, task-SVD compression into LoRA experts, and merging."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from hoe.errors import IncompatibleModels, InvalidInput, RankTooLarge
from hoe.numkernel import DTYPE, svd, truncate
from hoe.simplex import PreferenceLike, PreferenceVector, validate

WeightMap = dict[str, np.ndarray]

DEFAULT_KEEP_FRACTION = 0.6
DEFAULT_RESCALE_CANDIDATES = tuple(round(0.8 + 0.1 * i, 1) for i in range(13))


@dataclass
class ObjectiveVector:
    """Per-module weight deltas ``finetuned - base``."""

    deltas: dict[str, np.ndarray]

    def modules(self) -> list[str]:
        return sorted(self.deltas)

    def scaled(self, c: float) -> "ObjectiveVector":
        return ObjectiveVector({k: (np.float64(c) * v).astype(DTYPE) for k, v in self.deltas.items()})

    def total_size(self) -> int:
        return int(sum(v.size for v in self.deltas.values()))


@dataclass
class LoraExpert:
    """Low-rank adapter: per module ``(down: rank x d_in, up: d_out x rank)``.

    The effective weight delta of a module is ``rescale * up @ down``.
    """

    id: str
    preference: PreferenceVector
    rank: int
    rescale: float
    factors: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def modules(self) -> list[str]:
        return sorted(self.factors)

    def module_rank(self, module: str) -> int:
        return int(self.factors[module][0].shape[0])

    def shape(self, module: str) -> tuple[int, int]:
        down, up = self.factors[module]
        return int(up.shape[0]), int(down.shape[1])

    def with_rescale(self, rescale: float) -> "LoraExpert":
        return replace(self, rescale=float(rescale))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for m in self.modules():
            down, up = self.factors[m]
            h.update(m.encode())
            h.update(np.ascontiguousarray(down).tobytes())
            h.update(np.ascontiguousarray(up).tobytes())
        h.update(repr((self.rescale, self.preference.weights)).encode())
        return h.hexdigest()


def objective_vector(finetuned: Mapping[str, np.ndarray], base: Mapping[str, np.ndarray]) -> ObjectiveVector:
    if set(finetuned) != set(base):
        raise IncompatibleModels(f"module sets differ: {sorted(set(finetuned) ^ set(base))}")
    deltas = {}
    for m in sorted(base):
        a = np.asarray(finetuned[m], dtype=DTYPE)
        b = np.asarray(base[m], dtype=DTYPE)
        if a.shape != b.shape:
            raise IncompatibleModels(f"{m}: shape {a.shape} vs {b.shape}")
        deltas[m] = a - b
    return ObjectiveVector(deltas)


def _keep_count(total: int, keep_fraction: float) -> int:
    return int(np.floor(keep_fraction * total + 0.5))


def magnitude_prune(tau: ObjectiveVector, keep_fraction: float) -> ObjectiveVector:
    """Keep the globally largest-magnitude ``keep_fraction`` of entries.

    One threshold spans all modules; ties at the threshold go to the entry
    that comes first in (sorted module path, row-major) order.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise InvalidInput(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return ObjectiveVector({m: v.copy() for m, v in tau.deltas.items()})
    mods = tau.modules()
    flat = np.concatenate([tau.deltas[m].reshape(-1) for m in mods])
    keep = _keep_count(flat.size, keep_fraction)
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:keep]] = True
    out, offset = {}, 0
    for m in mods:
        v = tau.deltas[m]
        out[m] = np.where(mask[offset:offset + v.size].reshape(v.shape), v, 0).astype(DTYPE)
        offset += v.size
    return ObjectiveVector(out)


def task_svd(
    tau: ObjectiveVector,
    rank: int,
    rescale: float,
    preference: PreferenceLike,
    keep_fraction: float = 1.0,
    expert_id: str = "",
    cap_rank: bool = True,
) -> LoraExpert:
    """Prune, then keep the top-``rank`` singular directions of every module.

    With ``cap_rank`` a module narrower than ``rank`` keeps all of its
    directions (and is therefore lossless); otherwise such a module raises
    RankTooLarge.
    """
    if rank < 1:
        raise RankTooLarge(f"rank must be positive, got {rank}")
    pref = validate(preference)
    pruned = magnitude_prune(tau, keep_fraction)
    factors = {}
    for m in pruned.modules():
        delta = pruned.deltas[m]
        r = min(rank, min(delta.shape)) if cap_rank else rank
        factors[m] = truncate(svd(delta), r)
    return LoraExpert(id=expert_id, preference=pref, rank=int(rank), rescale=float(rescale), factors=factors)


def to_dense(expert: LoraExpert) -> ObjectiveVector:
    out = {}
    for m, (down, up) in expert.factors.items():
        out[m] = (expert.rescale * (up.astype(np.float64) @ down.astype(np.float64))).astype(DTYPE)
    return ObjectiveVector(out)


def calibrate_rescale(
    expert: LoraExpert,
    score_fn: Callable[[LoraExpert], float],
    candidates: Sequence[float] = DEFAULT_RESCALE_CANDIDATES,
) -> tuple[LoraExpert, dict[float, float]]:
    """Pick the rescale factor maximising ``score_fn``; ties go to the smallest.

    Returns the recalibrated expert and the score of every candidate.
    """
    if len(candidates) == 0:
        raise InvalidInput("no rescale candidates")
    scores = {}
    best, best_score = None, -np.inf
    for g in sorted(float(c) for c in candidates):
        s = float(score_fn(expert.with_rescale(g)))
        scores[g] = s
        if s > best_score:
            best, best_score = g, s
    return expert.with_rescale(best), scores


def merge(taus: Sequence[ObjectiveVector], lam: PreferenceLike, keep_fraction: float = 1.0) -> ObjectiveVector:
    """Preference-weighted trim / elect-sign / disjoint-mean merge.

    Per entry: each vector is first trimmed to its top ``keep_fraction``
    magnitudes, the sign of the lam-weighted sum is elected, and the result is
    the lam-weighted mean over the vectors agreeing with that sign.
    """
    pref = validate(lam)
    if len(taus) != len(pref):
        raise IncompatibleModels(f"{len(taus)} objective vectors for a {len(pref)}-objective preference")
    mods = taus[0].modules()
    for t in taus[1:]:
        if t.modules() != mods or any(t.deltas[m].shape != taus[0].deltas[m].shape for m in mods):
            raise IncompatibleModels("objective vectors cover different modules or shapes")
    trimmed = [magnitude_prune(t, keep_fraction) for t in taus]
    w = pref.as_array()
    out = {}
    for m in mods:
        stack = np.stack([t.deltas[m].astype(np.float64) for t in trimmed])
        elected = np.sign(np.tensordot(w, stack, axes=1))
        agree = (np.sign(stack) == elected[None]) & (elected[None] != 0)
        wk = w[:, None, None] * agree
        # scale by the per-entry max so subnormal weights do not lose precision in num / den
        top = wk.max(axis=0)
        wk = np.divide(wk, top, out=np.zeros_like(wk), where=top > 0)
        num = np.sum(wk * stack, axis=0)
        den = np.sum(wk, axis=0)
        out[m] = np.divide(num, den, out=np.zeros_like(num), where=den > 0).astype(DTYPE)
    return ObjectiveVector(out)
