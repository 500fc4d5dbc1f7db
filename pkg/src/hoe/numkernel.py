"""Dense numeric kernel: float32 matrices, SVD, softmax, seeded sampling.

Stored tensors are float32 (``DenseMatrix``); arithmetic is carried out in
float64 and cast back at the storage boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hoe.errors import InvalidDistribution, InvalidInput, RankTooLarge

DTYPE = np.float32


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return ``data`` as a finite 2-D float32 array (a DenseMatrix)."""
    m = np.asarray(data)
    if m.ndim != 2:
        raise InvalidInput(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidInput(f"matrix must have positive dimensions, got {m.shape}")
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise InvalidInput(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput("matrix contains non-finite entries")
    return np.ascontiguousarray(m, dtype=DTYPE)


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # rows x k, orthonormal columns
    s: np.ndarray  # k, non-increasing, >= 0
    vt: np.ndarray  # k x cols, orthonormal rows

    @property
    def k(self) -> int:
        return int(self.s.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def svd(m) -> SvdResult:
    """Thin SVD of a finite matrix, singular values sorted non-increasing."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidInput(f"svd needs a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("svd input contains non-finite entries")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    # LAPACK already sorts; a stable re-sort guards against ties reordered by -0.0
    order = np.argsort(-s, kind="stable")
    return SvdResult(u=u[:, order], s=np.maximum(s[order], 0.0), vt=vt[order, :])


def truncate(result: SvdResult, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the best rank-``rank`` approximation into ``(down, up)`` factors.

    ``up @ down`` is the Eckart-Young optimum; ``sqrt(s)`` is placed on both
    factors so neither carries the full spectrum.
    """
    if rank < 1:
        raise RankTooLarge(f"rank must be positive, got {rank}")
    if rank > result.k:
        raise RankTooLarge(f"rank {rank} exceeds the {result.k} available singular values")
    root = np.sqrt(result.s[:rank])
    down = root[:, None] * result.vt[:rank]
    up = result.u[:, :rank] * root[None, :]
    return down.astype(DTYPE), up.astype(DTYPE)


def softmax(scores, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if temperature <= 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores, axis: int = -1) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


@dataclass
class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Do not share one instance between workers; derive a new ``stream_id``
    per worker with :meth:`child`.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream_id) & (2**64 - 1),))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, (self.stream_id * 1_000_003 + stream_id + 1) & (2**63 - 1))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)


def _check_distribution(p: np.ndarray, tol: float = 1e-6) -> None:
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidDistribution("probabilities must be finite and non-negative")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise InvalidDistribution(f"probabilities must sum to 1 (got {sums})")


def sample_categorical(probs, rng: RngStream) -> int:
    """Draw one index by inverse-CDF on a single uniform variate."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistribution("probs must be a non-empty vector")
    _check_distribution(p)
    return int(sample_categorical_batch(p[None, :], rng)[0])


def sample_categorical_batch(probs: np.ndarray, rng: RngStream) -> np.ndarray:
    """Row-wise categorical draws; one uniform variate per row."""
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=1)
    u = rng.uniform(p.shape[0])[:, None] * cdf[:, -1:]
    # first index whose cdf exceeds u; that entry necessarily has positive mass
    return np.minimum(np.sum(cdf <= u, axis=1), p.shape[1] - 1)
