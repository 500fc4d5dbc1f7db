from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hoe.adapters import (
    ObjectiveVector,
    calibrate_rescale,
    magnitude_prune,
    merge,
    objective_vector,
    task_svd,
    to_dense,
)
from hoe.errors import IncompatibleModels, InvalidInput, RankTooLarge
from hoe.numkernel import RngStream


def random_tau(seed: int, shapes=((6, 5), (3, 6))) -> ObjectiveVector:
    rng = RngStream(seed, 0)
    return ObjectiveVector({f"layers.{i}": rng.normal(s).astype(np.float32) for i, s in enumerate(shapes)})


def rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, np.float64) - b) / max(np.linalg.norm(b), 1e-30))


def test_objective_vector_examples():
    base = {"m": np.ones((2, 2), np.float32)}
    assert np.all(objective_vector(base, base).deltas["m"] == 0)
    ft = {"m": np.arange(4, dtype=np.float32).reshape(2, 2)}
    assert np.array_equal(objective_vector(ft, {"m": np.zeros((2, 2))}).deltas["m"], ft["m"])
    with pytest.raises(IncompatibleModels):
        objective_vector(ft, {"n": ft["m"]})


def test_objective_vector_elementwise_oracle():
    rng = RngStream(2, 0)
    a, b = rng.normal((4, 3)).astype(np.float32), rng.normal((4, 3)).astype(np.float32)
    d = objective_vector({"m": a}, {"m": b}).deltas["m"]
    for i in range(4):
        for j in range(3):
            assert d[i, j] == np.float32(a[i, j] - b[i, j])


def test_prune_examples():
    tau = ObjectiveVector({"m": np.array([[3, -1, 0.5, -2]], np.float32)})
    assert np.array_equal(magnitude_prune(tau, 0.5).deltas["m"], [[3, 0, 0, -2]])
    assert np.array_equal(magnitude_prune(tau, 1.0).deltas["m"], tau.deltas["m"])
    with pytest.raises(InvalidInput):
        magnitude_prune(tau, 0.0)


def test_prune_is_global_across_modules():
    tau = ObjectiveVector({"a": np.array([[5.0, 4.0]], np.float32), "b": np.array([[1.0, 0.5]], np.float32)})
    out = magnitude_prune(tau, 0.5)
    assert np.array_equal(out.deltas["a"], [[5, 4]]) and np.all(out.deltas["b"] == 0)


@given(st.integers(0, 10**6), st.floats(0.05, 1.0))
@settings(max_examples=60, deadline=None)
def test_prune_count_and_values(seed, keep):
    tau = random_tau(seed)
    out = magnitude_prune(tau, keep)
    flat_in = np.concatenate([tau.deltas[m].ravel() for m in tau.modules()])
    flat_out = np.concatenate([out.deltas[m].ravel() for m in out.modules()])
    assert np.count_nonzero(flat_out) == int(np.floor(keep * flat_in.size + 0.5))
    kept = flat_out != 0
    assert np.array_equal(flat_out[kept], flat_in[kept])


def test_task_svd_lossless_round_trip():
    tau = random_tau(5)
    e = task_svd(tau, rank=6, rescale=1.0, preference=[1, 0])
    for m in tau.modules():
        assert rel(to_dense(e).deltas[m], tau.deltas[m]) <= 1e-5


def test_task_svd_rank_one_exact():
    rng = RngStream(6, 0)
    u, v = rng.normal((5, 1)), rng.normal((1, 4))
    tau = ObjectiveVector({"m": (u @ v).astype(np.float32)})
    e = task_svd(tau, 1, 1.0, [1, 0])
    assert np.allclose(to_dense(e).deltas["m"], tau.deltas["m"], atol=1e-6)
    assert e.module_rank("m") == 1 and e.shape("m") == (5, 4)


def test_task_svd_rank_errors():
    tau = random_tau(1)
    with pytest.raises(RankTooLarge):
        task_svd(tau, 0, 1.0, [1, 0])
    with pytest.raises(RankTooLarge):
        task_svd(tau, 9, 1.0, [1, 0], cap_rank=False)


def test_to_dense_rescale_linearity():
    tau = random_tau(3)
    e = task_svd(tau, 2, 1.0, [0.5, 0.5])
    one, two, zero = to_dense(e), to_dense(e.with_rescale(2.0)), to_dense(e.with_rescale(0.0))
    for m in tau.modules():
        assert np.allclose(two.deltas[m], 2 * one.deltas[m], atol=1e-6)
        assert np.all(zero.deltas[m] == 0)


def test_calibrate_rescale_examples():
    e = task_svd(random_tau(0), 2, 1.0, [1, 0])
    best, scores = calibrate_rescale(e, lambda x: -abs(x.rescale - 1.5), [0.5, 1.0, 1.5])
    assert best.rescale == 1.5 and set(scores) == {0.5, 1.0, 1.5}
    assert calibrate_rescale(e, lambda x: 0.0, [1.2, 0.9, 2.0])[0].rescale == 0.9
    with pytest.raises(InvalidInput):
        calibrate_rescale(e, lambda x: 0.0, [])


def test_merge_examples():
    t1, t2 = random_tau(1), random_tau(2)
    for m, got in merge([t1, t2], [1, 0]).deltas.items():
        assert np.array_equal(got, t1.deltas[m])
    for m, got in merge([t1, t1], [0.5, 0.5]).deltas.items():
        assert np.allclose(got, t1.deltas[m], atol=1e-7)
    a = ObjectiveVector({"m": np.array([[2.0]], np.float32)})
    b = ObjectiveVector({"m": np.array([[-1.0]], np.float32)})
    assert merge([a, b], [0.7, 0.3]).deltas["m"][0, 0] == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(IncompatibleModels):
        merge([a], [0.5, 0.5])


@given(st.integers(0, 10**6), st.floats(-3, 3).filter(lambda c: abs(c) > 1e-3))
@settings(max_examples=40, deadline=None)
def test_merge_onehot_homogeneous(seed, c):
    t1, t2 = random_tau(seed), random_tau(seed + 1)
    out = merge([t1.scaled(c), t2], [1, 0]).deltas
    ref = merge([t1, t2], [1, 0]).scaled(c).deltas
    for m in out:
        assert np.allclose(out[m], ref[m], atol=1e-6)


@given(st.integers(0, 10**6), st.floats(0.0, 1.0), st.floats(0.2, 1.0))
@settings(max_examples=60, deadline=None)
def test_merge_entries_within_envelope(seed, w, keep):
    taus = [random_tau(seed), random_tau(seed + 7)]
    out = merge(taus, [w, 1 - w], keep).deltas
    for m in out:
        stack = np.stack([t.deltas[m] for t in taus] + [np.zeros_like(out[m])])
        assert np.all(out[m] >= stack.min(axis=0) - 1e-6)
        assert np.all(out[m] <= stack.max(axis=0) + 1e-6)


def test_checksum_tracks_tensors():
    e = task_svd(random_tau(4), 2, 1.0, [1, 0], expert_id="x")
    c = e.checksum()
    assert c == task_svd(random_tau(4), 2, 1.0, [1, 0], expert_id="x").checksum()
    e.factors["layers.0"][0][0, 0] += 1.0
    assert e.checksum() != c
