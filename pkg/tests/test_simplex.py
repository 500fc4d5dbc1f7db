from __future__ import annotations

import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoe.errors import DegenerateSimplex, EmptyRegistry, InvalidStep, NotOnSimplex
from hoe.simplex import PreferenceVector, convex_coords, eval_set_3obj, grid, nearest_experts, validate


def simplex_points(n):
    return st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: tuple(x / sum(v) for x in v)
    )


def test_validate_examples():
    assert validate([0.5, 0.5]).weights == (0.5, 0.5)
    with pytest.raises(NotOnSimplex):
        validate([0.7, 0.4])
    with pytest.raises(NotOnSimplex):
        validate([1.2, -0.2])
    w = validate([1.0, -0.0]).weights
    assert w == (1.0, 0.0) and np.copysign(1.0, w[1]) == 1.0


def test_grid_examples():
    g = grid(2, 0.1)
    assert len(g) == 11
    assert g[0].weights == (0.0, 1.0) and g[-1].weights == (1.0, 0.0)
    assert [p.weights for p in grid(2, 0.5)] == [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]
    assert len(grid(3, 0.5)) == 6
    with pytest.raises(InvalidStep):
        grid(2, 0.3)
    with pytest.raises(InvalidStep):
        grid(2, 0.0)


@pytest.mark.parametrize("n", [2, 3, 4])
@pytest.mark.parametrize("k", [1, 2, 5, 10])
def test_grid_count_brute_force(n, k):
    brute = [c for c in itertools.product(range(k + 1), repeat=n) if sum(c) == k]
    pts = grid(n, 1.0 / k)
    assert len(pts) == len(brute) == comb(k + n - 1, n - 1)
    assert all(abs(sum(p.weights) - 1) < 1e-12 for p in pts)


def test_eval_set_3obj():
    pts = eval_set_3obj()
    assert len(pts) == 13
    assert len({p.weights for p in pts}) == 13
    assert pts[7].weights == pytest.approx((1 / 3,) * 3)
    assert (0.2, 0.4, 0.4) in [tuple(round(x, 9) for x in p.weights) for p in pts]


def test_nearest_examples():
    assert nearest_experts([1, 0], [[1, 0], [0, 1]], 1) == [0]
    assert nearest_experts([0.8, 0.2], [[1, 0], [0.5, 0.5], [0, 1]], 2) == [0, 1]
    assert nearest_experts([0.5, 0.5], [[1, 0], [0, 1]], 1) == [0]
    with pytest.raises(EmptyRegistry):
        nearest_experts([1, 0], [], 1)


@given(st.integers(0, 10**6))
@settings(max_examples=200, deadline=None)
def test_nearest_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 5), rng.integers(1, 9)
    user = rng.dirichlet(np.ones(n))
    reg = rng.dirichlet(np.ones(n), size=m)
    k = int(rng.integers(1, m + 1))
    d = np.linalg.norm(reg - user, axis=1)
    brute = sorted(range(m), key=lambda i: (d[i], i))[:k]
    assert nearest_experts(user, list(reg), k) == brute


def test_convex_coords_examples():
    a = convex_coords([0.8, 0.2], [[1, 0], [0.5, 0.5]])
    assert np.allclose(a.weights, [0.6, 0.4]) and not a.projected
    b = convex_coords([0.5, 0.5], [[1, 0], [0.5, 0.5]])
    assert np.allclose(b.weights, [0, 1])
    u = validate([0.33, 0.33, 0.34])
    c = convex_coords(u, [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    assert np.allclose(c.weights, u.weights)
    with pytest.raises(DegenerateSimplex):
        convex_coords([0.5, 0.5], [[1, 0], [1, 0]])


@given(simplex_points(3), st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_convex_coords_feasible_reconstruction(user, seed):
    rng = np.random.default_rng(seed)
    sel = [tuple(p) for p in rng.dirichlet(np.ones(3), size=3)]
    try:
        a = convex_coords(user, sel)
    except DegenerateSimplex:
        return
    assert min(a.weights) >= 0 and sum(a.weights) == pytest.approx(1.0)
    if not a.projected:
        assert np.linalg.norm(a.reconstruct(sel) - np.asarray(user)) <= 1e-7


@given(simplex_points(2), simplex_points(2), simplex_points(2))
@settings(max_examples=100, deadline=None)
def test_projection_beats_grid_search(user, p, q):
    if np.linalg.norm(np.subtract(p, q)) < 1e-3:
        return
    a = convex_coords(user, [p, q])
    err = np.linalg.norm(a.reconstruct([p, q]) - np.asarray(user))
    ts = np.linspace(0, 1, 1001)
    pts = ts[:, None] * np.asarray(p) + (1 - ts[:, None]) * np.asarray(q)
    best = np.min(np.linalg.norm(pts - np.asarray(user), axis=1))
    assert err <= best + 1e-9


def test_padded():
    assert PreferenceVector((0.5, 0.5)).padded(3).weights == (0.5, 0.5, 0.0)
