from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import DegenerateSpectrumWarning, NoConvergence, NotPositiveDefinite
from src.core.numerics import (
    RandomStream,
    cholesky_spd,
    floor_eigenvalues,
    solve_spd,
    standard_normal,
    top_eigenpair,
    uniform_ball,
    uniform_sphere,
)


# -----------------------------
# solve_spd
# -----------------------------
def test_solve_spd_identity_returns_rhs():
    rhs = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(solve_spd(np.eye(3), rhs), rhs, rtol=0, atol=1e-15)


def test_solve_spd_scalar():
    np.testing.assert_allclose(solve_spd([[4.0]], [2.0]), [0.5], rtol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1), n=st.integers(min_value=1, max_value=8))
def test_solve_spd_small_residual(seed: int, n: int):
    gen = np.random.default_rng(seed)
    b = gen.standard_normal((n, n))
    m = b @ b.T + n * np.eye(n)
    rhs = gen.standard_normal(n)
    x = solve_spd(m, rhs)
    assert np.linalg.norm(m @ x - rhs) <= 1e-10 * np.linalg.norm(m) * np.linalg.norm(x) + 1e-12


def test_solve_spd_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        solve_spd([[1.0, 0.0], [0.0, -1.0]], [1.0, 1.0])


def test_solve_spd_rejects_asymmetric():
    with pytest.raises(ValueError, match="not symmetric"):
        solve_spd([[2.0, 1.0], [0.0, 2.0]], [1.0, 1.0])


def test_cholesky_reconstructs_matrix():
    m = np.array([[4.0, 2.0], [2.0, 3.0]])
    factor = cholesky_spd(m)
    np.testing.assert_allclose(factor @ factor.T, m, atol=1e-14)
    assert factor[0, 1] == 0.0


def test_floor_eigenvalues_clips_only_below_floor():
    m = np.diag([1e-14, 2.0])
    out = floor_eigenvalues(m, 1e-10)
    np.testing.assert_allclose(np.linalg.eigvalsh(out), [1e-10, 2.0], rtol=1e-6)


# -----------------------------
# top_eigenpair
# -----------------------------
def test_top_eigenpair_diagonal():
    lam, v = top_eigenpair(np.diag([0.8, 0.5]))
    assert lam == pytest.approx(0.8, rel=1e-8)
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-6)


def test_top_eigenpair_identity_warns_about_tie():
    with pytest.warns(DegenerateSpectrumWarning):
        lam, v = top_eigenpair(np.eye(3))
    assert lam == pytest.approx(1.0, rel=1e-12)
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_top_eigenpair_rank_one():
    u = np.array([0.6, 0.8])
    lam, v = top_eigenpair(np.outer(u, u))
    assert lam == pytest.approx(1.0, rel=1e-8)
    np.testing.assert_allclose(v, u, atol=1e-8)


def test_top_eigenpair_sign_convention():
    u = np.array([-0.6, -0.8])
    _, v = top_eigenpair(np.outer(u, u))
    assert v[np.argmax(np.abs(v))] > 0


def test_top_eigenpair_zero_matrix():
    lam, v = top_eigenpair(np.zeros((3, 3)))
    assert lam == 0.0
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_top_eigenpair_iteration_cap():
    with pytest.raises(NoConvergence):
        top_eigenpair(np.diag([1.0, 0.99]), tol=1e-14, max_iters=3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_top_eigenpair_matches_eigh(seed: int):
    gen = np.random.default_rng(seed)
    vals = np.sort(gen.uniform(0.1, 1.0, 4))
    vals[-1] = vals[-2] + 0.5
    q, _ = np.linalg.qr(gen.standard_normal((4, 4)))
    m = (q * vals) @ q.T
    m = 0.5 * (m + m.T)
    lam, v = top_eigenpair(m)
    assert lam == pytest.approx(vals[-1], rel=1e-7)
    assert np.linalg.norm(m @ v - lam * v) <= 1e-7


# -----------------------------
# Random streams
# -----------------------------
def test_standard_normal_empty():
    assert standard_normal(RandomStream(0), 0).shape == (0,)


def test_standard_normal_rejects_negative_size():
    with pytest.raises(ValueError):
        standard_normal(RandomStream(0), -1)


def test_stream_replays_bitwise_from_seed_and_counter():
    stream = RandomStream(42)
    standard_normal(stream, 5)
    replay = stream.copy()
    first = standard_normal(stream, 100)
    again = standard_normal(replay, 100)
    assert np.array_equal(first, again)
    assert np.array_equal(standard_normal(RandomStream(42, counter=1), 100), first)


def test_consecutive_draws_differ():
    stream = RandomStream(7)
    assert not np.array_equal(standard_normal(stream, 10), standard_normal(stream, 10))


def test_substreams_are_keyed_by_label():
    base = RandomStream(3)
    a = standard_normal(base.substream("row", 1), 20)
    b = standard_normal(base.substream("row", 1), 20)
    c = standard_normal(base.substream("row", 2), 20)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert base.counter == 0


def test_standard_normal_moments():
    z = standard_normal(RandomStream(11), 100_000)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.02


def test_uniform_sphere_has_exact_radius():
    pts = uniform_sphere(RandomStream(5), 1000, 4, 2.5)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 2.5, rtol=1e-12)


def test_uniform_ball_mean_norm():
    dim, eps = 3, 1.0
    pts = uniform_ball(RandomStream(9), 100_000, dim, eps)
    norms = np.linalg.norm(pts, axis=1)
    assert norms.max() <= eps
    assert norms.mean() == pytest.approx(eps * dim / (dim + 1), abs=5e-3)
