import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import gammainc

from conftest import random_spd
from trigger_erasure.errors import DimensionMismatch, DomainError, NotPositiveDefinite
from trigger_erasure.numeric import (
    RandomStream,
    chi2_cdf,
    chi2_quantile,
    cholesky_spd,
    derive_child,
    solve_spd,
    stream_next,
    whiten,
)

M64 = (1 << 64) - 1


def splitmix_oracle(seed, n):
    """Textbook splitmix64, written out independently of the package."""
    out, s = [], seed
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & M64
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def bisect_chi2(d, p):
    lo, hi = 0.0, 1000.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if gammainc(d / 2, mid / 2) < p else (lo, mid)
    return 0.5 * (lo + hi)


# --- Cholesky / solves ------------------------------------------------------


def test_cholesky_identity():
    assert np.array_equal(cholesky_spd(np.eye(3)).lower, np.eye(3))


def test_cholesky_hand_example():
    f = cholesky_spd(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(f.lower, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], rtol=1e-12)


def test_cholesky_rejects_singular():
    with pytest.raises(NotPositiveDefinite):
        cholesky_spd(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_cholesky_rejects_asymmetric_and_nonsquare():
    with pytest.raises(DimensionMismatch):
        cholesky_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        cholesky_spd(np.ones((2, 3)))


def test_solve_trivial_cases():
    np.testing.assert_array_equal(solve_spd(cholesky_spd(np.eye(2)), np.array([5.0, 7.0])), [5.0, 7.0])
    f = cholesky_spd(np.diag([4.0, 9.0]))
    np.testing.assert_allclose(solve_spd(f, np.array([8.0, 27.0])), [2.0, 3.0], rtol=1e-14)


def test_solve_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        solve_spd(cholesky_spd(np.eye(2)), np.ones(3))


@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_solve_matches_dense_inverse(d, seed):
    gen = np.random.default_rng(seed)
    m = random_spd(gen, d)
    r = gen.normal(size=d)
    f = cholesky_spd(m)
    np.testing.assert_allclose(f.matrix(), m, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(solve_spd(f, r), np.linalg.inv(m) @ r, rtol=1e-7, atol=1e-12)
    assert np.all(np.diag(f.lower) > 0)


def test_whiten_gives_quadratic_form():
    gen = np.random.default_rng(3)
    m = random_spd(gen, 4)
    x = gen.normal(size=(5, 4))
    w = whiten(cholesky_spd(m), x)
    np.testing.assert_allclose(np.sum(w * w, axis=1), np.einsum("ij,jk,ik->i", x, np.linalg.inv(m), x), rtol=1e-10)


# --- chi-square ---------------------------------------------------------------


def test_chi2_spot_values():
    # Independent bisection on scipy's regularized incomplete gamma.
    assert chi2_quantile(2, 0.95) == pytest.approx(bisect_chi2(2, 0.95), abs=1e-6)
    assert chi2_quantile(2, 0.95) == pytest.approx(5.99146, abs=1e-5)
    assert chi2_quantile(1, 0.5) == pytest.approx(0.454936, abs=1e-6)


@pytest.mark.parametrize("d", [1, 2, 8, 64, 768])
@pytest.mark.parametrize("p", [0.5, 0.9, 0.95, 0.99])
def test_chi2_round_trip(d, p):
    tau = chi2_quantile(d, p)
    assert chi2_cdf(tau, d) == pytest.approx(p, abs=1e-6)
    assert gammainc(d / 2, tau / 2) == pytest.approx(p, abs=1e-6)


@given(st.integers(1, 100), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_chi2_monotone(d, p, gap):
    assert chi2_quantile(d, p) < chi2_quantile(d, p + gap)


@given(st.floats(0.0, 200.0), st.integers(1, 200))
def test_chi2_cdf_matches_scipy(x, d):
    assert chi2_cdf(x, d) == pytest.approx(gammainc(d / 2, x / 2), abs=1e-10)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_chi2_domain(p):
    with pytest.raises(DomainError):
        chi2_quantile(3, p)


def test_chi2_bad_dof():
    with pytest.raises(DomainError):
        chi2_quantile(0, 0.5)


# --- random stream ------------------------------------------------------------


def test_stream_test_vector():
    s = RandomStream.from_seed(0)
    got = []
    for _ in range(3):
        v, s = stream_next(s)
        got.append(v)
    assert got == splitmix_oracle(0, 3)
    assert got == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(st.integers(0, M64))
def test_raw_matches_oracle(seed):
    raw, succ = RandomStream.from_seed(seed).raw(5)
    assert [int(v) for v in raw] == splitmix_oracle(seed, 5)
    assert stream_next(succ)[0] == splitmix_oracle(seed, 6)[5]


def test_stream_is_deterministic_and_immutable():
    s = RandomStream.from_seed(42)
    a, _ = s.uniform(10)
    b, _ = s.uniform(10)
    assert np.array_equal(a, b)


def test_children_differ():
    s = RandomStream.from_seed(7)
    assert stream_next(derive_child(s, 1))[0] != stream_next(derive_child(s, 2))[0]
    assert s.child(3).label == (3,)
    assert s.child(3) == s.child(3)


def test_uniform_mean_and_range():
    u, _ = RandomStream.from_seed(11).uniform(100_000)
    assert 0.0 <= u.min() and u.max() < 1.0
    assert 0.49 <= u.mean() <= 0.51
    again, _ = RandomStream.from_seed(11).uniform(100_000)
    assert np.array_equal(u, again)


def test_normal_moments():
    z, _ = RandomStream.from_seed(5).normal(20_001)
    assert z.shape == (20_001,)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


@given(st.integers(1, 200), st.data())
def test_choice_distinct(n, data):
    k = data.draw(st.integers(0, n))
    picked, _ = RandomStream.from_seed(n).choice(n, k)
    assert len(set(picked.tolist())) == k
    assert all(0 <= i < n for i in picked)
