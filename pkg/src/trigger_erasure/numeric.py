"""Numeric substrate: SPD factorization, chi-square quantiles and a seeded stream.

Everything here works on float64 numpy arrays. The random stream is a
counter-based splitmix64 generator with the constants published in
``docs/FORMATS.md`` so that outputs are bit-identical across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, DomainError, NotPositiveDefinite

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


# ---------------------------------------------------------------------------
# SPD linear algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpdFactor:
    """Lower-triangular Cholesky factor ``lower`` with ``lower @ lower.T == m``."""

    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def matrix(self) -> np.ndarray:
        return self.lower @ self.lower.T


def cholesky_spd(m: np.ndarray, sym_tol: float = 1e-10) -> SpdFactor:
    """Factor a symmetric positive-definite matrix.

    Raises NotPositiveDefinite on the first pivot that is not strictly positive.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    if np.max(np.abs(m - m.T)) > sym_tol:
        raise DimensionMismatch("matrix is not symmetric")
    d = m.shape[0]
    lower = np.zeros_like(m)
    for j in range(d):
        pivot = m[j, j] - lower[j, :j] @ lower[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefinite(f"pivot {j} is {pivot:.3e}")
        ljj = math.sqrt(pivot)
        lower[j, j] = ljj
        if j + 1 < d:
            lower[j + 1 :, j] = (m[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / ljj
    return SpdFactor(lower)


def solve_spd(f: SpdFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``M y = rhs`` for the factored matrix ``M``; rhs may be (d,) or (d, k)."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != f.dim:
        raise DimensionMismatch(f"rhs has leading extent {rhs.shape[0]}, factor has {f.dim}")
    y = solve_triangular(f.lower, rhs, lower=True)
    return solve_triangular(f.lower.T, y, lower=False)


def whiten(f: SpdFactor, rows: np.ndarray) -> np.ndarray:
    """Return ``L^{-1} r`` for each row r, so that squared norms are quadratic forms."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != f.dim:
        raise DimensionMismatch(f"rows have dimension {rows.shape[1]}, factor has {f.dim}")
    return solve_triangular(f.lower, rows.T, lower=True).T


# ---------------------------------------------------------------------------
# Chi-square distribution via the regularized incomplete gamma function
# ---------------------------------------------------------------------------

_EPS = 1e-16
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    # P(a, x) by its power series; converges quickly for x < a + 1.
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a: float, x: float) -> float:
    # Q(a, x) by the Lentz continued fraction; used for x >= a + 1.
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise DomainError("shape parameter must be positive")
    if x < 0:
        raise DomainError("x must be non-negative")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cont_frac(a, x)


def chi2_cdf(x: float, d: int) -> float:
    if x <= 0.0:
        return 0.0
    return gamma_p(0.5 * d, 0.5 * x)


def chi2_quantile(d: int, p: float) -> float:
    """Threshold tau with CDF_{chi2, d}(tau) = p, found by bisection."""
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise DomainError(f"degrees of freedom must be a positive integer, got {d!r}")
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")
    lo, hi = 0.0, max(1.0, float(d))
    while chi2_cdf(hi, d) < p:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, d) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Counter-based random stream (splitmix64)
# ---------------------------------------------------------------------------


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(MIX1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class RandomStream:
    """Immutable splitmix64 state; advancing returns a successor stream.

    ``label`` records the derivation path from the root seed and is purely
    informational; the state alone determines the output sequence.
    """

    state: int
    label: tuple[int, ...] = field(default=())

    @classmethod
    def from_seed(cls, seed: int) -> "RandomStream":
        return cls(int(seed) & MASK64, ())

    def next(self) -> tuple[int, "RandomStream"]:
        state = (self.state + GOLDEN) & MASK64
        return mix64(state), RandomStream(state, self.label)

    def child(self, label: int) -> "RandomStream":
        """Independent stream keyed by ``label`` (documented in FORMATS.md)."""
        key = mix64((int(label) * MIX2 + GOLDEN) & MASK64)
        return RandomStream(mix64(self.state ^ key), self.label + (int(label),))

    def raw(self, n: int) -> tuple[np.ndarray, "RandomStream"]:
        """The next ``n`` 64-bit outputs as a uint64 array, plus the successor."""
        k = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self.state) + k * np.uint64(GOLDEN)
        succ = RandomStream((self.state + n * GOLDEN) & MASK64, self.label)
        return _mix64_array(states), succ

    def uniform(self, n: int) -> tuple[np.ndarray, "RandomStream"]:
        """Floats in [0, 1) built from the top 53 bits of each output."""
        raw, succ = self.raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53, succ

    def normal(self, n: int) -> tuple[np.ndarray, "RandomStream"]:
        """Standard normals by Box-Muller over consecutive uniform pairs."""
        m = (n + 1) // 2
        u, succ = self.uniform(2 * m)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n], succ

    def permutation(self, n: int) -> tuple[np.ndarray, "RandomStream"]:
        raw, succ = self.raw(n)
        return np.argsort(raw, kind="stable"), succ

    def choice(self, n: int, k: int) -> tuple[np.ndarray, "RandomStream"]:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        perm, succ = self.permutation(n)
        return perm[:k], succ


def stream_next(s: RandomStream) -> tuple[int, RandomStream]:
    return s.next()


def derive_child(s: RandomStream, label: int) -> RandomStream:
    return s.child(label)


# Helpers that consume a throwaway child so call sites stay one-liners.


def uniforms(rng: RandomStream, n: int) -> np.ndarray:
    return rng.uniform(n)[0]


def normals(rng: RandomStream, n: int) -> np.ndarray:
    return rng.normal(n)[0]
