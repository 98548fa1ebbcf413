"""Feature-guided localization: clean token reference and Mahalanobis flagging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import btf
from .errors import (
    CorruptFile,
    DimensionMismatch,
    DomainError,
    EmptyInput,
    TooFewSamples,
    ValidationError,
)
from .numeric import RandomStream, SpdFactor, chi2_quantile, cholesky_spd, whiten

ANALYTIC = "analytic-chi2"
EMPIRICAL = "empirical-quantile"
AUTO = "auto"
_MODE_CODES = {ANALYTIC: 0.0, EMPIRICAL: 1.0}


@dataclass(frozen=True)
class ReferenceDistribution:
    mu: np.ndarray
    sigma_factor: SpdFactor
    epsilon: float
    tau_alpha: float
    alpha: float
    n_tokens: int
    threshold_mode: str

    @property
    def d(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class TokenBatch:
    tokens: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValidationError(f"token batch must be M x d with M >= 1, got {tokens.shape}")
        if not np.all(np.isfinite(tokens)):
            raise ValidationError("token batch contains non-finite values")
        object.__setattr__(self, "tokens", tokens)


@dataclass(frozen=True)
class AnomalySet:
    indices: np.ndarray
    scores: np.ndarray
    tau_alpha: float

    @property
    def size(self) -> int:
        return self.scores.shape[0]


def select_reference_episodes(
    success_ids: Sequence, fraction: float, rng: RandomStream
) -> list:
    """Sample ``ceil(fraction * n)`` ids without replacement."""
    if not len(success_ids):
        raise EmptyInput("no success episodes to sample a reference from")
    if not (0.0 < fraction <= 1.0):
        raise DomainError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(success_ids)
    # Guard against 0.2 * 100 evaluating to 20.000000000000004.
    k = min(n, math.ceil(round(fraction * n, 9)))
    picked, _ = rng.choice(n, k)
    return [success_ids[i] for i in picked]


def default_epsilon(reference_tokens: np.ndarray) -> float:
    """Scale-relative ridge: 1e-3 times the mean per-dimension variance."""
    z = np.asarray(reference_tokens, dtype=np.float64)
    trace = float(np.sum(np.var(z, axis=0, ddof=1)))
    eps = 1e-3 * trace / z.shape[1]
    return eps if eps > 0 else 1e-12


def resolve_mode(mode: str, n: int, d: int) -> str:
    if mode == AUTO:
        return EMPIRICAL if n >= 20 * d else ANALYTIC
    if mode not in _MODE_CODES:
        raise DomainError(f"unknown threshold mode {mode!r}")
    return mode


def fit_reference(
    reference_tokens: np.ndarray,
    epsilon: float | None = None,
    alpha: float = 0.05,
    threshold_mode: str = AUTO,
) -> ReferenceDistribution:
    """Mean, ridge covariance (divisor N-1) and acceptance threshold of clean tokens."""
    z = np.asarray(reference_tokens, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionMismatch(f"reference tokens must be N x d, got {z.shape}")
    n, d = z.shape
    if n < 2:
        raise TooFewSamples(f"need at least 2 reference tokens, got {n}")
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if epsilon is None:
        epsilon = default_epsilon(z)
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    mode = resolve_mode(threshold_mode, n, d)

    mu = z.mean(axis=0)
    centered = z - mu
    sigma = centered.T @ centered / (n - 1) + epsilon * np.eye(d)
    sigma = 0.5 * (sigma + sigma.T)
    factor = cholesky_spd(sigma)

    if mode == ANALYTIC:
        tau = chi2_quantile(d, 1.0 - alpha)
    else:
        in_sample = np.sum(whiten(factor, centered) ** 2, axis=1)
        tau = float(np.quantile(in_sample, 1.0 - alpha))
    return ReferenceDistribution(mu, factor, float(epsilon), float(tau), float(alpha), n, mode)


def mahalanobis_scores(ref: ReferenceDistribution, batch: TokenBatch | np.ndarray) -> np.ndarray:
    tokens = batch.tokens if isinstance(batch, TokenBatch) else np.atleast_2d(batch)
    if tokens.shape[1] != ref.d:
        raise DimensionMismatch(f"tokens have dimension {tokens.shape[1]}, reference has {ref.d}")
    w = whiten(ref.sigma_factor, tokens - ref.mu)
    return np.sum(w * w, axis=1)


def flag_anomalies(ref: ReferenceDistribution, batch: TokenBatch | np.ndarray) -> AnomalySet:
    scores = mahalanobis_scores(ref, batch)
    # Strict inequality: a score exactly at the threshold is accepted as clean.
    indices = np.flatnonzero(scores > ref.tau_alpha)
    return AnomalySet(indices, scores, ref.tau_alpha)


def save_reference(ref: ReferenceDistribution, path: str | Path) -> None:
    """Sections in order: mu, sigma_lower, scalars.

    scalars = [epsilon, tau_alpha, alpha, d, n_tokens, mode_code] with
    mode_code 0 for the analytic chi-square threshold and 1 for empirical.
    """
    scalars = np.array(
        [ref.epsilon, ref.tau_alpha, ref.alpha, ref.d, ref.n_tokens, _MODE_CODES[ref.threshold_mode]]
    )
    btf.save_sections(path, {"mu": ref.mu, "sigma_lower": ref.sigma_factor.lower, "scalars": scalars})


def load_reference(path: str | Path) -> ReferenceDistribution:
    sections = btf.load_sections(path)
    try:
        mu, lower, scalars = sections["mu"], sections["sigma_lower"], sections["scalars"]
    except KeyError as exc:
        raise CorruptFile(f"reference file lacks section {exc}") from exc
    if scalars.shape != (6,) or mu.ndim != 1:
        raise CorruptFile("reference scalars/mean have the wrong shape")
    d = mu.shape[0]
    if lower.shape != (d, d) or int(scalars[3]) != d:
        raise CorruptFile("covariance factor does not match the mean dimension")
    mode = {v: k for k, v in _MODE_CODES.items()}.get(float(scalars[5]))
    if mode is None:
        raise CorruptFile(f"unknown threshold mode code {scalars[5]}")
    return ReferenceDistribution(
        mu=mu,
        sigma_factor=SpdFactor(lower),
        epsilon=float(scalars[0]),
        tau_alpha=float(scalars[1]),
        alpha=float(scalars[2]),
        n_tokens=int(scalars[4]),
        threshold_mode=mode,
    )
