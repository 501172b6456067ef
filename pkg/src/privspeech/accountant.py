"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr

DEFAULT_ALPHAS: tuple[float, ...] = tuple([1 + x / 10.0 for x in range(1, 100)] + [float(a) for a in range(12, 64)])

_MAX_FRAC_TERMS = 1000

# reported instead of an epsilon when sigma = 0 (non-private baseline)
NO_DP = "no DP"


def _log_add(a: float, b: float) -> float:
    lo, hi = min(a, b), max(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def _log_comb(n: float, k: float) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    log_q, log_1mq = math.log(q), math.log1p(-q)
    for k in range(alpha + 1):
        term = _log_comb(alpha, k) + k * log_q + (alpha - k) * log_1mq + (k * k - k) / (2 * sigma ** 2)
        log_a = _log_add(log_a, term)
    return log_a


def _log_sub(a: float, b: float) -> float:
    """``log(exp(a) - exp(b))`` for ``a >= b``."""
    if b == -math.inf:
        return a
    if b > a:
        raise ValueError("log-space subtraction would go negative")
    if a == b:
        return -math.inf
    return a + math.log(-math.expm1(b - a))


def _comb_sign(alpha: float, i: int) -> int:
    # binom(alpha, i) = prod_{k<i} (alpha - k) / (k + 1); factors with k > alpha are negative
    negatives = sum(1 for k in range(i) if k > alpha)
    return -1 if negatives % 2 else 1


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Two half-line integrals split at z0, each expanded as a binomial series.
    # For fractional alpha the coefficients alternate in sign past i > alpha.
    log_a0 = log_a1 = -math.inf
    z0 = sigma ** 2 * math.log(1 / q - 1) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    for i in range(_MAX_FRAC_TERMS):
        coef = _log_comb(alpha, i)
        j = alpha - i
        t0 = coef + i * log_q + j * log_1mq
        t1 = coef + j * log_q + i * log_1mq
        e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        s0 = t0 + (i * i - i) / (2 * sigma ** 2) + e0
        s1 = t1 + (j * j - j) / (2 * sigma ** 2) + e1
        if _comb_sign(alpha, i) > 0:
            log_a0 = _log_add(log_a0, s0)
            log_a1 = _log_add(log_a1, s1)
        else:
            log_a0 = _log_sub(log_a0, s0)
            log_a1 = _log_sub(log_a1, s1)
        if max(s0, s1) < -30:
            return _log_add(log_a0, log_a1)
    return _log_a_interpolated(q, sigma, alpha)


def _log_a_interpolated(q: float, sigma: float, alpha: float) -> float:
    """Upper bound on ``log A(alpha)`` from the neighbouring integer orders.

    ``log A`` is convex in ``alpha`` with ``log A(1) = 0``, so the chord between
    ``floor(alpha)`` and ``ceil(alpha)`` lies above it. Used when the series
    tail decays too slowly (large ``q`` or small ``sigma``).
    """
    lo, hi = math.floor(alpha), math.ceil(alpha)
    f_lo = 0.0 if lo == 1 else _log_a_int(q, sigma, lo)
    f_hi = _log_a_int(q, sigma, hi)
    return f_lo + (alpha - lo) * (f_hi - f_lo)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP of order ``alpha`` for one step of the sampled Gaussian mechanism.

    ``sigma == 0`` returns ``inf``.
    """
    if alpha <= 1:
        raise ValueError("alpha must exceed 1")
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2 * sigma ** 2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, float(alpha))
    return max(0.0, log_a / (alpha - 1))


def compose(rdp_per_step: Sequence[float], steps: int) -> np.ndarray:
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    rdp = np.asarray(rdp_per_step, dtype=np.float64)
    if steps == 0:
        return np.zeros_like(rdp)
    return rdp * steps


@dataclass
class PrivacyLedger:
    """Composed RDP bookkeeping for a fixed ``(q, sigma, delta)``.

    The per-step curve depends only on the mechanism parameters; data, loss
    weights and feature processing never enter here.
    """

    q: float
    sigma: float
    delta: float = 1e-5
    steps: int = 0
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHAS
    rdp_per_step: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        grid = np.asarray(self.alpha_grid, dtype=np.float64)
        if grid.size == 0:
            raise ValueError("empty alpha grid")
        if np.any(grid <= 1) or np.any(np.diff(grid) <= 0):
            raise ValueError("alpha grid must be strictly increasing and > 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        self.alpha_grid = tuple(float(a) for a in grid)
        if self.rdp_per_step is None:
            self.rdp_per_step = np.array(
                [rdp_subsampled_gaussian(self.q, self.sigma, a) for a in self.alpha_grid]
            )

    @property
    def private(self) -> bool:
        return self.sigma > 0

    def record(self, n: int = 1) -> None:
        self.steps += n

    def total_rdp(self) -> np.ndarray:
        return compose(self.rdp_per_step, self.steps)

    def epsilon(self) -> float:
        return to_epsilon(self)[0]

    def to_dict(self) -> dict:
        eps, alpha = to_epsilon(self)
        return {
            "q": self.q, "sigma": self.sigma, "delta": self.delta, "steps": self.steps,
            "epsilon": eps if self.private else NO_DP, "best_alpha": alpha if self.private else None,
            "dp": self.private,
        }


def epsilon_from_rdp(rdp_total: np.ndarray, alphas: Sequence[float], delta: float) -> tuple[float, float]:
    """Improved RDP-to-(eps, delta) conversion minimized over the order grid."""
    a = np.asarray(alphas, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty alpha grid")
    with np.errstate(invalid="ignore"):
        eps = rdp_total + np.log1p(-1.0 / a) - (math.log(delta) + np.log(a)) / (a - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    i = int(np.argmin(eps))
    return max(0.0, float(eps[i])), float(a[i])


def to_epsilon(ledger: PrivacyLedger) -> tuple[float, float]:
    """``(epsilon, best_alpha)``; zero steps spend nothing."""
    if ledger.steps == 0:
        return 0.0, float(ledger.alpha_grid[0])
    return epsilon_from_rdp(ledger.total_rdp(), ledger.alpha_grid, ledger.delta)


def compute_epsilon(q: float, sigma: float, steps: int, delta: float = 1e-5,
                    alpha_grid: Sequence[float] = DEFAULT_ALPHAS) -> tuple[float, float]:
    return to_epsilon(PrivacyLedger(q, sigma, delta, steps, tuple(alpha_grid)))


def epsilon_curve(q: float, sigma: float, delta: float, steps_per_epoch: int, epochs: int,
                  alpha_grid: Sequence[float] = DEFAULT_ALPHAS) -> list[float]:
    """Epsilon after each epoch ``0..epochs`` (index 0 is before training)."""
    ledger = PrivacyLedger(q, sigma, delta, 0, tuple(alpha_grid))
    out = []
    for e in range(epochs + 1):
        ledger.steps = e * steps_per_epoch
        out.append(to_epsilon(ledger)[0])
    return out
