"""Chain diagnostics: autocorrelation, mixing times, posterior summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A normalized autocorrelation below this level is treated as noise, ending
# the summation window for the integrated autocorrelation time.
_ACF_CUTOFF = 0.05


def _as_chain(values) -> np.ndarray:
    chain = np.asarray(values, dtype=float).ravel()
    if chain.size < 4:
        raise ValueError(f"need at least 4 samples, got {chain.size}")
    if not np.all(np.isfinite(chain)):
        raise ValueError("chain contains non-finite values")
    return chain


def acf(values, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation estimates at lags ``0 .. max_lag``.

    Uses the full-chain mean at every lag and the ``1 / (N - j)`` covariance
    normalization, so ``acf(x, m)[0] == 1`` always.
    """
    chain = _as_chain(values)
    n = chain.size
    if not 0 <= max_lag < n:
        raise ValueError(f"max_lag must be in [0, {n - 1}], got {max_lag}")
    centered = chain - chain.mean()
    variance = float(centered @ centered) / n
    if variance == 0.0:
        raise ValueError("chain has zero variance")
    rho = np.empty(max_lag + 1)
    rho[0] = 1.0
    for lag in range(1, max_lag + 1):
        covariance = float(centered[:-lag] @ centered[lag:]) / (n - lag)
        rho[lag] = covariance / variance
    return rho


def iact(values) -> float:
    """Integrated autocorrelation time with an adaptive summation window.

    Sums ``1 + 2 * sum(rho[1..M])`` where ``M`` is the first lag at which the
    autocorrelation drops below 0.05 (that lag included), capped at one
    fiftieth of the chain length.  Effective sample size is
    ``len(chain) / iact(chain)``.
    """
    chain = _as_chain(values)
    cap = max(1, chain.size // 50)
    rho = acf(chain, cap)
    window = cap
    for lag in range(1, cap + 1):
        if rho[lag] < _ACF_CUTOFF:
            window = lag
            break
    return float(1.0 + 2.0 * rho[1 : window + 1].sum())


def ess(values) -> float:
    """Effective sample size: chain length over integrated autocorrelation time."""
    chain = _as_chain(values)
    return chain.size / iact(chain)


def credible_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed interval from linearly interpolated sample quantiles."""
    chain = np.asarray(values, dtype=float).ravel()
    if chain.size == 0:
        raise ValueError("empty chain")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    tail = 0.5 * (1.0 - level)
    lower, upper = np.quantile(chain, [tail, 1.0 - tail])
    return float(lower), float(upper)


@dataclass(frozen=True)
class ChainStats:
    """One scalar chain summarized for reporting."""

    mean: float
    std: float
    iact: float
    ess: float
    interval: tuple[float, float]
    level: float

    @classmethod
    def from_chain(cls, values, level: float = 0.95) -> "ChainStats":
        chain = _as_chain(values)
        tau = iact(chain)
        return cls(
            mean=float(chain.mean()),
            std=float(chain.std(ddof=1)),
            iact=tau,
            ess=chain.size / tau,
            interval=credible_interval(chain, level),
            level=level,
        )
