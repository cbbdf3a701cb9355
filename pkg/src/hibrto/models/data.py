"""Ground-truth fields and synthetic data generation for the benchmarks."""

from __future__ import annotations

import numpy as np

from .base import ForwardModel

_POISSON_GUARD = 2.0**53


def elliptic_true_field(s: np.ndarray) -> np.ndarray:
    """Benchmark log-conductivity: a sine dip clipped at 1 on the outer thirds."""
    s = np.asarray(s, dtype=float)
    return np.minimum(1.0, 1.0 - 0.5 * np.sin(2.0 * np.pi * (s - 0.25)))


def pet_true_field(points: np.ndarray) -> np.ndarray:
    """Benchmark log-image: positive lobes of a separable sine product, zero elsewhere."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array")
    product = (
        0.5
        * np.pi
        * np.sin(0.1 * np.pi * (points[:, 0] - 15.0))
        * np.sin(0.1 * np.pi * (points[:, 1] - 15.0))
    )
    return np.maximum(0.0, product)


def generate_synthetic_data(
    model: ForwardModel,
    u_true: np.ndarray,
    *,
    kind: str,
    lam: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one data vector from the observation model at the true parameters.

    ``kind="gaussian"`` adds white noise of variance ``1/lam`` to ``F(u_true)``;
    ``kind="poisson"`` draws counts with mean ``lam * F(u_true)``.
    """
    if lam <= 0.0 or not np.isfinite(lam):
        raise ValueError(f"noise precision / exposure must be positive and finite, got {lam}")
    values = model.evaluate(np.asarray(u_true, dtype=float))
    if kind == "gaussian":
        return values + rng.standard_normal(model.m) / np.sqrt(lam)
    if kind == "poisson":
        intensity = lam * values
        if np.any(intensity < 0.0):
            raise ValueError("poisson intensities must be nonnegative")
        if np.any(intensity > _POISSON_GUARD):
            raise ValueError("poisson intensities exceed the exactly-representable count range")
        return rng.poisson(intensity).astype(float)
    raise ValueError(f"unknown observation kind {kind!r}; expected 'gaussian' or 'poisson'")
