"""Common interface for nonlinear forward maps."""

from __future__ import annotations

import abc

import numpy as np


class ForwardModel(abc.ABC):
    """A differentiable map from an ``n``-vector of parameters to ``m`` observables.

    Subclasses set ``n`` and ``m`` in their constructor and implement
    :meth:`evaluate` and :meth:`jacobian`.  Models whose output is strictly
    positive (and therefore usable as a Poisson intensity) should set
    ``positive_output = True`` and, when the log-output admits a more stable
    closed form, override :meth:`log_evaluate` / :meth:`log_jacobian`.
    """

    n: int
    m: int
    positive_output: bool = False

    @abc.abstractmethod
    def evaluate(self, u: np.ndarray) -> np.ndarray:
        """Return the model output ``F(u)`` as an ``(m,)`` array."""

    @abc.abstractmethod
    def jacobian(self, u: np.ndarray) -> np.ndarray:
        """Return the ``(m, n)`` Jacobian of :meth:`evaluate` at ``u``."""

    def evaluate_with_jacobian(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(F(u), J(u))``, sharing work between the two when possible."""
        return self.evaluate(u), self.jacobian(u)

    def log_evaluate(self, u: np.ndarray) -> np.ndarray:
        """Return ``log F(u)`` elementwise; requires a strictly positive output."""
        values = self.evaluate(u)
        if np.any(values <= 0.0):
            raise ValueError("model output is not strictly positive; log is undefined")
        return np.log(values)

    def log_jacobian(self, u: np.ndarray) -> np.ndarray:
        """Return the Jacobian of :meth:`log_evaluate`, i.e. ``diag(1/F) J``."""
        values, jac = self.evaluate_with_jacobian(u)
        if np.any(values <= 0.0):
            raise ValueError("model output is not strictly positive; log is undefined")
        return jac / values[:, None]

    def _check_input(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n,):
            raise ValueError(f"expected parameter vector of shape ({self.n},), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("parameter vector contains non-finite entries")
        return u
