"""Affine forward map, mostly useful for exactness tests."""

from __future__ import annotations

import numpy as np

from .base import ForwardModel


class LinearModel(ForwardModel):
    """``F(u) = A u + b`` with a constant Jacobian ``A``."""

    def __init__(self, matrix: np.ndarray, offset: np.ndarray | None = None):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2:
            raise ValueError("matrix must be two-dimensional")
        self.m, self.n = matrix.shape
        if offset is None:
            offset = np.zeros(self.m)
        offset = np.array(offset, dtype=float)
        if offset.shape != (self.m,):
            raise ValueError(f"offset must have shape ({self.m},), got {offset.shape}")
        matrix.flags.writeable = False
        offset.flags.writeable = False
        self._matrix = matrix
        self._offset = offset

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def offset(self) -> np.ndarray:
        return self._offset

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        u = self._check_input(u)
        return self._matrix @ u + self._offset

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        self._check_input(u)
        return self._matrix
