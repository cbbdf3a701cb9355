"""Steady-state diffusion in one dimension with a log-conductivity field.

The forward map solves ``-(exp(u) x')' = f`` on the unit interval with
homogeneous Dirichlet boundary conditions, using linear finite elements on the
same nodes that carry ``u``.  The conductivity of each element is
``exp`` of the midpoint value of ``u``, i.e. ``a_e = exp((u_e + u_{e+1}) / 2)``,
which keeps the stiffness matrix tridiagonal and the dependence on ``u``
smooth.  One experiment drives the rod with a set of point loads (one PDE
solve per load) and records the solution at a fixed set of interior stations;
the model output stacks the station readings load by load.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse import csr_array

from ..grids import Grid
from .base import ForwardModel

_EXP_GUARD = 700.0


def _interpolation_matrix(nodes: np.ndarray, stations: np.ndarray) -> csr_array:
    """Sparse operator taking nodal values to linearly interpolated station values."""
    n = nodes.shape[0]
    h = nodes[1] - nodes[0]
    element = np.clip(np.searchsorted(nodes, stations, side="right") - 1, 0, n - 2)
    weight = (stations - nodes[element]) / h
    rows = np.repeat(np.arange(stations.shape[0]), 2)
    cols = np.column_stack([element, element + 1]).ravel()
    vals = np.column_stack([1.0 - weight, weight]).ravel()
    return csr_array((vals, (rows, cols)), shape=(stations.shape[0], n))


class EllipticModel1D(ForwardModel):
    """Point-load diffusion experiments observed at interior stations.

    Parameters
    ----------
    grid:
        One-dimensional grid carrying the log-conductivity field.
    n_stations:
        Observation points ``j / (n_stations + 1)`` for ``j = 1..n_stations``,
        independent of the grid resolution.
    load_positions:
        Locations of the unit point sources; each is snapped to the nearest
        interior node and scaled by ``load_scale``.
    """

    def __init__(
        self,
        grid: Grid,
        *,
        n_stations: int = 63,
        load_positions: tuple[float, ...] = (1.0 / 3.0, 2.0 / 3.0),
        load_scale: float = 1000.0,
    ):
        if grid.dimension != 1:
            raise ValueError("EllipticModel1D requires a one-dimensional grid")
        if grid.n < 4:
            raise ValueError("grid must have at least 4 nodes")
        if n_stations < 1:
            raise ValueError("need at least one observation station")
        self.grid = grid
        self.n = grid.n
        self.n_loads = len(load_positions)
        self.m = n_stations * self.n_loads
        self.positive_output = False

        nodes = grid.nodes
        lo, hi = grid.bounds[0]
        self.stations = lo + (hi - lo) * np.arange(1, n_stations + 1) / (n_stations + 1)
        self._interp = _interpolation_matrix(nodes, self.stations)
        # Columns acting on interior nodes only; boundary values are pinned to zero.
        self._interp_interior = self._interp[:, 1:-1].toarray()

        load_nodes = []
        for pos in load_positions:
            idx = grid.nearest_node(pos)
            if idx <= 0 or idx >= grid.n - 1:
                raise ValueError(f"load position {pos} snaps to a boundary node")
            load_nodes.append(idx)
        self.load_nodes = tuple(load_nodes)
        loads = np.zeros((grid.n - 2, self.n_loads))
        for k, idx in enumerate(load_nodes):
            loads[idx - 1, k] = load_scale
        self._loads = loads

    def _factorized_stiffness(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Element conductivities and the banded Cholesky factor of the interior system."""
        if np.max(np.abs(u)) > _EXP_GUARD:
            raise ValueError("log-conductivity too large in magnitude; exp would overflow")
        h = self.grid.spacing
        conduct = np.exp(0.5 * (u[:-1] + u[1:]))
        band = np.zeros((2, self.n - 2))
        band[1] = (conduct[:-1] + conduct[1:]) / h
        band[0, 1:] = -conduct[1:-1] / h
        try:
            factor = cholesky_banded(band)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - requires exp underflow
            raise ValueError("stiffness matrix is not positive definite") from exc
        return conduct, factor

    def _solve_loads(self, factor: np.ndarray) -> np.ndarray:
        """Interior solutions, one column per load."""
        return cho_solve_banded((factor, False), self._loads)

    def _station_values(self, interior: np.ndarray) -> np.ndarray:
        return (self._interp_interior @ interior).T.ravel()

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        u = self._check_input(u)
        _, factor = self._factorized_stiffness(u)
        return self._station_values(self._solve_loads(factor))

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        return self.evaluate_with_jacobian(u)[1]

    def evaluate_with_jacobian(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = self._check_input(u)
        conduct, factor = self._factorized_stiffness(u)
        interior = self._solve_loads(factor)
        values = self._station_values(interior)

        # Adjoint assembly: with W = B^{-1} H^T, the sensitivity of station i to
        # u_j is -W[:, i]^T (dB/du_j) x, and dB/du_j only involves the one or two
        # elements adjacent to node j (each element's conductivity moves by a_e/2).
        h = self.grid.spacing
        adjoint = cho_solve_banded((factor, False), self._interp_interior.T)
        full_adjoint = np.zeros((self.n, adjoint.shape[1]))
        full_adjoint[1:-1] = adjoint
        adjoint_diff = full_adjoint[1:] - full_adjoint[:-1]

        n_stations = self._interp_interior.shape[0]
        jac = np.empty((self.m, self.n))
        for k in range(self.n_loads):
            solution = np.zeros(self.n)
            solution[1:-1] = interior[:, k]
            gradient = (solution[1:] - solution[:-1]) / h
            element_term = (0.5 * conduct * gradient)[:, None] * adjoint_diff
            jac_t = np.zeros((self.n, n_stations))
            jac_t[:-1] -= element_term
            jac_t[1:] -= element_term
            jac[k * n_stations : (k + 1) * n_stations] = jac_t.T
        return values, jac
