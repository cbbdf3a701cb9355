"""Uniform finite-element grids on the unit interval and a square."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """A uniform discretization grid in one or two dimensions.

    In 1D the nodes are the ``n`` mesh points of an interval and the elements
    are the ``n - 1`` segments between consecutive nodes.  In 2D the domain is
    split into ``g x g`` square cells and the nodes sit at the cell centers;
    the elements of the tensor-product FEM are the squares spanned by four
    neighboring centers.  2D nodes are ordered x-fastest, i.e. node
    ``iy * g + ix`` sits at column ``ix``, row ``iy``.
    """

    dimension: int
    nodes: np.ndarray  # (n,) in 1D, (n, 2) in 2D
    spacing: float
    bounds: tuple[tuple[float, float], ...]
    shape: tuple[int, ...]

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def interval(cls, n: int, bounds: tuple[float, float] = (0.0, 1.0)) -> "Grid":
        """Uniform 1D mesh with ``n`` nodes including both endpoints."""
        if n < 2:
            raise ValueError(f"a 1D grid needs at least 2 nodes, got n={n}")
        lo, hi = float(bounds[0]), float(bounds[1])
        if not hi > lo:
            raise ValueError(f"degenerate interval [{lo}, {hi}]")
        nodes = np.linspace(lo, hi, n)
        return cls(
            dimension=1,
            nodes=nodes,
            spacing=(hi - lo) / (n - 1),
            bounds=((lo, hi),),
            shape=(n,),
        )

    @classmethod
    def square(
        cls, g: int, bounds: tuple[float, float] = (-15.0, 15.0)
    ) -> "Grid":
        """Regular ``g x g`` cell grid with nodes at the cell centers."""
        if g < 2:
            raise ValueError(f"a 2D grid needs at least 2 cells per side, got g={g}")
        lo, hi = float(bounds[0]), float(bounds[1])
        if not hi > lo:
            raise ValueError(f"degenerate square [{lo}, {hi}]^2")
        h = (hi - lo) / g
        centers = lo + h * (np.arange(g) + 0.5)
        xx, yy = np.meshgrid(centers, centers, indexing="xy")
        nodes = np.column_stack([xx.ravel(), yy.ravel()])
        return cls(
            dimension=2,
            nodes=nodes,
            spacing=h,
            bounds=((lo, hi), (lo, hi)),
            shape=(g, g),
        )

    def axis_coords(self) -> np.ndarray:
        """Cell-center coordinates along one axis of a 2D grid."""
        if self.dimension != 2:
            raise ValueError("axis_coords is defined for 2D grids only")
        g = self.shape[0]
        lo = self.bounds[0][0]
        return lo + self.spacing * (np.arange(g) + 0.5)

    def cell_edges(self) -> np.ndarray:
        """Cell boundary coordinates along one axis of a 2D grid (g + 1 values)."""
        if self.dimension != 2:
            raise ValueError("cell_edges is defined for 2D grids only")
        g = self.shape[0]
        lo, hi = self.bounds[0]
        return np.linspace(lo, hi, g + 1)

    def nearest_node(self, point: float | tuple[float, float]) -> int:
        """Index of the node closest to ``point``."""
        if self.dimension == 1:
            return int(np.argmin(np.abs(self.nodes - float(point))))
        p = np.asarray(point, dtype=float)
        return int(np.argmin(np.sum((self.nodes - p) ** 2, axis=1)))

    def center_node(self) -> int:
        """Node nearest the domain midpoint; the conventional scalar trace."""
        if self.dimension == 1:
            lo, hi = self.bounds[0]
            return self.nearest_node(0.5 * (lo + hi))
        mid = tuple(0.5 * (b[0] + b[1]) for b in self.bounds)
        return self.nearest_node(mid)
