"""Attenuation tomography on a square pixel grid.

Rays are cast from point sources outside the domain, and each detector reads
the surviving beam intensity ``exp(-line integral of exp(u))`` along its ray.
The line integrals are exact for piecewise-constant images: a ray's
contribution to pixel ``j`` is the chord length of the ray inside that pixel,
collected in a system matrix ``B`` so that ``F(u) = exp(-B exp(u))``.

Path lengths enter the exponent in units of an *attenuation length*: the
distance over which unit-density material (``u = 0``) dims a beam by ``1/e``.
``PetModel2D.build`` defaults that length to the domain width, so one full
crossing of an empty domain costs one e-fold regardless of the coordinate
units the domain happens to be expressed in.  Without this normalization a
wide domain (the default is 30 units across) would attenuate every beam to
numerically-zero survival, and all counting data would degenerate to zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..grids import Grid
from .base import ForwardModel

_EXP_GUARD = 700.0


@dataclass(frozen=True)
class PetGeometry:
    """Ray layout for a scan: per-ray source points, unit directions, detectors.

    ``fan_beam`` builds the default layout: sources equally spaced on an arc
    of a circle enclosing the domain, each emitting a fan of rays that spans
    the angular extent of the domain as seen from that source (with the two
    extreme rays inset by one angular spacing so every ray crosses the
    domain).  Detector positions record where each ray exits the source
    circle; they are metadata only and do not affect the measurements.
    """

    sources: np.ndarray
    directions: np.ndarray
    detectors: np.ndarray
    n_sources: int = field(default=0)
    rays_per_source: int = field(default=0)

    def __post_init__(self):
        for name in ("sources", "directions", "detectors"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ValueError(f"{name} must be an (n_rays, 2) array")
            object.__setattr__(self, name, arr)
        if not (self.sources.shape == self.directions.shape == self.detectors.shape):
            raise ValueError("sources, directions, detectors must have matching shapes")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("directions must be unit vectors")

    @property
    def n_rays(self) -> int:
        return self.sources.shape[0]

    @classmethod
    def fan_beam(
        cls,
        bounds: tuple[float, float] = (-15.0, 15.0),
        *,
        n_sources: int = 10,
        rays_per_source: int = 40,
        radius: float = 22.0,
        arc_deg: float = 120.0,
        center_deg: float = 90.0,
    ) -> "PetGeometry":
        lo, hi = bounds
        mid = 0.5 * (lo + hi)
        half_diagonal = (hi - lo) / np.sqrt(2.0)
        if radius <= half_diagonal:
            raise ValueError(
                f"source radius {radius} must exceed the domain half-diagonal {half_diagonal:.3f}"
            )
        if n_sources < 2 or rays_per_source < 1:
            raise ValueError("need at least 2 sources and 1 ray per source")

        source_angles = np.deg2rad(center_deg) + np.deg2rad(arc_deg) * (
            np.arange(n_sources) / (n_sources - 1) - 0.5
        )
        corners = np.array([[lo, lo], [lo, hi], [hi, lo], [hi, hi]], dtype=float)

        sources, directions, detectors = [], [], []
        for phi in source_angles:
            src = np.array([mid + radius * np.cos(phi), mid + radius * np.sin(phi)])
            to_center = np.arctan2(mid - src[1], mid - src[0])
            rel = np.arctan2(corners[:, 1] - src[1], corners[:, 0] - src[0]) - to_center
            rel = (rel + np.pi) % (2.0 * np.pi) - np.pi
            fan = np.linspace(rel.min(), rel.max(), rays_per_source + 2)[1:-1]
            angles = to_center + fan
            dirs = np.column_stack([np.cos(angles), np.sin(angles)])
            # Second intersection with the source circle: with |src - mid| = R the
            # quadratic in t reduces to t = -2 (src - mid) . d.
            travel = -2.0 * (dirs @ (src - mid))
            dets = src[None, :] + travel[:, None] * dirs
            sources.append(np.repeat(src[None, :], rays_per_source, axis=0))
            directions.append(dirs)
            detectors.append(dets)

        return cls(
            sources=np.concatenate(sources),
            directions=np.concatenate(directions),
            detectors=np.concatenate(detectors),
            n_sources=n_sources,
            rays_per_source=rays_per_source,
        )


def trace_ray(
    grid: Grid, origin: np.ndarray, direction: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chord lengths of a ray through the pixels of a 2-d grid.

    Returns ``(cells, lengths)`` for the consecutive segments of the ray inside
    the domain (a cell index may repeat if crossings coincide at a corner).
    Both arrays are empty when the ray misses the domain.
    """
    if grid.dimension != 2:
        raise ValueError("trace_ray requires a two-dimensional grid")
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        raise ValueError("direction must be nonzero")
    direction = direction / norm

    lo, hi = grid.bounds[0]
    g = grid.shape[0]
    empty = (np.empty(0, dtype=np.int64), np.empty(0))

    # Slab clipping against the square domain; the ray is a half-line, so the
    # domain is only reached for parameters t >= 0.
    t_enter, t_exit = 0.0, np.inf
    for axis in range(2):
        d, o = direction[axis], origin[axis]
        if abs(d) < 1e-14:
            if not (lo <= o <= hi):
                return empty
        else:
            ta, tb = (lo - o) / d, (hi - o) / d
            t_enter = max(t_enter, min(ta, tb))
            t_exit = min(t_exit, max(ta, tb))
    if not t_exit - t_enter > 1e-12:
        return empty

    edges = grid.cell_edges()
    crossings = [np.array([t_enter, t_exit])]
    for axis in range(2):
        d = direction[axis]
        if abs(d) >= 1e-14:
            t = (edges - origin[axis]) / d
            crossings.append(t[(t > t_enter) & (t < t_exit)])
    breaks = np.unique(np.concatenate(crossings))

    lengths = np.diff(breaks)
    midpoints = origin[None, :] + (0.5 * (breaks[:-1] + breaks[1:]))[:, None] * direction[None, :]
    h = grid.spacing
    ix = np.clip(((midpoints[:, 0] - lo) / h).astype(np.int64), 0, g - 1)
    iy = np.clip(((midpoints[:, 1] - lo) / h).astype(np.int64), 0, g - 1)
    keep = lengths > 0.0
    return (iy * g + ix)[keep], lengths[keep]


class PetSystem(NamedTuple):
    matrix: np.ndarray
    missed_rays: np.ndarray


def pet_system_matrix(geometry: PetGeometry, grid: Grid) -> PetSystem:
    """Assemble the dense ray/pixel chord-length matrix.

    Rays that never intersect the domain produce all-zero rows; their indices
    are returned in ``missed_rays`` so callers can surface the problem.
    """
    matrix = np.zeros((geometry.n_rays, grid.n))
    missed = []
    for i in range(geometry.n_rays):
        cells, lengths = trace_ray(grid, geometry.sources[i], geometry.directions[i])
        if cells.size == 0:
            missed.append(i)
        else:
            np.add.at(matrix[i], cells, lengths)
    return PetSystem(matrix=matrix, missed_rays=np.asarray(missed, dtype=np.int64))


class PetModel2D(ForwardModel):
    """Beam-survival measurements ``F(u) = exp(-B exp(u))`` for an image ``u``.

    ``system_matrix`` is taken in chord-length units and divided by
    ``attenuation_length`` on construction, so the stored ``self.system_matrix``
    holds dimensionless optical depths per unit density.  The default length of
    1 leaves hand-built matrices untouched; ``build`` picks the domain width.
    """

    def __init__(
        self,
        system_matrix: np.ndarray,
        grid: Grid,
        geometry: PetGeometry | None = None,
        *,
        attenuation_length: float = 1.0,
    ):
        system_matrix = np.asarray(system_matrix, dtype=float)
        if system_matrix.ndim != 2 or system_matrix.shape[1] != grid.n:
            raise ValueError(
                f"system matrix must have shape (n_rays, {grid.n}), got {system_matrix.shape}"
            )
        if np.any(system_matrix < 0.0):
            raise ValueError("system matrix must be nonnegative")
        if not (np.isfinite(attenuation_length) and attenuation_length > 0.0):
            raise ValueError(f"attenuation length must be positive, got {attenuation_length}")
        self.attenuation_length = float(attenuation_length)
        self.system_matrix = system_matrix / self.attenuation_length
        self.grid = grid
        self.geometry = geometry
        self.m, self.n = system_matrix.shape
        self.positive_output = True

    @classmethod
    def build(
        cls,
        grid: Grid,
        geometry: PetGeometry | None = None,
        *,
        attenuation_length: float | None = None,
    ) -> "PetModel2D":
        if geometry is None:
            geometry = PetGeometry.fan_beam(grid.bounds[0])
        if attenuation_length is None:
            lo, hi = grid.bounds[0]
            attenuation_length = hi - lo
        system = pet_system_matrix(geometry, grid)
        return cls(system.matrix, grid, geometry, attenuation_length=attenuation_length)

    def _image(self, u: np.ndarray) -> np.ndarray:
        u = self._check_input(u)
        if np.max(u) > _EXP_GUARD:
            raise ValueError("image values too large; exp would overflow")
        return np.exp(u)

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        return np.exp(self.log_evaluate(u))

    def log_evaluate(self, u: np.ndarray) -> np.ndarray:
        return -(self.system_matrix @ self._image(u))

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        image = self._image(u)
        values = np.exp(-(self.system_matrix @ image))
        return -values[:, None] * self.system_matrix * image[None, :]

    def log_jacobian(self, u: np.ndarray) -> np.ndarray:
        return -self.system_matrix * self._image(u)[None, :]

    def evaluate_with_jacobian(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        image = self._image(u)
        values = np.exp(-(self.system_matrix @ image))
        return values, -values[:, None] * self.system_matrix * image[None, :]
