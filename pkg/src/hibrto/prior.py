"""SPDE-driven Gaussian prior: FEM operators, precision factors, sampling.

The prior field is the solution of a stochastic screened-Poisson equation
discretized with piecewise-linear (1D) or bilinear tensor-product (2D)
elements and row-sum mass lumping.  With lumped mass ``Mbar``, stiffness
``K``, and correlation parameter ``gamma > 0`` the precision matrix is

* 1D:  ``P = gamma * Mbar + K``
* 2D:  ``P = (gamma * Mbar + K) Mbar^{-1} (gamma * Mbar + K)``

and the prior is ``N(m, (delta * P)^{-1})``.  The generalized eigenvalues
``chi`` of ``Mbar^{-1} K`` are computed once per operator set, which makes
every log-determinant an O(n) sum: ``log det P`` equals
``log det Mbar + sum(log(chi + gamma))`` in 1D and has twice the eigenvalue
sum in 2D.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from hibrto.grids import Grid

# Relative clamp threshold for generalized stiffness eigenvalues.  The spectra
# scale like 4/h^2, so round-off from the dense symmetric eigensolver must be
# judged relative to the largest eigenvalue, not on an absolute scale.
_EIG_CLAMP_RTOL = 1e-10


@dataclass(frozen=True)
class PriorOperators:
    """Assembled FEM operators plus the precomputed generalized spectrum."""

    dimension: int
    mbar: np.ndarray  # diagonal of the lumped mass matrix, (n,)
    stiffness: sp.csr_array  # symmetric positive semidefinite, n x n
    chi: np.ndarray  # eigenvalues of Mbar^{-1} K, ascending, clamped >= 0
    grid: Grid | None = None

    @property
    def n(self) -> int:
        return self.mbar.shape[0]

    @cached_property
    def logdet_mbar(self) -> float:
        return float(np.sum(np.log(self.mbar)))

    @cached_property
    def _mbar_inv(self) -> np.ndarray:
        return 1.0 / self.mbar

    @classmethod
    def from_matrices(
        cls,
        mbar: np.ndarray,
        stiffness: np.ndarray | sp.sparray | sp.spmatrix,
        dimension: int = 1,
        grid: Grid | None = None,
    ) -> "PriorOperators":
        """Build operators from explicit matrices (checked, spectrum computed).

        This is the single entry point for every prior in the package —
        ``assemble_fem_operators`` funnels through it, and tests can feed
        hand-made matrices (identity mass, random stiffness) so that exactly
        one code path is exercised everywhere.
        """
        if dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {dimension}")
        mbar = np.asarray(mbar, dtype=float).ravel()
        n = mbar.shape[0]
        if n < 1:
            raise ValueError("empty mass diagonal")
        if not np.all(np.isfinite(mbar)) or np.any(mbar <= 0.0):
            raise ValueError("lumped mass diagonal must be finite and positive")
        k_sp = sp.csr_array(stiffness)
        if k_sp.shape != (n, n):
            raise ValueError(
                f"stiffness shape {k_sp.shape} does not match mass size {n}"
            )
        asym = abs(k_sp - k_sp.T)
        scale = max(1.0, float(abs(k_sp).max()) if k_sp.nnz else 0.0)
        if asym.nnz and float(asym.max()) > 1e-12 * scale:
            raise ValueError("stiffness matrix is not symmetric")

        # Generalized eigenvalues of Mbar^{-1} K via the symmetric whitening
        # Mbar^{-1/2} K Mbar^{-1/2}; dense is fine at the sizes we assemble.
        rs = 1.0 / np.sqrt(mbar)
        b = (k_sp.toarray() * rs[None, :]) * rs[:, None]
        chi = scipy.linalg.eigh(b, eigvals_only=True)
        clamp = _EIG_CLAMP_RTOL * max(1.0, float(chi[-1]) if n else 1.0)
        if chi[0] < -clamp:
            raise ValueError(
                f"stiffness matrix is indefinite: min eigenvalue {chi[0]:.3e}"
            )
        chi = np.clip(chi, 0.0, None)
        return cls(
            dimension=dimension, mbar=mbar, stiffness=k_sp, chi=chi, grid=grid
        )


def _interval_operators(n: int, h: float) -> tuple[np.ndarray, sp.csr_array, sp.csr_array]:
    """Lumped mass diagonal, stiffness, and consistent mass on a uniform mesh."""
    main_k = np.full(n, 2.0 / h)
    main_k[0] = main_k[-1] = 1.0 / h
    off_k = np.full(n - 1, -1.0 / h)
    stiffness = sp.diags_array([off_k, main_k, off_k], offsets=[-1, 0, 1]).tocsr()

    main_m = np.full(n, 2.0 * h / 3.0)
    main_m[0] = main_m[-1] = h / 3.0
    off_m = np.full(n - 1, h / 6.0)
    consistent = sp.diags_array([off_m, main_m, off_m], offsets=[-1, 0, 1]).tocsr()

    mbar = np.full(n, h)
    mbar[0] = mbar[-1] = h / 2.0
    return mbar, stiffness, consistent


def assemble_fem_operators(grid: Grid) -> PriorOperators:
    """Assemble lumped mass and stiffness for a grid and compute the spectrum.

    1D uses piecewise-linear elements on the interval mesh.  2D uses bilinear
    tensor-product elements on the square spanned by the cell centers, so both
    matrices are Kronecker combinations of the 1D factors and the row-sum
    lumped mass is the Kronecker product of the 1D lumped masses.
    """
    if grid.spacing <= 0.0 or not np.isfinite(grid.spacing):
        raise ValueError(f"degenerate element size {grid.spacing}")
    if grid.dimension == 1:
        mbar, stiffness, _ = _interval_operators(grid.n, grid.spacing)
        return PriorOperators.from_matrices(mbar, stiffness, dimension=1, grid=grid)

    g = grid.shape[0]
    mbar1, k1, m1 = _interval_operators(g, grid.spacing)
    stiffness = (sp.kron(k1, m1) + sp.kron(m1, k1)).tocsr()
    mbar = np.kron(mbar1, mbar1)
    return PriorOperators.from_matrices(mbar, stiffness, dimension=2, grid=grid)


def precision_matrix(ops: PriorOperators, gamma: float) -> sp.csr_array:
    """The prior precision (without the delta scale) as a sparse matrix."""
    if not np.isfinite(gamma) or gamma <= 0.0:
        raise ValueError(f"gamma must be positive and finite, got {gamma}")
    mbar = sp.diags_array([ops.mbar], offsets=[0])
    if ops.dimension == 1:
        return (gamma * mbar + ops.stiffness).tocsr()
    k = ops.stiffness
    k_mk = (k @ sp.diags_array([ops._mbar_inv], offsets=[0])) @ k
    return (gamma**2 * mbar + 2.0 * gamma * k + k_mk).tocsr()


def prior_logdet(ops: PriorOperators, gamma: float) -> float:
    """``log det P_gamma`` from the cached spectrum, O(n)."""
    if not np.isfinite(gamma) or gamma <= 0.0:
        raise ValueError(f"gamma must be positive and finite, got {gamma}")
    eig_sum = float(np.sum(np.log(ops.chi + gamma)))
    if ops.dimension == 1:
        return ops.logdet_mbar + eig_sum
    return ops.logdet_mbar + 2.0 * eig_sum


@dataclass(frozen=True)
class PriorModel:
    """A concrete Gaussian prior ``N(mean, (delta * P_gamma)^{-1})``."""

    operators: PriorOperators
    mean: np.ndarray
    delta: float
    gamma: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.delta) and self.delta > 0.0):
            raise ValueError(f"delta must be positive and finite, got {self.delta}")
        if not (np.isfinite(self.gamma) and self.gamma > 0.0):
            raise ValueError(f"gamma must be positive and finite, got {self.gamma}")
        if self.mean.shape != (self.operators.n,):
            raise ValueError(
                f"mean has shape {self.mean.shape}, expected ({self.operators.n},)"
            )

    @cached_property
    def factor(self) -> "PrecisionFactor":
        return PrecisionFactor(self.operators, self.delta, self.gamma)


class _BandedUpper:
    """Upper-banded matrix ``R`` stored in LAPACK band layout.

    ``rows[u + i - j, j]`` holds ``R[i, j]`` for ``0 <= j - i <= u``.  Used for
    the Cholesky factors of banded operators, where both products and
    triangular solves with ``R`` and ``R^T`` are needed.
    """

    def __init__(self, rows: np.ndarray):
        self.rows = rows
        self.u = rows.shape[0] - 1
        self.n = rows.shape[1]

    @property
    def diag(self) -> np.ndarray:
        return self.rows[-1]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = self.diag.reshape((-1,) + (1,) * (x.ndim - 1)) * x
        for k in range(1, self.u + 1):
            band = self.rows[self.u - k, k:]
            out[: self.n - k] += (
                band.reshape((-1,) + (1,) * (x.ndim - 1)) * x[k:]
            )
        return out

    def tmatvec(self, x: np.ndarray) -> np.ndarray:
        out = self.diag.reshape((-1,) + (1,) * (x.ndim - 1)) * x
        for k in range(1, self.u + 1):
            band = self.rows[self.u - k, k:]
            out[k:] += band.reshape((-1,) + (1,) * (x.ndim - 1)) * x[: self.n - k]
        return out

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_banded((0, self.u), self.rows, b)

    def tsolve(self, b: np.ndarray) -> np.ndarray:
        lower = np.zeros_like(self.rows)
        for k in range(self.u + 1):
            lower[k, : self.n - k] = self.rows[self.u - k, k:]
        return scipy.linalg.solve_banded((self.u, 0), lower, b)


def _sparse_to_banded_upper(a: sp.csr_array, bandwidth: int) -> np.ndarray:
    rows = np.zeros((bandwidth + 1, a.shape[0]))
    coo = a.tocoo()
    mask = coo.col >= coo.row
    i, j, v = coo.row[mask], coo.col[mask], coo.data[mask]
    rows[bandwidth + i - j, j] = v
    return rows


def _bandwidth(a: sp.csr_array) -> int:
    coo = a.tocoo()
    if coo.nnz == 0:
        return 0
    return int(np.max(np.abs(coo.row - coo.col)))


class PrecisionFactor:
    """A factor ``C`` with ``C^T C = delta * P_gamma`` and its solves.

    Any such factor whitens the prior: ``C @ (u - m)`` is standard normal
    under the prior, and sampling is ``m + C^{-1} xi``.  Three layouts are
    used, picked automatically:

    * 1D banded: ``C = sqrt(delta) * R`` with ``R`` the banded Cholesky factor
      of ``gamma * Mbar + K`` (tridiagonal for the FEM assembly);
    * 2D banded: ``C = sqrt(delta) * Mbar^{-1/2} A`` with
      ``A = gamma * Mbar + K``, whose solves go through A's banded Cholesky;
    * dense Cholesky of the full precision for anything without useful
      band structure.
    """

    def __init__(self, ops: PriorOperators, delta: float, gamma: float):
        if not (np.isfinite(delta) and delta > 0.0):
            raise ValueError(f"delta must be positive and finite, got {delta}")
        if not (np.isfinite(gamma) and gamma > 0.0):
            raise ValueError(f"gamma must be positive and finite, got {gamma}")
        self.ops = ops
        self.delta = float(delta)
        self.gamma = float(gamma)
        self.n = ops.n
        self._sqrt_delta = np.sqrt(self.delta)

        a = (sp.diags_array([gamma * ops.mbar], offsets=[0]) + ops.stiffness).tocsr()
        bw = _bandwidth(a)
        banded_wins = ops.n >= 8 and (bw + 1) ** 2 < ops.n
        self._mode: str
        if ops.dimension == 1 and banded_wins:
            self._mode = "banded1d"
        elif ops.dimension == 2 and banded_wins:
            self._mode = "banded2d"
        else:
            self._mode = "dense"

        if self._mode == "dense":
            p = precision_matrix(ops, gamma).toarray()
            try:
                r = scipy.linalg.cholesky(p, lower=False)
            except scipy.linalg.LinAlgError as exc:
                raise ValueError(
                    f"prior precision is not positive definite at gamma={gamma}"
                ) from exc
            self._r_dense = r
            self._half_logdet_p = float(np.sum(np.log(np.diag(r))))
            return

        ab = _sparse_to_banded_upper(a, bw)
        try:
            chol = scipy.linalg.cholesky_banded(ab, lower=False)
        except scipy.linalg.LinAlgError as exc:
            raise ValueError(
                f"banded factorization failed at gamma={gamma}"
            ) from exc
        self._chol_a = _BandedUpper(chol)
        if self._mode == "banded1d":
            self._half_logdet_p = float(np.sum(np.log(self._chol_a.diag)))
        else:
            self._a = a
            self._msqrt = np.sqrt(ops.mbar)
            # log det P = 2 log det A - log det Mbar for the squared form.
            self._half_logdet_p = float(
                2.0 * np.sum(np.log(self._chol_a.diag)) - 0.5 * ops.logdet_mbar
            )

    @property
    def logdet_precision(self) -> float:
        """``log det(delta * P_gamma)``."""
        return self.n * np.log(self.delta) + 2.0 * self._half_logdet_p

    def _col_shape(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        if arr.shape[0] != self.n:
            raise ValueError(f"leading dimension {arr.shape[0]} != n = {self.n}")
        return arr

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = self._col_shape(x)
        if self._mode == "banded1d":
            return self._sqrt_delta * self._chol_a.matvec(x.copy())
        if self._mode == "banded2d":
            scale = self._msqrt.reshape((-1,) + (1,) * (x.ndim - 1))
            return self._sqrt_delta * (self._a @ x) / scale
        return self._sqrt_delta * (self._r_dense @ x)

    def tmatvec(self, x: np.ndarray) -> np.ndarray:
        x = self._col_shape(x)
        if self._mode == "banded1d":
            return self._sqrt_delta * self._chol_a.tmatvec(x.copy())
        if self._mode == "banded2d":
            scale = self._msqrt.reshape((-1,) + (1,) * (x.ndim - 1))
            return self._sqrt_delta * (self._a @ (x / scale))
        return self._sqrt_delta * (self._r_dense.T @ x)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """``C^{-1} b``."""
        b = self._col_shape(b)
        if self._mode == "banded1d":
            return self._chol_a.solve(b) / self._sqrt_delta
        if self._mode == "banded2d":
            scale = self._msqrt.reshape((-1,) + (1,) * (b.ndim - 1))
            rhs = scale * b
            x = scipy.linalg.cho_solve_banded((self._chol_a.rows, False), rhs)
            return x / self._sqrt_delta
        return (
            scipy.linalg.solve_triangular(self._r_dense, b, lower=False)
            / self._sqrt_delta
        )

    def tsolve(self, b: np.ndarray) -> np.ndarray:
        """``C^{-T} b``."""
        b = self._col_shape(b)
        if self._mode == "banded1d":
            return self._chol_a.tsolve(b) / self._sqrt_delta
        if self._mode == "banded2d":
            x = scipy.linalg.cho_solve_banded((self._chol_a.rows, False), b)
            scale = self._msqrt.reshape((-1,) + (1,) * (b.ndim - 1))
            return scale * x / self._sqrt_delta
        return (
            scipy.linalg.solve_triangular(self._r_dense, b, lower=False, trans="T")
            / self._sqrt_delta
        )


def prior_logpdf(model: PriorModel, u: np.ndarray) -> float:
    """Log density of the prior at ``u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != model.mean.shape:
        raise ValueError(f"u has shape {u.shape}, expected {model.mean.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("u contains non-finite entries")
    n = model.operators.n
    white = model.factor.matvec(u - model.mean)
    return float(
        -0.5 * n * np.log(2.0 * np.pi)
        + 0.5 * model.factor.logdet_precision
        - 0.5 * np.dot(white, white)
    )


def sample_prior(model: PriorModel, rng: np.random.Generator) -> np.ndarray:
    """One draw ``m + C^{-1} xi`` with ``xi`` standard normal."""
    xi = rng.standard_normal(model.operators.n)
    return model.mean + model.factor.solve(xi)
