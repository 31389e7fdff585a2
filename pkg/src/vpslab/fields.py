"""Cell-centred fields on a 1-D interval with reflecting boundaries.

Everything downstream (energies, dissipation metrics, the minimising-movement
stepper) works on piecewise-constant fields over a uniform grid of cell
centres.  The discrete Laplacian is the standard 3-point stencil with ghost
cells mirroring the boundary values, which makes it self-adjoint and
mass-preserving; its eigenvectors are the half-sample cosines, so the
mean-free inverse can be applied exactly through a type-2 DCT.

The norms exposed here are the ones the gradient-flow machinery needs: the
midpoint L2 inner product, the face-difference H1 seminorm, the dual
(inverse-Laplacian) seminorm on mean-free fields, and the product-space norm
combining the dual seminorm in the first slot with L2 in the second.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.sparse

# Relative tolerance for "this field must be mean-free" preconditions.
MEAN_ZERO_RTOL = 1e-10

# Target relative residual for the inverse Laplacian (contract: 1e-11).
_INV_LAP_RTOL = 1e-12
_INV_LAP_MAX_REFINE = 3

_EPS = float(np.finfo(np.float64).eps)


class GridMismatch(ValueError):
    """Two fields living on different grids were combined."""


class NonZeroMean(ValueError):
    """A mean-free field was required but the input carries mass."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on [0, length] with reflecting ends.

    Parameters
    ----------
    length : float
        Interval length, positive.
    n_cells : int
        Number of cells, at least 4.
    """

    length: float
    n_cells: int

    def __post_init__(self) -> None:
        if not (self.length > 0.0 and np.isfinite(self.length)):
            raise ValueError(f"grid length must be positive, got {self.length}")
        if self.n_cells < 4:
            raise ValueError(f"need at least 4 cells, got {self.n_cells}")

    @property
    def h(self) -> float:
        """Cell width length / n_cells."""
        return self.length / self.n_cells

    @property
    def x(self) -> np.ndarray:
        """Cell-centre coordinates (j + 1/2) h."""
        return (np.arange(self.n_cells) + 0.5) * self.h

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of minus the stencil Laplacian, ascending.

        lam_k = (4 / h^2) sin^2(k pi / (2 N)) for k = 0 .. N-1; lam_0 = 0
        corresponds to the constant mode.
        """
        k = np.arange(self.n_cells)
        return (4.0 / self.h**2) * np.sin(k * np.pi / (2 * self.n_cells)) ** 2


def cosine_mode(grid: Grid, k: int) -> "Field":
    """Return the k-th stencil eigenvector cos(k pi (j + 1/2) / N) as a field."""
    if not 0 <= k < grid.n_cells:
        raise ValueError(f"mode index {k} outside 0..{grid.n_cells - 1}")
    j = np.arange(grid.n_cells)
    return Field(grid, np.cos(k * np.pi * (j + 0.5) / grid.n_cells))


@dataclass(frozen=True)
class Field:
    """Immutable scalar field: one value per cell.

    The value array is copied and frozen on construction; all operations in
    this module return new fields.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.grid.n_cells,):
            raise ValueError(
                f"field needs shape ({self.grid.n_cells},), got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray) -> "Field":
        """New field on the same grid."""
        return Field(self.grid, values)


@dataclass(frozen=True)
class State:
    """Order parameter / transformed stress pair with its conserved mass."""

    u: Field
    z: Field
    mass: float

    def __post_init__(self) -> None:
        if self.u.grid != self.z.grid:
            raise GridMismatch("state components live on different grids")
        scale = max(float(np.max(np.abs(self.u.values))), 1e-300)
        drift = abs(float(np.mean(self.u.values)) - self.mass)
        if drift > 10.0 * _EPS * scale:
            raise ValueError(
                f"mean(u) = {np.mean(self.u.values)!r} disagrees with "
                f"declared mass {self.mass!r} (drift {drift:.3e})"
            )

    @classmethod
    def of(cls, u: Field, z: Field) -> "State":
        """Build a state with the mass read off from u."""
        return cls(u, z, float(np.mean(u.values)))

    @property
    def grid(self) -> Grid:
        return self.u.grid


@dataclass(frozen=True)
class Covector(object):
    """Energy differential: mean-free chemical potential plus stress force."""

    mu: Field
    xi: Field

    def __post_init__(self) -> None:
        if self.mu.grid != self.xi.grid:
            raise GridMismatch("covector components live on different grids")
        scale = max(float(np.max(np.abs(self.mu.values))), 1.0)
        if abs(float(np.mean(self.mu.values))) > MEAN_ZERO_RTOL * scale:
            raise NonZeroMean("chemical-potential component must be mean-free")

    @property
    def grid(self) -> Grid:
        return self.mu.grid


def _check_same_grid(f: Field, g: Field) -> None:
    if f.grid != g.grid:
        raise GridMismatch("fields live on different grids")


def mean(f: Field) -> float:
    """Domain average (1/L) integral of f; equals the plain cell average."""
    return float(np.mean(f.values))


def project_zero_mean(f: Field) -> Field:
    """Subtract the domain average."""
    return Field(f.grid, f.values - np.mean(f.values))


def laplacian_values(values: np.ndarray, h: float) -> np.ndarray:
    """3-point reflecting-ghost Laplacian on a raw value array."""
    out = np.empty_like(values)
    out[1:-1] = values[:-2] - 2.0 * values[1:-1] + values[2:]
    out[0] = values[1] - values[0]
    out[-1] = values[-2] - values[-1]
    out /= h * h
    return out


def neumann_laplacian(f: Field) -> Field:
    """Apply the stencil Laplacian with reflecting ghost cells.

    The reflection makes the row sums vanish at the boundary as well, so the
    result always has zero mean up to rounding.
    """
    return Field(f.grid, laplacian_values(f.values, f.grid.h))


def _dct_solve(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Solve -lap(w) = values on the mean-free subspace via a type-2 DCT."""
    coeff = scipy.fft.dct(values, type=2, norm="ortho")
    coeff[0] = 0.0
    lam = grid.eigenvalues
    coeff[1:] /= lam[1:]
    return scipy.fft.idct(coeff, type=2, norm="ortho")


def inv_neumann_laplacian(f: Field) -> Field:
    """Mean-free solution w of -lap(w) = f.

    Preconditions
    -------------
    |mean(f)| must not exceed 1e-10 max|f|; otherwise NonZeroMean is raised.

    The DCT diagonalises the stencil exactly; one or two refinement sweeps
    push the stencil residual ||lap(w) + f|| to the rounding floor, well
    inside the 1e-11 relative contract.
    """
    vals = f.values
    fmax = float(np.max(np.abs(vals)))
    if fmax == 0.0:
        return Field(f.grid, np.zeros_like(vals))
    if abs(float(np.mean(vals))) > MEAN_ZERO_RTOL * fmax:
        raise NonZeroMean("inverse Laplacian needs a mean-free right-hand side")

    rhs = vals - np.mean(vals)
    grid = f.grid
    w = _dct_solve(rhs, grid)
    fnorm = float(np.linalg.norm(rhs))
    for _ in range(_INV_LAP_MAX_REFINE):
        residual = rhs + laplacian_values(w, grid.h)
        if float(np.linalg.norm(residual)) <= _INV_LAP_RTOL * fnorm:
            break
        w = w + _dct_solve(residual - np.mean(residual), grid)
    return Field(grid, w - np.mean(w))


def inner_l2(f: Field, g: Field) -> float:
    """Midpoint-quadrature inner product h sum f_j g_j."""
    _check_same_grid(f, g)
    return float(f.grid.h * np.dot(f.values, g.values))


def norm_l2(f: Field) -> float:
    """Midpoint-quadrature L2 norm."""
    return float(np.sqrt(f.grid.h) * np.linalg.norm(f.values))


def norm_h1av(f: Field) -> float:
    """Face-difference H1 seminorm; reflecting faces contribute nothing."""
    diffs = np.diff(f.values)
    return float(np.linalg.norm(diffs) / np.sqrt(f.grid.h))


def norm_hm1av(f: Field) -> float:
    """Dual seminorm sqrt((f, (-lap)^{-1} f)) on mean-free fields."""
    value = inner_l2(f, inv_neumann_laplacian(f))
    return float(np.sqrt(max(value, 0.0)))


def norm_H(du: Field, dz: Field) -> float:
    """State-space metric: dual seminorm in u, L2 in z.

    The first component must be mean-free (mass differences cancel).
    """
    _check_same_grid(du, dz)
    return float(np.hypot(norm_hm1av(du), norm_l2(dz)))


def norm_h2(f: Field) -> float:
    """Discrete H2 norm: L2 + H1 seminorm + L2 of the stencil Laplacian."""
    lap = neumann_laplacian(f)
    return float(np.sqrt(norm_l2(f) ** 2 + norm_h1av(f) ** 2 + norm_l2(lap) ** 2))


@lru_cache(maxsize=None)
def stencil_matrix(grid: Grid) -> scipy.sparse.csr_matrix:
    """Sparse matrix of the reflecting-ghost Laplacian (cached per grid)."""
    n = grid.n_cells
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    mat = scipy.sparse.diags([off, main, off], [-1, 0, 1], format="csr")
    return (mat / grid.h**2).tocsr()
