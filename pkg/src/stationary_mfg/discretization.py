"""Q1 finite elements on a uniform rectangle with natural boundary conditions.

Provides the stiffness operator A (<Am, phi> = int grad m . grad phi), the
divergence-coupling operator B (<Bw, phi> = -int w . grad phi, with w the
bilinear interpolant of nodal vectors), the lumped quadrature vector, nodal
gradients, lumped norms, and the linear Fokker-Planck solve

    A m = -B w,   int m = 1,

via a cached factorisation of the bordered (mean-pinned) system.

Node numbering is row-major by j then i: node(i, j) = j*(Nx+1) + i.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "GridSpec",
    "ConstraintOperator",
    "LinearSolveError",
    "build_operators",
    "solve_fp_linear",
    "nodal_gradient",
    "norms",
    "write_scalar_field",
    "write_vector_field",
    "read_scalar_field",
    "read_vector_field",
]


class LinearSolveError(RuntimeError):
    """The constrained linear solve returned an unacceptable residual."""


# reference-element matrices on the unit square, corner order SW, SE, NE, NW
_KXX = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]]) / 6.0
_KYY = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]]) / 6.0
# _EX[a, b] = int phi_b dphi_a/dx, _EY likewise for d/dy
_EX = np.array([[-2, -2, -1, -1], [2, 2, 1, 1], [1, 1, 2, 2], [-1, -1, -2, -2]]) / 12.0
_EY = np.array([[-2, -1, -1, -2], [-1, -2, -2, -1], [1, 2, 2, 1], [2, 1, 1, 2]]) / 12.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform (Nx x Ny)-cell rectangle [0, Lx] x [0, Ly]."""

    Lx: float
    Ly: float
    Nx: int
    Ny: int

    def __post_init__(self):
        if self.Lx <= 0 or self.Ly <= 0:
            raise ValueError("side lengths must be positive")
        if self.Nx < 2 or self.Ny < 2:
            raise ValueError("need at least 2 cells per direction")

    @property
    def hx(self) -> float:
        return self.Lx / self.Nx

    @property
    def hy(self) -> float:
        return self.Ly / self.Ny

    @property
    def n_nodes(self) -> int:
        return (self.Nx + 1) * (self.Ny + 1)

    @property
    def area(self) -> float:
        return self.Lx * self.Ly

    @property
    def x(self) -> np.ndarray:
        return _node_coords(self)[0]

    @property
    def y(self) -> np.ndarray:
        return _node_coords(self)[1]

    @property
    def weights(self) -> np.ndarray:
        """Lumped Q1 quadrature weights; sums to the domain area."""
        return _quad_weights(self)

    def node_index(self, i: int, j: int) -> int:
        return j * (self.Nx + 1) + i

    def reshape(self, field: np.ndarray) -> np.ndarray:
        """Nodal vector -> (Ny+1, Nx+1) array (rows are constant y)."""
        return np.asarray(field).reshape(self.Ny + 1, self.Nx + 1)


@functools.lru_cache(maxsize=32)
def _node_coords(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(0.0, grid.Lx, grid.Nx + 1)
    ys = np.linspace(0.0, grid.Ly, grid.Ny + 1)
    X, Y = np.meshgrid(xs, ys)
    return X.ravel(), Y.ravel()


def _cell_corner_nodes(grid: GridSpec) -> np.ndarray:
    """(4, n_cells) node indices in corner order SW, SE, NE, NW."""
    nx = grid.Nx + 1
    ci, cj = np.meshgrid(np.arange(grid.Nx), np.arange(grid.Ny))
    sw = cj.ravel() * nx + ci.ravel()
    return np.stack([sw, sw + 1, sw + 1 + nx, sw + nx])


@functools.lru_cache(maxsize=32)
def _quad_weights(grid: GridSpec) -> np.ndarray:
    w = np.zeros(grid.n_nodes)
    np.add.at(w, _cell_corner_nodes(grid).ravel(), grid.hx * grid.hy / 4.0)
    w.flags.writeable = False
    return w


def _assemble(grid: GridSpec, element: np.ndarray) -> sp.csr_matrix:
    nodes = _cell_corner_nodes(grid)
    n_cells = nodes.shape[1]
    rows = np.repeat(nodes, 4, axis=0).ravel()
    cols = np.tile(nodes, (4, 1)).ravel()
    vals = np.repeat(element.ravel(), n_cells)
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))


class ConstraintOperator:
    """Assembled A, B and quadrature, with cached factorisations.

    Heavy factorisations (the bordered Fokker-Planck matrix, the dual
    preconditioner and the feasibility projector) are built lazily on first
    use and reused; instances are read-only after construction and safe to
    share between solves.
    """

    def __init__(self, grid: GridSpec):
        self.grid = grid
        hx, hy = grid.hx, grid.hy
        self.A = _assemble(grid, (hy / hx) * _KXX + (hx / hy) * _KYY)
        self.Bx = _assemble(grid, -hy * _EX)
        self.By = _assemble(grid, -hx * _EY)
        self.weights = grid.weights
        self._fp_lu = None
        self._metric_lu = None
        self._proj_lu = None

    # -- basic applications -------------------------------------------------

    def apply_A(self, m: np.ndarray) -> np.ndarray:
        return self.A @ m

    def apply_B(self, w: np.ndarray) -> np.ndarray:
        return self.Bx @ w[:, 0] + self.By @ w[:, 1]

    def residual(self, m: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.A @ m + self.apply_B(w)

    def bgrad(self, u: np.ndarray) -> np.ndarray:
        """Mass-averaged gradient -B^T u / weights; approximates grad u."""
        om = self.weights
        return np.column_stack([-(self.Bx.T @ u) / om, -(self.By.T @ u) / om])

    # -- linear Fokker-Planck solve -----------------------------------------

    def _fp_factor(self):
        if self._fp_lu is None:
            om = self.weights
            M = sp.bmat([[self.A, om[:, None]], [om[None, :], None]], format="csc")
            self._fp_lu = spla.splu(M)
        return self._fp_lu

    def solve_fp(self, w: np.ndarray) -> np.ndarray:
        """Unique m with A m = -B w and unit mass."""
        rhs = np.concatenate([-self.apply_B(w), [1.0]])
        m = self._fp_factor().solve(rhs)[:-1]
        res = np.linalg.norm(self.residual(m, w))
        if not res <= 1e-10 * (1.0 + np.linalg.norm(self.apply_B(w))):
            raise LinearSolveError(f"Fokker-Planck solve residual {res:.3e}")
        return m

    # -- dual-metric solve (Laplacian preconditioner for the PDE rows) ------

    def _metric_factor(self):
        if self._metric_lu is None:
            Dinv = sp.diags(1.0 / self.weights)
            S = (
                self.A @ Dinv @ self.A
                + self.Bx @ Dinv @ self.Bx.T
                + self.By @ Dinv @ self.By.T
            ).tocsc()
            ones = np.ones(self.grid.n_nodes)
            M = sp.bmat([[S, ones[:, None]], [ones[None, :], None]], format="csc")
            self._metric_lu = spla.splu(M)
        return self._metric_lu

    def metric_solve(self, r: np.ndarray) -> np.ndarray:
        """Solve S y = r on the mean-zero complement, S = A D^-1 A + B D^-1 B^T."""
        return self._metric_factor().solve(np.concatenate([r, [0.0]]))[:-1]

    # -- minimal-norm feasibility projection ---------------------------------

    def _proj_factor(self):
        if self._proj_lu is None:
            om = self.weights
            S = (self.A @ self.A + self.Bx @ self.Bx.T + self.By @ self.By.T).tocsc()
            a_om = self.A @ om
            ones = np.ones(self.grid.n_nodes)
            M = sp.bmat(
                [
                    [S, a_om[:, None], ones[:, None]],
                    [a_om[None, :], np.array([[om @ om]]), None],
                    [ones[None, :], None, None],
                ],
                format="csc",
            )
            self._proj_lu = spla.splu(M)
        return self._proj_lu

    def project_feasible(self, m: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Euclidean projection of (m, w) onto {A m + B w = 0, <weights, m> = 1}."""
        n = self.grid.n_nodes
        om = self.weights
        rhs = np.concatenate([self.residual(m, w), [om @ m - 1.0], [0.0]])
        sol = self._proj_factor().solve(rhs)
        nu, mu = sol[:n], sol[n]
        m_out = m - self.A @ nu - om * mu
        w_out = np.column_stack([w[:, 0] - self.Bx.T @ nu, w[:, 1] - self.By.T @ nu])
        return m_out, w_out


def build_operators(grid: GridSpec) -> ConstraintOperator:
    return ConstraintOperator(grid)


def solve_fp_linear(op: ConstraintOperator, w: np.ndarray) -> np.ndarray:
    """Solve the linear Fokker-Planck problem A m = -B w with unit mass."""
    return op.solve_fp(np.asarray(w, dtype=float))


@functools.lru_cache(maxsize=32)
def _gradient_matrices(grid: GridSpec) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse maps nodal scalar -> nodal gradient components.

    Cell-centre gradients of the bilinear interpolant, averaged over the
    cells adjacent to each node (1, 2 or 4 of them).
    """
    nodes = _cell_corner_nodes(grid)
    n_cells = nodes.shape[1]
    n = grid.n_nodes
    cells = np.arange(n_cells)
    # cell-centre gradient stencils
    cx = np.array([-1.0, 1.0, 1.0, -1.0]) / (2.0 * grid.hx)
    cy = np.array([-1.0, -1.0, 1.0, 1.0]) / (2.0 * grid.hy)
    rows = np.repeat(cells, 4)
    cols = nodes.T.ravel()
    Gx_cell = sp.csr_matrix((np.tile(cx, n_cells), (rows, cols)), shape=(n_cells, n))
    Gy_cell = sp.csr_matrix((np.tile(cy, n_cells), (rows, cols)), shape=(n_cells, n))
    # node <- adjacent-cell averaging
    counts = np.zeros(n)
    np.add.at(counts, nodes.ravel(), 1.0)
    Avg = sp.csr_matrix(
        (np.repeat(1.0, 4 * n_cells), (nodes.ravel(), np.tile(cells, 4).reshape(4, -1).ravel())),
        shape=(n, n_cells),
    )
    Avg = sp.diags(1.0 / counts) @ Avg
    return (Avg @ Gx_cell).tocsr(), (Avg @ Gy_cell).tocsr()


def nodal_gradient(grid: GridSpec, u: np.ndarray) -> np.ndarray:
    """Per-cell Q1 gradient averaged to nodes; exact on affine fields."""
    Gx, Gy = _gradient_matrices(grid)
    u = np.asarray(u, dtype=float)
    return np.column_stack([Gx @ u, Gy @ u])


def norms(grid: GridSpec, field: np.ndarray, q: float) -> dict[str, float]:
    """Lumped L^q, max and W^{1,q} norms of a nodal scalar or vector field."""
    om = grid.weights
    f = np.asarray(field, dtype=float)
    if f.ndim == 2:
        mag = np.sqrt(np.sum(f * f, axis=1))
    else:
        mag = np.abs(f)
    lq = float((om @ mag**q) ** (1.0 / q))
    linf = float(mag.max(initial=0.0))
    if f.ndim == 1:
        g = nodal_gradient(grid, f)
        gmag = np.sqrt(np.sum(g * g, axis=1))
        w1q = float((om @ (mag**q + gmag**q)) ** (1.0 / q))
    else:
        w1q = float("nan")
    return {"Lq": lq, "Linfty": linf, "W1q": w1q}


# -- field exchange format ---------------------------------------------------
# CSV, header "i,j,x,y,value" (scalar) or "i,j,x,y,vx,vy" (vector),
# row-major by j then i, 17 significant digits.


def _index_columns(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    I, J = np.meshgrid(np.arange(grid.Nx + 1), np.arange(grid.Ny + 1))
    return I.ravel(), J.ravel()


def write_scalar_field(path, grid: GridSpec, values: np.ndarray) -> None:
    I, J = _index_columns(grid)
    x, y = grid.x, grid.y
    values = np.asarray(values, dtype=float)
    with open(path, "w") as fh:
        fh.write("i,j,x,y,value\n")
        for k in range(grid.n_nodes):
            fh.write(f"{I[k]},{J[k]},{x[k]:.17g},{y[k]:.17g},{values[k]:.17g}\n")


def write_vector_field(path, grid: GridSpec, values: np.ndarray) -> None:
    I, J = _index_columns(grid)
    x, y = grid.x, grid.y
    values = np.asarray(values, dtype=float)
    with open(path, "w") as fh:
        fh.write("i,j,x,y,vx,vy\n")
        for k in range(grid.n_nodes):
            fh.write(
                f"{I[k]},{J[k]},{x[k]:.17g},{y[k]:.17g},{values[k, 0]:.17g},{values[k, 1]:.17g}\n"
            )


def _read_field(path, grid: GridSpec, header: str, ncols: int) -> np.ndarray:
    with open(path) as fh:
        first = fh.readline().strip()
        if first != header:
            raise ValueError(f"{path}: expected header {header!r}, got {first!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (grid.n_nodes, ncols):
        raise ValueError(f"{path}: expected {grid.n_nodes} rows x {ncols} cols, got {data.shape}")
    I, J = _index_columns(grid)
    if not (np.array_equal(data[:, 0], I) and np.array_equal(data[:, 1], J)):
        raise ValueError(f"{path}: node ordering is not row-major by j then i")
    return data


def read_scalar_field(path, grid: GridSpec) -> np.ndarray:
    return _read_field(path, grid, "i,j,x,y,value", 5)[:, 4].copy()


def read_vector_field(path, grid: GridSpec) -> np.ndarray:
    return _read_field(path, grid, "i,j,x,y,vx,vy", 6)[:, 4:6].copy()
