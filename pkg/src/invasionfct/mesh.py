"""Uniform quadrilateral meshes of a square domain with Q1 basis utilities.

The solver works on structured meshes obtained by uniform refinement of a
square: after ``r`` refinements there are ``2^(2r)`` identical square cells
and ``(2^r + 1)^2`` nodes.  Nodes are numbered lexicographically, row-major
by y then x (node ``k = j*(n+1) + i`` sits at ``(x_i, y_j)``); this fixed
ordering makes sparsity patterns and regression data reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# 3-point Gauss-Legendre rule on [0, 1]; exact through degree 5 per
# direction, enough for every bilinear-form integrand used here.
GAUSS3_POINTS = np.array(
    [0.5 - 0.5 * np.sqrt(3.0 / 5.0), 0.5, 0.5 + 0.5 * np.sqrt(3.0 / 5.0)]
)
GAUSS3_WEIGHTS = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


def q1_basis(xi, eta):
    """Evaluate the four bilinear reference basis functions at (xi, eta).

    Local node order is counterclockwise from the lower-left corner:
    (0,0), (1,0), (1,1), (0,1).  Returns an array of shape (4,) + xi.shape.
    """
    xi = np.asarray(xi)
    eta = np.asarray(eta)
    return np.array(
        [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta]
    )


def q1_basis_grad(xi, eta):
    """Reference gradients of the bilinear basis, shape (4, 2) + xi.shape."""
    xi = np.asarray(xi)
    eta = np.asarray(eta)
    one = np.ones_like(xi)
    return np.array(
        [
            [-(1 - eta), -(1 - xi)],
            [(1 - eta), -xi],
            [eta, xi],
            [-eta * one, (1 - xi)],
        ]
    )


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform square-cell mesh of a square domain.

    Attributes
    ----------
    origin : ndarray, shape (2,)
        Lower-left corner of the domain.
    extent : float
        Side length of the (square) domain.
    level : int
        Number of uniform refinements r; the mesh has 2^r cells per side.
    coords : ndarray, shape (M, 2)
        Node coordinates in the fixed lexicographic order.
    cells : ndarray, shape (n_cells, 4)
        Counterclockwise node indices (SW, SE, NE, NW) of each cell.
    h : float
        Cell side length.  The cell diameter is ``h * sqrt(2)``.
    """

    origin: np.ndarray
    extent: float
    level: int
    coords: np.ndarray
    cells: np.ndarray
    h: float
    _neighbor_indptr: np.ndarray = field(repr=False)
    _neighbor_indices: np.ndarray = field(repr=False)
    incident_cells: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def nodes_per_side(self) -> int:
        return 2**self.level + 1

    def neighbors(self, i: int) -> np.ndarray:
        """Indices of the nodes sharing a cell with node i (excluding i)."""
        return self._neighbor_indices[
            self._neighbor_indptr[i] : self._neighbor_indptr[i + 1]
        ]

    def neighbor_count(self) -> np.ndarray:
        """Size of each neighbor set (3 corner, 5 edge, 8 interior)."""
        return np.diff(self._neighbor_indptr)


def build_uniform_mesh(domain=((0.0, 0.0), (20.0, 20.0)), level: int = 5) -> Mesh:
    """Build the uniformly refined quadrilateral mesh of a square domain.

    Parameters
    ----------
    domain : pair of corner points ((x0, y0), (x1, y1))
        Opposite corners of the domain.  The extent must be positive and
        equal in both directions: cells are required to be squares.
    level : int
        Refinement level r >= 0; gives 2^r x 2^r cells.

    Returns
    -------
    Mesh
    """
    if level < 0 or int(level) != level:
        raise ValueError(f"refinement level must be a non-negative integer, got {level}")
    (x0, y0), (x1, y1) = domain
    ex, ey = float(x1) - float(x0), float(y1) - float(y0)
    if ex <= 0 or ey <= 0:
        raise ValueError(f"domain extent must be positive, got {ex} x {ey}")
    if abs(ex - ey) > 1e-12 * max(ex, ey):
        raise ValueError(
            f"domain must be square so that cells are squares, got {ex} x {ey}"
        )
    n = 2**int(level)  # cells per side
    h = ex / n
    xs = x0 + h * np.arange(n + 1)
    ys = y0 + h * np.arange(n + 1)
    X, Y = np.meshgrid(xs, ys)  # row-major by y then x
    coords = np.column_stack([X.ravel(), Y.ravel()])

    ii, jj = np.meshgrid(np.arange(n), np.arange(n))
    sw = (jj * (n + 1) + ii).ravel()
    cells = np.column_stack([sw, sw + 1, sw + n + 2, sw + n + 1]).astype(np.int64)

    indptr, indices = _neighbor_graph(n + 1)
    incident = _incident_cell_count(n + 1)
    return Mesh(
        origin=np.array([x0, y0], dtype=float),
        extent=ex,
        level=int(level),
        coords=coords,
        cells=cells,
        h=h,
        _neighbor_indptr=indptr,
        _neighbor_indices=indices,
        incident_cells=incident,
    )


def _neighbor_graph(n_side: int):
    """CSR adjacency of the node-neighbor relation on an n_side^2 grid.

    Two nodes are neighbors iff they share a cell, i.e. iff their grid
    indices differ by at most one in each direction (and they differ).
    """
    idx = np.arange(n_side)
    I, J = np.meshgrid(idx, idx, indexing="xy")
    rows = []
    cols = []
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            Ii, Jj = I + di, J + dj
            mask = (Ii >= 0) & (Ii < n_side) & (Jj >= 0) & (Jj < n_side)
            rows.append((J[mask] * n_side + I[mask]).ravel())
            cols.append((Jj[mask] * n_side + Ii[mask]).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    M = n_side * n_side
    indptr = np.zeros(M + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, cols.astype(np.int64)


def _incident_cell_count(n_side: int) -> np.ndarray:
    """Number of cells touching each node: 1 corner, 2 edge, 4 interior."""
    line = np.full(n_side, 2)
    line[0] = line[-1] = 1
    return np.outer(line, line).ravel()


def neighbor_sets(mesh: Mesh) -> list[np.ndarray]:
    """Per-node neighbor index sets N_i (symmetric, irreflexive)."""
    return [mesh.neighbors(i) for i in range(mesh.n_nodes)]


def shape_constant_kappa(mesh: Mesh) -> float:
    """Shape-regularity constant of the Q1 basis on the mesh's square cells.

    Returns the smallest kappa with ``||grad(phi_i)||_{L2(K)} <= kappa *
    h_K^(d/2 - 1)`` over all cells and basis functions, where ``h_K`` is
    taken as the cell *side* length (in 2D the h-factor is 1, so the
    convention only matters for documentation).  Computed by 3x3 Gauss
    quadrature of the squared gradient norm on one cell; for squares the
    value is ``sqrt(2/3)`` for each of the four corner functions.
    """
    sides = _cell_side_lengths(mesh)
    if np.ptp(sides) > 1e-12 * sides.max():
        raise ValueError("shape constant is only defined for uniform square-cell meshes")
    xi, eta = np.meshgrid(GAUSS3_POINTS, GAUSS3_POINTS)
    w = np.outer(GAUSS3_WEIGHTS, GAUSS3_WEIGHTS).ravel()
    grads = q1_basis_grad(xi.ravel(), eta.ravel())  # (4, 2, 9), reference
    # physical gradient = reference gradient / h; cell area factor = h^2
    norms_sq = np.einsum("q,acq->a", w, grads**2)  # h-factors cancel in 2D
    return float(np.sqrt(norms_sq.max()))


def _cell_side_lengths(mesh: Mesh) -> np.ndarray:
    p = mesh.coords[mesh.cells]
    dx = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    dy = np.linalg.norm(p[:, 3] - p[:, 0], axis=1)
    return np.column_stack([dx, dy])
