"""Sparse Q1 finite element assembly on the node-neighbor sparsity pattern.

All matrices of the scheme (mass M, lumped mass, stiffness A and its
absolute-value variant, artificial diffusion D, low-order operator L) share
one fixed structurally symmetric sparsity pattern: the node-neighbor graph
plus the diagonal.  The pattern is precomputed per mesh together with the
cell-to-entry scatter map and quadrature tables, so that the state-dependent
stiffness can be reassembled cheaply in every fixed-point iteration.

Integrals use the 3x3 tensor Gauss rule per square cell, which is exact for
every product appearing here (bidegree at most (3,3) per cell).  The
absolute value in the (1 - |u_h|) variant is taken pointwise at quadrature
points.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from .mesh import (
    GAUSS3_POINTS,
    GAUSS3_WEIGHTS,
    Mesh,
    q1_basis,
    q1_basis_grad,
)


class SparsityPattern:
    """Fixed sparsity pattern: node-neighbor graph plus diagonal.

    The pattern is structurally symmetric.  ``transpose[k]`` is the storage
    position of entry (j, i) when position k stores (i, j); ``diag[i]`` the
    position of (i, i).  Off-diagonal entries are also exposed as oriented
    edges with ``edge_i < edge_j``.
    """

    def __init__(self, mesh: Mesh):
        M = mesh.n_nodes
        nbr_counts = mesh.neighbor_count()
        rows = np.concatenate(
            [np.repeat(np.arange(M), nbr_counts), np.arange(M)]
        )
        cols = np.concatenate([mesh._neighbor_indices, np.arange(M)])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]

        self.n = M
        self.rows = rows.astype(np.int64)
        self.indices = cols.astype(np.int64)
        self.indptr = np.zeros(M + 1, dtype=np.int64)
        np.add.at(self.indptr, rows + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)
        self.nnz = len(rows)

        key = self.rows * M + self.indices
        self.transpose = np.searchsorted(key, self.indices * M + self.rows)
        self.diag = np.searchsorted(key, np.arange(M) * (M + 1))

        upper = np.flatnonzero(self.rows < self.indices)
        self.edge_i = self.rows[upper]
        self.edge_j = self.indices[upper]
        self.edge_pos_ij = upper
        self.edge_pos_ji = self.transpose[upper]
        self.n_edges = len(upper)
        self._key = key

    def index_of(self, i: int, j: int) -> int:
        """Storage position of entry (i, j); KeyError if outside the pattern."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        pos = lo + np.searchsorted(self.indices[lo:hi], j)
        if pos >= hi or self.indices[pos] != j:
            raise KeyError(f"entry ({i}, {j}) is outside the sparsity pattern")
        return int(pos)

    def positions_of(self, I, J) -> np.ndarray:
        """Vectorized index_of; entries must exist in the pattern."""
        keys = np.asarray(I) * self.n + np.asarray(J)
        pos = np.searchsorted(self._key, keys)
        if np.any(pos >= self.nnz) or np.any(self._key[pos] != keys):
            raise KeyError("requested entries are outside the sparsity pattern")
        return pos


class PatternMatrix:
    """Square sparse matrix with data stored on a shared SparsityPattern.

    Reading or writing an entry outside the pattern raises, which guards
    assembly bugs that silent zero-fill would hide.
    """

    def __init__(self, pattern: SparsityPattern, data: np.ndarray | None = None):
        self.pattern = pattern
        if data is None:
            data = np.zeros(pattern.nnz)
        elif len(data) != pattern.nnz:
            raise ValueError("data length does not match pattern")
        self.data = data

    @property
    def shape(self):
        return (self.pattern.n, self.pattern.n)

    def at(self, i: int, j: int) -> float:
        return float(self.data[self.pattern.index_of(i, j)])

    def set_at(self, i: int, j: int, value: float) -> None:
        self.data[self.pattern.index_of(i, j)] = value

    def row(self, i: int):
        """Column indices and values of row i."""
        lo, hi = self.pattern.indptr[i], self.pattern.indptr[i + 1]
        return self.pattern.indices[lo:hi], self.data[lo:hi]

    def diagonal(self) -> np.ndarray:
        return self.data[self.pattern.diag]

    def transpose_data(self) -> np.ndarray:
        """Data vector of the transposed matrix on the same pattern."""
        return self.data[self.pattern.transpose]

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.pattern.rows, weights=self.data,
                           minlength=self.pattern.n)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.to_csr() @ v

    def to_csr(self) -> csr_matrix:
        p = self.pattern
        return csr_matrix((self.data, p.indices, p.indptr), shape=self.shape)

    def copy(self) -> "PatternMatrix":
        return PatternMatrix(self.pattern, self.data.copy())

    def toarray(self) -> np.ndarray:
        return self.to_csr().toarray()


@dataclass
class QuadTables:
    """Reference-cell quadrature tables for vectorized Q1 assembly."""

    weights: np.ndarray        # (9,)
    basis: np.ndarray          # (4, 9) values at quadrature points
    grad_x: np.ndarray         # (4, 9) reference d/dxi
    grad_y: np.ndarray         # (4, 9) reference d/deta
    mass_16: np.ndarray        # (16,) reference mass entries (a*4+b)
    lap_16: np.ndarray         # (16,) reference Laplacian entries
    P_mass: np.ndarray = field(repr=False, default=None)  # (9, 16)
    P_gx: np.ndarray = field(repr=False, default=None)
    P_gy: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls) -> "QuadTables":
        xi, eta = np.meshgrid(GAUSS3_POINTS, GAUSS3_POINTS)
        xi, eta = xi.ravel(), eta.ravel()
        w = np.outer(GAUSS3_WEIGHTS, GAUSS3_WEIGHTS).ravel()
        B = q1_basis(xi, eta)            # (4, 9)
        G = q1_basis_grad(xi, eta)       # (4, 2, 9)
        GX, GY = G[:, 0, :], G[:, 1, :]
        P_mass = np.einsum("q,aq,bq->qab", w, B, B).reshape(9, 16)
        P_gx = np.einsum("q,aq,bq->qab", w, GX, B).reshape(9, 16)
        P_gy = np.einsum("q,aq,bq->qab", w, GY, B).reshape(9, 16)
        mass_16 = P_mass.sum(axis=0)
        lap_16 = (
            np.einsum("q,aq,bq->ab", w, GX, GX)
            + np.einsum("q,aq,bq->ab", w, GY, GY)
        ).reshape(16)
        return cls(w, B, GX, GY, mass_16, lap_16, P_mass, P_gx, P_gy)


_QUAD = None


def quad_tables() -> QuadTables:
    global _QUAD
    if _QUAD is None:
        _QUAD = QuadTables.build()
    return _QUAD


class Assembler:
    """Per-mesh assembly context: pattern, scatter map, cached mass matrix."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.pattern = SparsityPattern(mesh)
        self.quad = quad_tables()
        cells = mesh.cells
        I = np.repeat(cells, 4, axis=1)                  # (nc, 16) test index a
        J = np.tile(cells, (1, 4))                       # (nc, 16) trial index b
        # local entry (a, b) is stored at flat offset a*4+b
        self.scatter = self.pattern.positions_of(I.ravel(), J.ravel())
        self._mass_data = None
        self._lumped = None

    def mass(self) -> PatternMatrix:
        """Consistent mass matrix M with m_ij = (phi_j, phi_i)."""
        if self._mass_data is None:
            local = np.tile(self.mesh.h**2 * self.quad.mass_16, self.mesh.n_cells)
            self._mass_data = np.bincount(
                self.scatter, weights=local, minlength=self.pattern.nnz
            )
        return PatternMatrix(self.pattern, self._mass_data.copy())

    def lumped_mass(self) -> np.ndarray:
        """Row sums m_i of the mass matrix (all positive)."""
        if self._lumped is None:
            self._lumped = self.mass().row_sums()
        return self._lumped.copy()

    def stiffness(
        self,
        u: np.ndarray,
        c: np.ndarray,
        mu: float,
        chi: float,
        variant: str = "raw",
        alpha_inv: float = 0.0,
        out: PatternMatrix | None = None,
    ) -> PatternMatrix:
        """State-dependent stiffness matrix.

        Entry (i, j) is ``-mu*(phi_j*(1 - u_h), phi_i) - chi*(phi_j*grad(c_h),
        grad(phi_i))`` plus ``alpha_inv*(grad(phi_j), grad(phi_i))`` when the
        diffusion-extended model is enabled.  ``variant="abs"`` replaces u_h
        by |u_h| inside (1 - .), evaluated pointwise at quadrature points.
        """
        mesh, q = self.mesh, self.quad
        if len(u) != mesh.n_nodes or len(c) != mesh.n_nodes:
            raise ValueError("coefficient vector length does not match mesh")
        if variant not in ("raw", "abs"):
            raise ValueError(f"unknown stiffness variant {variant!r}")
        cells = mesh.cells
        uq = u[cells] @ q.basis                        # (nc, 9)
        if variant == "abs":
            np.abs(uq, out=uq)
        np.subtract(1.0, uq, out=uq)
        local = uq @ q.P_mass
        local *= -mu * mesh.h**2
        if chi != 0.0:
            cc = c[cells]
            local -= chi * ((cc @ q.grad_x) @ q.P_gx + (cc @ q.grad_y) @ q.P_gy)
        if alpha_inv:
            local += alpha_inv * q.lap_16
        data = np.bincount(self.scatter, weights=local.ravel(),
                           minlength=self.pattern.nnz)
        if out is None:
            return PatternMatrix(self.pattern, data)
        out.data[:] = data
        return out


_ASSEMBLERS: "weakref.WeakKeyDictionary[Mesh, Assembler]" = weakref.WeakKeyDictionary()


def assembler_for(mesh: Mesh) -> Assembler:
    """Shared per-mesh Assembler (meshes are immutable)."""
    try:
        return _ASSEMBLERS[mesh]
    except KeyError:
        a = Assembler(mesh)
        _ASSEMBLERS[mesh] = a
        return a


def assemble_mass(mesh: Mesh) -> PatternMatrix:
    return assembler_for(mesh).mass()


def lump_mass(mass: PatternMatrix) -> np.ndarray:
    """Diagonal of the lumped mass matrix: m_i = sum_j m_ij."""
    return mass.row_sums()


def assemble_stiffness(
    mesh: Mesh,
    u: np.ndarray,
    c: np.ndarray,
    mu: float,
    chi: float,
    variant: str = "raw",
    alpha_inv: float = 0.0,
) -> PatternMatrix:
    return assembler_for(mesh).stiffness(u, c, mu, chi, variant, alpha_inv)


def artificial_diffusion(A: PatternMatrix, out: PatternMatrix | None = None) -> PatternMatrix:
    """Symmetric artificial diffusion matrix D for a stiffness matrix A.

    Off-diagonal: ``d_ij = -max(a_ij, 0, a_ji)``; diagonal: ``d_ii =
    -sum_{j != i} d_ij``.  D is symmetric with zero row sums, non-positive
    off-diagonal entries and non-negative diagonal.
    """
    p = A.pattern
    d = np.maximum(A.data, A.data[p.transpose])
    np.maximum(d, 0.0, out=d)
    np.negative(d, out=d)
    d[p.diag] = 0.0
    d[p.diag] = -np.bincount(p.rows, weights=d, minlength=p.n)
    if out is None:
        return PatternMatrix(p, d)
    out.data[:] = d
    return out


def low_order_operator(A: PatternMatrix, D: PatternMatrix) -> PatternMatrix:
    """Low-order operator L = A + D; verified to be a Z-matrix."""
    if A.pattern is not D.pattern:
        raise ValueError("A and D must share one sparsity pattern")
    L = PatternMatrix(A.pattern, A.data + D.data)
    off = np.delete(L.data, A.pattern.diag)
    if off.size and off.max() > 0.0:
        # a_ij - max(a_ij, 0, a_ji) <= 0 holds exactly in floating point
        raise AssertionError("low-order operator has a positive off-diagonal entry")
    return L
