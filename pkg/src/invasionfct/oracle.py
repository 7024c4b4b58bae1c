"""Slow independent reference computations used to cross-check the solver.

Nothing here shares code with the production assembly, kinetics or limiter
paths: dense matrices are assembled cell by cell with a 5x5 Gauss rule, the
protease update is integrated by composite quadrature of its integral form,
and the Zalesak factors are recomputed with plain Python loops.  These
routines ship with the library (not only the test tree) so the scheme's
guarantees stay re-verifiable downstream; they are meant for small meshes.
"""

from __future__ import annotations

import math

import numpy as np

from .mesh import Mesh

# 5-point Gauss-Legendre rule on [0, 1]; deliberately different from the
# production 3x3 rule so quadrature errors cannot cancel between the paths.
_G5_X, _G5_W = np.polynomial.legendre.leggauss(5)
_G5_X = 0.5 * (_G5_X + 1.0)
_G5_W = 0.5 * _G5_W


def _basis(xi, eta):
    return [
        (1 - xi) * (1 - eta),
        xi * (1 - eta),
        xi * eta,
        (1 - xi) * eta,
    ]


def _basis_grad(xi, eta):
    return [
        (-(1 - eta), -(1 - xi)),
        ((1 - eta), -xi),
        (eta, xi),
        (-eta, (1 - xi)),
    ]


def dense_mass(mesh: Mesh) -> np.ndarray:
    """Dense consistent mass matrix via 5x5 Gauss quadrature."""
    M = np.zeros((mesh.n_nodes, mesh.n_nodes))
    h = mesh.h
    for cell in mesh.cells:
        for ax, wx in zip(_G5_X, _G5_W):
            for ay, wy in zip(_G5_X, _G5_W):
                phi = _basis(ax, ay)
                w = wx * wy * h * h
                for a in range(4):
                    for b in range(4):
                        M[cell[a], cell[b]] += w * phi[a] * phi[b]
    return M


def dense_assemble(
    mesh: Mesh,
    u: np.ndarray,
    c: np.ndarray,
    mu: float,
    chi: float,
    variant: str = "raw",
    alpha_inv: float = 0.0,
) -> np.ndarray:
    """Dense stiffness matrix, same bilinear forms as the sparse assembly.

    Entry (i, j) is -mu*(phi_j*(1-u_h), phi_i) - chi*(phi_j*grad c_h,
    grad phi_i) + alpha_inv*(grad phi_j, grad phi_i); ``variant="abs"``
    uses |u_h| pointwise.  Intended for meshes with a few hundred nodes.
    """
    n = mesh.n_nodes
    A = np.zeros((n, n))
    h = mesh.h
    for cell in mesh.cells:
        uc = [u[k] for k in cell]
        cc = [c[k] for k in cell]
        for ax, wx in zip(_G5_X, _G5_W):
            for ay, wy in zip(_G5_X, _G5_W):
                phi = _basis(ax, ay)
                grad = _basis_grad(ax, ay)
                w = wx * wy
                uq = sum(uc[a] * phi[a] for a in range(4))
                if variant == "abs":
                    uq = abs(uq)
                cgx = sum(cc[a] * grad[a][0] for a in range(4)) / h
                cgy = sum(cc[a] * grad[a][1] for a in range(4)) / h
                for a in range(4):
                    gax, gay = grad[a][0] / h, grad[a][1] / h
                    for b in range(4):
                        val = -mu * (1.0 - uq) * phi[b] * phi[a]
                        val += -chi * phi[b] * (cgx * gax + cgy * gay)
                        gbx, gby = grad[b][0] / h, grad[b][1] / h
                        val += alpha_inv * (gbx * gax + gby * gay)
                        A[cell[a], cell[b]] += w * h * h * val
    return A


def kinetics_quadrature(
    u_old: float,
    u_new: float,
    c_old: float,
    c_new: float,
    p_old: float,
    eps: float,
    tau: float,
    substeps: int = 10_000,
) -> float:
    """Protease update by composite quadrature of its exact integral form.

    Integrates (1/eps) * e^{-t_{n+1}/eps} * int u(s) c(s) e^{s/eps} ds with
    u, c linear in time, using ``substeps`` panels of 4-point Gauss on the
    unit interval; converges to the closed-form update as substeps grows.
    """
    if substeps < 1000:
        raise ValueError("use at least 1000 sub-steps for the oracle")
    r = tau / eps
    gx, gw = np.polynomial.legendre.leggauss(4)
    edges = np.linspace(0.0, 1.0, substeps + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1] - edges[0])
    s = (mid[:, None] + half * gx[None, :]).ravel()
    w = np.tile(half * gw, substeps)
    uu = u_old + (u_new - u_old) * s
    cc = c_old + (c_new - c_old) * s
    integral = float(np.sum(w * uu * cc * np.exp(r * (s - 1.0))))
    return math.exp(-r) * p_old + r * integral


def brute_zalesak(edge_i, edge_j, f, u_bar, m):
    """Zalesak correction factors recomputed with plain loops.

    ``f[k]`` is the flux from node edge_j[k] into node edge_i[k] (the same
    oriented storage as the production FluxSet).  Returns one alpha per
    edge.  Neighborhoods are taken from the edge list itself.
    """
    n = len(u_bar)
    nbrs = [set() for _ in range(n)]
    flux_of = {}
    for k in range(len(f)):
        i, j = int(edge_i[k]), int(edge_j[k])
        nbrs[i].add(j)
        nbrs[j].add(i)
        flux_of[(i, j)] = f[k]
        flux_of[(j, i)] = -f[k]

    P_plus = [0.0] * n
    P_minus = [0.0] * n
    for i in range(n):
        for j in nbrs[i]:
            P_plus[i] += max(0.0, flux_of[(i, j)])
            P_minus[i] += min(0.0, flux_of[(i, j)])

    R_plus = [1.0] * n
    R_minus = [1.0] * n
    for i in range(n):
        lo = min([u_bar[j] for j in nbrs[i]] + [u_bar[i]])
        hi = max([u_bar[j] for j in nbrs[i]] + [u_bar[i]])
        if P_plus[i] != 0.0:
            R_plus[i] = min(1.0, m[i] * (hi - u_bar[i]) / P_plus[i])
        if P_minus[i] != 0.0:
            R_minus[i] = min(1.0, m[i] * (lo - u_bar[i]) / P_minus[i])

    alpha = np.ones(len(f))
    for k in range(len(f)):
        i, j = int(edge_i[k]), int(edge_j[k])
        if f[k] > 0.0:
            alpha[k] = min(R_plus[i], R_minus[j])
        elif f[k] < 0.0:
            alpha[k] = min(R_minus[i], R_plus[j])
    return alpha


def dense_solve(A, b) -> np.ndarray:
    """Dense factorization solve used to cross-check the sparse path."""
    return np.linalg.solve(np.asarray(A, dtype=float), np.asarray(b, dtype=float))
