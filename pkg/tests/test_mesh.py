import math

import numpy as np
import pytest

from invasionfct import build_uniform_mesh, neighbor_sets, shape_constant_kappa
from invasionfct.mesh import GAUSS3_POINTS, GAUSS3_WEIGHTS, q1_basis_grad


def brute_force_neighbors(mesh):
    """Pairwise cell-sharing scan, independent of the mesh's adjacency."""
    sets = [set() for _ in range(mesh.n_nodes)]
    for cell in mesh.cells:
        for a in cell:
            for b in cell:
                if a != b:
                    sets[a].add(int(b))
    return sets


def test_node_and_cell_counts():
    for r in range(0, 9):
        mesh = build_uniform_mesh(((0, 0), (20, 20)), r)
        assert mesh.n_cells == 2 ** (2 * r)
        assert mesh.n_nodes == (2**r + 1) ** 2


def test_table_dof_counts():
    assert build_uniform_mesh(((0, 0), (20, 20)), 3).n_nodes == 81
    mesh5 = build_uniform_mesh(((0, 0), (20, 20)), 5)
    assert mesh5.n_nodes == 1089
    assert mesh5.n_cells == 1024


def test_single_cell_neighbors(unit_mesh):
    sets = neighbor_sets(unit_mesh)
    assert len(sets) == 4
    for s in sets:
        assert len(s) == 3


def test_neighbor_counts_by_node_type(mesh_r2):
    counts = mesh_r2.neighbor_count()
    n = mesh_r2.nodes_per_side
    center = (n // 2) * n + n // 2
    mid_edge = n // 2  # on the bottom boundary
    corner = 0
    assert counts[center] == 8
    assert counts[mid_edge] == 5
    assert counts[corner] == 3


@pytest.mark.parametrize("r", range(0, 5))
def test_neighbors_match_brute_force(r):
    mesh = build_uniform_mesh(((0, 0), (4, 4)), r)
    brute = brute_force_neighbors(mesh)
    for i in range(mesh.n_nodes):
        assert set(mesh.neighbors(i).tolist()) == brute[i]


@pytest.mark.parametrize("r", range(0, 5))
def test_neighbor_relation_symmetric_irreflexive(r):
    mesh = build_uniform_mesh(((0, 0), (1, 1)), r)
    for i in range(mesh.n_nodes):
        nbrs = mesh.neighbors(i)
        assert i not in nbrs
        for j in nbrs:
            assert i in mesh.neighbors(int(j))


def test_cells_are_squares(mesh_r3):
    p = mesh_r3.coords[mesh_r3.cells]
    side = mesh_r3.extent / 2**mesh_r3.level
    assert np.allclose(np.linalg.norm(p[:, 1] - p[:, 0], axis=1), side)
    assert np.allclose(np.linalg.norm(p[:, 3] - p[:, 0], axis=1), side)
    assert np.allclose(np.linalg.norm(p[:, 2] - p[:, 0], axis=1), side * math.sqrt(2))


def test_lexicographic_node_order(mesh_r2):
    # row-major by y then x: index k = j*(n+1) + i
    n = mesh_r2.nodes_per_side
    h = mesh_r2.h
    for k in (0, 1, n, n + 1, n * n - 1):
        i, j = k % n, k // n
        assert mesh_r2.coords[k] == pytest.approx([i * h, j * h])


def test_rejects_bad_domains():
    with pytest.raises(ValueError):
        build_uniform_mesh(((0, 0), (0, 1)), 1)
    with pytest.raises(ValueError):
        build_uniform_mesh(((0, 0), (-1, -1)), 1)
    with pytest.raises(ValueError):
        build_uniform_mesh(((0, 0), (1, 2)), 1)  # cells would not be square
    with pytest.raises(ValueError):
        build_uniform_mesh(((0, 0), (1, 1)), -1)


def quadrature_gradient_norms(h):
    """3x3 Gauss evaluation of ||grad phi||_{L2(K)} for the four basis
    functions on a square cell of side h, written out independently."""
    norms = []
    for a in range(4):
        acc = 0.0
        for gx, wx in zip(GAUSS3_POINTS, GAUSS3_WEIGHTS):
            for gy, wy in zip(GAUSS3_POINTS, GAUSS3_WEIGHTS):
                gref = q1_basis_grad(gx, gy)[a] / h
                acc += wx * wy * h * h * float(gref @ gref)
        norms.append(math.sqrt(acc))
    return norms


def test_kappa_closed_form(unit_mesh):
    kappa = shape_constant_kappa(unit_mesh)
    assert abs(kappa - math.sqrt(2.0 / 3.0)) < 1e-12


def test_kappa_matches_quadrature_and_symmetry(mesh_r3):
    kappa = shape_constant_kappa(mesh_r3)
    norms = quadrature_gradient_norms(mesh_r3.h)
    # all four corner functions give the same norm; h_K = side => d/2-1 = 0
    assert max(norms) - min(norms) < 1e-13
    assert abs(kappa - max(norms)) < 1e-12


def test_kappa_scale_invariant():
    k2 = shape_constant_kappa(build_uniform_mesh(((0, 0), (20, 20)), 2))
    k5 = shape_constant_kappa(build_uniform_mesh(((0, 0), (20, 20)), 5))
    assert abs(k2 - k5) < 1e-14


def test_incident_cell_counts(mesh_r2):
    inc = mesh_r2.incident_cells
    n = mesh_r2.nodes_per_side
    assert inc[0] == 1
    assert inc[n // 2] == 2
    assert inc[(n // 2) * n + n // 2] == 4
    assert inc.sum() == 4 * mesh_r2.n_cells
