import numpy as np
import pytest

from invasionfct import (
    PatternMatrix,
    artificial_diffusion,
    assemble_mass,
    assemble_stiffness,
    assembler_for,
    low_order_operator,
    lump_mass,
)
from invasionfct.assembly import SparsityPattern
from invasionfct.oracle import dense_assemble, dense_mass


def random_pattern_matrix(pattern, rng):
    """Structurally symmetric random values on a given pattern."""
    return PatternMatrix(pattern, rng.standard_normal(pattern.nnz))


# -- sparsity pattern ---------------------------------------------------------

def test_pattern_is_structurally_symmetric(mesh_r2):
    p = SparsityPattern(mesh_r2)
    for k in range(p.nnz):
        i, j = p.rows[k], p.indices[k]
        kt = p.transpose[k]
        assert p.rows[kt] == j and p.indices[kt] == i


def test_entry_access_outside_pattern_raises(unit_mesh, mesh_r2):
    M = assemble_mass(mesh_r2)
    with pytest.raises(KeyError):
        M.at(0, mesh_r2.n_nodes - 1)  # opposite corners never share a cell
    with pytest.raises(KeyError):
        M.set_at(0, 7, 1.0)  # (0,0) and (7,0)-ish are not neighbors at r=2


# -- mass matrix --------------------------------------------------------------

def test_unit_cell_mass_entries(unit_mesh):
    M = assemble_mass(unit_mesh)
    dense = dense_mass(unit_mesh)
    assert M.at(0, 0) == pytest.approx(1 / 9, abs=1e-15)
    assert M.at(0, 1) == pytest.approx(1 / 18, abs=1e-15)
    assert M.at(0, 3) == pytest.approx(1 / 36, abs=1e-15)  # diagonal neighbor
    assert np.abs(M.toarray() - dense).max() < 1e-15


def test_mass_total_and_symmetry(mesh_r3):
    M = assemble_mass(mesh_r3)
    assert M.data.sum() == pytest.approx(400.0, abs=1e-10)
    assert np.array_equal(M.data, M.transpose_data())


def test_lumped_mass(unit_mesh, mesh_r2):
    m_unit = lump_mass(assemble_mass(unit_mesh))
    assert np.allclose(m_unit, 0.25, atol=1e-15)
    m = lump_mass(assemble_mass(mesh_r2))
    h = mesh_r2.h
    n = mesh_r2.nodes_per_side
    interior = (n // 2) * n + n // 2
    assert m[interior] == pytest.approx(h * h, abs=1e-12)
    assert m.sum() == pytest.approx(400.0, abs=1e-10)
    assert np.all(m > 0)


def test_interpolant_integral_identity(mesh_r2, rng):
    # integral of pi_h(v) equals sum_i m_i v_i; cross-check by quadrature of
    # the interpolant via the dense mass matrix action on the one-vector
    v = rng.random(mesh_r2.n_nodes)
    m = lump_mass(assemble_mass(mesh_r2))
    quad = dense_mass(mesh_r2) @ v
    assert abs(quad.sum() - float(m @ v)) < 1e-12 * max(1.0, abs(m @ v))


# -- stiffness ----------------------------------------------------------------

def test_stiffness_zero_state_is_scaled_mass(unit_mesh):
    z = np.zeros(4)
    c = np.full(4, 0.3)
    M = assemble_mass(unit_mesh)
    for variant in ("raw", "abs"):
        A = assemble_stiffness(unit_mesh, z, c, mu=2.5, chi=1.0, variant=variant)
        assert np.abs(A.data + 2.5 * M.data).max() < 1e-14


def test_stiffness_variants_differ_for_negative_u(unit_mesh):
    u = -np.ones(4)
    c = np.zeros(4)
    M = assemble_mass(unit_mesh)
    A_abs = assemble_stiffness(unit_mesh, u, c, mu=1.0, chi=0.0, variant="abs")
    A_raw = assemble_stiffness(unit_mesh, u, c, mu=1.0, chi=0.0, variant="raw")
    assert np.abs(A_abs.data).max() < 1e-14          # 1 - |-1| = 0
    assert np.abs(A_raw.data + 2 * M.data).max() < 1e-14  # 1 - (-1) = 2


def test_laplacian_entries(unit_mesh):
    z = np.zeros(4)
    K = assemble_stiffness(unit_mesh, z, z, mu=0.0, chi=0.0, alpha_inv=1.0)
    assert K.at(0, 0) == pytest.approx(2 / 3, abs=1e-15)
    assert K.at(0, 1) == pytest.approx(-1 / 6, abs=1e-15)
    assert K.at(0, 3) == pytest.approx(-1 / 3, abs=1e-15)


def test_stiffness_matches_dense_oracle(mesh_r2, rng):
    u = rng.standard_normal(mesh_r2.n_nodes)
    c = rng.random(mesh_r2.n_nodes)
    for variant in ("raw", "abs"):
        for alpha_inv in (0.0, 0.37):
            A = assemble_stiffness(mesh_r2, u, c, mu=1.3, chi=0.8,
                                   variant=variant, alpha_inv=alpha_inv)
            D = dense_assemble(mesh_r2, u, c, mu=1.3, chi=0.8,
                               variant=variant, alpha_inv=alpha_inv)
            assert np.abs(A.toarray() - D).max() < 1e-12


def test_variants_coincide_for_nonnegative_u(mesh_r2, rng):
    for _ in range(5):
        u = rng.random(mesh_r2.n_nodes)
        c = rng.random(mesh_r2.n_nodes)
        A1 = assemble_stiffness(mesh_r2, u, c, mu=1.0, chi=1.0, variant="raw")
        A2 = assemble_stiffness(mesh_r2, u, c, mu=1.0, chi=1.0, variant="abs")
        assert np.abs(A1.data - A2.data).max() < 1e-13


def test_stiffness_rejects_bad_sizes(mesh_r2):
    with pytest.raises(ValueError):
        assemble_stiffness(mesh_r2, np.zeros(3), np.zeros(mesh_r2.n_nodes),
                           mu=1.0, chi=1.0)


# -- artificial diffusion and the low-order operator --------------------------

def test_artificial_diffusion_of_nonpositive_offdiag(mesh_r2, rng):
    p = SparsityPattern(mesh_r2)
    A = random_pattern_matrix(p, rng)
    A.data[:] = -np.abs(A.data)
    D = artificial_diffusion(A)
    assert np.abs(D.data).max() == 0.0


def test_artificial_diffusion_two_by_two_example(unit_mesh):
    # a_12 = 1, a_21 = -2 on any symmetric pattern position
    p = SparsityPattern(unit_mesh)
    A = PatternMatrix(p)
    A.set_at(0, 1, 1.0)
    A.set_at(1, 0, -2.0)
    D = artificial_diffusion(A)
    assert D.at(0, 1) == -1.0
    assert D.at(1, 0) == -1.0
    assert D.at(0, 0) == 1.0
    assert D.at(1, 1) == 1.0
    L = low_order_operator(A, D)
    assert L.at(0, 1) == 0.0
    assert L.at(1, 0) == -3.0


def test_artificial_diffusion_properties_random(mesh_r2, rng):
    p = SparsityPattern(mesh_r2)
    for _ in range(100):
        A = random_pattern_matrix(p, rng)
        D = artificial_diffusion(A)
        assert np.array_equal(D.data, D.transpose_data())  # symmetric
        assert np.abs(D.row_sums()).max() < 1e-13          # zero row sums
        off = np.delete(D.data, p.diag)
        assert off.max() <= 0.0
        assert D.diagonal().min() >= 0.0
        S = PatternMatrix(p, A.data + D.data)
        off_s = np.delete(S.data, p.diag)
        assert off_s.max() <= 0.0  # A + D has no positive off-diagonals


def test_low_order_operator_zero_diffusion(mesh_r2):
    p = SparsityPattern(mesh_r2)
    A = PatternMatrix(p)
    A.data[p.diag] = 2.0
    D = artificial_diffusion(A)
    L = low_order_operator(A, D)
    assert np.array_equal(L.data, A.data)


def test_low_order_operator_z_matrix_random_state(mesh_r3, rng):
    u = rng.standard_normal(mesh_r3.n_nodes)
    c = rng.random(mesh_r3.n_nodes)
    A = assemble_stiffness(mesh_r3, u, c, mu=1.0, chi=1.0, variant="abs")
    L = low_order_operator(A, artificial_diffusion(A))
    off = np.delete(L.data, L.pattern.diag)
    assert off.max() <= 1e-14
    assert off.min() <= 0.0


def test_low_order_operator_pattern_mismatch(mesh_r2, mesh_r3):
    A = assemble_mass(mesh_r2)
    D = assemble_mass(mesh_r3)
    with pytest.raises(ValueError):
        low_order_operator(A, D)


def test_assembler_cached_per_mesh(mesh_r2):
    assert assembler_for(mesh_r2) is assembler_for(mesh_r2)
