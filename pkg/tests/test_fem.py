import math

import numpy as np
import pytest
import scipy.sparse as sp

from magnetohom.errors import AssemblyError, ConvergenceError, ValidationError
from magnetohom.fem import (LameTensor, assemble_mass, assemble_stiffness, build_mesh, energy_density, h1_norm,
                            l2_norm, mesh_from_arrays, read_mesh, restrict, rigid_modes, solve_spd, write_mesh)


class TestBuildMesh:
    @pytest.mark.parametrize("n, nodes, tris", [(1, 4, 2), (4, 25, 32), (32, 1089, 2048)])
    def test_counts(self, n, nodes, tris):
        m = build_mesh(n)
        assert m.n_nodes == nodes
        assert m.n_triangles == tris

    @pytest.mark.parametrize("bad", [0, -3, 2.5, True])
    def test_rejects_bad_n(self, bad):
        with pytest.raises(ValidationError):
            build_mesh(bad)

    def test_area_and_orientation(self):
        m = build_mesh(7)
        assert m.area.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.all(m.area > 0)
        assert m.nodal_weights().sum() == pytest.approx(1.0, abs=1e-14)

    def test_boundary(self):
        m = build_mesh(5)
        assert m.boundary_nodes.size == 4 * 5
        x = m.nodes[m.free_nodes]
        assert np.all((x > 0) & (x < 1))
        assert m.h == pytest.approx(math.sqrt(2) / 5)

    def test_degenerate_triangle_rejected(self):
        nodes = np.array([[0, 0], [1, 0], [2, 0.0]])
        with pytest.raises(AssemblyError):
            mesh_from_arrays(nodes, np.array([[0, 1, 2]]))

    def test_round_trip(self, tmp_path):
        m = build_mesh(3)
        write_mesh(m, tmp_path / "m.json")
        m2 = read_mesh(tmp_path / "m.json")
        np.testing.assert_array_equal(m2.nodes, m.nodes)
        np.testing.assert_array_equal(m2.triangles, m.triangles)
        np.testing.assert_array_equal(np.sort(m2.boundary_nodes), np.sort(m.boundary_nodes))


class TestStiffness:
    def test_rigid_translation_in_kernel(self, mesh8, lame):
        K = assemble_stiffness(mesh8, lame)
        u = np.zeros((mesh8.n_nodes, 2))
        u[:, 0] = 1.0
        np.testing.assert_allclose(K @ u.ravel(), 0.0, atol=1e-12)

    def test_rigid_modes_in_kernel(self, mesh8, lame):
        K = assemble_stiffness(mesh8, lame)
        B = rigid_modes(mesh8, free_only=False)
        np.testing.assert_allclose(K @ B, 0.0, atol=1e-11)

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_patch_energy(self, n, lame):
        # u = E x with E = [[1, 0], [0, 0]]: A E:E = lambda + 2 mu = 3 over the unit square
        m = build_mesh(n)
        u = np.column_stack([m.nodes[:, 0], 0 * m.nodes[:, 0]]).ravel()
        K = assemble_stiffness(m, lame)
        assert u @ K @ u == pytest.approx(3.0, rel=1e-12)

    def test_symmetric_positive_after_elimination(self, mesh8, lame):
        Kf = restrict(assemble_stiffness(mesh8, lame), mesh8)
        assert abs(Kf - Kf.T).max() < 1e-12
        assert np.linalg.eigvalsh(Kf.toarray()).min() > 0

    def test_energy_density_matches_quadratic_form(self, mesh8, lame, rng):
        u = rng.normal(size=(mesh8.n_nodes, 2))
        K = assemble_stiffness(mesh8, lame)
        e = energy_density(mesh8, lame, u)
        assert np.sum(mesh8.area * e) == pytest.approx(u.ravel() @ K @ u.ravel(), rel=1e-12)


class TestMass:
    def test_unit_density_constant_field(self, mesh8):
        u = np.tile([1.0, 0.0], mesh8.n_nodes)
        assert u @ assemble_mass(mesh8, 1.0) @ u == pytest.approx(1.0, abs=1e-14)

    def test_zero_density(self, mesh8):
        assert assemble_mass(mesh8, 0.0).count_nonzero() == 0

    def test_matrix_density(self, mesh8):
        D = np.eye(2) + np.diag([1.0, 0.0])
        u = np.ones(2 * mesh8.n_nodes)
        assert u @ assemble_mass(mesh8, D) @ u == pytest.approx(3.0, abs=1e-13)

    def test_rejects_indefinite(self, mesh8):
        with pytest.raises(ValidationError):
            assemble_mass(mesh8, np.diag([1.0, -1.0]))

    def test_rejects_asymmetric(self, mesh8):
        with pytest.raises(ValidationError):
            assemble_mass(mesh8, np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestSolveSPD:
    def test_identity(self, rng):
        b = rng.normal(size=10)
        np.testing.assert_allclose(solve_spd(sp.identity(10), b), b, atol=1e-12)

    def test_two_by_two(self):
        x = solve_spd(np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([3.0, 3.0]))
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-10)

    def test_random_spd_residual(self):
        rng = np.random.default_rng(7)
        A = rng.normal(size=(100, 100))
        K = A @ A.T + 100 * np.eye(100)
        b = rng.normal(size=100)
        x = solve_spd(sp.csr_matrix(K), b, tol=1e-10)
        assert np.linalg.norm(K @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_zero_rhs(self):
        np.testing.assert_array_equal(solve_spd(sp.identity(4), np.zeros(4)), 0.0)

    def test_multiple_rhs(self, mesh8, lame, rng):
        Kf = restrict(assemble_stiffness(mesh8, lame), mesh8)
        B = rng.normal(size=(Kf.shape[0], 3))
        X = solve_spd(Kf, B, tol=1e-11)
        np.testing.assert_allclose(Kf @ X, B, atol=1e-8)

    @pytest.mark.parametrize("precond", ["none", "jacobi", "amg"])
    def test_preconditioners_agree(self, mesh16, lame, precond):
        Kf = restrict(assemble_stiffness(mesh16, lame), mesh16)
        b = np.ones(Kf.shape[0])
        x = solve_spd(Kf, b, tol=1e-11, precond=precond)
        assert np.linalg.norm(Kf @ x - b) <= 1e-11 * np.linalg.norm(b) * 1.0001

    def test_iteration_cap(self, mesh16, lame):
        Kf = restrict(assemble_stiffness(mesh16, lame), mesh16)
        with pytest.raises(ConvergenceError) as exc:
            solve_spd(Kf, np.ones(Kf.shape[0]), tol=1e-14, maxiter=2, precond="none")
        assert exc.value.residual > 1e-14

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            solve_spd(sp.identity(3), np.ones(4))


class TestNorms:
    def test_l2_of_constant(self, mesh8):
        u = np.ones((mesh8.n_nodes, 2))
        assert l2_norm(mesh8, u) == pytest.approx(math.sqrt(2.0))

    def test_h1_of_linear(self):
        m = build_mesh(6)
        u = np.column_stack([m.nodes[:, 0], 0 * m.nodes[:, 0]])
        # |grad u|^2 = 1; int x^2 by vertex quadrature is not exact, so compare loosely
        assert h1_norm(m, u) == pytest.approx(math.sqrt(1 + 1 / 3), rel=2e-2)

    def test_lame_validation(self):
        with pytest.raises(ValidationError):
            LameTensor(1.0, 0.0, 1.0)
        with pytest.raises(ValidationError):
            LameTensor(-1.0, 1.0, 1.0)
        assert LameTensor().wave_speed == pytest.approx(2.0)
