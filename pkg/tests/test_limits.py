import math

import numpy as np
import pytest

from magnetohom.dynamics import DynamicProblem, integrate
from magnetohom.errors import ValidationError
from magnetohom.fem import build_mesh
from magnetohom.homogenize import quadrature_points
from magnetohom.limits import (ConeSpec, Mu0Field, check_cone_estimates, check_mass_inequality, cone_section,
                               default_dictionary, estimate_mu0, mass_inequality_gap, time_pairings, weak_limit)
from conftest import bump
from oracles import mc_disc_area_in_square, midpoint_pairing


@pytest.fixture(scope="module")
def quad():
    x, w = quadrature_points(build_mesh(64))
    return x.reshape(-1, 2), w.ravel()


class TestDictionary:
    def test_labels_and_size(self):
        D = default_dictionary()
        assert len(D) == 9
        assert D.labels[0] == "poly" and "bump_ne" in D.labels

    def test_vanish_on_boundary(self):
        s = np.linspace(0, 1, 11)
        edge = np.concatenate([np.column_stack([s, 0 * s]), np.column_stack([s, 1 + 0 * s]),
                               np.column_stack([0 * s, s]), np.column_stack([1 + 0 * s, s])])
        np.testing.assert_allclose(default_dictionary().space_values(edge), 0.0, atol=1e-15)

    def test_spacetime_factor(self):
        D = default_dictionary(spacetime=True)
        np.testing.assert_allclose(D.time_values(np.array([0.0, 0.5, 1.0]), 1.0)[0], [0, 1, 0], atol=1e-15)
        np.testing.assert_allclose(default_dictionary().time_values(np.array([0.3]), 1.0), 1.0)

    def test_scaled(self, rng):
        D = default_dictionary()
        x = rng.random((20, 2))
        c = np.arange(1, 10.0)
        np.testing.assert_allclose(D.scaled(c).space_values(x), c[:, None] * D.space_values(x))


class TestWeakLimit:
    def test_constant_sequence(self, quad):
        x, w = quad
        seq = [np.ones(len(x))] * 3
        rep = weak_limit(seq, [0.5, 0.25, 0.125], default_dictionary(), x, w)
        assert np.all(rep.defect == 0) and rep.verdict == ["converged"] * 9
        D = default_dictionary()
        ref = midpoint_pairing(lambda a, b: 1.0 + 0 * a, D.entries[0].space)
        assert rep.limit[0] == pytest.approx(ref, rel=1e-4)

    def test_sin_goes_to_zero(self, quad):
        x, w = quad
        eps = [1 / 4, 1 / 8, 1 / 16]
        seq = [np.sin(2 * np.pi * x[:, 0] / e) for e in eps]
        rep = weak_limit(seq, eps, default_dictionary(), x, w)
        assert np.max(np.abs(rep.limit)) < 1e-3
        assert all(v == "converged" for v in rep.verdict)

    def test_sin_squared_to_half(self, quad):
        x, w = quad
        eps = [1 / 4, 1 / 8, 1 / 16]
        seq = [np.sin(2 * np.pi * x[:, 0] / e) ** 2 for e in eps]
        rep = weak_limit(seq, eps, default_dictionary(), x, w)
        half = weak_limit([0.5 * np.ones(len(x))] * 2, [1, 0.5], default_dictionary(), x, w)
        np.testing.assert_allclose(rep.limit, half.limit, atol=1e-3)

    def test_rescaling_keeps_verdict(self, quad, rng):
        x, w = quad
        eps = [1 / 2, 1 / 4]
        seq = [np.sin(2 * np.pi * x[:, 0] / e) ** 2 for e in eps]
        D = default_dictionary()
        a = weak_limit(seq, eps, D, x, w)
        b = weak_limit(seq, eps, D.scaled(rng.uniform(0.1, 10, size=9)), x, w)
        assert a.verdict == b.verdict

    def test_input_checks(self, quad):
        x, w = quad
        with pytest.raises(ValidationError):
            weak_limit([np.ones(len(x))], [0.5], default_dictionary(), x, w)
        with pytest.raises(ValidationError):
            weak_limit([np.ones(3), np.ones(3)], [0.5, 0.25], default_dictionary(), x, w)


class TestCones:
    def test_empty_at_apex(self, mesh16):
        sec = cone_section(ConeSpec(0.5, 0.5, 0.5), 0.5, mesh16)
        assert sec.area == 0.0 and not sec.indicator.any()

    def test_full_square(self, mesh16):
        sec = cone_section(ConeSpec(0.5, 0.5, 1.0), 0.0, mesh16)
        assert sec.area == pytest.approx(1.0)
        assert sec.indicator.all()

    def test_quarter_disc_area(self):
        mc, se = mc_disc_area_in_square(0.5, 0.5, 0.25)
        assert mc == pytest.approx(math.pi / 16, abs=4 * se)
        sec = cone_section(ConeSpec(0.5, 0.5, 0.5), 0.375, build_mesh(128))
        assert sec.area == pytest.approx(math.pi / 16, rel=0.01)

    def test_clipped_disc_against_mc(self):
        mc, se = mc_disc_area_in_square(0.3, 0.7, 0.45)
        sec = cone_section(ConeSpec(0.3, 0.7, 0.4), 0.4 - 0.45 / 2, build_mesh(128))
        assert sec.area == pytest.approx(mc, abs=0.01)

    def test_time_outside_rejected(self, mesh8):
        with pytest.raises(ValidationError):
            cone_section(ConeSpec(0.5, 0.5, 0.5), 0.6, mesh8)
        with pytest.raises(ValidationError):
            ConeSpec(0.5, 0.5, 0.0)

    def test_radius(self):
        assert ConeSpec(0.5, 0.5, 0.5).radius(0.25) == pytest.approx(0.5)
        assert ConeSpec(0.5, 0.5, 0.5).radius(0.9) == 0.0


class TestMu0:
    def test_eps_independent_data_has_no_defect(self, mesh16, lame):
        p = bump(mesh16.nodes)
        u0 = np.column_stack([p, 0.5 * p])
        u1 = np.column_stack([-p, p])
        mu = estimate_mu0(mesh16, lame, u0, u1, u0, u1, n_cells=4)
        np.testing.assert_allclose(mu.raw, 0.0, atol=1e-14)
        assert mu.total_mass == pytest.approx(0.0, abs=1e-14) and not mu.flagged

    def test_oscillating_velocity_mass(self, lame):
        m = build_mesh(128)
        x = m.nodes
        psi = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
        z = np.zeros((m.n_nodes, 2))
        u1e = np.column_stack([psi * np.sin(2 * np.pi * x[:, 0] * 16), 0 * psi])
        mu = estimate_mu0(m, lame, z, u1e, z, z, n_cells=8)
        assert mu.total_mass == pytest.approx(0.125, rel=0.02)

    def test_mass_in_full_cone(self):
        dens = np.full(16, 2.0)
        mu = Mu0Field(dens, dens, 2.0, 0.0, 4, dens, 0 * dens, False)
        assert mu.mass_in(ConeSpec(0.5, 0.5, 1.0)) == pytest.approx(2.0)
        assert mu.mass_in(ConeSpec(0.5, 0.5, 0.5), 0.5) == 0.0


class TestConeEstimates:
    def test_zero_force(self, mesh8, lame):
        p = bump(mesh8.nodes)
        tr = integrate(DynamicProblem(mesh8, lame, None, u0=np.column_stack([p, p]), T=0.4), store="none",
                       store_midpoint=True)
        cones = [ConeSpec(0.5, 0.5, 0.4), ConeSpec(0.3, 0.3, 0.3)]
        rep = check_cone_estimates(tr, np.zeros_like(tr.v_half), 0.2, cones, n_times=4)
        assert np.all(rep.lhs == 0) and np.all(rep.fitted_C == 0)
        np.testing.assert_allclose(rep.positivity, 0.1)

    def test_shape_mismatch(self, mesh8, lame):
        tr = integrate(DynamicProblem(mesh8, lame, None, T=0.2), store="none", store_midpoint=True)
        with pytest.raises(ValidationError):
            check_cone_estimates(tr, np.zeros((2, 3, 2)), None, [ConeSpec(0.5, 0.5, 0.2)])


class TestMassInequality:
    def test_equality_when_xi_equals_eta(self, rng):
        xi = rng.normal(size=(100, 2))
        M = np.array([[2.0, 0.3], [0.3, 0.5]])
        np.testing.assert_allclose(mass_inequality_gap(1.0, M, xi, xi), 0.0, atol=1e-12)

    def test_zero_mass_is_equality(self, rng):
        xi, eta = rng.normal(size=(2, 50, 2))
        np.testing.assert_allclose(mass_inequality_gap(1.5, np.zeros((2, 2)), xi, eta), 0.0, atol=1e-12)

    def test_random_psd_has_no_violation(self, rng):
        n = 20000
        A = rng.normal(size=(n, 2, 2))
        M = A @ np.transpose(A, (0, 2, 1))
        xi, eta = rng.normal(size=(2, n, 2))
        rep = check_mass_inequality(M, (xi, eta))
        assert rep.violations == 0 and rep.failing is None
        assert rep.max_excess <= 1e-12

    def test_indefinite_rejected(self):
        with pytest.raises(ValidationError):
            check_mass_inequality(np.diag([1.0, -1.0]), (np.ones((1, 2)), np.ones((1, 2))))

    def test_violation_reported(self):
        rep = check_mass_inequality(np.stack([-np.eye(2) * 0.5]), (np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])))
        assert rep.violations == 1 and rep.failing is not None


class TestTimePairings:
    def test_exact_values(self):
        t = np.linspace(0, 2.0, 2001)
        P = time_pairings(t, np.ones(t.size))
        np.testing.assert_allclose(P, [4 / np.pi, 0.0, 1.0, 2.0], atol=1e-5)

    def test_trailing_axes(self):
        t = np.linspace(0, 1, 11)
        s = np.ones((11, 3, 2))
        assert time_pairings(t, s, factors=("one",)).shape == (1, 3, 2)

    def test_errors(self):
        with pytest.raises(ValidationError, match="samples"):
            time_pairings(np.arange(3.0), np.ones(4))
        with pytest.raises(ValidationError, match="unknown"):
            time_pairings(np.arange(3.0), np.ones(3), factors=("cos",))
