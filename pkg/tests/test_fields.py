import math

import numpy as np
import pytest

from magnetohom.errors import SingularLimitError, ValidationError
from magnetohom.fields import (J, FieldSum, as_field, average_rotation, limit_inverse_mass, make_compact,
                               make_space_skew, make_spacetime_skew, make_time_skew, skew, spec_from_dict)
from oracles import bessel_j0_first_zero, bessel_j0_series, midpoint_pairing

X = np.random.default_rng(5).random((100, 2))


class TestTimeSkew:
    def test_beta_vanishes_at_zero(self):
        s = make_time_skew(1.3, 0.1)
        np.testing.assert_array_equal(s.beta_matrix(0.0), np.zeros((2, 2)))

    def test_B_at_zero(self):
        a, eps, rho = 1.5, 1 / 16, 2.0
        s = make_time_skew(a, eps, rho)
        B = s.matrix(0.0, X[:1])[0]
        np.testing.assert_allclose(B, rho * a / eps * J)

    def test_beta_derivative_is_B(self):
        s = make_time_skew(1.0, 0.05)
        t, h = 0.37, 1e-6
        db = (s.beta(t + h) - s.beta(t - h)) / (2 * h)
        assert db == pytest.approx(s.coefficient(t, X[:1])[0], rel=1e-8)

    def test_commutator_vanishes(self):
        rng = np.random.default_rng(0)
        s = make_time_skew(0.8, 0.1)
        for t in rng.random(100):
            b, db = s.beta_matrix(t), s.matrix(t, X[:1])[0]
            np.testing.assert_allclose(db @ b - b @ db, 0.0, atol=1e-12)


class TestInverseMassLimit:
    def test_no_oscillation(self):
        np.testing.assert_allclose(limit_inverse_mass(make_time_skew(0.0, 0.1)).matrix, np.eye(2), atol=1e-15)

    def test_bessel_value(self):
        lim = limit_inverse_mass(make_time_skew(1.0, 0.1))
        np.testing.assert_allclose(lim.matrix, bessel_j0_series(1.0) * np.eye(2), atol=1e-12)

    @pytest.mark.parametrize("a", [0.3, 1.7, 2.2, 3.5])
    def test_bessel_series_other_amplitudes(self, a):
        lim = limit_inverse_mass(make_time_skew(a, 1.0))
        assert lim.matrix[0, 0] == pytest.approx(bessel_j0_series(a), abs=1e-12)

    def test_singular_at_first_zero(self):
        a = bessel_j0_first_zero()
        assert a == pytest.approx(2.404826, abs=1e-6)
        with pytest.raises(SingularLimitError):
            limit_inverse_mass(make_time_skew(a, 0.1))

    def test_independent_of_eps(self):
        m1 = limit_inverse_mass(make_time_skew(1.0, 0.1)).matrix
        m2 = limit_inverse_mass(make_time_skew(1.0, 0.003)).matrix
        np.testing.assert_allclose(m1, m2, atol=1e-13)

    def test_finite_horizon_average_converges(self):
        ref = bessel_j0_series(1.0)
        errs = [abs(average_rotation(make_time_skew(1.0, e), 1.0)[0, 0] - ref) for e in (1 / 8, 1 / 32, 1 / 128)]
        assert errs[0] > errs[1] > errs[2]

    def test_requires_time_field(self):
        with pytest.raises(ValidationError):
            limit_inverse_mass(make_space_skew("sin_y1", 0.1))


class TestSpaceSkew:
    def test_zero_profile(self):
        s = make_space_skew("zero", 0.1)
        np.testing.assert_array_equal(s.coefficient(0.0, X), 0.0)

    def test_skew_symmetric(self):
        s = make_space_skew("sin_y1_sin_y2", 1 / 8)
        Fm = s.matrix(0.0, X)
        np.testing.assert_allclose(Fm + np.transpose(Fm, (0, 2, 1)), 0.0, atol=0)

    def test_rejects_nonzero_mean(self):
        with pytest.raises(ValidationError):
            make_space_skew(lambda y1, y2: 1.0 + 0 * y1, 0.1)

    def test_scaling(self):
        s = make_space_skew("sin_y1", 0.25, amplitude=2.0)
        x = np.array([[1 / 16, 0.3]])
        assert s.coefficient(0.0, x)[0] == pytest.approx(2.0 / 0.25 * math.sin(2 * math.pi * 0.25))

    @pytest.mark.parametrize("inv_eps", [4, 8, 16, 32, 64])
    def test_pairing_bounded_about_zero(self, inv_eps):
        phi = lambda a, b: a * (1 - a) * b * (1 - b)  # noqa: E731
        s = make_space_skew("sin_y1", 1.0 / inv_eps)
        f = lambda a, b: s.coefficient(0.0, np.stack([a, b], -1))  # noqa: E731
        val = midpoint_pairing(f, phi, m=2048)
        assert abs(val) < 1e-3

    def test_pairing_at_offset_eps_is_bounded(self):
        phi = lambda a, b: a * (1 - a) * b * (1 - b)  # noqa: E731
        vals = []
        for e in (1 / 4.5, 1 / 8.5, 1 / 16.5, 1 / 32.5):
            s = make_space_skew("sin_y1", e)
            vals.append(midpoint_pairing(lambda a, b: s.coefficient(0.0, np.stack([a, b], -1)), phi, m=2048))
        # incomplete periods leave an O(1) bounded remainder instead of exact cancellation
        vals = np.abs(vals)
        assert np.all(vals < 0.05)
        assert vals.max() > 1e-4


class TestSpacetimeSkew:
    def test_vanishes_at_t0(self):
        s = make_spacetime_skew(1.0, 0.1)
        np.testing.assert_array_equal(s.coefficient(0.0, X), 0.0)

    def test_sup_norm_bound(self):
        gamma = 1.7
        s = make_spacetime_skew(gamma, 1 / 16, "bump")
        g = np.linspace(0, 1, 100)
        P = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        for t in np.linspace(0, 1, 7):
            assert np.max(np.abs(s.coefficient(t, P))) <= gamma * 1.0 + 1e-14

    def test_spacetime_pairing_decays(self):
        eps_list = np.array([1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 64])
        nt, m = 4096, 512
        t = (np.arange(nt) + 0.5) / nt
        s_ = (np.arange(m) + 0.5) / m
        X1, X2 = np.meshgrid(s_, s_)
        P = np.stack([X1.ravel(), X2.ravel()], -1)
        phi_x = (P[:, 0] * (1 - P[:, 0]) * P[:, 1] * (1 - P[:, 1]) * (1 + P[:, 0]))
        vals = []
        for e in eps_list:
            # a slightly detuned eps avoids exact cancellation over whole periods
            s = make_spacetime_skew(1.0, e + 1e-3)
            space = np.mean(np.sin(2 * np.pi * P[:, 0] / s.epsilon) * s.fn(P[:, 0], P[:, 1]) * phi_x)
            time = np.mean(np.sin(t / s.epsilon) * (1 + t))
            vals.append(abs(space * time))
        slope = np.polyfit(np.log(eps_list), np.log(vals), 1)[0]
        assert slope >= 1.0

    def test_omega_scales_time_frequency(self):
        s1 = make_spacetime_skew(1.0, 0.1, omega=1.0)
        s2 = make_spacetime_skew(1.0, 0.1, omega=2.0)
        x = np.array([[0.33, 0.4]])
        assert s2.coefficient(0.3, x)[0] == pytest.approx(s1.coefficient(0.6, x)[0])


class TestCompact:
    def test_zero(self):
        np.testing.assert_array_equal(make_compact("zero").coefficient(0.5, X), 0.0)

    def test_linear_in_time_accepted(self):
        h = make_compact("t")
        assert h.coefficient(0.0, X[:1])[0] == 0.0
        assert h.coefficient(0.5, X[:1])[0] == pytest.approx(0.5)

    def test_constant_rejected(self):
        with pytest.raises(ValidationError):
            make_compact("const")

    def test_unknown_name(self):
        with pytest.raises(ValidationError):
            make_compact("nope")


class TestComposition:
    def test_field_sum_adds(self):
        a = make_space_skew("sin_y1", 0.1)
        b = make_compact("t_bump")
        fs = FieldSum((a, b))
        np.testing.assert_allclose(fs.coefficient(0.4, X), a.coefficient(0.4, X) + b.coefficient(0.4, X))
        assert fs.time_dependent and not as_field(a).time_dependent

    def test_as_field_variants(self):
        assert as_field(None).components == ()
        assert len(as_field([make_compact("t"), make_compact("t_bump")]).components) == 2

    @pytest.mark.parametrize("d", [
        {"kind": "time_exp", "amplitude": 1.0, "epsilon": 0.1},
        {"kind": "space_strong", "profile": "sin_y2", "epsilon": 0.2},
        {"kind": "spacetime_bounded", "amplitude": 0.5, "epsilon": 0.1, "omega": 3.0},
        {"kind": "compact", "profile": "t"},
    ])
    def test_round_trip(self, d):
        s = spec_from_dict(d)
        s2 = spec_from_dict(s.to_dict())
        np.testing.assert_allclose(s2.coefficient(0.3, X), s.coefficient(0.3, X))

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            spec_from_dict({"kind": "magnetic"})

    def test_skew_helper(self):
        np.testing.assert_array_equal(skew(np.array([2.0]))[0], 2 * J)
