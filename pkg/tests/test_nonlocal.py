import numpy as np
import pytest

from magnetohom.errors import ValidationError
from magnetohom.fem import LameTensor, build_mesh
from magnetohom.fields import FieldSum, make_spacetime_skew
from magnetohom.limits import ConeSpec
from magnetohom.nonlocal_op import (FunctionTargets, HatBasis, cell_coverage, coarse_norm, estimate_F, estimate_G,
                                   estimate_kernel, max_stable_dt, penalized_response, solve_penalized)
from conftest import bump


def w_bump(t, x):
    return np.column_stack([bump(x), 0 * x[:, 0]])


def w_zero(t, x):
    return np.zeros((x.shape[0], 2))


@pytest.fixture(scope="module")
def G4():
    return FieldSum((make_spacetime_skew(1.0, 1 / 4),))


class TestPenalized:
    def test_zero_target_zero_response(self, mesh16, lame):
        r = solve_penalized(mesh16, lame, w_zero, 10.0, None, T=0.3)
        assert r.tracking_error == 0.0 and np.all(r.trajectory.u_final == 0)
        assert r.g_coarse is None

    def test_tracking_without_fields(self, mesh16, lame):
        errs = [solve_penalized(mesh16, lame, w_bump, k, None, T=0.5).tracking_error for k in (10.0, 100.0, 1000.0)]
        assert errs[0] > errs[1] > errs[2]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios >= np.sqrt(10.0) * 0.95)

    def test_penalty_must_be_positive(self, mesh8, lame):
        with pytest.raises(ValidationError):
            solve_penalized(mesh8, lame, w_zero, 0.0)

    def test_max_stable_dt(self, mesh16, lame):
        assert max_stable_dt(mesh16, lame, 100.0, 0.5) == pytest.approx(1e-3)
        assert max_stable_dt(mesh16, lame, 0.0, None) == pytest.approx(mesh16.h / 4.0)


class TestBatch:
    def test_linearity(self, mesh16, lame, G4):
        tg = FunctionTargets([w_bump, lambda t, x: -3.0 * w_bump(t, x)])
        r = penalized_response(mesh16, lame, tg, 10.0, G4, T=0.3, n_cells=4, n_tbins=3)
        np.testing.assert_allclose(r.g_coarse[1], -3.0 * r.g_coarse[0], atol=1e-13)
        assert r.factorizations == 0  # weak field: fixed-point path only

    def test_matches_single_run(self, mesh16, lame, G4):
        r = penalized_response(mesh16, lame, FunctionTargets([w_bump]), 10.0, G4, T=0.3, n_cells=4, n_tbins=3)
        s = solve_penalized(mesh16, lame, w_bump, 10.0, G4, T=0.3, dt=max_stable_dt(mesh16, lame, 10.0, 0.25),
                            n_cells=4, n_tbins=3)
        np.testing.assert_allclose(r.g_coarse[0], s.g_coarse, rtol=1e-8, atol=1e-12)
        assert r.tracking[0] == pytest.approx(s.tracking_error, rel=1e-8)

    def test_dt_checked(self, mesh16, lame, G4):
        with pytest.raises(ValidationError, match="exceeds"):
            penalized_response(mesh16, lame, FunctionTargets([w_bump]), 10.0, G4, T=0.3, dt=0.05)


class TestOperatorG:
    def test_no_field_gives_zero(self, mesh16, lame):
        est = estimate_G(mesh16, lame, w_bump, ks=(1.0, 10.0), epsilons=(1 / 2, 1 / 4), fields=None, T=0.3,
                         n_cells=4, n_tbins=3)
        assert np.all(est.values == 0) and est.norm() == 0.0
        assert not est.flagged
        assert est.schedule() == {"k": [1.0, 10.0], "epsilon": [0.5, 0.25]}

    def test_schedule_length(self, mesh16, lame):
        with pytest.raises(ValidationError):
            estimate_G(mesh16, lame, w_bump, ks=(1.0,), epsilons=(1 / 2, 1 / 4))

    def test_coarse_field_evaluation(self, mesh16, lame, G4):
        est = estimate_G(build_mesh(16), lame, w_bump, ks=(1.0, 10.0), epsilons=(1 / 2, 1 / 4), fields=G4,
                         T=0.3, n_cells=4, n_tbins=3)
        f = est.field(0)
        x = np.array([[0.1, 0.1]])
        np.testing.assert_allclose(f(0.05, x)[0], est.values[0, 0, 0])
        assert est.norm() > 0


class TestOperatorF:
    def test_zero_velocity(self, mesh16, lame, G4):
        z = np.zeros((mesh16.n_nodes, 2))
        F = estimate_F(mesh16, lame, z, G4, ks=(1.0, 10.0), epsilons=(1 / 2, 1 / 4), T=0.3, n_cells=4, n_tbins=3,
                       cones=[ConeSpec(0.5, 0.5, 0.3)])
        assert F.norm == 0.0 and np.all(F.fitted_C == 0.0)

    def test_zero_mass_has_zero_bound(self, mesh16, lame, G4):
        p = bump(mesh16.nodes)
        F = estimate_F(mesh16, lame, np.column_stack([p, p]), G4, ks=(1.0, 10.0), epsilons=(1 / 2, 1 / 4),
                       M=None, T=0.3, n_cells=4, n_tbins=3, cones=[ConeSpec(0.5, 0.5, 0.3)])
        np.testing.assert_array_equal(F.rhs, 0.0)
        assert np.isfinite(F.norm)


class TestHatBasis:
    def test_partition_of_unity(self, rng):
        B = HatBasis(3, 4, 0.5)
        x = rng.random((30, 2))
        for t in (0.0, 0.2, 0.5):
            vals = B(t, x)
            np.testing.assert_allclose(vals[:, 0, 0::2].sum(axis=1), 1.0)
            np.testing.assert_allclose(vals[:, 1, 1::2].sum(axis=1), 1.0)
            assert np.all(vals[:, 0, 1::2] == 0)

    def test_projection_reproduces_hat(self):
        B = HatBasis(2, 3, 1.0)
        col = 7
        coef = B.project(lambda t, x: B(t, x)[:, :, col])
        expect = np.zeros(B.ncols)
        expect[col] = 1.0
        np.testing.assert_allclose(coef, expect, atol=1e-10)

    def test_supports_cover_domain(self):
        sup = HatBasis(2, 2, 1.0).supports()
        assert sup[:, 0].min() == 0.0 and sup[:, 1].max() == 1.0
        assert sup[:, 2].min() == 0.0 and sup[:, 5].max() == 1.0

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            HatBasis(0, 2, 1.0)


class TestKernel:
    def test_no_field_kernel_is_zero(self, mesh16, lame):
        K = estimate_kernel(mesh16, lame, None, ks=(1.0, 10.0), epsilons=(1 / 2, 1 / 4), T=0.25, n_bins=(2, 2))
        assert K.total_weight == 0.0 and K.leak_fraction == 0.0 and K.causality_max == 0.0
        assert K.response_rank == 0

    def test_small_kernel_causal_and_local(self, lame, G4):
        K = estimate_kernel(build_mesh(32), lame, G4, ks=(1.0, 10.0), epsilons=(1 / 4, 1 / 8), T=0.25,
                            n_bins=(2, 3), heldout=w_bump)
        assert K.causality_max <= 1e-10
        assert K.leak_fraction <= 0.05
        assert K.response_rank == K.basis.ncols
        assert K.heldout_error is not None and K.heldout_error < 1.0

    def test_csv(self, mesh16, lame, tmp_path):
        K = estimate_kernel(mesh16, lame, None, ks=(1.0, 10.0), epsilons=(1 / 2, 1 / 4), T=0.25, n_bins=(1, 2))
        K.write_csv(tmp_path / "k.csv")
        lines = (tmp_path / "k.csv").read_text().splitlines()
        assert lines[0].startswith("ts_bin,xs_bin")
        assert len(lines) == 1 + 1 * 4 * 1 * 4


class TestCoarseHelpers:
    def test_coarse_norm_of_constant(self):
        vals = np.ones((4, 9, 2))
        assert coarse_norm(vals, 2.0, 3) == pytest.approx(np.sqrt(2.0 * 2))

    def test_cell_coverage(self):
        full = cell_coverage(ConeSpec(0.5, 0.5, 1.0), 0.0, 4)
        np.testing.assert_allclose(full, 1.0)
        assert cell_coverage(ConeSpec(0.5, 0.5, 0.5), 0.5, 4).sum() == 0.0
