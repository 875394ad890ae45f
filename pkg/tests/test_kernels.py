import os
import subprocess
import sys

import numpy as np
import pytest

from magnetohom import _kernels as K
from magnetohom.fem import build_mesh

needs_numba = pytest.mark.skipif(not K.NUMBA_AVAILABLE, reason="numba backend not active")


@pytest.fixture(scope="module")
def setup():
    m = build_mesh(12)
    rng = np.random.default_rng(7)
    area, grads = K.p1_geometry_numpy(m.nodes, m.triangles)
    return m, area, grads, rng.normal(size=(m.n_nodes, 2)), rng.normal(size=(m.n_nodes, 2)), rng


class TestNumpyReference:
    def test_geometry(self, setup):
        m, area, grads, *_ = setup
        assert area.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-12)

    def test_block_apply(self, setup):
        m, *_, rng = setup
        b = rng.normal(size=(5, 2, 2))
        x = rng.normal(size=(5, 2))
        np.testing.assert_allclose(K.block_apply_numpy(b, x), np.einsum("nij,nj->ni", b, x))

    def test_energy_density_symmetric(self, setup):
        m, area, grads, u, v, _ = setup
        np.testing.assert_allclose(K.energy_density_numpy(grads, m.triangles, u, v, 1.0, 1.0),
                                   K.energy_density_numpy(grads, m.triangles, v, u, 1.0, 1.0), atol=1e-12)


@needs_numba
class TestParity:
    def test_geometry(self, setup):
        m = setup[0]
        for a, b in zip(K.p1_geometry_numba(m.nodes, m.triangles), K.p1_geometry_numpy(m.nodes, m.triangles)):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)

    def test_element_matrices(self, setup):
        _, area, grads, *_ = setup
        np.testing.assert_allclose(K.elastic_element_matrices_numba(area, grads, 2.0, 0.5),
                                   K.elastic_element_matrices_numpy(area, grads, 2.0, 0.5), rtol=1e-13, atol=1e-13)

    def test_strains_and_energy(self, setup):
        m, area, grads, u, v, _ = setup
        np.testing.assert_allclose(K.element_strains_numba(grads, m.triangles, u),
                                   K.element_strains_numpy(grads, m.triangles, u), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(K.energy_density_numba(grads, m.triangles, u, v, 1.0, 1.0),
                                   K.energy_density_numpy(grads, m.triangles, u, v, 1.0, 1.0), rtol=1e-11,
                                   atol=1e-11)

    def test_vertex_fraction(self, setup):
        m = setup[0]
        for r in (0.0, 0.2, 0.45, 2.0):
            np.testing.assert_array_equal(K.vertex_fraction_in_ball_numba(m.nodes, m.triangles, 0.4, 0.6, r),
                                          K.vertex_fraction_in_ball_numpy(m.nodes, m.triangles, 0.4, 0.6, r))

    def test_block_apply(self, setup):
        rng = setup[-1]
        b = rng.normal(size=(40, 2, 2))
        x = rng.normal(size=(40, 2))
        np.testing.assert_allclose(K.block_apply_numba(b, x), K.block_apply_numpy(b, x), rtol=1e-14)


class TestBackendFlag:
    def test_env_disables_numba(self):
        env = dict(os.environ, MAGNETOHOM_NUMBA="0")
        out = subprocess.run([sys.executable, "-c", "from magnetohom import _kernels as K; print(K.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numpy"
