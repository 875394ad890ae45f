"""Hot per-element loops, compiled with numba when available.

Every kernel exists twice: a ``@njit`` loop version and a vectorised numpy
version with identical semantics. The loop versions are used unless numba is
missing or ``MAGNETOHOM_NUMBA=0`` is set in the environment; the benchmark in
``benchmarks/bench_kernels.py`` times both paths against each other.
"""
import os

import numpy as np

_WANT_NUMBA = os.environ.get("MAGNETOHOM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by MAGNETOHOM_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def p1_geometry_numpy(nodes, tris):
    """Signed areas and barycentric gradients, shapes (nt,) and (nt, 3, 2)."""
    p0 = nodes[tris[:, 0]]
    p1 = nodes[tris[:, 1]]
    p2 = nodes[tris[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    grads = np.empty((tris.shape[0], 3, 2))
    safe = np.where(det == 0.0, 1.0, det)
    # rows of inverse Jacobian transpose
    grads[:, 1, 0] = d2[:, 1] / safe
    grads[:, 1, 1] = -d2[:, 0] / safe
    grads[:, 2, 0] = -d1[:, 1] / safe
    grads[:, 2, 1] = d1[:, 0] / safe
    grads[:, 0, :] = -grads[:, 1, :] - grads[:, 2, :]
    return area, grads


def elastic_element_matrices_numpy(area, grads, lam, mu):
    # K[(a,i),(b,j)] = |T| (lam g_ai g_bj + mu (d_ij g_a.g_b + g_aj g_bi))
    nt = area.shape[0]
    gg = np.einsum("tak,tbk->tab", grads, grads)
    ke = np.zeros((nt, 3, 2, 3, 2))
    for i in range(2):
        for j in range(2):
            blk = lam * grads[:, :, i][:, :, None] * grads[:, :, j][:, None, :]
            blk = blk + mu * grads[:, :, j][:, :, None] * grads[:, :, i][:, None, :]
            if i == j:
                blk = blk + mu * gg
            ke[:, :, i, :, j] = blk
    ke *= np.abs(area)[:, None, None, None, None]
    return ke.reshape(nt, 6, 6)


def element_strains_numpy(grads, tris, u):
    """Symmetric gradients per triangle, shape (nt, 2, 2)."""
    ue = u[tris]  # (nt, 3, 2)
    gu = np.einsum("tai,tak->tik", ue, grads)
    return 0.5 * (gu + np.transpose(gu, (0, 2, 1)))


def energy_density_numpy(grads, tris, u, v, lam, mu):
    eu = element_strains_numpy(grads, tris, u)
    ev = eu if v is u else element_strains_numpy(grads, tris, v)
    tr_u = eu[:, 0, 0] + eu[:, 1, 1]
    tr_v = ev[:, 0, 0] + ev[:, 1, 1]
    return lam * tr_u * tr_v + 2.0 * mu * np.einsum("tij,tij->t", eu, ev)


def vertex_fraction_in_ball_numpy(nodes, tris, cx, cy, radius):
    d2 = (nodes[:, 0] - cx) ** 2 + (nodes[:, 1] - cy) ** 2
    inside = (d2 <= radius * radius).astype(np.float64)
    return inside[tris].sum(axis=1) / 3.0


def block_apply_numpy(blocks, x):
    return np.einsum("nij,nj->ni", blocks, x)


# ---------------------------------------------------------------------------
# numba versions
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def p1_geometry_numba(nodes, tris):
        nt = tris.shape[0]
        area = np.empty(nt)
        grads = np.empty((nt, 3, 2))
        for t in range(nt):
            a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
            d1x = nodes[b, 0] - nodes[a, 0]
            d1y = nodes[b, 1] - nodes[a, 1]
            d2x = nodes[c, 0] - nodes[a, 0]
            d2y = nodes[c, 1] - nodes[a, 1]
            det = d1x * d2y - d1y * d2x
            area[t] = 0.5 * det
            s = det if det != 0.0 else 1.0
            grads[t, 1, 0] = d2y / s
            grads[t, 1, 1] = -d2x / s
            grads[t, 2, 0] = -d1y / s
            grads[t, 2, 1] = d1x / s
            grads[t, 0, 0] = -grads[t, 1, 0] - grads[t, 2, 0]
            grads[t, 0, 1] = -grads[t, 1, 1] - grads[t, 2, 1]
        return area, grads

    @njit(cache=True)
    def elastic_element_matrices_numba(area, grads, lam, mu):
        nt = area.shape[0]
        ke = np.zeros((nt, 6, 6))
        for t in range(nt):
            w = abs(area[t])
            for a in range(3):
                for b in range(3):
                    gab = grads[t, a, 0] * grads[t, b, 0] + grads[t, a, 1] * grads[t, b, 1]
                    for i in range(2):
                        for j in range(2):
                            val = lam * grads[t, a, i] * grads[t, b, j] + mu * grads[t, a, j] * grads[t, b, i]
                            if i == j:
                                val += mu * gab
                            ke[t, 2 * a + i, 2 * b + j] = w * val
        return ke

    @njit(cache=True)
    def element_strains_numba(grads, tris, u):
        nt = tris.shape[0]
        out = np.zeros((nt, 2, 2))
        for t in range(nt):
            g00 = 0.0
            g01 = 0.0
            g10 = 0.0
            g11 = 0.0
            for a in range(3):
                node = tris[t, a]
                g00 += u[node, 0] * grads[t, a, 0]
                g01 += u[node, 0] * grads[t, a, 1]
                g10 += u[node, 1] * grads[t, a, 0]
                g11 += u[node, 1] * grads[t, a, 1]
            off = 0.5 * (g01 + g10)
            out[t, 0, 0] = g00
            out[t, 1, 1] = g11
            out[t, 0, 1] = off
            out[t, 1, 0] = off
        return out

    @njit(cache=True)
    def energy_density_numba(grads, tris, u, v, lam, mu):
        eu = element_strains_numba(grads, tris, u)
        ev = element_strains_numba(grads, tris, v)
        nt = tris.shape[0]
        out = np.empty(nt)
        for t in range(nt):
            tru = eu[t, 0, 0] + eu[t, 1, 1]
            trv = ev[t, 0, 0] + ev[t, 1, 1]
            dd = (eu[t, 0, 0] * ev[t, 0, 0] + eu[t, 1, 1] * ev[t, 1, 1]
                  + 2.0 * eu[t, 0, 1] * ev[t, 0, 1])
            out[t] = lam * tru * trv + 2.0 * mu * dd
        return out

    @njit(cache=True)
    def vertex_fraction_in_ball_numba(nodes, tris, cx, cy, radius):
        nt = tris.shape[0]
        out = np.empty(nt)
        r2 = radius * radius
        for t in range(nt):
            cnt = 0
            for a in range(3):
                node = tris[t, a]
                dx = nodes[node, 0] - cx
                dy = nodes[node, 1] - cy
                if dx * dx + dy * dy <= r2:
                    cnt += 1
            out[t] = cnt / 3.0
        return out

    @njit(cache=True)
    def block_apply_numba(blocks, x):
        n = x.shape[0]
        out = np.empty((n, 2))
        for i in range(n):
            out[i, 0] = blocks[i, 0, 0] * x[i, 0] + blocks[i, 0, 1] * x[i, 1]
            out[i, 1] = blocks[i, 1, 0] * x[i, 0] + blocks[i, 1, 1] * x[i, 1]
        return out

    p1_geometry = p1_geometry_numba
    elastic_element_matrices = elastic_element_matrices_numba
    element_strains = element_strains_numba
    _energy_density = energy_density_numba
    vertex_fraction_in_ball = vertex_fraction_in_ball_numba
    block_apply = block_apply_numba
else:
    p1_geometry = p1_geometry_numpy
    elastic_element_matrices = elastic_element_matrices_numpy
    element_strains = element_strains_numpy
    _energy_density = energy_density_numpy
    vertex_fraction_in_ball = vertex_fraction_in_ball_numpy
    block_apply = block_apply_numpy


def energy_density(grads, tris, u, v, lam, mu):
    """Per-triangle ``A e(u) : e(v)`` for P1 fields ``u``, ``v`` of shape (nn, 2)."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = u if v is None else np.ascontiguousarray(v, dtype=np.float64)
    return _energy_density(grads, tris, u, v, float(lam), float(mu))
