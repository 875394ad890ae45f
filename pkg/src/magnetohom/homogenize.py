"""Correctors, effective masses and the homogenized dynamic problems."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import DynamicProblem, Trajectory, integrate, triangle_cells
from .errors import SingularLimitError, ValidationError
from .fem import (LameTensor, Mesh2D, assemble_stiffness, build_mesh, energy_density, from_free, h1_norm,
                  l2_norm, restrict, rigid_modes, solve_spd, to_free)
from .fields import J, SkewFieldSpec, limit_inverse_mass, make_time_skew

# degree-5 Dunavant rule on the reference triangle (barycentric points, weights summing to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
QUAD_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
QUAD_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)

PROVENANCES = ("time_bessel", "domain_weak_limit", "cell_oracle")


def quadrature_points(mesh: Mesh2D):
    """Points (nt, 7, 2) and weights (nt, 7) of the per-triangle degree-5 rule."""
    P = mesh.nodes[mesh.triangles]  # (nt, 3, 2)
    x = np.einsum("qa,tak->tqk", QUAD_BARY, P)
    w = mesh.area[:, None] * QUAD_W[None, :]
    return x, w


def skew_load(mesh: Mesh2D, spec, z, t: float = 0.0) -> np.ndarray:
    """Nodal vector with entries int b(t,x) (J z(x)) . phi_a e_c dx (degree-5 quadrature).

    ``z`` is a P1 nodal field of shape (nn, 2) or a constant 2-vector.
    """
    xq, wq = quadrature_points(mesh)
    b = spec.coefficient(t, xq.reshape(-1, 2)).reshape(wq.shape)
    z = np.asarray(z, float)
    if z.shape == (2,):
        zq = np.broadcast_to(z, xq.shape)
    else:
        zq = np.einsum("qa,tac->tqc", QUAD_BARY, z[mesh.triangles])
    Jz = np.einsum("ij,tqj->tqi", J, zq)
    contrib = np.einsum("tq,qa,tqc->tac", wq * b, QUAD_BARY, Jz)
    out = np.zeros((mesh.n_nodes, 2))
    np.add.at(out, mesh.triangles.ravel(), contrib.reshape(-1, 2))
    return out


def body_load(mesh: Mesh2D, f: Callable) -> np.ndarray:
    """Nodal load int f . phi_a e_c dx for a vector function f(x) -> (m, 2)."""
    xq, wq = quadrature_points(mesh)
    fq = np.asarray(f(xq.reshape(-1, 2)), float).reshape(xq.shape)
    contrib = np.einsum("tq,qa,tqc->tac", wq, QUAD_BARY, fq)
    out = np.zeros((mesh.n_nodes, 2))
    np.add.at(out, mesh.triangles.ravel(), contrib.reshape(-1, 2))
    return out


def required_n(eps: float) -> int:
    """Smallest structured n with h = sqrt(2)/n <= eps/8."""
    return int(math.ceil(8.0 * math.sqrt(2.0) / eps - 1e-9))


# ---------------------------------------------------------------------------
# effective mass containers
# ---------------------------------------------------------------------------

@dataclass
class EffectiveMass:
    matrix: np.ndarray
    provenance: str
    cells: np.ndarray | None = None
    stability: float | None = None
    flagged: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        self.matrix = np.asarray(self.matrix, float)
        for M in [self.matrix] + ([] if self.cells is None else list(self.cells)):
            if abs(M[0, 1] - M[1, 0]) > 1e-10:
                raise ValidationError(f"effective mass is not symmetric: {M}")
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -1e-10:
                raise ValidationError(f"effective mass is not positive semidefinite: {M}")

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "matrix": self.matrix.tolist(),
            "stability": self.stability,
            "flagged": self.flagged,
            "cells": None if self.cells is None else self.cells.tolist(),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def effective_mass_time(a: float, rho: float = 1.0) -> EffectiveMass:
    """rho Mt^T Mt for beta_eps = rho a sin(t/eps) J; equals rho / J0(a)^2 times I."""
    lim = limit_inverse_mass(make_time_skew(a, 1.0, rho))
    Mt = lim.mass_matrix
    M = rho * Mt.T @ Mt
    M = 0.5 * (M + M.T)
    return EffectiveMass(M, "time_bessel", info={"a": a, "rho": rho, "inverse_limit": lim.matrix.tolist()})


# ---------------------------------------------------------------------------
# correctors on the domain
# ---------------------------------------------------------------------------

@dataclass
class CorrectorSet:
    epsilon: float
    mesh: Mesh2D
    lame: LameTensor
    spec: SkewFieldSpec
    w: np.ndarray  # (2, nn, 2)
    h1: np.ndarray
    l2: np.ndarray
    energy_h1: np.ndarray  # ||e(w^j)||_L2
    residual: np.ndarray

    def gram_density(self) -> np.ndarray:
        """Per-triangle A e(w^j):e(w^k), shape (nt, 2, 2)."""
        out = np.empty((self.mesh.n_triangles, 2, 2))
        for j in range(2):
            for k in range(j, 2):
                d = energy_density(self.mesh, self.lame, self.w[j], self.w[k])
                out[:, j, k] = d
                out[:, k, j] = d
        return out

    def combination(self, z) -> np.ndarray:
        """Nodal interpolant of sum_j w^j z_j."""
        z = np.asarray(z, float)
        return self.w[0] * z[:, 0:1] + self.w[1] * z[:, 1:2]


def _strain_l2(mesh, u):
    from .fem import _kernels  # noqa: F401

    ue = u[mesh.triangles]
    gu = np.einsum("tai,tak->tik", ue, mesh.grads)
    e = 0.5 * (gu + np.transpose(gu, (0, 2, 1)))
    return float(math.sqrt(np.sum(mesh.area * np.einsum("tij,tij->t", e, e))))


def solve_corrector(mesh: Mesh2D, lame: LameTensor, spec: SkewFieldSpec, tol: float = 1e-10,
                    check_resolution: bool = True) -> CorrectorSet:
    """Solve -Div(A e(w^j)) + F_eps e_j = 0, w^j = 0 on the boundary, for j = 1, 2."""
    if spec.kind != "space_strong":
        raise ValidationError("correctors need a space_strong field")
    eps = spec.epsilon
    if check_resolution and mesh.h > eps / 8.0 * (1 + 1e-9):
        raise ValidationError(f"mesh h={mesh.h:.4g} does not resolve eps={eps:.4g} "
                              f"(need h <= eps/8, n >= {required_n(eps)})")
    Kf = restrict(assemble_stiffness(mesh, lame), mesh)
    rhs = np.column_stack([-to_free(mesh, skew_load(mesh, spec, np.eye(2)[j])) for j in range(2)])
    X = solve_spd(Kf, rhs, tol=tol, nullspace=rigid_modes(mesh))
    ws, res = [], []
    for j in range(2):
        res.append(float(np.linalg.norm(Kf @ X[:, j] - rhs[:, j]) / max(np.linalg.norm(rhs[:, j]), 1e-300)))
        ws.append(from_free(mesh, X[:, j]))
    w = np.array(ws)
    return CorrectorSet(eps, mesh, lame, spec, w,
                        np.array([h1_norm(mesh, wj) for wj in w]),
                        np.array([l2_norm(mesh, wj) for wj in w]),
                        np.array([_strain_l2(mesh, wj) for wj in w]),
                        np.array(res))


def per_cell_mass(cs: CorrectorSet, n_cells: int = 8) -> np.ndarray:
    """Coarse-cell averages of A e(w^j):e(w^k), shape (n_cells^2, 2, 2)."""
    dens = cs.gram_density()
    cells = triangle_cells(cs.mesh, n_cells)
    area = np.bincount(cells, weights=cs.mesh.area, minlength=n_cells ** 2)
    out = np.empty((n_cells ** 2, 2, 2))
    for j in range(2):
        for k in range(2):
            out[:, j, k] = np.bincount(cells, weights=dens[:, j, k] * cs.mesh.area, minlength=n_cells ** 2) / area
    return 0.5 * (out + np.transpose(out, (0, 2, 1)))


def interior_cells(n_cells: int) -> np.ndarray:
    """Indices of coarse cells not touching the boundary."""
    i = np.arange(n_cells)
    I, Jc = np.meshgrid(i, i, indexing="xy")
    m = (I > 0) & (I < n_cells - 1) & (Jc > 0) & (Jc < n_cells - 1)
    return np.flatnonzero(m.ravel())


def effective_mass_domain(correctors: Sequence[CorrectorSet], n_cells: int = 8,
                          threshold: float = 0.2) -> EffectiveMass:
    """Per-cell M at the finest eps; stability = relative change against the next finest.

    The summary ``matrix`` is the mean over interior cells (cells touching the
    boundary carry the corrector boundary layer and are reported but excluded).
    """
    if len(correctors) < 2:
        raise ValidationError("effective_mass_domain needs at least two eps values")
    return effective_mass_from_cells([per_cell_mass(c, n_cells) for c in correctors],
                                     [c.epsilon for c in correctors], threshold)


def effective_mass_from_cells(cells: Sequence[np.ndarray], epsilons: Sequence[float],
                              threshold: float = 0.2) -> EffectiveMass:
    """Domain effective mass from per-cell matrices of shape (n_cells^2, 2, 2), one per eps."""
    if len(cells) < 2 or len(cells) != len(epsilons):
        raise ValidationError("need per-cell masses for at least two eps values")
    order = np.argsort(epsilons)
    fine, second = np.asarray(cells[order[0]], float), np.asarray(cells[order[1]], float)
    n_cells = int(round(math.sqrt(fine.shape[0])))
    inner = interior_cells(n_cells)
    sel = inner if inner.size else np.arange(n_cells ** 2)
    Mf = fine[sel].mean(axis=0)
    Ms = second[sel].mean(axis=0)
    nrm = np.linalg.norm(Mf)
    stab = float(np.linalg.norm(Mf - Ms) / nrm) if nrm > 0 else 0.0
    return EffectiveMass(Mf, "domain_weak_limit", cells=fine, stability=stab, flagged=stab > threshold,
                         info={"epsilons": sorted(float(e) for e in epsilons), "n_cells": n_cells,
                               "interior_cells": sel.tolist(), "second_finest": Ms.tolist()})


# ---------------------------------------------------------------------------
# periodic cell oracle
# ---------------------------------------------------------------------------

@dataclass
class CellSolution:
    m: int
    mesh: Mesh2D
    chi: np.ndarray  # (2, nn_unfolded, 2), periodic copies filled in
    M: EffectiveMass
    gram_check: float


def _periodic_map(m):
    n1 = m + 1
    idx = np.arange(n1 * n1)
    i = idx % n1
    j = idx // n1
    per = (j % m) * m + (i % m)
    P = sp.csr_matrix((np.ones(2 * idx.size), (np.ravel([2 * idx, 2 * idx + 1], "F"),
                                                np.ravel([2 * per, 2 * per + 1], "F"))),
                      shape=(2 * idx.size, 2 * m * m))
    return per, P


def cell_oracle(profile="sin_y1", m: int = 64, lame: LameTensor | None = None, gauge: str = "mean") -> CellSolution:
    """Periodic unit-cell problem -Div_y(A e_y(chi^j)) + c0(y) J e_j = 0.

    Discretised with periodic P1 on an m x m grid; the zero-mean gauge is
    imposed with two Lagrange multipliers. ``gauge="none"`` leaves the
    translations free, which is detected and rejected.
    """
    from .fields import make_space_skew

    if m < 32:
        raise ValidationError(f"cell resolution m must be >= 32, got {m}")
    lame = lame or LameTensor()
    spec = make_space_skew(profile, 1.0)
    mesh = build_mesh(m)
    per, P = _periodic_map(m)
    K = (P.T @ assemble_stiffness(mesh, lame) @ P).tocsr()
    nper = m * m
    wts = np.bincount(per, weights=mesh.nodal_weights(), minlength=nper)
    transl = np.zeros((2 * nper, 2))
    transl[0::2, 0] = 1.0
    transl[1::2, 1] = 1.0
    if gauge == "none":
        kt = np.linalg.norm(K @ transl, axis=0)
        if np.all(kt <= 1e-10 * max(1.0, abs(K).max())):
            raise SingularLimitError("periodic cell system is singular: translations are not gauged out")
        A = K
    elif gauge == "mean":
        C = sp.csr_matrix(np.column_stack([transl[:, 0] * np.repeat(wts, 2), transl[:, 1] * np.repeat(wts, 2)]))
        A = sp.bmat([[K, C], [C.T, None]]).tocsc()
    else:
        raise ValidationError(f"unknown gauge {gauge!r}")
    lu = spla.splu(A.tocsc())
    chis = []
    for j in range(2):
        load = P.T @ skew_load(mesh, spec, np.eye(2)[j]).ravel()
        rhs = -load
        if gauge == "mean":
            rhs = np.concatenate([rhs, [0.0, 0.0]])
        x = lu.solve(rhs)[: 2 * nper]
        chis.append((P @ x).reshape(-1, 2))
    chi = np.array(chis)
    M = np.empty((2, 2))
    for j in range(2):
        for k in range(2):
            M[j, k] = float(np.sum(mesh.area * energy_density(mesh, lame, chi[j], chi[k])))
    # independent recomputation through the global stiffness
    Kfull = assemble_stiffness(mesh, lame)
    G = np.array([[chi[j].ravel() @ (Kfull @ chi[k].ravel()) for k in range(2)] for j in range(2)])
    gram = float(np.max(np.abs(G - M)))
    M = 0.5 * (M + M.T)
    return CellSolution(m, mesh, chi, EffectiveMass(M, "cell_oracle", info={"m": m, "profile": str(profile)}), gram)


# ---------------------------------------------------------------------------
# stationary problem and corrector residual
# ---------------------------------------------------------------------------

def solve_stationary(mesh: Mesh2D, lame: LameTensor, spec: SkewFieldSpec | None, z, f: Callable,
                     tol: float = 1e-10) -> np.ndarray:
    """Solve -Div(A e(u)) + F_eps z = f with u = 0 on the boundary."""
    load = body_load(mesh, f)
    if spec is not None:
        load = load - skew_load(mesh, spec, z)
    Kf = restrict(assemble_stiffness(mesh, lame), mesh)
    return from_free(mesh, solve_spd(Kf, to_free(mesh, load), tol=tol, nullspace=rigid_modes(mesh)))


@dataclass
class CorrectorResidual:
    h1: float
    energy_pairings: np.ndarray | None = None
    limit_pairings: np.ndarray | None = None
    defect: float | None = None


def corrector_residual(u_eps, u, z, correctors: CorrectorSet | None, M=None, dictionary=None,
                       mesh: Mesh2D | None = None, lame: LameTensor | None = None) -> CorrectorResidual:
    """||u_eps - u - sum_j w^j z_j||_{H1} and, if ``M`` and ``dictionary`` are given,
    the energy pairings int A e(u_eps):e(u_eps) phi against int (A e(u):e(u) + M z.z) phi.

    The defect is max over entries of |difference| / max |limit pairing|.
    """
    if correctors is not None:
        mesh, lame = correctors.mesh, correctors.lame
        corr = correctors.combination(z)
    else:
        if mesh is None:
            raise ValidationError("mesh required when no correctors are given")
        corr = 0.0
    d = np.asarray(u_eps, float) - np.asarray(u, float) - corr
    out = CorrectorResidual(h1_norm(mesh, d))
    if M is not None and dictionary is not None:
        cen = mesh.centroids()
        phi = dictionary.space_values(cen)  # (nd, nt)
        e_eps = energy_density(mesh, lame, u_eps)
        e_u = energy_density(mesh, lame, u)
        zc = np.asarray(z, float)[mesh.triangles].mean(axis=1)
        Mz = _mz_dot(M, zc, mesh)
        lhs = phi @ (mesh.area * e_eps)
        rhs = phi @ (mesh.area * (e_u + Mz))
        out.energy_pairings = lhs
        out.limit_pairings = rhs
        out.defect = float(np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(rhs)), 1e-300))
    return out


def _mz_dot(M, zc, mesh):
    M = np.asarray(M, float)
    if M.shape == (2, 2):
        return np.einsum("ti,ij,tj->t", zc, M, zc)
    nc = int(round(math.sqrt(M.shape[0])))
    cells = triangle_cells(mesh, nc)
    return np.einsum("ti,tij,tj->t", zc, M[cells], zc)


# ---------------------------------------------------------------------------
# coarse Q1 projection (for M zeta)
# ---------------------------------------------------------------------------

class CoarseQ1:
    """Continuous bilinear functions on an nc x nc grid of the unit square."""

    def __init__(self, nc: int):
        if nc < 1:
            raise ValidationError("coarse grid must have at least one cell")
        self.nc = nc
        self.n = (nc + 1) ** 2

    def basis(self, x) -> sp.csr_matrix:
        x = np.asarray(x, float)
        nc = self.nc
        s = np.clip(x * nc, 0.0, nc - 1e-12)
        i = np.floor(s).astype(int)
        f = s - i
        rows, cols, vals = [], [], []
        r = np.arange(x.shape[0])
        for di in (0, 1):
            for dj in (0, 1):
                wx = f[:, 0] if di else 1 - f[:, 0]
                wy = f[:, 1] if dj else 1 - f[:, 1]
                rows.append(r)
                cols.append((i[:, 1] + dj) * (nc + 1) + i[:, 0] + di)
                vals.append(wx * wy)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(x.shape[0], self.n))

    def gram(self) -> sp.csr_matrix:
        h = 1.0 / self.nc
        m1 = sp.diags([np.full(self.nc, h / 6), np.r_[h / 3, np.full(self.nc - 1, 2 * h / 3), h / 3],
                       np.full(self.nc, h / 6)], [-1, 0, 1])
        return sp.kron(m1, m1).tocsc()

    def project_load(self, load_at_quad, xq, wq) -> np.ndarray:
        """L2 projection given samples (nq, k) of a function at weighted quadrature points."""
        B = self.basis(xq)
        rhs = B.T @ (wq[:, None] * load_at_quad)
        return spla.splu(self.gram()).solve(rhs)

    def evaluate(self, coef, x) -> np.ndarray:
        return self.basis(x) @ coef


@dataclass
class InitialLimitData:
    u0: np.ndarray
    u1: np.ndarray
    Mzeta: np.ndarray
    zeta: np.ndarray | None
    velocity: np.ndarray
    zeta_mask: np.ndarray


def _node_matrices(M, mesh):
    M = np.asarray(M, float)
    if M.shape == (2, 2):
        return np.broadcast_to(M, (mesh.n_nodes, 2, 2))
    nc = int(round(math.sqrt(M.shape[0])))
    ix = np.clip((mesh.nodes[:, 0] * nc).astype(int), 0, nc - 1)
    iy = np.clip((mesh.nodes[:, 1] * nc).astype(int), 0, nc - 1)
    return M[iy * nc + ix]


def estimate_Mzeta(mesh: Mesh2D, spec: SkewFieldSpec, u0_eps, n_coarse: int = 8) -> np.ndarray:
    """Weak limit of F_eps u0_eps as a nodal field, by L2 projection onto coarse Q1."""
    xq, wq = quadrature_points(mesh)
    b = spec.coefficient(0.0, xq.reshape(-1, 2))
    uq = np.einsum("qa,tac->tqc", QUAD_BARY, np.asarray(u0_eps, float)[mesh.triangles]).reshape(-1, 2)
    Fu = b[:, None] * (uq @ J.T)
    Q = CoarseQ1(n_coarse)
    coef = Q.project_load(Fu, xq.reshape(-1, 2), wq.ravel())
    return Q.evaluate(coef, mesh.nodes)


def initial_limit_data(mesh: Mesh2D, lame: LameTensor, M, u0, u1, Mzeta=None) -> InitialLimitData:
    """Initial velocity (rho I + M)^{-1}(rho u1 + M zeta); zeta recovered where M is invertible."""
    rho = lame.rho
    Mn = _node_matrices(M if M is not None else np.zeros((2, 2)), mesh)
    mz = np.zeros((mesh.n_nodes, 2)) if Mzeta is None else np.asarray(Mzeta, float)
    q = rho * np.asarray(u1, float) + mz
    vel = np.linalg.solve(rho * np.eye(2)[None] + Mn, q[..., None])[..., 0]
    lam_min = np.linalg.eigvalsh(Mn)[:, 0]
    mask = lam_min > 1e-8
    zeta = None
    if mask.any():
        zeta = np.full((mesh.n_nodes, 2), np.nan)
        zeta[mask] = np.linalg.solve(Mn[mask], mz[mask][..., None])[..., 0]
    vel[mesh.boundary_nodes] = 0.0
    return InitialLimitData(np.asarray(u0, float), np.asarray(u1, float), mz, zeta, vel, mask)


# ---------------------------------------------------------------------------
# homogenized dynamics
# ---------------------------------------------------------------------------

def solve_homog_time(mesh: Mesh2D, lame: LameTensor, Mt, u0, u1, T: float, dt: float | None = None,
                     f: Callable | None = None, Mt_dot: Callable | None = None, **kw) -> Trajectory:
    """rho Mt^T Mt u'' - Div(A e(u)) + rho Mt^T Mt' u' = f, u'(0) = Mt(0)^{-1} u1.

    ``Mt`` is a 2x2 matrix or a callable t -> 2x2. For a callable without
    ``Mt_dot`` the derivative is taken by central differences.
    """
    rho = lame.rho
    if callable(Mt):
        Mfun = Mt
        if Mt_dot is None:
            def Mt_dot(t, h=1e-6):
                return (np.asarray(Mfun(t + h)) - np.asarray(Mfun(t - h))) / (2 * h)

        def density(t):
            m = np.asarray(Mfun(t), float)
            return rho * m.T @ m

        def damping(t):
            m = np.asarray(Mfun(t), float)
            return rho * m.T @ np.asarray(Mt_dot(t), float)
        M0 = np.asarray(Mfun(0.0), float)
    else:
        M0 = np.asarray(Mt, float)
        density = rho * M0.T @ M0
        damping = None
    if abs(np.linalg.det(M0)) < 1e-12:
        raise SingularLimitError("Mt(0) is singular")
    v0 = np.asarray(u1, float) @ np.linalg.inv(M0).T
    prob = DynamicProblem(mesh, lame, None, f, u0, v0, T, density=density, damping=damping)
    return integrate(prob, dt, **kw)


class CoarseField:
    """Piecewise-constant field on an n_tbins x n_cells^2 space-time grid."""

    def __init__(self, values, T: float, n_cells: int):
        self.values = np.asarray(values, float)  # (nt, nc^2, 2)
        self.T = T
        self.n_cells = n_cells

    def __call__(self, t, x):
        nt = self.values.shape[0]
        k = min(max(int(t / self.T * nt), 0), nt - 1)
        nc = self.n_cells
        ix = np.clip((x[:, 0] * nc).astype(int), 0, nc - 1)
        iy = np.clip((x[:, 1] * nc).astype(int), 0, nc - 1)
        return self.values[k, iy * nc + ix]


def solve_homog_general(mesh: Mesh2D, lame: LameTensor, M, u0, u1, T: float, H=None, g: Callable | None = None,
                        f: Callable | None = None, Mzeta=None, dt: float | None = None, **kw) -> Trajectory:
    """(rho I + M) u'' - Div(A e(u)) + H u' + g = f with u'(0) = (rho I + M)^{-1}(rho u1 + M zeta).

    ``M`` is an :class:`EffectiveMass`, a 2x2 matrix or per-cell matrices;
    ``g`` is a callable ``g(t, x) -> (m, 2)`` such as :class:`CoarseField`.
    """
    if isinstance(M, EffectiveMass):
        M = M.matrix if M.cells is None else M.cells
    M = np.zeros((2, 2)) if M is None else np.asarray(M, float)
    Mn = np.array(_node_matrices(M, mesh))
    if np.linalg.eigvalsh(Mn).min() < -1e-10:
        raise ValidationError("M must be positive semidefinite")
    init = initial_limit_data(mesh, lame, M, u0, u1, Mzeta)
    density = lame.rho * np.eye(2)[None] + Mn

    source = None
    if f is not None or g is not None:
        def source(t, x):
            out = np.zeros((x.shape[0], 2))
            if f is not None:
                out += f(t, x)
            if g is not None:
                out -= g(t, x)
            return out
    prob = DynamicProblem(mesh, lame, H, source, u0, init.velocity, T, density=density)
    return integrate(prob, dt, **kw)
