"""Implicit midpoint integration of rho u'' - Div(A e(u)) + B u' = f.

With ``V = v^{n+1/2}`` each step solves

    (2 M + dt^2/2 K + dt B(t_{n+1/2})) V = 2 M v^n + dt (f(t_{n+1/2}) - K u^n)

and sets ``u^{n+1} = u^n + dt V``, ``v^{n+1} = 2 V - v^n``. Because the
magnetic blocks are skew, ``V . B V = 0`` and the discrete energy changes only
by the work of the source.

The symmetric part is factorised once. The time-dependent block-diagonal part
is handled by a preconditioned fixed-point iteration, falling back to a direct
solve of the full step matrix when the iteration stalls.
"""
from __future__ import annotations

import csv
import gzip
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .errors import ConvergenceError, ValidationError
from .fem import LameTensor, Mesh2D, assemble_stiffness, from_free, restrict
from .fields import J, FieldSum, SkewFieldSpec, as_field


NODES_PER_PERIOD = 4


def _spatial_scale(fld: FieldSum) -> float | None:
    eps = [c.epsilon for c in fld.components
           if c.kind in ("space_strong", "spacetime_bounded") and c.amplitude != 0.0]
    return min(eps) if eps else None


def check_spatial_resolution(mesh: Mesh2D, fld) -> None:
    """Vertex sampling of an eps-periodic field needs >= 4 grid spacings per period.

    Coarser meshes alias the field, e.g. sin(2 pi x1 / eps) vanishes at every
    node when eps equals the grid spacing.
    """
    eps = _spatial_scale(as_field(fld))
    if eps is None:
        return
    spacing = 1.0 / mesh.n if mesh.n else mesh.h / math.sqrt(2.0)
    if spacing > eps / NODES_PER_PERIOD * (1 + 1e-9):
        need = int(math.ceil(NODES_PER_PERIOD / eps - 1e-9))
        raise ValidationError(f"mesh spacing {spacing:.4g} does not resolve eps={eps:.4g}; "
                              f"need spacing <= eps/{NODES_PER_PERIOD} (n >= {need})")


def _oscillation_scale(fld: FieldSum) -> float | None:
    eps = [c.epsilon for c in fld.components if c.kind != "compact" and c.amplitude != 0.0]
    return min(eps) if eps else None


@dataclass
class DynamicProblem:
    """Problem data. ``density`` may be a scalar, a 2x2 matrix, per-node 2x2
    blocks or a callable of time returning one of those (default: rho)."""
    mesh: Mesh2D
    lame: LameTensor
    field: object = None
    source: Callable | None = None
    u0: np.ndarray | None = None
    u1: np.ndarray | None = None
    T: float = 1.0
    density: object = None
    damping: Callable | None = None
    penalty: float = 0.0
    target: Callable | None = None

    def __post_init__(self):
        if not (self.T > 0):
            raise ValidationError(f"T must be > 0, got {self.T}")
        self.field = as_field(self.field)
        nn = self.mesh.n_nodes
        for name in ("u0", "u1"):
            val = getattr(self, name)
            if val is None:
                val = np.zeros((nn, 2))
            val = np.array(val, dtype=float)
            if val.shape != (nn, 2):
                raise ValidationError(f"{name} must have shape ({nn}, 2), got {val.shape}")
            bd = val[self.mesh.boundary_nodes]
            if np.any(np.abs(bd) > 1e-12 * max(1.0, float(np.abs(val).max()))):
                raise ValidationError(f"{name} violates the Dirichlet condition on the boundary")
            val[self.mesh.boundary_nodes] = 0.0
            setattr(self, name, val)
        if self.penalty < 0:
            raise ValidationError("penalty must be >= 0")

    @property
    def epsilon(self) -> float | None:
        return _oscillation_scale(self.field)

    def default_dt(self) -> float:
        """dt = min(eps/10, h/(2c)), and at most 1/(10k) under a penalty."""
        dt = self.mesh.h / (2.0 * self.lame.wave_speed)
        if self.epsilon is not None:
            dt = min(dt, self.epsilon / 10.0)
        if self.penalty > 0:
            dt = min(dt, 1.0 / (10.0 * self.penalty))
        return dt


@dataclass
class Trajectory:
    mesh: Mesh2D
    dt: float
    times: np.ndarray
    energy: np.ndarray
    work: np.ndarray
    skew_work: np.ndarray
    snapshot_steps: np.ndarray
    u: np.ndarray | None
    v: np.ndarray | None
    u_final: np.ndarray
    v_final: np.ndarray
    v_half: np.ndarray | None = None
    iterations: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def t_half(self) -> np.ndarray:
        return 0.5 * (self.times[1:] + self.times[:-1])

    def snapshot_times(self) -> np.ndarray:
        return self.times[self.snapshot_steps]


def n_steps_for(T: float, dt: float) -> int:
    """Smallest step count whose uniform step does not exceed ``dt``."""
    return max(1, int(math.ceil(T / dt * (1.0 - 1e-12))))


def step_grid(T: float, dt: float) -> tuple[int, float]:
    """Step count and the (possibly reduced) step that lands exactly on T."""
    n = n_steps_for(T, dt)
    return n, T / n


def _blocks(spec, nn, t):
    """Evaluate a density/damping spec to per-node 2x2 blocks."""
    D = spec(t) if callable(spec) else spec
    D = np.asarray(D, dtype=float)
    if D.ndim == 0:
        D = D * np.eye(2)
    if D.shape == (2, 2):
        D = np.broadcast_to(D, (nn, 2, 2))
    if D.shape != (nn, 2, 2):
        raise ValidationError(f"block spec must be scalar, 2x2, or per-node 2x2; got {D.shape}")
    return D


class _StepSolver:
    """Solves (S + P(t)) V = r with S factorised once and P block diagonal."""

    def __init__(self, S, tol=1e-13, maxit=40):
        self.S = S.tocsc()
        self.lu = spla.splu(self.S, permc_spec="MMD_AT_PLUS_A")
        self.tol = tol
        self.maxit = maxit
        self.direct_steps = 0

    def solve(self, rhs, P=None, guess=None, step=None):
        if P is None:
            return self.lu.solve(rhs), 0
        nb = P.shape[0]
        rnorm = np.linalg.norm(rhs)
        if rnorm == 0.0:
            return np.zeros_like(rhs), 0
        V = self.lu.solve(rhs) if guess is None else guess.copy()
        prev = np.inf
        for it in range(1, self.maxit + 1):
            PV = _kernels.block_apply(P, V.reshape(nb, 2)).ravel()
            res = rhs - self.S @ V - PV
            rn = np.linalg.norm(res)
            if rn <= self.tol * rnorm:
                return V, it
            if rn > 0.9 * prev and it > 3:
                break
            prev = rn
            V = V + self.lu.solve(res)
        self.direct_steps += 1
        A = (self.S + _block_sparse(P)).tocsc()
        V = spla.spsolve(A, rhs)
        res = np.linalg.norm(rhs - A @ V)
        if not np.all(np.isfinite(V)) or res > 1e-8 * rnorm:
            raise ConvergenceError(f"step solve failed at step {step} (relative residual {res / rnorm:.3e})",
                                   residual=res / rnorm, step=step)
        return V, -1


def _block_sparse(P):
    from .fem import block_diag_matrix

    return block_diag_matrix(P)


def integrate(problem: DynamicProblem, dt: float | None = None, store="full", store_midpoint: bool = False,
              observers: Sequence[Callable] = (), check_resolution: bool = True, tol: float = 1e-13) -> Trajectory:
    """March the problem to its horizon with implicit midpoint steps.

    ``store`` is ``"full"`` (every step), ``"none"`` (initial and final state)
    or an integer stride. ``store_midpoint`` additionally keeps every
    ``v^{n+1/2}``. Observers are called as
    ``obs(n, t_half, u_next, v_next, v_half)`` with full nodal arrays.
    """
    mesh, lame = problem.mesh, problem.lame
    if dt is None:
        dt = problem.default_dt()
    if not (dt > 0):
        raise ValidationError(f"dt must be > 0, got {dt}")
    if check_resolution:
        eps = problem.epsilon
        if eps is not None and dt > eps / 10.0 * (1 + 1e-9):
            raise ValidationError(f"dt={dt:.4g} does not resolve eps={eps:.4g}; need dt <= eps/10")
        if dt * lame.wave_speed > mesh.h * (1 + 1e-9):
            raise ValidationError(f"dt*c={dt * lame.wave_speed:.4g} exceeds h={mesh.h:.4g}")
        if problem.penalty > 0 and dt > 1.0 / (10.0 * problem.penalty) * (1 + 1e-9):
            raise ValidationError(f"dt={dt:.4g} does not resolve the penalty k={problem.penalty}; need dt <= 1/(10k)")
        check_spatial_resolution(mesh, problem.field)

    nsteps, dt = step_grid(problem.T, dt)
    free = mesh.free_nodes
    nf = free.size
    xf = mesh.nodes[free]
    wf = mesh.nodal_weights()[free]
    Kf = restrict(assemble_stiffness(mesh, lame), mesh)

    dens = problem.density if problem.density is not None else lame.rho
    mass_varies = callable(dens)
    D0 = _blocks(dens, mesh.n_nodes, 0.0)[free] * wf[:, None, None]

    fld = problem.field
    field_varies = fld.time_dependent
    has_field = len(fld.components) > 0
    k = float(problem.penalty)

    S = 2.0 * _block_sparse(D0) + 0.5 * dt * dt * Kf
    if k > 0:
        S = S + dt * k * sp.diags(np.repeat(wf, 2))
    if has_field and not field_varies:
        # a static field: fold it into the factorised matrix
        S = S + dt * _block_sparse(wf[:, None, None] * fld.matrix(0.0, xf))
    S = S.tocsr()
    solver = _StepSolver(S, tol=tol)

    def varying_blocks(th):
        P = None
        if has_field and field_varies:
            P = dt * wf[:, None, None] * fld.matrix(th, xf)
        if problem.damping is not None:
            C = dt * wf[:, None, None] * _blocks(problem.damping, mesh.n_nodes, th)[free]
            P = C if P is None else P + C
        if mass_varies:
            dM = 2.0 * (_blocks(dens, mesh.n_nodes, th)[free] * wf[:, None, None] - D0)
            P = dM if P is None else P + dM
        return None if P is None else np.ascontiguousarray(P)

    def load(th):
        out = np.zeros(2 * nf)
        if problem.source is not None:
            out += (wf[:, None] * np.asarray(problem.source(th, xf), dtype=float)).ravel()
        return out

    def target(th):
        return (wf[:, None] * np.asarray(problem.target(th, xf), dtype=float)).ravel()

    u = problem.u0[free].ravel().copy()
    v = problem.u1[free].ravel().copy()

    def mass_at(t):
        if mass_varies:
            return _blocks(dens, mesh.n_nodes, t)[free] * wf[:, None, None]
        return D0

    def energy(u_, v_, t):
        Mv = _kernels.block_apply(np.ascontiguousarray(mass_at(t)), v_.reshape(nf, 2)).ravel()
        return 0.5 * (v_ @ Mv) + 0.5 * (u_ @ (Kf @ u_))

    if store == "full":
        stride = 1
    elif store == "none":
        stride = None
    else:
        stride = int(store)
        if stride < 1:
            raise ValidationError("store stride must be >= 1")
    snap_steps = list(range(0, nsteps + 1, stride)) if stride else [0]
    if snap_steps[-1] != nsteps:
        snap_steps.append(nsteps)
    snap_set = {s: i for i, s in enumerate(snap_steps)}
    us = np.zeros((len(snap_steps), mesh.n_nodes, 2))
    vs = np.zeros_like(us)
    us[0] = problem.u0
    vs[0] = problem.u1
    vh_store = np.zeros((nsteps, mesh.n_nodes, 2)) if store_midpoint else None

    times = dt * np.arange(nsteps + 1)
    E = np.zeros(nsteps + 1)
    Wk = np.zeros(nsteps + 1)
    SW = np.zeros(nsteps + 1)
    iters = np.zeros(nsteps, dtype=np.int64)
    E[0] = energy(u, v, 0.0)
    V = None
    for n in range(nsteps):
        th = times[n] + 0.5 * dt
        P = varying_blocks(th)
        Mh = mass_at(th)
        f = load(th)
        rhs = 2.0 * _kernels.block_apply(np.ascontiguousarray(Mh), v.reshape(nf, 2)).ravel()
        rhs += dt * (f - Kf @ u)
        if k > 0:
            wt = target(th)
            rhs += dt * k * wt
        V, iters[n] = solver.solve(rhs, P, guess=V, step=n)
        u = u + dt * V
        v = 2.0 * V - v
        E[n + 1] = energy(u, v, times[n + 1])
        force = f.copy()
        if k > 0:
            force += k * (wt - np.repeat(wf, 2) * V)
        if problem.damping is not None:
            C = _blocks(problem.damping, mesh.n_nodes, th)[free] * wf[:, None, None]
            force -= _kernels.block_apply(np.ascontiguousarray(C), V.reshape(nf, 2)).ravel()
        Wk[n + 1] = dt * (V @ force)
        if has_field:
            Bb = wf[:, None, None] * fld.matrix(th, xf)
            SW[n + 1] = dt * (V @ _kernels.block_apply(np.ascontiguousarray(Bb), V.reshape(nf, 2)).ravel())
        if n + 1 in snap_set or observers or store_midpoint:
            uf = from_free(mesh, u)
            vf = from_free(mesh, v)
            Vf = from_free(mesh, V)
            if n + 1 in snap_set:
                us[snap_set[n + 1]] = uf
                vs[snap_set[n + 1]] = vf
            if store_midpoint:
                vh_store[n] = Vf
            for obs in observers:
                obs(n, th, uf, vf, Vf)
        if not np.all(np.isfinite(v)):
            raise ConvergenceError(f"non-finite state at step {n}", step=n)

    keep = stride is not None
    return Trajectory(
        mesh=mesh, dt=dt, times=times, energy=E, work=Wk, skew_work=SW,
        snapshot_steps=np.array(snap_steps), u=us if keep else None, v=vs if keep else None,
        u_final=from_free(mesh, u), v_final=from_free(mesh, v), v_half=vh_store, iterations=iters,
        info={"direct_fallback_steps": solver.direct_steps, "n_steps": nsteps},
    )


# ---------------------------------------------------------------------------
# pairings
# ---------------------------------------------------------------------------

def cell_matrix(mesh: Mesh2D, n_cells: int) -> sp.csr_matrix:
    """Node-to-coarse-cell vertex-quadrature integration matrix.

    Row ``c`` integrates a nodal scalar over coarse cell ``c`` of the
    ``n_cells x n_cells`` partition (cells ordered row-major in x2, then x1).
    Triangles are assigned to cells by centroid.
    """
    cen = mesh.centroids()
    ix = np.clip((cen[:, 0] * n_cells).astype(int), 0, n_cells - 1)
    iy = np.clip((cen[:, 1] * n_cells).astype(int), 0, n_cells - 1)
    cell = iy * n_cells + ix
    rows = np.repeat(cell, 3)
    cols = mesh.triangles.ravel()
    vals = np.repeat(mesh.area / 3.0, 3)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_cells * n_cells, mesh.n_nodes))


def triangle_cells(mesh: Mesh2D, n_cells: int) -> np.ndarray:
    cen = mesh.centroids()
    ix = np.clip((cen[:, 0] * n_cells).astype(int), 0, n_cells - 1)
    iy = np.clip((cen[:, 1] * n_cells).astype(int), 0, n_cells - 1)
    return iy * n_cells + ix


def magnetic_force_history(traj: Trajectory, spec) -> np.ndarray:
    """G(t_{n+1/2}, x) v^{n+1/2}(x) at every node and step, shape (nsteps, nn, 2)."""
    if traj.v_half is None:
        raise ValidationError("trajectory was integrated without store_midpoint=True")
    fld = as_field(spec)
    X = traj.mesh.nodes
    th = traj.t_half
    out = np.empty_like(traj.v_half)
    for n in range(th.size):
        b = fld.coefficient(th[n], X)
        out[n, :, 0] = -b * traj.v_half[n, :, 1]
        out[n, :, 1] = b * traj.v_half[n, :, 0]
    return out


@dataclass
class PairingReport:
    """Pairings of G_eps v_eps against a dictionary, shape (n_eps, n_dict, 2)."""
    epsilons: np.ndarray
    labels: list
    pairings: np.ndarray
    limit: np.ndarray
    cauchy_defect: np.ndarray
    rate: np.ndarray
    coarse: np.ndarray
    coarse_shape: tuple


def spacetime_pairing(traj: Trajectory, force: np.ndarray, dictionary) -> np.ndarray:
    """Midpoint-in-time, vertex-in-space pairing of a force history with the dictionary."""
    w = traj.mesh.nodal_weights()
    S = dictionary.space_values(traj.mesh.nodes) * w[None, :]  # (nd, nn)
    T = traj.times[-1]
    theta = dictionary.time_values(traj.t_half, T)  # (nd, nsteps)
    per_step = np.einsum("di,nic->dnc", S, force)
    return traj.dt * np.einsum("dn,dnc->dc", theta, per_step)


def coarse_average(traj: Trajectory, force: np.ndarray, n_cells: int, n_tbins: int) -> np.ndarray:
    """Box-filter average of a force history on an n_tbins x n_cells^2 grid, shape (nt, nc, 2)."""
    C = cell_matrix(traj.mesh, n_cells)
    th = traj.t_half
    T = traj.times[-1]
    tb = np.clip((th / T * n_tbins).astype(int), 0, n_tbins - 1)
    out = np.zeros((n_tbins, n_cells * n_cells, 2))
    for c in range(2):
        cell_int = (C @ force[:, :, c].T).T  # (nsteps, ncells)
        np.add.at(out[:, :, c], tb, traj.dt * cell_int)
    cell_area = np.asarray(C.sum(axis=1)).ravel()
    dur = np.bincount(tb, minlength=n_tbins) * traj.dt
    return out / (dur[:, None, None] * cell_area[None, :, None])


def velocity_weak_limit_pairing(trajectories: Sequence[Trajectory], specs: Sequence, dictionary,
                                n_cells: int = 8, n_tbins: int = 8) -> PairingReport:
    """Pairings of G_eps d_t u_eps for an eps sweep, with eps -> 0 extrapolation.

    The coarse reconstruction averages over ``n_cells`` spatial cells per side
    and ``n_tbins`` time bins (window widths 1/n_cells and T/n_tbins).
    """
    if len(trajectories) != len(specs):
        raise ValidationError("need one field spec per trajectory")
    if len(trajectories) < 2:
        raise ValidationError("at least two eps samples are required to extrapolate")
    base = trajectories[0]
    for tr in trajectories[1:]:
        if tr.mesh.n_nodes != base.mesh.n_nodes or not np.allclose(tr.mesh.nodes, base.mesh.nodes):
            raise ValidationError("trajectories do not share a mesh")
        if tr.times.shape != base.times.shape or not np.allclose(tr.times, base.times):
            raise ValidationError("trajectories do not share a time grid")
    eps = np.array([_spec_eps(s) for s in specs])
    P, coarse = [], []
    for tr, sp_ in zip(trajectories, specs):
        force = magnetic_force_history(tr, sp_)
        P.append(spacetime_pairing(tr, force, dictionary))
        coarse.append(coarse_average(tr, force, n_cells, n_tbins))
    P = np.array(P)
    order = np.argsort(eps)[::-1]  # coarse to fine
    P, eps = P[order], eps[order]
    coarse = np.array(coarse)[order]
    defect = np.abs(P[-1] - P[-2])
    rate = np.full(defect.shape, np.nan)
    if len(eps) >= 3:
        d1 = np.abs(P[-2] - P[-3])
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.log(d1 / defect) / np.log(eps[-3] / eps[-2])
    return PairingReport(eps, list(dictionary.labels), P, P[-1], defect, rate, coarse[-1], (n_tbins, n_cells))


def _spec_eps(spec):
    fld = as_field(spec)
    e = _oscillation_scale(fld)
    return e if e is not None else 1.0


def rotated_momentum(traj: Trajectory, spec: SkewFieldSpec, dictionary) -> np.ndarray:
    """t -> int exp(beta_eps(t)/rho) v(t, x) . phi(x) dx for every dictionary entry.

    Returns shape (n_snapshots, n_dict, 2): the pairing with ``phi e_1`` and
    ``phi e_2``.
    """
    if spec.kind != "time_exp":
        raise ValidationError("rotated_momentum requires a time_exp field")
    if traj.v is None:
        raise ValidationError("trajectory has no stored snapshots")
    w = traj.mesh.nodal_weights()
    S = dictionary.space_values(traj.mesh.nodes) * w[None, :]
    t = traj.snapshot_times()
    R = spec.rotation(t, sign=+1.0)  # (ns, 2, 2)
    rv = np.einsum("nij,nkj->nki", R, traj.v)
    return np.einsum("dk,nkc->ndc", S, rv)


def momentum(traj: Trajectory, dictionary, matrix=None) -> np.ndarray:
    """Plain momentum pairings int (Q v) . phi for an optional constant matrix Q."""
    w = traj.mesh.nodal_weights()
    S = dictionary.space_values(traj.mesh.nodes) * w[None, :]
    v = traj.v if matrix is None else np.einsum("ij,nkj->nki", np.asarray(matrix), traj.v)
    return np.einsum("dk,nkc->ndc", S, v)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _open(path, gz):
    path = str(path)
    if gz or path.endswith(".gz"):
        return gzip.open(path if path.endswith(".gz") else path + ".gz", "wt", newline="")
    return open(path, "w", newline="")


def write_trajectory_csv(traj: Trajectory, path, gz: bool = False) -> None:
    if traj.u is None:
        raise ValidationError("trajectory has no stored snapshots")
    with _open(path, gz) as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "node", "ux", "uy", "vx", "vy"])
        for s, t in enumerate(traj.snapshot_times()):
            for i in range(traj.mesh.n_nodes):
                wr.writerow([repr(float(t)), i, repr(float(traj.u[s, i, 0])), repr(float(traj.u[s, i, 1])),
                             repr(float(traj.v[s, i, 0])), repr(float(traj.v[s, i, 1]))])


def write_energy_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "t", "E", "work"])
        for n in range(traj.times.size):
            wr.writerow([n, repr(float(traj.times[n])), repr(float(traj.energy[n])), repr(float(traj.work[n]))])


def write_nodal_csv(mesh: Mesh2D, fields: dict, path) -> None:
    """Static nodal fields in the trajectory layout without the t column."""
    names = list(fields)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = ["node"]
        for nm in names:
            header += [f"{nm}_x", f"{nm}_y"]
        wr.writerow(header)
        for i in range(mesh.n_nodes):
            row = [i]
            for nm in names:
                row += [repr(float(fields[nm][i, 0])), repr(float(fields[nm][i, 1]))]
            wr.writerow(row)
