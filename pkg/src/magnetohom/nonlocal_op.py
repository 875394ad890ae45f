"""Penalized probes of the nonlocal force operator and its binned kernel.

For a target velocity ``w`` the penalized problem

    rho v'' - Div(A e(v)) + (F_eps + G_eps) v' + k (v' - w) = 0,  v(0) = v'(0) = 0

forces ``v'`` towards ``w``. The weak limit of ``G_eps v'`` as eps -> 0 and
then k -> oo defines the operator applied to ``w``. Weak limits are read off
as box averages on a coarse space-time grid.

Many targets share one step matrix, so basis responses are integrated
together as columns of a single block right-hand side.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import (DynamicProblem, Trajectory, cell_matrix, check_spatial_resolution, coarse_average, integrate,
                       magnetic_force_history, step_grid)
from .errors import ConvergenceError, ValidationError
from .fem import LameTensor, Mesh2D, assemble_stiffness, block_diag_matrix, restrict
from .fields import J as _J, FieldSum, as_field
from .homogenize import CoarseField, CoarseQ1
from .limits import ConeSpec

LEAK_INFLATION = 1.1
DEFECT_THRESHOLD = 0.2
ITERATE_MAX_COLUMNS = 8


def _solve_step(S, lu, pb, rhs, guess, iterate, tol=1e-13, maxit=40):
    """Solve (S + diag(pb) x J) V = rhs, blockwise skew part pb per node."""
    def P(X):
        X3 = X.reshape(-1, 2, X.shape[-1])
        out = np.empty_like(X3)
        out[:, 0] = -pb[:, None] * X3[:, 1]
        out[:, 1] = pb[:, None] * X3[:, 0]
        return out.reshape(X.shape)

    if iterate:
        r0 = np.linalg.norm(rhs)
        if r0 == 0.0:
            return np.zeros_like(rhs)
        V = lu.solve(rhs) if guess is None else guess
        prev = np.inf
        for it in range(maxit):
            res = rhs - S @ V - P(V)
            rn = np.linalg.norm(res)
            if rn <= tol * r0:
                return V
            if rn > 0.9 * prev and it > 3:
                break
            prev = rn
            V = V + lu.solve(res)
    A = (S + block_diag_matrix(pb[:, None, None] * _J)).tocsc()
    return spla.splu(A, permc_spec="MMD_AT_PLUS_A").solve(rhs)


# ---------------------------------------------------------------------------
# field helpers
# ---------------------------------------------------------------------------

def _at_epsilon(fields, eps: float) -> FieldSum:
    comps = []
    for c in as_field(fields).components:
        comps.append(c if c.kind == "compact" else c.with_epsilon(eps))
    return FieldSum(tuple(comps))


def _bounded_part(fld: FieldSum) -> FieldSum:
    """The eps-bounded oscillating components, whose force is measured."""
    return FieldSum(tuple(c for c in fld.components if c.kind == "spacetime_bounded"))


def max_stable_dt(mesh: Mesh2D, lame: LameTensor, k: float, eps: float | None) -> float:
    dt = mesh.h / (2.0 * lame.wave_speed)
    if eps is not None:
        dt = min(dt, eps / 10.0)
    if k > 0:
        dt = min(dt, 1.0 / (10.0 * k))
    return dt


# ---------------------------------------------------------------------------
# single penalized run
# ---------------------------------------------------------------------------

@dataclass
class PenalizedRun:
    k: float
    epsilon: float | None
    trajectory: Trajectory
    tracking_error: float  # ||v' - w||_{L2(Q)}
    penalty_energy: float  # k ||v' - w||^2_{L2(Q)}
    g_coarse: np.ndarray | None = None  # box average of G_eps v', (n_tbins, n_cells^2, 2)


def _tracking_error(traj: Trajectory, w: Callable) -> float:
    wts = traj.mesh.nodal_weights()
    x = traj.mesh.nodes
    acc = 0.0
    for n, th in enumerate(traj.t_half):
        d = traj.v_half[n] - np.asarray(w(th, x), float)
        d[traj.mesh.boundary_nodes] = 0.0
        acc += np.sum(wts[:, None] * d * d)
    return math.sqrt(traj.dt * acc)


def solve_penalized(mesh: Mesh2D, lame: LameTensor, w: Callable, k: float, fields=None, T: float = 1.0,
                    dt: float | None = None, n_cells: int = 8, n_tbins: int = 8) -> PenalizedRun:
    """Integrate the penalized problem from rest and record the penalty energy.

    ``fields`` are the eps-dependent skew fields (any mix of space and
    space-time components, already at a fixed eps). Requires
    ``dt <= min(eps/10, 1/(10k))``.
    """
    if not (k > 0):
        raise ValidationError(f"penalty k must be > 0, got {k}")
    fld = as_field(fields)
    prob = DynamicProblem(mesh, lame, fld, None, None, None, T, penalty=float(k), target=w)
    if dt is None:
        dt = prob.default_dt()
    traj = integrate(prob, dt, store="none", store_midpoint=True)
    err = _tracking_error(traj, w)
    g = None
    Gpart = _bounded_part(fld)
    if Gpart.components:
        g = coarse_average(traj, magnetic_force_history(traj, Gpart), n_cells, n_tbins)
    return PenalizedRun(float(k), prob.epsilon, traj, err, float(k) * err * err, g)


# ---------------------------------------------------------------------------
# batched responses
# ---------------------------------------------------------------------------

class FunctionTargets:
    """Wraps callables ``w(t, x) -> (m, 2)`` as target columns."""

    def __init__(self, functions: Sequence[Callable]):
        self.functions = list(functions)
        self.ncols = len(self.functions)

    def __call__(self, t, x):
        return np.stack([np.asarray(f(t, x), float) for f in self.functions], axis=-1)


def _hat_matrix(s, n: int, length: float = 1.0) -> np.ndarray:
    """Partition-of-unity hats centred on the n bin midpoints of [0, length]."""
    s = np.asarray(s, float) / length * n - 0.5
    s = np.clip(s, 0.0, n - 1.0)
    centres = np.arange(n)
    return np.clip(1.0 - np.abs(s[..., None] - centres), 0.0, 1.0)


class HatBasis:
    """Tensor hats on an n_t x n_x x n_x space-time grid, times e_1 and e_2.

    Column index ``((a * n_x + i2) * n_x + i1) * 2 + comp`` for time hat ``a``
    and spatial hats ``(i1, i2)``.
    """

    def __init__(self, n_t: int, n_x: int, T: float):
        if n_t < 1 or n_x < 1:
            raise ValidationError("hat basis needs at least one bin per axis")
        self.n_t, self.n_x, self.T = n_t, n_x, float(T)
        self.ncols = 2 * n_t * n_x * n_x
        self._cache_x = None

    def _space(self, x):
        if self._cache_x is None or self._cache_x[0] is not x:
            h1 = _hat_matrix(x[:, 0], self.n_x)
            h2 = _hat_matrix(x[:, 1], self.n_x)
            self._cache_x = (x, (h2[:, :, None] * h1[:, None, :]).reshape(x.shape[0], -1))
        return self._cache_x[1]

    def __call__(self, t, x):
        tau = _hat_matrix(np.array([t]), self.n_t, self.T)[0]
        sig = self._space(x)
        X = (sig[:, None, :] * tau[None, :, None]).reshape(x.shape[0], -1)
        out = np.zeros((x.shape[0], 2, self.ncols))
        out[:, 0, 0::2] = X
        out[:, 1, 1::2] = X
        return out

    def supports(self):
        """Per column: (t_lo, t_hi, x1_lo, x1_hi, x2_lo, x2_hi)."""
        def sup1(n, L):
            c = (np.arange(n) + 0.5) * L / n
            lo = np.where(np.arange(n) == 0, 0.0, c - L / n)
            hi = np.where(np.arange(n) == n - 1, L, c + L / n)
            return lo, hi

        tl, th = sup1(self.n_t, self.T)
        xl, xh = sup1(self.n_x, 1.0)
        out = np.zeros((self.ncols, 6))
        for a in range(self.n_t):
            for i2 in range(self.n_x):
                for i1 in range(self.n_x):
                    base = ((a * self.n_x + i2) * self.n_x + i1) * 2
                    out[base:base + 2] = (tl[a], th[a], xl[i1], xh[i1], xl[i2], xh[i2])
        return out

    def project(self, w: Callable, nq_t: int = 48, nq_x: int = 64) -> np.ndarray:
        """L2 projection coefficients of ``w(t, x)`` onto the hats, shape (ncols,)."""
        tq = (np.arange(nq_t) + 0.5) / nq_t * self.T
        sq = (np.arange(nq_x) + 0.5) / nq_x
        X1, X2 = np.meshgrid(sq, sq)
        xq = np.column_stack([X1.ravel(), X2.ravel()])
        vals = np.stack([np.asarray(w(t, xq), float).reshape(nq_x, nq_x, 2) for t in tq])  # (t, x2, x1, c)
        Bt = _hat_matrix(tq, self.n_t, self.T) * (self.T / nq_t)
        Bx = _hat_matrix(sq, self.n_x) / nq_x
        load = np.einsum("ta,tqpc,qj,pi->ajic", Bt, vals, Bx, Bx)
        Gt = Bt.T @ _hat_matrix(tq, self.n_t, self.T)
        Gx = Bx.T @ _hat_matrix(sq, self.n_x)
        coef = np.einsum("ab,bjic->ajic", np.linalg.inv(Gt), load)
        coef = np.einsum("jk,akic->ajic", np.linalg.inv(Gx), coef)
        coef = np.einsum("ik,ajkc->ajic", np.linalg.inv(Gx), coef)
        return coef.reshape(-1)


class StackedTargets:
    def __init__(self, *parts):
        self.parts = parts
        self.ncols = sum(p.ncols for p in parts)

    def __call__(self, t, x):
        return np.concatenate([p(t, x) for p in self.parts], axis=-1)


@dataclass
class BatchResponse:
    k: float
    epsilon: float | None
    dt: float
    n_steps: int
    g_coarse: np.ndarray  # (ncols, n_tbins, n_cells^2, 2)
    tracking: np.ndarray  # (ncols,) ||v' - w||_{L2(Q)}
    raw_force: np.ndarray  # (ncols,) ||G_eps v'||_{L2(Q)}
    factorizations: int


def penalized_response(mesh: Mesh2D, lame: LameTensor, targets, k: float, fields=None, T: float = 1.0,
                       dt: float | None = None, n_cells: int = 8, n_tbins: int = 8) -> BatchResponse:
    """Integrate the penalized problem for every target column at once.

    Uses the same implicit midpoint step as :func:`integrate`; only coarse box
    averages of ``G_eps v'`` and the tracking errors are kept.
    """
    if not (k > 0):
        raise ValidationError(f"penalty k must be > 0, got {k}")
    fld = as_field(fields)
    eps = None
    osc = [c.epsilon for c in fld.components if c.kind != "compact" and c.amplitude != 0.0]
    if osc:
        eps = min(osc)
    check_spatial_resolution(mesh, fld)
    dt_max = max_stable_dt(mesh, lame, k, eps)
    if dt is None:
        dt = dt_max
    elif dt > dt_max * (1 + 1e-9):
        raise ValidationError(f"dt={dt:.4g} exceeds min(eps/10, 1/(10k), h/(2c)) = {dt_max:.4g}")
    nsteps, dt = step_grid(T, dt)
    free = mesh.free_nodes
    nf = free.size
    xf = mesh.nodes[free]
    wf = mesh.nodal_weights()[free]
    ncols = targets.ncols
    rho = lame.rho

    Kf = restrict(assemble_stiffness(mesh, lame), mesh)
    W = np.repeat(wf, 2)
    S = sp.diags((2.0 * rho + dt * k) * W) + 0.5 * dt * dt * Kf
    static = [c for c in fld.components if not c.time_dependent]
    varying = FieldSum(tuple(c for c in fld.components if c.time_dependent))
    if static:
        S = S + dt * block_diag_matrix(wf[:, None, None] * FieldSum(tuple(static)).matrix(0.0, xf))
    S = S.tocsc()
    lu = spla.splu(S, permc_spec="MMD_AT_PLUS_A")
    Gpart = _bounded_part(fld)

    C = cell_matrix(mesh, n_cells)[:, free].tocsr()
    cell_area = np.asarray(cell_matrix(mesh, n_cells).sum(axis=1)).ravel()
    gsum = np.zeros((n_tbins, n_cells * n_cells, 2, ncols))
    dur = np.zeros(n_tbins)
    track = np.zeros(ncols)
    raw = np.zeros(ncols)

    u = np.zeros((2 * nf, ncols))
    v = np.zeros((2 * nf, ncols))
    n_fact = 0
    V = None
    # with few columns a fixed-point iteration on the static factor is cheapest;
    # with many, refactorising the full step matrix each step wins
    iterate = ncols <= ITERATE_MAX_COLUMNS
    for n in range(nsteps):
        th = (n + 0.5) * dt
        wt = np.asarray(targets(th, xf), float).reshape(2 * nf, ncols)
        rhs = 2.0 * rho * W[:, None] * v + dt * (k * W[:, None] * wt - Kf @ u)
        if varying.components:
            pb = dt * wf * varying.coefficient(th, xf)
            V = _solve_step(S, lu, pb, rhs, V, iterate)
            n_fact += 0 if iterate else 1
        else:
            V = lu.solve(rhs)
        u = u + dt * V
        v = 2.0 * V - v

        d = V - wt
        track += dt * np.sum(W[:, None] * d * d, axis=0)
        if Gpart.components:
            b = Gpart.coefficient(th, xf)
            V3 = V.reshape(nf, 2, ncols)
            fx = -b[:, None] * V3[:, 1]
            fy = b[:, None] * V3[:, 0]
            raw += dt * np.sum(wf[:, None] * (fx * fx + fy * fy), axis=0)
            tb = min(int(th / T * n_tbins), n_tbins - 1)
            gsum[tb, :, 0] += dt * (C @ fx)
            gsum[tb, :, 1] += dt * (C @ fy)
            dur[tb] += dt
        if not np.all(np.isfinite(V)):
            raise ConvergenceError(f"non-finite penalized state at step {n}", step=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = gsum / (np.where(dur > 0, dur, 1.0)[:, None, None, None] * cell_area[None, :, None, None])
    g = np.moveaxis(g, -1, 0)
    return BatchResponse(float(k), eps, dt, nsteps, g, np.sqrt(track), np.sqrt(raw), n_fact)


# ---------------------------------------------------------------------------
# operator estimate
# ---------------------------------------------------------------------------

def coarse_norm(values, T: float, n_cells: int) -> np.ndarray:
    """L2(Q) norm of piecewise-constant coarse fields over their last three axes."""
    vals = np.asarray(values, float)
    nt = vals.shape[-3]
    vol = (T / nt) / (n_cells * n_cells)
    return np.sqrt(vol * np.sum(vals * vals, axis=(-3, -2, -1)))


@dataclass
class GOperatorEstimate:
    ks: np.ndarray
    epsilons: np.ndarray
    values: np.ndarray  # (ncols, n_tbins, n_cells^2, 2), at the largest k and finest eps
    grid: np.ndarray  # (n_k, n_eps, ncols, n_tbins, n_cells^2, 2)
    tracking: np.ndarray  # (n_k, n_eps, ncols)
    raw_scale: np.ndarray  # (ncols,) ||G_eps v'|| at the final grid point
    eps_defect: np.ndarray  # (ncols,)
    k_defect: np.ndarray
    cross_defect: np.ndarray
    flagged: bool
    T: float
    n_cells: int
    labels: list = field(default_factory=list)

    @property
    def n_tbins(self) -> int:
        return self.values.shape[1]

    def field(self, col: int = 0) -> CoarseField:
        return CoarseField(self.values[col], self.T, self.n_cells)

    def norm(self, col: int = 0) -> float:
        return float(coarse_norm(self.values[col], self.T, self.n_cells))

    def schedule(self) -> dict:
        return {"k": self.ks.tolist(), "epsilon": self.epsilons.tolist()}


def _run_grid(mesh, lame, targets, ks, epsilons, fields, T, n_cells, n_tbins):
    ks = np.sort(np.asarray(ks, float))
    epsilons = np.sort(np.asarray(epsilons, float))[::-1]  # coarse to fine
    grid = np.zeros((ks.size, epsilons.size, targets.ncols, n_tbins, n_cells * n_cells, 2))
    track = np.zeros((ks.size, epsilons.size, targets.ncols))
    raw = np.zeros((ks.size, epsilons.size, targets.ncols))
    for i, k in enumerate(ks):
        for j, e in enumerate(epsilons):
            r = penalized_response(mesh, lame, targets, k, _at_epsilon(fields, e), T,
                                   n_cells=n_cells, n_tbins=n_tbins)
            grid[i, j] = r.g_coarse
            track[i, j] = r.tracking
            raw[i, j] = r.raw_force
    return ks, epsilons, grid, track, raw


def _defects(grid, raw, T, n_cells):
    """Stability defects relative to the unaveraged force scale.

    The eps defect compares the two finest eps at the largest k, the k defect
    the two largest k at the finest eps, and the cross defect is the mixed
    second difference (zero when the two limits commute on the grid).
    """
    scale = np.maximum(raw[-1, -1], 1e-300)
    nk, ne = grid.shape[:2]
    zero = np.zeros(grid.shape[2])
    eps_d = coarse_norm(grid[-1, -1] - grid[-1, -2], T, n_cells) / scale if ne > 1 else zero
    k_d = coarse_norm(grid[-1, -1] - grid[-2, -1], T, n_cells) / scale if nk > 1 else zero
    if nk > 1 and ne > 1:
        cross = coarse_norm(grid[-1, -1] - grid[-1, -2] - grid[-2, -1] + grid[-2, -2], T, n_cells) / scale
    else:
        cross = zero
    no_force = raw[-1, -1] == 0.0
    for d in (eps_d, k_d, cross):
        d[no_force] = 0.0
    return eps_d, k_d, cross


def estimate_G(mesh: Mesh2D, lame: LameTensor, w, ks=(1.0, 10.0, 100.0), epsilons=(1 / 8, 1 / 16, 1 / 32),
               fields=None, T: float = 1.0, n_cells: int = 8, n_tbins: int = 8,
               labels: Sequence[str] | None = None) -> GOperatorEstimate:
    """Coarse estimate of the nonlocal operator applied to ``w``.

    ``w`` is a callable, a list of callables, or a target object with
    ``ncols``. ``fields`` holds the F/G templates; their eps is replaced by
    each schedule entry. The eps -> 0 limit is taken first (finest eps), then
    k -> oo (largest k). Defects above 0.2 of the force scale flag the
    estimate.
    """
    if len(ks) < 2 or len(epsilons) < 2:
        raise ValidationError("k and eps schedules need at least two entries each")
    if callable(w) and not hasattr(w, "ncols"):
        targets = FunctionTargets([w])
    elif hasattr(w, "ncols"):
        targets = w
    else:
        targets = FunctionTargets(list(w))
    ks, epsilons, grid, track, raw = _run_grid(mesh, lame, targets, ks, epsilons, fields, T, n_cells, n_tbins)
    eps_d, k_d, cross = _defects(grid, raw, T, n_cells)
    flagged = bool(np.any(eps_d > DEFECT_THRESHOLD) or np.any(k_d > DEFECT_THRESHOLD))
    labels = list(labels) if labels is not None else [f"w{i}" for i in range(targets.ncols)]
    return GOperatorEstimate(ks, epsilons, grid[-1, -1], grid, track, raw[-1, -1], eps_d, k_d, cross,
                             flagged, float(T), n_cells, labels)


# ---------------------------------------------------------------------------
# cone-localised coarse norms
# ---------------------------------------------------------------------------

def cell_coverage(cone: ConeSpec, t: float, n_cells: int, sub: int = 8) -> np.ndarray:
    """Fraction of each coarse cell inside the section B(xbar, c(S - t)), shape (n_cells^2,)."""
    m = n_cells
    s = (np.arange(m) + 0.5) / m
    off = (np.arange(sub) + 0.5) / (sub * m) - 0.5 / m
    X1, X2 = np.meshgrid(s, s)
    r = cone.radius(t)
    cover = np.zeros((m, m))
    for a in off:
        for b in off:
            cover += ((X1 + a - cone.x) ** 2 + (X2 + b - cone.y) ** 2 <= r * r)
    return (cover / (sub * sub)).ravel()


def section_norm2(values, T: float, n_cells: int, cone: ConeSpec, t: float) -> float:
    """int over B(xbar, S, t) of |f(t)|^2 for a coarse field of shape (n_tbins, n_cells^2, 2)."""
    nt = values.shape[0]
    kb = min(max(int(t / T * nt), 0), nt - 1)
    cov = cell_coverage(cone, min(t, cone.S), n_cells)
    return float(np.sum(cov * np.sum(values[kb] ** 2, axis=-1)) / (n_cells * n_cells))


@dataclass
class OperatorConeReport:
    cones: list
    times: np.ndarray  # (n_cones, n_times)
    lhs: np.ndarray
    rhs: np.ndarray
    fitted_C: np.ndarray
    positivity: np.ndarray  # int_0^s int_{B(t)} (G w) . w, normalised by ||w||^2_{L2(Q)}
    min_positivity: float
    C_variation: float


def check_operator_cones(values, w: Callable, T: float, n_cells: int, cones: Sequence[ConeSpec],
                         n_times: int = 8, nq: int = 32) -> OperatorConeReport:
    """Cone bound and positivity for a coarse operator output ``values`` given input ``w``.

    LHS ``int_{B(s)} |Gw(s)|^2``; RHS ``(int_0^s ||w(t)||_{L2(B(t))} dt)^2``;
    positivity ``int_0^s int_{B(t)} Gw . w``. ``w`` is sampled on an
    ``nq x nq`` midpoint grid and ``nq`` time points per coarse bin.
    """
    values = np.asarray(values, float)
    nt = values.shape[0]
    sq = (np.arange(nq) + 0.5) / nq
    X1, X2 = np.meshgrid(sq, sq)
    xq = np.column_stack([X1.ravel(), X2.ravel()])
    nts = nt * 8
    tq = (np.arange(nts) + 0.5) / nts * T
    dtq = T / nts
    ws = np.stack([np.asarray(w(t, xq), float) for t in tq])  # (nts, nq^2, 2)
    wnorm2 = float(np.sum(ws ** 2) * dtq / nq ** 2)
    ic = np.clip((xq[:, 0] * n_cells).astype(int), 0, n_cells - 1) + n_cells * np.clip(
        (xq[:, 1] * n_cells).astype(int), 0, n_cells - 1)
    tb = np.minimum((tq / T * nt).astype(int), nt - 1)
    times, lhs, rhs, pos, Cs = [], [], [], [], []
    for cone in cones:
        smax = min(cone.S, T)
        tg = np.linspace(smax / n_times, smax, n_times)
        inside = np.stack([((xq[:, 0] - cone.x) ** 2 + (xq[:, 1] - cone.y) ** 2 <= cone.radius(min(t, cone.S)) ** 2)
                           for t in tq])  # (nts, nq^2)
        wn = np.sqrt(np.sum(inside[..., None] * ws ** 2, axis=(1, 2)) / nq ** 2)
        gw = np.sum(inside[..., None] * values[tb][:, ic, :] * ws, axis=(1, 2)) / nq ** 2
        L = np.array([section_norm2(values, T, n_cells, cone, s) for s in tg])
        R = np.array([(dtq * np.sum(wn[tq <= s])) ** 2 for s in tg])
        P = np.array([dtq * np.sum(gw[tq <= s]) for s in tg]) / max(wnorm2, 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(R > 0, L / R, np.where(L > 0, np.inf, 0.0))
        times.append(tg)
        lhs.append(L)
        rhs.append(R)
        pos.append(P)
        Cs.append(float(np.max(ratio)))
    Cs = np.array(Cs)
    posC = Cs[Cs > 0]
    var = float(posC.max() / posC.min()) if posC.size else 1.0
    pos = np.array(pos)
    return OperatorConeReport(list(cones), np.array(times), np.array(lhs), np.array(rhs), Cs, pos,
                              float(pos.min()), var)


# ---------------------------------------------------------------------------
# weak-limit velocity as a target
# ---------------------------------------------------------------------------

class SampledVelocity:
    """Coarse bilinear projection of a trajectory's midpoint velocities.

    Projecting onto an ``n_coarse`` Q1 space removes the eps-scale part, so
    the result approximates the weak limit of the velocity. Evaluation is
    piecewise linear in time between step midpoints.
    """

    def __init__(self, traj: Trajectory, n_coarse: int = 8):
        if traj.v_half is None:
            raise ValidationError("trajectory was integrated without store_midpoint=True")
        self.q1 = CoarseQ1(n_coarse)
        mesh = traj.mesh
        B = self.q1.basis(mesh.nodes)
        wq = mesh.nodal_weights()
        lu = spla.splu(self.q1.gram())
        self.t = traj.t_half
        vh = traj.v_half
        self.coef = np.stack([lu.solve(B.T @ (wq[:, None] * vh[n])) for n in range(vh.shape[0])])
        self.T = traj.times[-1]

    def __call__(self, t, x):
        j = np.searchsorted(self.t, t)
        if j <= 0:
            c = self.coef[0]
        elif j >= self.t.size:
            c = self.coef[-1]
        else:
            a = (t - self.t[j - 1]) / (self.t[j] - self.t[j - 1])
            c = (1 - a) * self.coef[j - 1] + a * self.coef[j]
        out = self.q1.evaluate(c, x)
        return out


# ---------------------------------------------------------------------------
# initial-velocity operator
# ---------------------------------------------------------------------------

@dataclass
class FOperatorEstimate:
    values: np.ndarray  # (n_tbins, n_cells^2, 2)
    g_weak: np.ndarray  # weak limit of G_eps v' at the finest eps
    G_of_velocity: GOperatorEstimate
    cones: list
    lhs: np.ndarray  # (n_cones, n_times)
    rhs: np.ndarray  # (n_cones,) int_{B(S,0)} (rho I + M)^{-1} M phi . phi
    fitted_C: np.ndarray
    norm: float
    raw_scale: float
    flagged: bool
    T: float
    n_cells: int


def estimate_F(mesh: Mesh2D, lame: LameTensor, phi1, fields=None, ks=(1.0, 10.0, 100.0),
               epsilons=(1 / 8, 1 / 16, 1 / 32), M=None, cones: Sequence[ConeSpec] = (), T: float = 1.0,
               n_cells: int = 8, n_tbins: int = 8, n_times: int = 8) -> FOperatorEstimate:
    """Initial-velocity operator: ``G(v') - lim G_eps v_eps'`` for data (0, phi1).

    The limit velocity ``v'`` is the coarse projection of the finest-eps
    velocity. The cone bound ``int_{B(s)} |F|^2 <= C int_{B(S,0)} (rho I +
    M)^{-1} M phi . phi`` is fitted per cone; with ``M = 0`` the right side
    vanishes and the output itself is the diagnostic.
    """
    phi1 = np.asarray(phi1, float)
    epsilons = np.sort(np.asarray(epsilons, float))[::-1]
    if epsilons.size < 2:
        raise ValidationError("eps schedule needs at least two entries")
    trajs = []
    for e in epsilons:
        fld = _at_epsilon(fields, e)
        prob = DynamicProblem(mesh, lame, fld, None, None, phi1, T)
        trajs.append((fld, integrate(prob, store="none", store_midpoint=True)))
    fld, tr = trajs[-1]
    Gpart = _bounded_part(fld)
    if Gpart.components:
        force = magnetic_force_history(tr, Gpart)
        g = coarse_average(tr, force, n_cells, n_tbins)
        raw = math.sqrt(tr.dt * np.sum(mesh.nodal_weights()[None, :, None] * force ** 2))
    else:
        g = np.zeros((n_tbins, n_cells * n_cells, 2))
        raw = 0.0
    vel = SampledVelocity(tr)
    Gv = estimate_G(mesh, lame, vel, ks, epsilons, fields, T, n_cells, n_tbins, labels=["velocity"])
    F = Gv.values[0] - g

    rho = lame.rho
    Mm = np.zeros((2, 2)) if M is None else np.asarray(getattr(M, "matrix", M), float)
    Q = np.linalg.solve(rho * np.eye(2) + Mm, Mm)
    dens = np.einsum("ni,ij,nj->n", phi1, Q, phi1)
    lhs, rhs, Cs = [], [], []
    wts = mesh.nodal_weights()
    for cone in cones:
        r0 = cone.radius(0.0)
        inside = (mesh.nodes[:, 0] - cone.x) ** 2 + (mesh.nodes[:, 1] - cone.y) ** 2 <= r0 * r0
        R = float(np.sum(wts * dens * inside))
        smax = min(cone.S, T)
        L = np.array([section_norm2(F, T, n_cells, cone, s) for s in np.linspace(smax / n_times, smax, n_times)])
        lhs.append(L)
        rhs.append(R)
        Cs.append(float(L.max() / R) if R > 0 else (0.0 if L.max() == 0 else np.inf))
    return FOperatorEstimate(F, g, Gv, list(cones), np.array(lhs), np.array(rhs), np.array(Cs),
                             float(coarse_norm(F, T, n_cells)), raw, Gv.flagged, float(T), n_cells)


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------

@dataclass
class KernelEstimate:
    basis: HatBasis
    n_tbins: int
    n_cells: int
    T: float
    speed: float
    responses: np.ndarray  # (ncols, n_tbins, n_cells^2, 2) per unit hat coefficient
    weights: np.ndarray  # (n_tbins, n_cells^2, n_t, n_x^2, 2, 2) target bin x source hat x (i, j)
    leak_fraction: float
    causality_max: float  # largest |weight| from strictly later sources, relative to the largest weight
    total_weight: float
    response_rank: int
    flagged: bool
    schedule: dict
    defects: dict
    heldout_error: float | None = None
    heldout_direct: np.ndarray | None = None

    def apply(self, w: Callable) -> np.ndarray:
        """Binned kernel applied to ``w`` through its hat coefficients."""
        coef = self.basis.project(w)
        return np.einsum("c,ctxi->txi", coef, self.responses)

    def write_csv(self, path) -> None:
        nt, nx2 = self.basis.n_t, self.basis.n_x ** 2
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["ts_bin", "xs_bin", "tt_bin", "xt_bin", "L11", "L12", "L21", "L22"])
            for a in range(nt):
                for s in range(nx2):
                    for tt in range(self.n_tbins):
                        for xt in range(self.n_cells ** 2):
                            L = self.weights[tt, xt, a, s]
                            wr.writerow([a, s, tt, xt] + [repr(float(v)) for v in L.ravel()])


def _rect_dist(ax0, ax1, ay0, ay1, bx0, bx1, by0, by1):
    dx = np.maximum(0.0, np.maximum(ax0 - bx1, bx0 - ax1))
    dy = np.maximum(0.0, np.maximum(ay0 - by1, by0 - ay1))
    return np.hypot(dx, dy)


def cone_mask(basis: HatBasis, n_tbins: int, n_cells: int, T: float, speed: float,
              inflation: float = LEAK_INFLATION):
    """Admissible (target bin, source hat) pairs and strictly-later pairs.

    A pair is admissible when some point of the source support lies in the
    inflated backward cone of some point of the target bin. Returns boolean
    arrays of shape (n_tbins, n_cells^2, ncols // 2).
    """
    sup = basis.supports()[0::2]
    tl, th, x1l, x1h, x2l, x2h = sup.T
    tb = np.arange(n_tbins)
    t0 = tb * T / n_tbins
    t1 = (tb + 1) * T / n_tbins
    c = np.arange(n_cells * n_cells)
    cx0 = (c % n_cells) / n_cells
    cy0 = (c // n_cells) / n_cells
    d = _rect_dist(cx0[:, None], cx0[:, None] + 1 / n_cells, cy0[:, None], cy0[:, None] + 1 / n_cells,
                   x1l[None], x1h[None], x2l[None], x2h[None])  # (ncell, nsrc)
    gap = t1[:, None] - tl[None, :]  # (ntb, nsrc)
    inside = (gap[:, None, :] > 0) & (d[None] <= inflation * speed * np.maximum(gap, 0.0)[:, None, :] + 1e-12)
    later = (tl[None, :] >= t1[:, None])[:, None, :] & np.ones((1, n_cells * n_cells, 1), bool)
    return inside, later


def estimate_kernel(mesh: Mesh2D, lame: LameTensor, fields=None, ks=(1.0, 10.0), epsilons=(1 / 4, 1 / 8),
                    T: float = 0.5, n_bins=(6, 6), heldout: Callable | None = None,
                    inflation: float = LEAK_INFLATION) -> KernelEstimate:
    """Binned kernel from responses to a tensor hat basis.

    ``n_bins = (n_t, n_x)`` sets both the source hats and the target bins.
    Each response column gives the kernel acting on one source hat. The leak
    fraction is the Frobenius weight on target-source pairs outside the
    inflated backward cone, over the total. A held-out ``w`` is integrated in
    the same batch and compared with the kernel applied to its projection.
    """
    n_t, n_x = n_bins
    basis = HatBasis(n_t, n_x, T)
    targets = basis if heldout is None else StackedTargets(basis, FunctionTargets([heldout]))
    ks_, eps_, grid, track, raw = _run_grid(mesh, lame, targets, ks, epsilons, fields, T, n_x, n_t)
    eps_d, k_d, cross = _defects(grid, raw, T, n_x)
    resp = grid[-1, -1][:basis.ncols]  # (ncols, n_t, n_x^2, 2)
    nsrc = basis.ncols // 2
    # weights[tt, xt, a, s, i, j] = response component i at (tt, xt) to source (a, s) in direction j
    Wt = resp.reshape(nsrc, 2, n_t, n_x * n_x, 2)  # (src, j, tt, xt, i)
    weights = np.transpose(Wt, (2, 3, 0, 4, 1)).reshape(n_t, n_x * n_x, n_t, n_x * n_x, 2, 2)
    fro = np.sqrt(np.sum(weights ** 2, axis=(-2, -1))).reshape(n_t, n_x * n_x, nsrc)
    inside, later = cone_mask(basis, n_t, n_x, T, lame.wave_speed, inflation)
    total = float(fro.sum())
    leak = float(fro[~inside].sum() / total) if total > 0 else 0.0
    peak = float(fro.max())
    caus = float(fro[later].max() / peak) if peak > 0 and later.any() else 0.0
    sv = np.linalg.svd(resp.reshape(basis.ncols, -1), compute_uv=False)
    rank = int(np.sum(sv > 1e-10 * sv[0])) if sv.size and sv[0] > 0 else 0
    flagged = rank < basis.ncols
    ker = KernelEstimate(basis, n_t, n_x, float(T), lame.wave_speed, resp, weights, leak, caus, total, rank,
                         bool(flagged), {"k": ks_.tolist(), "epsilon": eps_.tolist()},
                         {"eps": float(eps_d.max()), "k": float(k_d.max()), "cross": float(cross.max())})
    if heldout is not None:
        direct = grid[-1, -1][basis.ncols]
        approx = ker.apply(heldout)
        dn = float(coarse_norm(direct, T, n_x))
        ker.heldout_error = float(coarse_norm(approx - direct, T, n_x)) / dn if dn > 0 else 0.0
        ker.heldout_direct = direct
    return ker


# ---------------------------------------------------------------------------
# closure g = G(u')
# ---------------------------------------------------------------------------

def section_integral(density, T: float, n_cells: int, cone: ConeSpec, t: float) -> float:
    """int over B(xbar, S, t) of a coarse scalar density of shape (n_tbins, n_cells^2)."""
    nt = density.shape[0]
    kb = min(max(int(t / T * nt), 0), nt - 1)
    cov = cell_coverage(cone, min(t, cone.S), n_cells)
    return float(np.sum(cov * density[kb]) / (n_cells * n_cells))


@dataclass
class ClosureReport:
    cones: list
    times: np.ndarray  # (n_cones, n_times)
    error: np.ndarray  # ||g - G(u')||_{L2(B(s))}
    force_scale: np.ndarray  # ||G_eps u_eps'||_{L2(B(s))}, unaveraged
    g_scale: np.ndarray  # ||g||_{L2(B(s))}
    relative: np.ndarray  # error / force_scale
    relative_to_g: np.ndarray
    max_relative: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_relative <= self.tolerance)


def closure_report(traj: Trajectory, force: np.ndarray, g_coarse, Gw_coarse, cones: Sequence[ConeSpec],
                   n_times: int = 8, tolerance: float = 0.1) -> ClosureReport:
    """Compare the weak limit ``g`` with the operator applied to the limit velocity.

    Errors on each cone section are measured relative to the L2 norm of the
    unaveraged force ``G_eps u_eps'`` on the same section, the quantity whose
    weak limit ``g`` is. The ratio to ``||g||`` itself is reported alongside.
    """
    g_coarse = np.asarray(g_coarse, float)
    nt, nc2 = g_coarse.shape[:2]
    n_cells = int(round(math.sqrt(nc2)))
    T = float(traj.times[-1])
    sq = coarse_average(traj, force ** 2, n_cells, nt).sum(axis=-1)  # (nt, nc^2)
    diff2 = np.sum((g_coarse - Gw_coarse) ** 2, axis=-1)
    g2 = np.sum(g_coarse ** 2, axis=-1)
    times, err, fs, gs = [], [], [], []
    for cone in cones:
        smax = min(cone.S, T)
        tg = np.linspace(smax / n_times, smax * (1 - 1.0 / (2 * n_times)), n_times)
        times.append(tg)
        err.append([math.sqrt(section_integral(diff2, T, n_cells, cone, s)) for s in tg])
        fs.append([math.sqrt(section_integral(sq, T, n_cells, cone, s)) for s in tg])
        gs.append([math.sqrt(section_integral(g2, T, n_cells, cone, s)) for s in tg])
    err, fs, gs = np.array(err), np.array(fs), np.array(gs)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(fs > 0, err / fs, np.where(err > 0, np.inf, 0.0))
        relg = np.where(gs > 0, err / gs, np.nan)
    return ClosureReport(list(cones), np.array(times), err, fs, gs, rel, relg, float(np.max(rel)), tolerance)
