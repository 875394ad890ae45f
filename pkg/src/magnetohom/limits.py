"""Weak limits, the compactness-defect density mu0, light cones and the
cone-localised inequalities."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ValidationError
from .fem import LameTensor, Mesh2D, energy_density

# ---------------------------------------------------------------------------
# test dictionary
# ---------------------------------------------------------------------------


def _poly(x1, x2):
    return 16.0 * x1 * (1.0 - x1) * x2 * (1.0 - x2)


def _bump(cx, cy, r):
    def f(x1, x2):
        s = ((x1 - cx) ** 2 + (x2 - cy) ** 2) / (r * r)
        out = np.zeros(np.broadcast(x1, x2).shape)
        m = s < 1.0
        out[m] = np.exp(1.0 - 1.0 / (1.0 - s[m]))
        return out

    return f


@dataclass(frozen=True)
class TestFunction:
    label: str
    space: Callable
    time: Callable | None = None

    def __call__(self, x1, x2):
        return self.space(x1, x2)


@dataclass(frozen=True)
class TestDictionary:
    """Smooth scalar test functions vanishing on the boundary of the square.

    Entries are ``theta(t / T) * psi(x)``; a ``None`` time factor means 1.
    Vector pairings use ``psi e_1`` and ``psi e_2``.
    """
    entries: tuple

    def __post_init__(self):
        if len(self.entries) < 1:
            raise ValidationError("dictionary is empty")

    @property
    def labels(self):
        return [e.label for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def space_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array([e.space(x[..., 0], x[..., 1]) for e in self.entries])

    def time_values(self, t, T: float) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.array([np.ones_like(t) if e.time is None else e.time(t / T) for e in self.entries])

    def scaled(self, factors) -> "TestDictionary":
        out = []
        for e, c in zip(self.entries, factors):
            out.append(TestFunction(e.label, (lambda f, c: lambda a, b: c * f(a, b))(e.space, float(c)), e.time))
        return TestDictionary(tuple(out))


def default_dictionary(spacetime: bool = False) -> TestDictionary:
    """Nine space entries: polynomial-times-bubble fields and five smooth bumps.

    Labels: ``poly``, ``poly_x1``, ``poly_x2``, ``poly_x1x2`` (the bubble
    16 x1(1-x1) x2(1-x2) times 1, x1, x2, x1 x2), and ``bump_c``, ``bump_sw``,
    ``bump_se``, ``bump_nw``, ``bump_ne`` (C-infinity bumps of radius 0.3).
    With ``spacetime=True`` every entry is multiplied by ``sin(pi t/T)``.
    """
    e = [
        TestFunction("poly", _poly),
        TestFunction("poly_x1", lambda a, b: _poly(a, b) * a),
        TestFunction("poly_x2", lambda a, b: _poly(a, b) * b),
        TestFunction("poly_x1x2", lambda a, b: _poly(a, b) * a * b * 4.0),
        TestFunction("bump_c", _bump(0.5, 0.5, 0.3)),
        TestFunction("bump_sw", _bump(0.3, 0.3, 0.25)),
        TestFunction("bump_se", _bump(0.7, 0.3, 0.25)),
        TestFunction("bump_nw", _bump(0.3, 0.7, 0.25)),
        TestFunction("bump_ne", _bump(0.7, 0.7, 0.25)),
    ]
    if spacetime:
        e = [TestFunction(x.label, x.space, lambda s: np.sin(math.pi * s)) for x in e]
    return TestDictionary(tuple(e))


# ---------------------------------------------------------------------------
# weak limits
# ---------------------------------------------------------------------------

@dataclass
class WeakLimitReport:
    labels: list
    epsilons: np.ndarray
    pairings: np.ndarray  # (n_eps, n_dict[, ...])
    limit: np.ndarray
    defect: np.ndarray
    scale: float
    verdict: list


VERDICT_THRESHOLD = 0.1


def pair_scalar(values, weights, dictionary: TestDictionary, x) -> np.ndarray:
    """Quadrature pairing of scalar (or trailing-dim) samples with every entry."""
    phi = dictionary.space_values(x) * np.asarray(weights)[None, :]
    return np.tensordot(phi, np.asarray(values, dtype=float), axes=([1], [0]))


def weak_limit(sequence: Sequence, epsilons: Sequence[float], dictionary: TestDictionary, x, weights,
               threshold: float = VERDICT_THRESHOLD) -> WeakLimitReport:
    """Pair each field of an eps sequence with the dictionary on a common grid.

    ``sequence`` holds field samples at the quadrature points ``x`` (weights
    ``weights``). The verdict for an entry is ``converged`` when the Cauchy
    defect between the two finest eps is below ``threshold`` times the entry's
    pairing scale ``max(|limit|, ||phi||_L1 * mean |f|)``, so rescaling an
    entry rescales pairing and scale together.
    """
    eps = np.asarray(epsilons, dtype=float)
    if eps.size < 2 or len(sequence) != eps.size:
        raise ValidationError("need at least two eps samples, one field per eps")
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    for f in sequence:
        if np.shape(f)[0] != x.shape[0]:
            raise ValidationError("field samples do not match the quadrature grid")
    order = np.argsort(eps)[::-1]
    eps = eps[order]
    P = np.array([pair_scalar(sequence[i], w, dictionary, x) for i in order])
    defect = np.abs(P[-1] - P[-2])
    phi_l1 = np.abs(dictionary.space_values(x)) @ w
    f_mag = float(np.mean([np.sum(w * np.abs(np.asarray(sequence[i]))) / w.sum() for i in order]))
    scale_per = np.maximum(np.abs(P[-1]), (phi_l1 * f_mag).reshape((-1,) + (1,) * (P.ndim - 2)))
    verdict = []
    for d, s in zip(defect.reshape(len(dictionary), -1), scale_per.reshape(len(dictionary), -1)):
        ok = np.all(d <= threshold * np.maximum(s, 1e-300))
        verdict.append("converged" if ok else "undecided")
    return WeakLimitReport(dictionary.labels, eps, P, P[-1], defect, f_mag, verdict)


# ---------------------------------------------------------------------------
# cones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConeSpec:
    x: float
    y: float
    S: float
    c: float = 2.0

    def __post_init__(self):
        if not (self.S > 0 and self.c > 0):
            raise ValidationError("cone apex time and speed must be positive")

    def radius(self, t: float) -> float:
        return max(self.c * (self.S - t), 0.0)


@dataclass
class ConeSection:
    weight: np.ndarray  # per-triangle inclusion weight in [0, 1]
    indicator: np.ndarray  # vertex-majority boolean
    area: float


def cone_section(cone: ConeSpec, t: float, mesh: Mesh2D) -> ConeSection:
    """B(xbar, c(S-t)) intersected with the square, resolved on triangles.

    The indicator uses a vertex majority (at least 2 of 3 vertices inside);
    the weight used for areas and integrals is the vertex fraction.
    """
    if t < 0 or t > cone.S * (1 + 1e-12):
        raise ValidationError(f"section time {t} outside [0, S={cone.S}]")
    r = cone.radius(t)
    frac = _kernels.vertex_fraction_in_ball(mesh.nodes, mesh.triangles, float(cone.x), float(cone.y), float(r))
    if r == 0.0:
        frac = np.zeros_like(frac)
    return ConeSection(frac, frac >= 0.5, float(np.sum(frac * mesh.area)))


# ---------------------------------------------------------------------------
# mu0
# ---------------------------------------------------------------------------

@dataclass
class Mu0Field:
    density: np.ndarray  # per coarse cell, after clipping
    raw: np.ndarray
    total_mass: float
    clip: float
    n_cells: int
    energy_limit: np.ndarray
    bulk: np.ndarray
    flagged: bool

    def mass_in(self, cone: ConeSpec, t: float = 0.0) -> float:
        """mu0 of the closed section B(xbar, c(S-t)), cells weighted by fractional coverage."""
        m = self.n_cells
        s = (np.arange(m) + 0.5) / m
        sub = 8
        off = (np.arange(sub) + 0.5) / (sub * m) - 0.5 / m
        X1, X2 = np.meshgrid(s, s)
        cover = np.zeros((m, m))
        r = cone.radius(t)
        for a in off:
            for b in off:
                cover += ((X1 + a - cone.x) ** 2 + (X2 + b - cone.y) ** 2 <= r * r)
        cover /= sub * sub
        return float(np.sum(self.density.reshape(m, m) * cover) / (m * m))


def _cell_average_triangles(mesh, values, n_cells):
    from .dynamics import triangle_cells

    cells = triangle_cells(mesh, n_cells)
    num = np.bincount(cells, weights=values * mesh.area, minlength=n_cells * n_cells)
    den = np.bincount(cells, weights=mesh.area, minlength=n_cells * n_cells)
    return num / den


def _cell_average_nodes(mesh, values, n_cells):
    from .dynamics import cell_matrix

    C = cell_matrix(mesh, n_cells)
    return (C @ values) / np.asarray(C.sum(axis=1)).ravel()


def estimate_mu0(mesh: Mesh2D, lame: LameTensor, u0_eps, u1_eps, u0, u1, M=None, Mzeta=None,
                 n_cells: int = 8) -> Mu0Field:
    """Coarse density of mu0 for one (finest) eps.

    The weak limit of rho |u1_eps|^2 + A e(u0_eps):e(u0_eps) is read off as
    coarse-cell averages; the bulk terms A e(u0):e(u0) and
    (rho I + M)^{-1}(rho u1 + M zeta).(rho u1 + M zeta) are evaluated pointwise
    and averaged on the same cells. ``M`` may be a constant 2x2 matrix or
    per-cell matrices of shape (n_cells^2, 2, 2).
    """
    rho = lame.rho
    u1_eps = np.asarray(u1_eps, float)
    kin = rho * np.sum(u1_eps ** 2, axis=1)
    pot = energy_density(mesh, lame, u0_eps)
    lim = _cell_average_nodes(mesh, kin, n_cells) + _cell_average_triangles(mesh, pot, n_cells)

    bulk_pot = _cell_average_triangles(mesh, energy_density(mesh, lame, u0), n_cells)
    u1 = np.asarray(u1, float)
    nn = mesh.n_nodes
    if M is None:
        Mn = np.zeros((nn, 2, 2))
    else:
        M = np.asarray(M, float)
        if M.shape == (2, 2):
            Mn = np.broadcast_to(M, (nn, 2, 2))
        else:
            Mn = M[_node_cells(mesh, n_cells, int(round(math.sqrt(M.shape[0]))))]
    mz = np.zeros((nn, 2)) if Mzeta is None else np.asarray(Mzeta, float)
    q = rho * u1 + mz
    A = rho * np.eye(2)[None] + Mn
    sol = np.linalg.solve(A, q[..., None])[..., 0]
    kin_bulk = np.sum(sol * q, axis=1)
    bulk = bulk_pot + _cell_average_nodes(mesh, kin_bulk, n_cells)
    raw = lim - bulk
    clip = float(np.sum(np.clip(-raw, 0.0, None))) / (n_cells * n_cells)
    dens = np.clip(raw, 0.0, None)
    total = float(np.sum(dens)) / (n_cells * n_cells)
    flagged = clip > 0.01 * total if total > 0 else False
    return Mu0Field(dens, raw, total, clip, n_cells, lim, bulk, bool(flagged))


def _node_cells(mesh, n_cells_out, n_cells_m):
    ix = np.clip((mesh.nodes[:, 0] * n_cells_m).astype(int), 0, n_cells_m - 1)
    iy = np.clip((mesh.nodes[:, 1] * n_cells_m).astype(int), 0, n_cells_m - 1)
    return iy * n_cells_m + ix


# ---------------------------------------------------------------------------
# inequalities
# ---------------------------------------------------------------------------

@dataclass
class MassInequalityReport:
    n_samples: int
    max_excess: float
    violations: int
    failing: tuple | None


def mass_inequality_gap(rho, M, xi, eta):
    """(rho I + M)^{-1}(rho xi + M eta).(rho xi + M eta) - (rho |xi|^2 + M eta.eta), vectorised."""
    M = np.asarray(M, float)
    xi = np.asarray(xi, float)
    eta = np.asarray(eta, float)
    q = rho * xi + np.einsum("...ij,...j->...i", M, eta)
    A = rho * np.eye(2) + M
    s = np.linalg.solve(A, q[..., None])[..., 0]
    lhs = np.sum(s * q, axis=-1)
    rhs = rho * np.sum(xi * xi, axis=-1) + np.einsum("...i,...ij,...j->...", eta, M, eta)
    return lhs - rhs


def check_mass_inequality(M, samples, rho: float = 1.0, tol: float = 1e-12) -> MassInequalityReport:
    """Check the convexity inequality on samples ``(xi, eta)`` of shape (n, 2) each.

    ``M`` is either a single 2x2 matrix or a stack of shape (n, 2, 2). The
    excess is measured relative to ``max(1, rhs)``.
    """
    xi, eta = samples
    M = np.asarray(M, float)
    if M.ndim == 2:
        if np.max(np.abs(M - M.T)) > 1e-12 or np.linalg.eigvalsh(M).min() < -1e-12:
            raise ValidationError("M must be symmetric positive semidefinite")
    gap = mass_inequality_gap(rho, M, xi, eta)
    rhs = rho * np.sum(np.asarray(xi) ** 2, axis=-1)
    scale = np.maximum(1.0, np.abs(rhs))
    rel = gap / scale
    bad = np.flatnonzero(rel > tol)
    fail = None
    if bad.size:
        i = int(bad[np.argmax(rel[bad])])
        Mi = M if M.ndim == 2 else M[i]
        fail = (np.asarray(xi)[i], np.asarray(eta)[i], Mi, float(gap[i]))
    return MassInequalityReport(int(np.shape(xi)[0]), float(rel.max()), int(bad.size), fail)


@dataclass
class ConeEstimateReport:
    cones: list
    times: np.ndarray
    lhs: np.ndarray  # (n_cones, n_times): int_{B(S,s)} |g(s)|^2
    mu0_term: np.ndarray  # (n_cones,): mu0(closed B(S, 0))
    velocity_term: np.ndarray  # (n_cones, n_times): (int_0^s ||u'||_{L2(B(S,t))} dt)^2
    fitted_C: np.ndarray  # (n_cones,)
    positivity: np.ndarray  # (n_cones, n_times): mu0/2 + int_0^s int g . u'
    max_C: float
    C_variation: float


def check_cone_estimates(traj, g_history, mu0: Mu0Field | float | None, cones: Sequence[ConeSpec],
                         times: Sequence[float] | None = None, n_times: int = 8,
                         velocity=None) -> ConeEstimateReport:
    """Evaluate both cone-localised estimates along the time grid of ``traj``.

    ``g_history`` holds the limit force density at the step midpoints,
    shape (nsteps, nn, 2), paired with the midpoint velocities ``traj.v_half``.
    The fitted constant for a cone is the smallest C with
    LHS <= C (mu0 term + velocity term) at every tested time.
    """
    mesh = traj.mesh
    vh = traj.v_half if velocity is None else np.asarray(velocity, float)
    if vh is None:
        raise ValidationError("trajectory needs midpoint velocities (store_midpoint=True)")
    g = np.asarray(g_history, float)
    if g.shape != vh.shape:
        raise ValidationError(f"g history shape {g.shape} does not match velocity shape {vh.shape}")
    th = traj.t_half
    dt = traj.dt
    out_lhs, out_vel, out_pos, mu_terms, Cs = [], [], [], [], []
    tgrid_all = []
    for cone in cones:
        tmax = min(cone.S, traj.times[-1])
        tg = np.linspace(tmax / n_times, tmax, n_times) if times is None else np.asarray(times, float)
        tgrid_all.append(tg)
        if isinstance(mu0, Mu0Field):
            mterm = mu0.mass_in(cone, 0.0)
        else:
            mterm = float(mu0 or 0.0)
        mu_terms.append(mterm)
        # per-step section-restricted quantities
        vel_norm = np.zeros(th.size)
        gv = np.zeros(th.size)
        for n in range(th.size):
            sec = cone_section(cone, min(th[n], cone.S), mesh)
            wt = _tri_to_node_weights(mesh, sec.weight)
            vel_norm[n] = math.sqrt(np.sum(wt[:, None] * vh[n] ** 2))
            gv[n] = np.sum(wt[:, None] * g[n] * vh[n])
        lhs = np.zeros(tg.size)
        vel = np.zeros(tg.size)
        pos = np.zeros(tg.size)
        for i, s in enumerate(tg):
            mask = th <= s
            vel[i] = (dt * np.sum(vel_norm[mask])) ** 2
            pos[i] = 0.5 * mterm + dt * np.sum(gv[mask])
            n_s = int(np.argmin(np.abs(th - s)))
            sec = cone_section(cone, min(th[n_s], cone.S), mesh)
            wt = _tri_to_node_weights(mesh, sec.weight)
            lhs[i] = np.sum(wt[:, None] * g[n_s] ** 2)
        denom = mterm + vel
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(denom > 0, lhs / denom, np.where(lhs > 0, np.inf, 0.0))
        Cs.append(float(np.max(ratio)))
        out_lhs.append(lhs)
        out_vel.append(vel)
        out_pos.append(pos)
    Cs = np.array(Cs)
    pos_C = Cs[Cs > 0]
    variation = float(pos_C.max() / pos_C.min()) if pos_C.size else 1.0
    return ConeEstimateReport(list(cones), np.array(tgrid_all), np.array(out_lhs), np.array(mu_terms),
                              np.array(out_vel), Cs, np.array(out_pos), float(Cs.max()), variation)


def _tri_to_node_weights(mesh, tri_weight):
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.triangles.ravel(), np.repeat(tri_weight * mesh.area / 3.0, 3))
    return w


# ---------------------------------------------------------------------------
# weak-* pairings in time
# ---------------------------------------------------------------------------

TIME_FACTORS: dict[str, Callable] = {
    "sin1": lambda s: np.sin(math.pi * s),
    "sin2": lambda s: np.sin(2.0 * math.pi * s),
    "sin1sq": lambda s: np.sin(math.pi * s) ** 2,
    "one": lambda s: np.ones_like(s),
}


def time_pairings(times, series, T: float | None = None, factors: Sequence[str] = tuple(TIME_FACTORS)) -> np.ndarray:
    """Trapezoid pairings int_0^T theta(t / T) s(t) dt of a sampled series.

    ``series`` has time as its first axis; the result has a leading axis of
    length ``len(factors)``.
    """
    t = np.asarray(times, float)
    s = np.asarray(series, float)
    if s.shape[0] != t.size:
        raise ValidationError(f"series has {s.shape[0]} samples but {t.size} times were given")
    T = float(t[-1]) if T is None else float(T)
    w = np.zeros(t.size)
    dtv = np.diff(t)
    w[:-1] += 0.5 * dtv
    w[1:] += 0.5 * dtv
    out = []
    for name in factors:
        if name not in TIME_FACTORS:
            raise ValidationError(f"unknown time factor {name!r}; known: {sorted(TIME_FACTORS)}")
        th = TIME_FACTORS[name](t / T) * w
        out.append(np.tensordot(th, s, axes=(0, 0)))
    return np.array(out)
