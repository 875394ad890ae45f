"""P1 vector finite elements on the unit square.

Nodal fields are numpy arrays of shape ``(n_nodes, 2)``; global degrees of
freedom are interleaved as ``2 * node + component``. Matrices are
``scipy.sparse.csr_matrix``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .errors import AssemblyError, ConvergenceError, ValidationError


@dataclass(frozen=True)
class LameTensor:
    lam: float = 1.0
    mu: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if not (self.lam >= 0.0):
            raise ValidationError(f"lame.lambda must be >= 0, got {self.lam}")
        if not (self.mu > 0.0):
            raise ValidationError(f"lame.mu must be > 0, got {self.mu}")
        if not (self.rho > 0.0):
            raise ValidationError(f"lame.rho must be > 0, got {self.rho}")

    @property
    def spectral_radius(self) -> float:
        return max(2.0 * self.mu, 2.0 * self.lam + 2.0 * self.mu)

    @property
    def wave_speed(self) -> float:
        return math.sqrt(self.spectral_radius / self.rho)

    def apply(self, E):
        """A E for a symmetric matrix (or stack of matrices) E."""
        E = np.asarray(E, dtype=float)
        tr = np.trace(E, axis1=-2, axis2=-1)
        return self.lam * tr[..., None, None] * np.eye(2) + 2.0 * self.mu * E


@dataclass
class Mesh2D:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    h: float
    n: int | None = None
    area: np.ndarray = field(repr=False, default=None)
    grads: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_nodes = np.asarray(self.boundary_nodes, dtype=np.int64)
        if self.area is None or self.grads is None:
            area, grads = _kernels.p1_geometry(self.nodes, self.triangles)
            bad = np.flatnonzero(area <= 1e-14 * max(self.h, 1e-300) ** 2)
            if bad.size:
                raise AssemblyError(f"degenerate or inverted triangle at index {int(bad[0])}")
            self.area = area
            self.grads = grads
        self._free = None

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def free_nodes(self) -> np.ndarray:
        if self._free is None:
            mask = np.ones(self.n_nodes, dtype=bool)
            mask[self.boundary_nodes] = False
            self._free = np.flatnonzero(mask)
        return self._free

    @property
    def free_dofs(self) -> np.ndarray:
        f = self.free_nodes
        return np.stack([2 * f, 2 * f + 1], axis=1).ravel()

    def nodal_weights(self) -> np.ndarray:
        """Vertex-quadrature weights: one third of the adjacent triangle areas."""
        w = np.zeros(self.n_nodes)
        np.add.at(w, self.triangles.ravel(), np.repeat(self.area / 3.0, 3))
        return w

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)


def build_mesh(n: int) -> Mesh2D:
    """Structured triangulation of (0,1)^2 with n subdivisions per side."""
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValidationError(f"mesh n must be an integer >= 1, got {n!r}")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # idx[j, i] -> node at (x_i, y_j)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([a, b, c])
    tris[1::2] = np.column_stack([a, c, d])
    on_bd = (np.isclose(nodes[:, 0], 0.0) | np.isclose(nodes[:, 0], 1.0)
             | np.isclose(nodes[:, 1], 0.0) | np.isclose(nodes[:, 1], 1.0))
    return Mesh2D(nodes, tris, np.flatnonzero(on_bd), math.sqrt(2.0) / n, n=n)


def _max_edge(nodes, tris):
    p = nodes[tris]
    e = np.concatenate([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
    return float(np.sqrt((e ** 2).sum(axis=1)).max())


def mesh_from_arrays(nodes, triangles) -> Mesh2D:
    """Mesh from raw arrays; boundary nodes are those on edges used by a single triangle."""
    nodes = np.asarray(nodes, dtype=float)
    tris = np.asarray(triangles, dtype=np.int64)
    if tris.min() < 0 or tris.max() >= nodes.shape[0]:
        raise ValidationError("triangle references a node index out of range")
    edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise ValidationError("non-conforming triangulation: an edge is shared by more than two triangles")
    bnd = np.unique(uniq[counts == 1].ravel())
    return Mesh2D(nodes, tris, bnd, _max_edge(nodes, tris))


def write_mesh(mesh: Mesh2D, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# nodes {mesh.n_nodes}\n")
        np.savetxt(fh, mesh.nodes, fmt="%.17g")
        fh.write(f"# triangles {mesh.n_triangles}\n")
        np.savetxt(fh, mesh.triangles, fmt="%d")


def read_mesh(path) -> Mesh2D:
    nodes, tris, cur = [], [], None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            word = line[1:].split()
            cur = word[0] if word else cur
            continue
        parts = line.split()
        if cur == "nodes":
            nodes.append([float(parts[0]), float(parts[1])])
        elif cur == "triangles":
            tris.append([int(p) for p in parts[:3]])
        else:
            raise ValidationError(f"mesh file line outside a section: {raw!r}")
    return mesh_from_arrays(np.array(nodes), np.array(tris, dtype=np.int64))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _element_dofs(tris):
    d = np.empty((tris.shape[0], 6), dtype=np.int64)
    d[:, 0::2] = 2 * tris
    d[:, 1::2] = 2 * tris + 1
    return d


def assemble_stiffness(mesh: Mesh2D, lame: LameTensor) -> sp.csr_matrix:
    """Global elastic stiffness, exactly symmetric, before Dirichlet elimination."""
    ke = _kernels.elastic_element_matrices(mesh.area, mesh.grads, float(lame.lam), float(lame.mu))
    ke = 0.5 * (ke + np.transpose(ke, (0, 2, 1)))
    dofs = _element_dofs(mesh.triangles)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    ndof = 2 * mesh.n_nodes
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return K


def _density_blocks(mesh: Mesh2D, density) -> np.ndarray:
    nn = mesh.n_nodes
    if callable(density):
        D = np.asarray(density(mesh.nodes), dtype=float)
    else:
        D = np.asarray(density, dtype=float)
    if D.ndim == 0:
        D = D * np.eye(2)
    if D.shape == (2, 2):
        D = np.broadcast_to(D, (nn, 2, 2))
    elif D.shape == (nn,):
        D = D[:, None, None] * np.eye(2)
    if D.shape != (nn, 2, 2):
        raise ValidationError(f"density must be scalar, 2x2, or per-node; got shape {D.shape}")
    if np.max(np.abs(D - np.transpose(D, (0, 2, 1)))) > 1e-12 * max(1.0, np.max(np.abs(D))):
        raise ValidationError("density is not symmetric")
    ev = np.linalg.eigvalsh(D)
    if ev.min() < -1e-12 * max(1.0, np.abs(ev).max()):
        raise ValidationError(f"density is not positive semidefinite (min eigenvalue {ev.min():.3e})")
    return np.array(D)


def block_diag_matrix(blocks: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix with 2x2 diagonal blocks in interleaved dof order."""
    nb = blocks.shape[0]
    base = 2 * np.arange(nb)
    rows = np.stack([base, base, base + 1, base + 1], axis=1).ravel()
    cols = np.stack([base, base + 1, base, base + 1], axis=1).ravel()
    return sp.csr_matrix((blocks.reshape(nb, 4).ravel(), (rows, cols)), shape=(2 * nb, 2 * nb))


def assemble_mass(mesh: Mesh2D, density=1.0) -> sp.csr_matrix:
    """Vertex-quadrature mass for a scalar or 2x2 PSD density."""
    D = _density_blocks(mesh, density)
    return block_diag_matrix(mesh.nodal_weights()[:, None, None] * D)


def restrict(A: sp.spmatrix, mesh: Mesh2D) -> sp.csr_matrix:
    """Dirichlet elimination: keep rows and columns of free dofs."""
    f = mesh.free_dofs
    return A.tocsr()[f][:, f].tocsr()


def to_free(mesh: Mesh2D, u) -> np.ndarray:
    return np.asarray(u, dtype=float)[mesh.free_nodes].ravel()


def from_free(mesh: Mesh2D, x) -> np.ndarray:
    u = np.zeros((mesh.n_nodes, 2))
    u[mesh.free_nodes] = np.asarray(x).reshape(-1, 2)
    return u


def energy_density(mesh: Mesh2D, lame: LameTensor, u, v=None) -> np.ndarray:
    """Per-triangle A e(u):e(v) (constant on each P1 triangle)."""
    return _kernels.energy_density(mesh.grads, mesh.triangles, u, v, lame.lam, lame.mu)


def h1_seminorm(mesh: Mesh2D, u) -> float:
    ue = np.asarray(u, dtype=float)[mesh.triangles]
    gu = np.einsum("tai,tak->tik", ue, mesh.grads)
    return float(math.sqrt(np.sum(mesh.area * np.einsum("tik,tik->t", gu, gu))))


def l2_norm(mesh: Mesh2D, u) -> float:
    u = np.asarray(u, dtype=float)
    return float(math.sqrt(np.sum(mesh.nodal_weights()[:, None] * u * u)))


def h1_norm(mesh: Mesh2D, u) -> float:
    return math.hypot(l2_norm(mesh, u), h1_seminorm(mesh, u))


# ---------------------------------------------------------------------------
# linear solver
# ---------------------------------------------------------------------------

_AMG_THRESHOLD = 20000


def rigid_modes(mesh: Mesh2D, free_only: bool = True) -> np.ndarray:
    """Two translations and the infinitesimal rotation as dof vectors, shape (ndof, 3)."""
    x = mesh.nodes[mesh.free_nodes] if free_only else mesh.nodes
    B = np.zeros((2 * x.shape[0], 3))
    B[0::2, 0] = 1.0
    B[1::2, 1] = 1.0
    B[0::2, 2] = -x[:, 1]
    B[1::2, 2] = x[:, 0]
    return B


def _preconditioner(K, kind, nullspace=None):
    if kind == "auto":
        kind = "amg" if K.shape[0] >= _AMG_THRESHOLD else "jacobi"
    if kind == "none":
        return None
    if kind == "jacobi":
        d = K.diagonal()
        if np.any(d <= 0):
            raise ValidationError("matrix has a non-positive diagonal entry; not SPD")
        inv = 1.0 / d
        return spla.LinearOperator(K.shape, matvec=lambda r: inv * r, dtype=float)
    if kind == "amg":
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(K.tocsr(), B=nullspace, symmetry="symmetric")
        return ml.aspreconditioner(cycle="V")
    raise ValidationError(f"unknown preconditioner {kind!r}")


def solve_spd(K, b, tol: float = 1e-10, maxiter: int | None = None, precond: str = "auto",
              x0=None, nullspace=None) -> np.ndarray:
    """Preconditioned conjugate gradients with an explicit residual guarantee.

    Returns ``x`` with ``||K x - b|| <= tol * ||b||``. Raises
    :class:`ConvergenceError` carrying the final relative residual otherwise.
    A two-dimensional ``b`` of shape (n, k) is solved column by column with a
    shared preconditioner. ``nullspace`` (near-kernel vectors such as
    :func:`rigid_modes`) improves the algebraic multigrid preconditioner.
    """
    if not tol > 0:
        raise ValidationError("tol must be positive")
    K = sp.csr_matrix(K) if not sp.issparse(K) else K.tocsr()
    b = np.asarray(b, dtype=float)
    if b.ndim == 2 and K.shape[0] == b.shape[0] and b.shape[1] > 1:
        P = _preconditioner(K, precond, nullspace)
        return np.column_stack([_pcg(K, b[:, i], tol, maxiter, P, None) for i in range(b.shape[1])])
    shape = b.shape
    b = b.ravel()
    if K.shape[0] != b.size:
        raise ValidationError(f"dimension mismatch: K is {K.shape}, b has {b.size} entries")
    if np.linalg.norm(b) == 0.0:
        return np.zeros(shape)
    P = _preconditioner(K, precond, nullspace)
    return _pcg(K, b, tol, maxiter, P, x0).reshape(shape)


def _pcg(K, b, tol, maxiter, P, x0):
    bnorm = np.linalg.norm(b)
    n = b.size
    if bnorm == 0.0:
        return np.zeros(n)
    maxiter = maxiter if maxiter is not None else max(10 * n, 1000)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    r = b - K @ x
    z = r if P is None else P @ r
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    it = 0
    rnorm = np.linalg.norm(r)
    while rnorm > target and it < maxiter:
        Kp = K @ p
        pKp = p @ Kp
        if pKp <= 0:
            raise ConvergenceError("matrix is not positive definite (p^T K p <= 0)", residual=rnorm / bnorm,
                                   iterations=it)
        alpha = rz / pKp
        x += alpha * p
        r -= alpha * Kp
        it += 1
        if it % 50 == 0:
            r = b - K @ x  # guard against drift of the recursive residual
        rnorm = np.linalg.norm(r)
        z = r if P is None else P @ r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    true_res = np.linalg.norm(b - K @ x) / bnorm
    if true_res > tol:
        raise ConvergenceError(f"CG did not converge in {it} iterations (relative residual {true_res:.3e})",
                               residual=true_res, iterations=it)
    return x
