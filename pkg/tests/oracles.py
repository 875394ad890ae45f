"""Independent reference values, computed without the package."""
import math

import numpy as np


def bessel_j0_series(x: float, terms: int = 40) -> float:
    """J0(x) = sum_m (-1)^m (x/2)^(2m) / (m!)^2."""
    s = 0.0
    for m in range(terms):
        s += (-1) ** m * (x / 2.0) ** (2 * m) / math.factorial(m) ** 2
    return s


def bessel_j0_first_zero(lo: float = 2.0, hi: float = 3.0, tol: float = 1e-13) -> float:
    """Bisection on the series."""
    flo = bessel_j0_series(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = bessel_j0_series(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cell_mass_sin_y1(lam: float = 1.0, mu: float = 1.0) -> np.ndarray:
    """Cell effective mass for c0 = sin(2 pi y1).

    chi^j depends on y1 only, so the cell problem reduces to two 1-D ODEs
    with moduli mu (shear) and lambda + 2 mu (pressure). Solving gives
    M = diag(1/(8 pi^2 mu), 1/(8 pi^2 (lambda + 2 mu))).
    """
    return np.diag([1.0 / (8 * math.pi ** 2 * mu), 1.0 / (8 * math.pi ** 2 * (lam + 2 * mu))])


def mc_disc_area_in_square(cx, cy, r, n=400_000, seed=0) -> tuple[float, float]:
    """Monte-Carlo area of the disc intersected with the unit square, and its standard error."""
    rng = np.random.default_rng(seed)
    p = rng.random((n, 2))
    hit = ((p[:, 0] - cx) ** 2 + (p[:, 1] - cy) ** 2 <= r * r).astype(float)
    return float(hit.mean()), float(hit.std() / math.sqrt(n))


def midpoint_pairing(f, phi, m=1024) -> float:
    """int_(0,1)^2 f phi by the midpoint rule on an m x m grid."""
    s = (np.arange(m) + 0.5) / m
    X1, X2 = np.meshgrid(s, s)
    return float(np.mean(f(X1, X2) * phi(X1, X2)))
