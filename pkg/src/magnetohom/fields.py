"""Oscillating skew-symmetric field families.

In two dimensions every skew matrix is ``b * J`` with ``J = [[0, -1], [1, 0]]``,
so a field is fully described by its scalar coefficient ``b(t, x)``. Four
families are provided:

``time_exp``
    ``beta_eps(t) = rho * a * sin(t / eps) * J`` and ``B_eps = beta_eps'``.
``space_strong``
    ``F_eps(x) = (a / eps) * c0(x / eps) * J`` with a zero-mean periodic profile.
``spacetime_bounded``
    ``G_eps(t, x) = gamma * sin(omega * t / eps) * sin(2 pi x1 / eps) * g0(x) * J``.
``compact``
    ``H(t, x) = h(t, x) * J``, independent of ``eps`` and vanishing at ``t = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SingularLimitError, ValidationError

J = np.array([[0.0, -1.0], [1.0, 0.0]])
KINDS = ("time_exp", "space_strong", "spacetime_bounded", "compact")
SINGULAR_THRESHOLD = 1e-3

TWO_PI = 2.0 * math.pi

# periodic cell profiles c0(y), y in the unit cell
PROFILES: dict[str, Callable] = {
    "zero": lambda y1, y2: np.zeros(np.broadcast(y1, y2).shape),
    "sin_y1": lambda y1, y2: np.sin(TWO_PI * y1) + 0.0 * y2,
    "sin_y2": lambda y1, y2: np.sin(TWO_PI * y2) + 0.0 * y1,
    "sin_y1_sin_y2": lambda y1, y2: np.sin(TWO_PI * y1) * np.sin(TWO_PI * y2),
    "cos_y1_plus_sin_y2": lambda y1, y2: np.cos(TWO_PI * y1) + np.sin(TWO_PI * y2),
}

# smooth envelopes g0(x) on the domain
ENVELOPES: dict[str, Callable] = {
    "zero": lambda x1, x2: np.zeros(np.broadcast(x1, x2).shape),
    "one": lambda x1, x2: np.ones(np.broadcast(x1, x2).shape),
    "bump": lambda x1, x2: np.sin(math.pi * x1) * np.sin(math.pi * x2),
}

# compact fields h(t, x)
COMPACT: dict[str, Callable] = {
    "zero": lambda t, x1, x2: np.zeros(np.broadcast(x1, x2).shape),
    "t": lambda t, x1, x2: t * np.ones(np.broadcast(x1, x2).shape),
    "t_bump": lambda t, x1, x2: t * np.sin(math.pi * x1) * np.sin(math.pi * x2),
    "const": lambda t, x1, x2: np.ones(np.broadcast(x1, x2).shape),
}


def _resolve(table, name_or_fn, what):
    if callable(name_or_fn):
        return getattr(name_or_fn, "__name__", "custom"), name_or_fn
    if name_or_fn not in table:
        raise ValidationError(f"unknown {what} {name_or_fn!r}; known: {sorted(table)}")
    return name_or_fn, table[name_or_fn]


def skew(b):
    """Stack of matrices ``b * J`` for an array of coefficients."""
    b = np.asarray(b, dtype=float)
    return b[..., None, None] * J


def rotation(theta):
    """``exp(theta * J)``, the rotation by angle ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


@dataclass(frozen=True)
class SkewFieldSpec:
    kind: str
    epsilon: float = 1.0
    amplitude: float = 0.0
    rho: float = 1.0
    profile: str = "zero"
    omega: float = 1.0
    fn: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown field kind {self.kind!r}; expected one of {KINDS}")
        if not (self.epsilon > 0):
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if not math.isfinite(self.amplitude):
            raise ValidationError("amplitude must be finite")

    def coefficient(self, t: float, x) -> np.ndarray:
        """Scalar b(t, x) at points ``x`` of shape (m, 2)."""
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        eps, a = self.epsilon, self.amplitude
        if self.kind == "time_exp":
            return np.full(x1.shape, self.rho * a / eps * math.cos(t / eps))
        if self.kind == "space_strong":
            return (a / eps) * self.fn(x1 / eps, x2 / eps)
        if self.kind == "spacetime_bounded":
            return a * math.sin(self.omega * t / eps) * np.sin(TWO_PI * x1 / eps) * self.fn(x1, x2)
        return a * self.fn(t, x1, x2)

    def matrix(self, t: float, x) -> np.ndarray:
        return skew(self.coefficient(t, x))

    @property
    def time_dependent(self) -> bool:
        return self.kind != "space_strong"

    def beta(self, t):
        """Coefficient of the primitive ``beta_eps(t)`` (``time_exp`` only)."""
        if self.kind != "time_exp":
            raise ValidationError("beta is defined only for time_exp fields")
        return self.rho * self.amplitude * np.sin(np.asarray(t, dtype=float) / self.epsilon)

    def beta_matrix(self, t):
        return skew(self.beta(t))

    def rotation(self, t, sign: float = -1.0):
        """``exp(sign * beta_eps(t) / rho)``."""
        return rotation(sign * self.beta(t) / self.rho)

    def sup_norm(self) -> float:
        """Upper bound on sup |b| over the domain (exact for the shipped profiles)."""
        g = np.linspace(0.0, 1.0, 201)
        X1, X2 = np.meshgrid(g, g)
        if self.kind == "time_exp":
            return abs(self.rho * self.amplitude / self.epsilon)
        if self.kind == "space_strong":
            return abs(self.amplitude / self.epsilon) * float(np.max(np.abs(self.fn(X1, X2))))
        if self.kind == "spacetime_bounded":
            return abs(self.amplitude) * float(np.max(np.abs(self.fn(X1, X2))))
        return float("nan")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "amplitude": self.amplitude,
                "rho": self.rho, "profile": self.profile, "omega": self.omega}

    def with_epsilon(self, eps: float) -> "SkewFieldSpec":
        return SkewFieldSpec(self.kind, eps, self.amplitude, self.rho, self.profile, self.omega, self.fn)


@dataclass(frozen=True)
class FieldSum:
    """Sum of skew field components, B = F + G + H (+ time_exp part)."""
    components: tuple = ()

    def coefficient(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for c in self.components:
            out = out + c.coefficient(t, x)
        return out

    def matrix(self, t, x):
        return skew(self.coefficient(t, x))

    @property
    def time_dependent(self) -> bool:
        return any(c.time_dependent for c in self.components)


def as_field(spec) -> FieldSum:
    if spec is None:
        return FieldSum(())
    if isinstance(spec, FieldSum):
        return spec
    if isinstance(spec, SkewFieldSpec):
        return FieldSum((spec,))
    return FieldSum(tuple(spec))


def make_time_skew(a: float, eps: float, rho: float = 1.0) -> SkewFieldSpec:
    return SkewFieldSpec("time_exp", epsilon=eps, amplitude=a, rho=rho, profile="sin_t")


def cell_mean(fn, m: int = 256) -> float:
    """Midpoint-rule mean of a periodic profile over the unit cell."""
    s = (np.arange(m) + 0.5) / m
    Y1, Y2 = np.meshgrid(s, s)
    return float(np.mean(fn(Y1, Y2)))


def make_space_skew(profile="sin_y1", eps: float = 1.0, amplitude: float = 1.0) -> SkewFieldSpec:
    """F_eps(x) = (amplitude / eps) c0(x / eps) J; rejects profiles with nonzero cell mean."""
    name, fn = _resolve(PROFILES, profile, "profile")
    mean = cell_mean(fn)
    if abs(mean) > 1e-10:
        raise ValidationError(f"profile {name!r} has cell mean {mean:.3e}; a zero-mean profile is required")
    return SkewFieldSpec("space_strong", epsilon=eps, amplitude=amplitude, profile=name, fn=fn)


def make_spacetime_skew(gamma: float, eps: float, envelope="bump", omega: float = 1.0) -> SkewFieldSpec:
    """G_eps(t, x) = gamma sin(omega t / eps) sin(2 pi x1 / eps) g0(x) J.

    ``omega`` defaults to 1. Other values tune the time frequency, for instance
    to resonate with the elastic waves of wavelength eps.
    """
    name, fn = _resolve(ENVELOPES, envelope, "envelope")
    if not (math.isfinite(gamma) and math.isfinite(omega)):
        raise ValidationError("gamma and omega must be finite")
    return SkewFieldSpec("spacetime_bounded", epsilon=eps, amplitude=gamma, profile=name, omega=omega, fn=fn)


def make_compact(H="zero", amplitude: float = 1.0) -> SkewFieldSpec:
    """Fixed field H(t, x) = amplitude h(t, x) J; requires H(0, .) = 0."""
    name, fn = _resolve(COMPACT, H, "compact field")
    g = np.linspace(0.0, 1.0, 41)
    X1, X2 = np.meshgrid(g, g)
    h0 = amplitude * np.asarray(fn(0.0, X1, X2), dtype=float)
    if np.max(np.abs(h0)) > 1e-14:
        raise ValidationError(f"compact field {name!r} is nonzero at t=0; H(0, x) = 0 is required")
    return SkewFieldSpec("compact", epsilon=1.0, amplitude=amplitude, profile=name, fn=fn)


def spec_from_dict(d: dict) -> SkewFieldSpec:
    d = dict(d)
    kind = d.get("kind")
    eps = float(d.get("epsilon", 1.0))
    if kind == "time_exp":
        return make_time_skew(float(d.get("amplitude", 0.0)), eps, float(d.get("rho", 1.0)))
    if kind == "space_strong":
        return make_space_skew(d.get("profile", "sin_y1"), eps, float(d.get("amplitude", 1.0)))
    if kind == "spacetime_bounded":
        return make_spacetime_skew(float(d.get("amplitude", 0.0)), eps, d.get("profile", "bump"),
                                   float(d.get("omega", 1.0)))
    if kind == "compact":
        return make_compact(d.get("profile", "zero"), float(d.get("amplitude", 1.0)))
    raise ValidationError(f"unknown field kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class InverseMassLimit:
    """Weak-* limit of exp(-beta_eps / rho); here constant in time."""
    matrix: np.ndarray
    condition: float

    @property
    def mass_matrix(self) -> np.ndarray:
        """The inverse of ``matrix``."""
        return np.linalg.inv(self.matrix)

    def __call__(self, t=0.0):
        return self.matrix


def limit_inverse_mass(spec: SkewFieldSpec, samples: int = 1024) -> InverseMassLimit:
    """Period average of the rotation exp(-beta_eps / rho)."""
    if spec.kind != "time_exp":
        raise ValidationError("limit_inverse_mass requires a time_exp field")
    # the trapezoid rule on a full period is spectrally accurate for periodic integrands
    t = spec.epsilon * TWO_PI * np.arange(samples) / samples
    avg = spec.rotation(t).mean(axis=0)
    avg[np.abs(avg) < 1e-15] = 0.0
    sv = np.linalg.svd(avg, compute_uv=False)
    if sv.min() < SINGULAR_THRESHOLD:
        raise SingularLimitError(
            f"averaged rotation is singular (smallest singular value {sv.min():.3e} < {SINGULAR_THRESHOLD}); "
            f"amplitude a={spec.amplitude} is too close to a zero of J0")
    return InverseMassLimit(avg, float(sv.max() / sv.min()))


def average_rotation(spec: SkewFieldSpec, T: float, samples: int = 200001) -> np.ndarray:
    """Mean of exp(-beta_eps / rho) over [0, T] (finite horizon, incomplete periods included)."""
    t = np.linspace(0.0, T, samples)
    R = spec.rotation(t)
    w = np.full(samples, 1.0)
    w[0] = w[-1] = 0.5
    return np.einsum("k,kij->ij", w, R) / w.sum()
