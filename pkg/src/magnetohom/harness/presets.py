"""Canonical experiments with documented oracle values.

Every preset uses lambda = mu = rho = 1, so the wave speed is c = 2 and the
shear speed is 1.
"""
from __future__ import annotations

import math

from ..errors import ValidationError
from .config import ExperimentConfig, from_dict

# sin(pi x) sin(pi y) and sin(2 pi x) sin(pi y) as (component, m1, m2, amplitude)
_PHI = (1, 1)
_PHI2 = (2, 1)

_LAME = {"lambda": 1.0, "mu": 1.0, "rho": 1.0}

_CONES = [
    {"x": 0.5, "y": 0.5, "S": 0.5},
    {"x": 0.3, "y": 0.3, "S": 0.4},
    {"x": 0.7, "y": 0.3, "S": 0.4},
    {"x": 0.3, "y": 0.7, "S": 0.4},
    {"x": 0.7, "y": 0.7, "S": 0.4},
]


def _time_bessel() -> dict:
    J0_1 = 0.7651976865579666
    return {
        "name": "time-bessel",
        "mesh": {"n": 32},
        "lame": dict(_LAME),
        "fields": [{"kind": "time_exp", "amplitude": 1.0, "rho": 1.0}],
        "data": {"u0": [[0, 1, 1, 1.0], [1, 2, 1, 0.5]], "u1": [[0, 2, 1, -0.5], [1, 1, 1, 1.0]]},
        "T": 1.0,
        "dt": None,
        "epsilons": [1 / 8, 1 / 16, 1 / 32],
        "dictionary": "default",
        "options": {"momentum_epsilons": [1 / 32, 1 / 64, 1 / 128], "time_factors": ["sin1", "sin2", "sin1sq", "one"]},
        "oracles": {"J0(1)": J0_1, "effective_mass": 1.0 / J0_1 ** 2,
                    "note": "rho Mt^T Mt = rho / J0(a)^2 I for beta_eps = rho a sin(t/eps) J"},
    }


def _space_mass() -> dict:
    return {
        "name": "space-mass",
        "mesh": {"n": 128},
        "lame": dict(_LAME),
        "fields": [{"kind": "space_strong", "amplitude": 1.0, "profile": "sin_y1"}],
        "data": {"u0": [[0, 1, 1, 1.0], [1, 1, 1, 1.0]]},
        "T": 1.0,
        "epsilons": [1 / 8, 1 / 16],
        "options": {"cell_m": 64, "n_cells": 8, "corrector_n_per_period": 16,
                    "stationary_epsilons": [1 / 8, 1 / 16, 1 / 32], "stationary_n_per_period": 12,
                    "source_amplitude": 0.1},
        "oracles": {"M_cell": [[1 / (8 * math.pi ** 2), 0.0], [0.0, 1 / (24 * math.pi ** 2)]],
                    "note": "c0 = sin(2 pi y1): M = diag(1/(8 pi^2 mu), 1/(8 pi^2 (lambda + 2 mu)))"},
    }


def _full_system() -> dict:
    return {
        "name": "full-system",
        "mesh": {"n": 64},
        "lame": dict(_LAME),
        "fields": [
            {"kind": "space_strong", "amplitude": 1.0, "profile": "sin_y1"},
            {"kind": "spacetime_bounded", "amplitude": 1.0, "profile": "bump", "omega": 1.0},
            {"kind": "compact", "amplitude": 1.0, "profile": "t_bump"},
        ],
        "data": {"u0": [[0, 1, 1, 1.0], [1, 1, 1, 0.5]], "u1": [[1, 1, 1, 1.0]]},
        "T": 1.0,
        "epsilons": [1 / 8, 1 / 16],
        "ks": [1.0, 10.0, 100.0],
        "cones": [dict(c) for c in _CONES],
        "options": {"energy_n": 32, "energy_steps": 1000, "n_cells": 8, "n_tbins": 8},
        "oracles": {"energy_drift": 1e-10},
    }


def _nonlocal_kernel() -> dict:
    return {
        "name": "nonlocal-kernel",
        "mesh": {"n": 48},
        "lame": dict(_LAME),
        "fields": [
            {"kind": "space_strong", "amplitude": 1.0, "profile": "sin_y1"},
            {"kind": "spacetime_bounded", "amplitude": 1.0, "profile": "bump", "omega": 1.0},
        ],
        "data": {},
        "T": 0.5,
        "epsilons": [1 / 6, 1 / 12],
        "ks": [1.0, 10.0],
        "cones": [dict(c, S=min(c["S"], 0.45)) for c in _CONES],
        "options": {"n_bins": [6, 6], "inflation": 1.1, "penalty_epsilon": 1 / 8, "penalty_n": 32,
                    "penalty_ks": [1.0, 10.0, 100.0]},
        "oracles": {"leak_fraction_max": 0.05, "heldout_max": 0.15},
    }


def _mu0_oscillating() -> dict:
    return {
        "name": "mu0-oscillating",
        "mesh": {"n": 256},
        "lame": dict(_LAME),
        "fields": [{"kind": "space_strong", "amplitude": 1.0, "profile": "sin_y1"}],
        "data": {"u0": [[0, 1, 1, 1.0], [1, 1, 1, 0.5]], "u1": [[0, 1, 1, 1.0], [1, 1, 1, -1.0]],
                 "oscillating_u1": True},
        "T": 1.0,
        "epsilons": [1 / 32],
        "options": {"n_cells": 8},
        "oracles": {"density": "rho psi^2 / 2 with psi = sin(pi x1) sin(pi x2)", "total_mass": 0.125},
    }


PRESETS = {
    "time-bessel": _time_bessel,
    "space-mass": _space_mass,
    "full-system": _full_system,
    "nonlocal-kernel": _nonlocal_kernel,
    "mu0-oscillating": _mu0_oscillating,
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return from_dict(PRESETS[name]())
