"""Run orchestration for the CLI subcommands.

Independent runs (one per eps, or one per acceptance check) are dispatched
to a process pool of ``workers`` processes; results are merged in run-id
order so reports do not depend on scheduling.
"""
from __future__ import annotations

import json
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from .. import __version__
from .._kernels import BACKEND
from ..dynamics import (DynamicProblem, coarse_average, integrate, magnetic_force_history, write_energy_csv,
                        write_nodal_csv, write_trajectory_csv)
from ..errors import NumericalError, ValidationError
from ..fem import LameTensor, build_mesh
from ..fields import FieldSum, limit_inverse_mass, make_time_skew
from ..homogenize import (CoarseField, cell_oracle, effective_mass_from_cells, effective_mass_time,
                          interior_cells, per_cell_mass, required_n, solve_corrector, solve_homog_general, solve_homog_time)
from ..nonlocal_op import estimate_kernel
from . import acceptance
from .acceptance import Verdict, build_fields, modes_to_field
from .config import ExperimentConfig

# acceptance checks exercised by `verify` for each preset
PRESET_CHECKS = {
    "time-bessel": ["A2", "A5"],
    "space-mass": ["A3", "A4", "A5"],
    "full-system": ["A1", "A5", "A8", "A10"],
    "nonlocal-kernel": ["A5", "A6", "A9"],
    "mu0-oscillating": ["A5", "A7"],
}


class RunFailure(NumericalError):
    """A numerical failure tagged with the id of the run that raised it."""

    def __init__(self, run_id: str, cause: BaseException):
        super().__init__(f"run {run_id} failed: {cause}")
        self.run_id = run_id
        self.cause = cause


@dataclass
class RunReport:
    command: str
    config: str
    outputs: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(v["status"] == "FAIL" for v in self.verdicts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = "FAIL" if self.failed else "OK"
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(acceptance._jsonable(self.to_dict()), indent=2, sort_keys=True))


def versions() -> dict:
    return {"magnetohom": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "backend": BACKEND}


def _lame(cfg):
    return LameTensor(cfg.lame["lambda"], cfg.lame["mu"], cfg.lame["rho"])


def _tag(eps: float) -> str:
    return f"eps{1.0 / eps:g}" if abs(1.0 / eps - round(1.0 / eps)) < 1e-9 else f"eps{eps:g}"


def _map(fn: Callable, jobs: list, workers: int) -> list:
    """Apply ``fn`` to ``(run_id, *args)`` jobs; results in run-id order."""
    jobs = sorted(jobs, key=lambda j: j[0])
    if workers <= 1 or len(jobs) <= 1:
        return [_guarded(fn, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(_guarded, [fn] * len(jobs), jobs))


def _guarded(fn, job):
    run_id = job[0]
    try:
        return fn(*job)
    except NumericalError as exc:
        if isinstance(exc, RunFailure):
            raise
        raise RunFailure(run_id, exc) from exc
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise RunFailure(run_id, exc) from exc


def initial_data(cfg: ExperimentConfig, mesh, eps: float | None):
    """u0, u1 on the mesh, applying the oscillating and well-posed options."""
    x = mesh.nodes
    u0 = modes_to_field(cfg.data.get("u0"), x)
    u1 = modes_to_field(cfg.data.get("u1"), x)
    if eps is not None and cfg.data.get("oscillating_u1"):
        u1 = u1 * np.sin(2 * math.pi * x[:, 0] / eps)[:, None]
    if eps is not None and cfg.data.get("well_posed"):
        F = build_fields(cfg, eps).get("space_strong")
        if F is None:
            raise ValidationError("data.well_posed needs a space_strong field")
        cs = solve_corrector(mesh, _lame(cfg), F, check_resolution=False)
        u0 = u0 + cs.combination(u1)
    return u0, u1


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _simulate_one(run_id, cfg_dict, eps, out):
    cfg = ExperimentConfig(**cfg_dict)
    mesh = build_mesh(cfg.n)
    lame = _lame(cfg)
    u0, u1 = initial_data(cfg, mesh, eps)
    fld = FieldSum(tuple(build_fields(cfg, eps).values()))
    prob = DynamicProblem(mesh, lame, fld, u0=u0, u1=u1, T=cfg.T)
    dt = cfg.dt or prob.default_dt()
    stride = max(1, int(cfg.options.get("snapshot_stride", 10)))
    t0 = time.perf_counter()
    tr = integrate(prob, dt, store=stride)
    elapsed = time.perf_counter() - t0
    traj_path = Path(out) / f"trajectory_{_tag(eps)}.csv"
    energy_path = Path(out) / f"energy_{_tag(eps)}.csv"
    write_trajectory_csv(tr, traj_path)
    write_energy_csv(tr, energy_path)
    drift = float(np.max(np.abs(tr.energy - tr.energy[0])) / tr.energy[0]) if tr.energy[0] > 0 else 0.0
    return run_id, {"trajectory": str(traj_path), "energy": str(energy_path)}, elapsed, {
        "eps": eps, "dt": dt, "steps": tr.n_steps, "energy_drift": drift}


def simulate(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunReport:
    jobs = [(f"simulate/{cfg.name}/{_tag(e)}", cfg.to_dict(), e, str(out)) for e in cfg.epsilons]
    rep = RunReport("simulate", cfg.name, versions=versions())
    for run_id, paths, elapsed, info in _map(_simulate_one, jobs, workers):
        rep.outputs[run_id] = paths
        rep.timings[run_id] = elapsed
        rep.notes[run_id] = info
    return rep


# ---------------------------------------------------------------------------
# corrector and effective mass
# ---------------------------------------------------------------------------

def _corrector_mesh_n(cfg, eps):
    ppp = cfg.options.get("corrector_n_per_period")
    return max(cfg.n, int(round(ppp / eps)) if ppp else required_n(eps))


def _corrector_one(run_id, cfg_dict, eps, out):
    cfg = ExperimentConfig(**cfg_dict)
    lame = _lame(cfg)
    n_cells = int(cfg.options.get("n_cells", 8))
    F = build_fields(cfg, eps).get("space_strong")
    t0 = time.perf_counter()
    if F is None or F.amplitude == 0.0:
        mesh = build_mesh(cfg.n)
        w = np.zeros((2, mesh.n_nodes, 2))
        cells = np.zeros((n_cells * n_cells, 2, 2))
    else:
        mesh = build_mesh(_corrector_mesh_n(cfg, eps))
        cs = solve_corrector(mesh, lame, F)
        w = cs.w
        cells = per_cell_mass(cs, n_cells)
    path = Path(out) / f"corrector_{_tag(eps)}.csv"
    write_nodal_csv(mesh, {"w1": w[0], "w2": w[1]}, path)
    info = {"eps": eps, "n": mesh.n, "M_cells": cells, "M_interior_mean": cells[interior_cells(n_cells)].mean(axis=0)}
    return run_id, {"corrector": str(path)}, time.perf_counter() - t0, info


def corrector(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunReport:
    jobs = [(f"corrector/{cfg.name}/{_tag(e)}", cfg.to_dict(), e, str(out)) for e in cfg.epsilons]
    rep = RunReport("corrector", cfg.name, versions=versions())
    for run_id, paths, elapsed, info in _map(_corrector_one, jobs, workers):
        rep.outputs[run_id] = paths
        rep.timings[run_id] = elapsed
        rep.notes[run_id] = info
    return rep


def effective_mass(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunReport:
    """Time-only Bessel mass, domain weak-limit mass and the periodic cell oracle, as applicable."""
    rep = RunReport("effective-mass", cfg.name, versions=versions())
    result = {}
    lame = _lame(cfg)
    kinds = {f["kind"]: f for f in cfg.fields}
    if "time_exp" in kinds:
        t0 = time.perf_counter()
        f = kinds["time_exp"]
        result["time_bessel"] = effective_mass_time(f.get("amplitude", 1.0), f.get("rho", lame.rho)).to_dict()
        rep.timings["effective-mass/time_bessel"] = time.perf_counter() - t0
    if "space_strong" in kinds:
        f = kinds["space_strong"]
        n_cells = int(cfg.options.get("n_cells", 8))
        if f.get("amplitude", 1.0) == 0.0:
            zero = np.zeros((2, 2))
            result["domain_weak_limit"] = {"provenance": "domain_weak_limit", "matrix": zero.tolist()}
            result["cell_oracle"] = {"provenance": "cell_oracle", "matrix": zero.tolist()}
        else:
            t0 = time.perf_counter()
            jobs = [(f"effective-mass/{cfg.name}/{_tag(e)}", cfg.to_dict(), e, str(out)) for e in cfg.epsilons]
            runs = _map(_corrector_one, jobs, workers)
            if len(runs) >= 2:
                em = effective_mass_from_cells([r[3]["M_cells"] for r in runs], [r[3]["eps"] for r in runs])
                result["domain_weak_limit"] = em.to_dict()
            else:
                result["domain_weak_limit"] = {"provenance": "domain_weak_limit", "matrix": runs[0][3]["M_interior_mean"],
                                               "note": "single eps: no stability estimate"}
            for run_id, paths, _, _ in runs:
                rep.outputs[run_id] = paths
            rep.timings["effective-mass/domain_weak_limit"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            cell = cell_oracle(f.get("profile", "sin_y1"), int(cfg.options.get("cell_m", 64)), lame)
            result["cell_oracle"] = cell.M.to_dict()
            rep.timings["effective-mass/cell_oracle"] = time.perf_counter() - t0
            dom = np.asarray(result["domain_weak_limit"]["matrix"])
            rep.notes["relative_difference"] = float(np.linalg.norm(dom - cell.M.matrix)
                                                     / np.linalg.norm(cell.M.matrix))
    if not result:
        result["none"] = {"matrix": np.zeros((2, 2)).tolist(), "note": "no oscillating field declared"}
    path = Path(out) / "effective_mass.json"
    path.write_text(json.dumps(acceptance._jsonable(result), indent=2, sort_keys=True))
    rep.outputs["effective-mass"] = {"effective_mass": str(path)}
    rep.notes["effective_mass"] = result
    return rep


# ---------------------------------------------------------------------------
# homogenized problems
# ---------------------------------------------------------------------------

def homogenize(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunReport:
    """Solve the limit problem; with a G field the weak limit g of the finest run closes it."""
    rep = RunReport("homogenize", cfg.name, versions=versions())
    lame = _lame(cfg)
    mesh = build_mesh(cfg.n)
    u0, u1 = initial_data(cfg, mesh, None)
    kinds = {f["kind"]: f for f in cfg.fields}
    stride = max(1, int(cfg.options.get("snapshot_stride", 10)))
    run_id = f"homogenize/{cfg.name}"
    t0 = time.perf_counter()
    try:
        if "time_exp" in kinds:
            f = kinds["time_exp"]
            Mt = limit_inverse_mass(make_time_skew(f.get("amplitude", 1.0), 1.0, f.get("rho", lame.rho))).mass_matrix
            dt = cfg.dt or min(cfg.epsilons) / 10
            tr = solve_homog_time(mesh, lame, Mt, u0, u1, cfg.T, dt, store=stride)
            rep.notes["closure"] = "time-only"
        else:
            eps = min(cfg.epsilons)
            parts = build_fields(cfg, eps)
            M = np.zeros((2, 2))
            if "space_strong" in kinds and kinds["space_strong"].get("amplitude", 1.0) != 0.0:
                M = cell_oracle(kinds["space_strong"].get("profile", "sin_y1"),
                                int(cfg.options.get("cell_m", 32)), lame).M.matrix
            g = None
            if "spacetime_bounded" in parts:
                fine = integrate(DynamicProblem(mesh, lame, FieldSum(tuple(parts.values())), u0=u0, u1=u1,
                                                T=cfg.T), store="none", store_midpoint=True)
                n_cells = int(cfg.options.get("n_cells", 8))
                gc = coarse_average(fine, magnetic_force_history(fine, parts["spacetime_bounded"]), n_cells,
                                    int(cfg.options.get("n_tbins", 8)))
                g = CoarseField(gc, cfg.T, n_cells)
                rep.notes["g_source"] = f"weak limit of G_eps u_eps' at eps={eps}"
            tr = solve_homog_general(mesh, lame, M, u0, u1, cfg.T, H=parts.get("compact"), g=g, dt=cfg.dt,
                                     store=stride)
            rep.notes["closure"] = "general"
            rep.notes["M"] = M
    except NumericalError as exc:
        raise RunFailure(run_id, exc) from exc
    rep.timings[run_id] = time.perf_counter() - t0
    traj_path = Path(out) / "homogenized.csv"
    energy_path = Path(out) / "homogenized_energy.csv"
    write_trajectory_csv(tr, traj_path)
    write_energy_csv(tr, energy_path)
    rep.outputs[run_id] = {"trajectory": str(traj_path), "energy": str(energy_path)}
    return rep


# ---------------------------------------------------------------------------
# nonlocal operator
# ---------------------------------------------------------------------------

def nonlocal_kernel(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunReport:
    rep = RunReport("nonlocal", cfg.name, versions=versions())
    lame = _lame(cfg)
    mesh = build_mesh(cfg.n)
    fields = list(build_fields(cfg, max(cfg.epsilons)).values())
    fields = [f for f in fields if f.kind in ("space_strong", "spacetime_bounded")]
    run_id = f"nonlocal/{cfg.name}"
    if len(cfg.ks) < 2 or len(cfg.epsilons) < 2:
        raise ValidationError("nonlocal needs at least two entries in ks and epsilons")
    t0 = time.perf_counter()
    try:
        ker = estimate_kernel(mesh, lame, fields, ks=cfg.ks, epsilons=cfg.epsilons, T=cfg.T,
                              n_bins=tuple(cfg.options.get("n_bins", [6, 6])),
                              heldout=acceptance._heldout(cfg.T), inflation=float(cfg.options.get("inflation", 1.1)))
    except NumericalError as exc:
        raise RunFailure(run_id, exc) from exc
    rep.timings[run_id] = time.perf_counter() - t0
    path = Path(out) / "kernel.csv"
    ker.write_csv(path)
    summary = {"leak_fraction": ker.leak_fraction, "causality_max": ker.causality_max,
               "heldout_error": ker.heldout_error, "rank": ker.response_rank, "flagged": ker.flagged,
               "defects": ker.defects, "schedule": ker.schedule}
    jpath = Path(out) / "kernel.json"
    jpath.write_text(json.dumps(acceptance._jsonable(summary), indent=2, sort_keys=True))
    rep.outputs[run_id] = {"kernel": str(path), "summary": str(jpath)}
    rep.notes[run_id] = summary
    return rep


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _check_one(run_id, check_id, cfg_dict):
    cfg = None if cfg_dict is None else ExperimentConfig(**cfg_dict)
    return acceptance.CHECKS[check_id](cfg).to_dict()


def _check_order(cid: str) -> int:
    return int(cid[1:])


def verify(cfg: ExperimentConfig | None, out: Path, workers: int = 1, checks=None,
           echo: Callable[[str], None] | None = None) -> RunReport:
    """Run acceptance checks; with a config only the checks belonging to its preset name."""
    if checks is None:
        if cfg is None:
            checks = list(acceptance.CHECKS)
        elif cfg.name in PRESET_CHECKS:
            checks = PRESET_CHECKS[cfg.name]
        else:
            raise ValidationError(f"no acceptance checks are tied to config {cfg.name!r}; "
                                  f"pass --checks or use one of: {', '.join(sorted(PRESET_CHECKS))}")
    unknown = [c for c in checks if c not in acceptance.CHECKS]
    if unknown:
        raise ValidationError(f"unknown checks {unknown}; known: {list(acceptance.CHECKS)}")
    checks = sorted(set(checks), key=_check_order)
    payload = None if cfg is None else cfg.to_dict()
    jobs = [(f"verify/A{_check_order(c):02d}", c, payload) for c in checks]
    rep = RunReport("verify", "all" if cfg is None else cfg.name, versions=versions())
    results = _map(_check_one, jobs, workers)
    for v in sorted(results, key=lambda d: _check_order(d["id"])):
        rep.verdicts.append(v)
        rep.timings[v["id"]] = v["elapsed"]
        if echo is not None:
            echo(Verdict(**{k: v[k] for k in ("id", "title", "passed", "value", "threshold", "flags",
                                             "elapsed")}).line())
    return rep


COMMANDS = {
    "simulate": simulate,
    "corrector": corrector,
    "effective-mass": effective_mass,
    "homogenize": homogenize,
    "nonlocal": nonlocal_kernel,
}


def log(msg: str) -> None:
    print(msg, file=sys.stderr)
