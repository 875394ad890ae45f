"""Experiment configuration: a single JSON document validated against a schema."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from ..errors import ValidationError

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

FIELD_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["time_exp", "space_strong", "spacetime_bounded", "compact"]},
        "amplitude": _NUM,
        "epsilon": _POS,
        "rho": _POS,
        "profile": {"type": "string"},
        "omega": _NUM,
    },
    "additionalProperties": False,
}

DATA_SCHEMA = {
    "type": "object",
    "properties": {
        "u0": {"$ref": "#/$defs/modes"},
        "u1": {"$ref": "#/$defs/modes"},
        "oscillating_u1": {"type": "boolean"},
        "well_posed": {"type": "boolean"},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "mesh", "lame", "T", "epsilons"],
    "$defs": {
        "modes": {
            "type": "array",
            "items": {
                "type": "array",
                "prefixItems": [{"enum": [0, 1]}, {"type": "integer", "minimum": 1},
                                {"type": "integer", "minimum": 1}, _NUM],
                "minItems": 4, "maxItems": 4,
            },
        },
    },
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "mesh": {
            "type": "object",
            "required": ["n"],
            "properties": {"n": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "lame": {
            "type": "object",
            "required": ["lambda", "mu", "rho"],
            "properties": {"lambda": {"type": "number", "minimum": 0}, "mu": _POS, "rho": _POS},
            "additionalProperties": False,
        },
        "fields": {"type": "array", "items": FIELD_SCHEMA},
        "data": DATA_SCHEMA,
        "T": _POS,
        "dt": {"oneOf": [{"type": "null"}, _POS]},
        "epsilons": {"type": "array", "items": _POS, "minItems": 1},
        "ks": {"type": "array", "items": _POS, "minItems": 1},
        "cones": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["x", "y", "S"],
                "properties": {"x": {"type": "number", "minimum": 0, "maximum": 1},
                               "y": {"type": "number", "minimum": 0, "maximum": 1}, "S": _POS},
                "additionalProperties": False,
            },
        },
        "dictionary": {"enum": ["default", "spacetime"]},
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "options": {"type": "object"},
        "oracles": {"type": "object"},
    },
    "additionalProperties": False,
}


class ConfigError(ValidationError):
    """Configuration rejected; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentConfig:
    name: str
    mesh: dict
    lame: dict
    T: float
    epsilons: list
    fields: list = field(default_factory=list)
    data: dict = field(default_factory=dict)
    dt: float | None = None
    ks: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    cones: list = field(default_factory=list)
    dictionary: str = "default"
    out: str = "out"
    seed: int = 0
    options: dict = field(default_factory=dict)
    oracles: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @property
    def n(self) -> int:
        return int(self.mesh["n"])

    def with_options(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        for key, val in kw.items():
            if key in d and key != "options":
                d[key] = val
            else:
                d["options"][key] = val
        return from_dict(d)


def _dt_policy_check(cfg: ExperimentConfig) -> None:
    """An explicit dt must satisfy the integrator preconditions at the smallest eps."""
    if cfg.dt is None:
        return
    eps_min = min(cfg.epsilons)
    oscillating = any(f.get("kind") != "compact" for f in cfg.fields)
    if oscillating and cfg.dt > eps_min / 10.0 * (1 + 1e-9):
        raise ConfigError("dt", f"{cfg.dt} does not resolve eps={eps_min} (need dt <= eps/10)")
    lam, mu, rho = cfg.lame["lambda"], cfg.lame["mu"], cfg.lame["rho"]
    c = math.sqrt(max(2 * mu, 2 * lam + 2 * mu) / rho)
    h = math.sqrt(2.0) / cfg.n
    if cfg.dt * c > h * (1 + 1e-9):
        raise ConfigError("dt", f"dt*c={cfg.dt * c:.4g} exceeds the mesh size h={h:.4g}")


def from_dict(d: dict) -> ExperimentConfig:
    """Validate a raw mapping and build the config; errors name the field."""
    try:
        jsonschema.validate(d, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(path, exc.message) from None
    cfg = ExperimentConfig(**copy.deepcopy(d))
    if 3 * cfg.lame["lambda"] + 2 * cfg.lame["mu"] <= 0:
        raise ConfigError("lame", "tensor is not positive definite")
    _dt_policy_check(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file {str(p)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return from_dict(raw)
