"""Experiment configuration: JSON schema, defaults and loading."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from . import expr as ex
from .operator import OperatorSpec, make_spec

SCHEMA_VERSION = 1
BUNDLED = ("laplace1d", "laplace2d", "grushin1", "grushin2", "periodic-grushin")

_expr = {"type": "string", "minLength": 1}
_pos = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "name", "operator", "geometry"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string", "minLength": 1},
        "output": {"type": "string"},
        "operator": {
            "type": "object",
            "required": ["dimension", "a2", "epsilon"],
            "additionalProperties": False,
            "properties": {
                "dimension": {"type": "integer", "minimum": 1, "maximum": 3},
                "a2": {"type": "array", "items": {"type": "array", "items": _expr}},
                "b": {"type": "array", "items": _expr},
                "d": _expr,
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "geometry": {
            "type": "object",
            "required": ["rho", "lattice"],
            "additionalProperties": False,
            "properties": {
                "rho": _pos,
                "lattice": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "grid": {"type": "integer", "minimum": 16},
                "cstar": {"type": "number", "exclusiveMinimum": 1},
                "base_point": {"type": "array", "items": {"type": "number"}},
                "ballbox_rhos": {"type": "array", "items": _pos, "minItems": 1},
                "ballbox_grid": {"type": "integer", "minimum": 16},
            },
        },
        "walk": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "h": {"type": "array", "items": _pos, "minItems": 1},
                "steps": {"type": "integer", "minimum": 1},
                "ensemble": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
                "start": {"type": ["array", "null"], "items": {"type": "number"}},
                "bins": {"type": "integer", "minimum": 1},
                "thin": {"type": "integer", "minimum": 0},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_nodes": {"type": "integer", "minimum": 8},
                "zeta": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "k_max": {"type": "integer", "minimum": 2},
                "tv_h": _pos,
                "tv_grid": {"type": "integer", "minimum": 16},
                "kernel_delta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "test_functions": {"type": "array", "items": _expr},
                "tolerances": {"type": "object", "additionalProperties": {"type": "number"}},
            },
        },
    },
}

DEFAULTS = {
    "geometry": {"grid": 64, "cstar": 1.5, "ballbox_rhos": [0.05, 0.1, 0.2], "ballbox_grid": 256},
    "walk": {"h": [0.4, 0.2, 0.1, 0.05], "steps": 4000, "ensemble": 64, "seed": 1, "start": None,
             "bins": 16, "thin": 0},
    "analysis": {"t_nodes": 8, "zeta": [0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000], "k_max": 2 ** 20,
                 "tv_h": 0.2, "tv_grid": 32, "kernel_delta": None, "test_functions": [], "tolerances": {}},
}

TOLERANCES = {
    "row_sum": 1e-8,
    "spectrum_edge": 1e-8,
    "psd": 1e-8,
    "nonneg": 1e-12,
    "symmetry": 1e-10,
    "gap_slope": 0.2,
    "gap_r2": 0.99,
    "delta1": 0.05,
    "weyl_slack": 0.5,
    "stability": 2.0,
    "generator_ratio_lo": 3.0,
    "generator_ratio_hi": 5.0,
    "tv_rate": 0.2,
    "divfree": 1e-12,
    "mc_sigma": 3.0,
}


class ConfigError(ValueError):
    """Invalid configuration; ``offset`` is set for expression parse errors."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


@dataclass
class Experiment:
    name: str
    spec: OperatorSpec
    raw: dict
    geometry: dict = field(default_factory=dict)
    walk: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    output: str | None = None

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def tolerances(self) -> dict:
        return {**TOLERANCES, **self.analysis.get("tolerances", {})}

    def test_functions(self) -> list[str]:
        funcs = self.analysis.get("test_functions") or []
        if funcs:
            return list(funcs)
        if self.dim == 1:
            return ["sin(2*pi*x1)", "cos(2*pi*x1)^2", "sin(2*pi*x1)*cos(4*pi*x1)"]
        if self.dim == 2:
            return ["sin(2*pi*x1)*cos(2*pi*x2)", "cos(2*pi*x2)", "sin(2*pi*(x1+x2))"]
        return ["sin(2*pi*x1)*cos(2*pi*x2)", "cos(2*pi*x3)", "sin(2*pi*(x1+x2+x3))"]


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _parse(text: str, n: int, where: str) -> ex.Expr:
    try:
        return ex.parse(text, n_vars=n)
    except ex.ExprError as err:
        raise ConfigError(f"{where}: {err}", getattr(err, "offset", None)) from err


def from_dict(data: dict) -> Experiment:
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as err:
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {err.message}") from err
    op = data["operator"]
    n = op["dimension"]
    a2 = op["a2"]
    if len(a2) != n or any(len(row) != n for row in a2):
        raise ConfigError(f"operator.a2 must be {n}x{n}")
    b = op.get("b", ["0"] * n)
    if len(b) != n:
        raise ConfigError(f"operator.b must have {n} entries")
    a2e = [[_parse(s, n, f"operator.a2[{i}][{j}]") for j, s in enumerate(row)] for i, row in enumerate(a2)]
    be = [_parse(s, n, f"operator.b[{i}]") for i, s in enumerate(b)]
    de = _parse(op.get("d", "0"), n, "operator.d")
    try:
        spec = make_spec(a2e, be, de, op["epsilon"], data["name"])
    except ValueError as err:
        raise ConfigError(f"operator: {err}") from err
    geometry = _merge(DEFAULTS["geometry"], data["geometry"])
    if len(geometry["lattice"]) != n:
        raise ConfigError(f"geometry.lattice must have {n} entries")
    geometry.setdefault("base_point", [0.0] * n)
    if len(geometry["base_point"]) != n:
        raise ConfigError(f"geometry.base_point must have {n} entries")
    walk = _merge(DEFAULTS["walk"], data.get("walk", {}))
    if walk["start"] is not None and len(walk["start"]) != n:
        raise ConfigError(f"walk.start must have {n} entries")
    analysis = _merge(DEFAULTS["analysis"], data.get("analysis", {}))
    exp = Experiment(data["name"], spec, data, geometry, walk, analysis, data.get("output"))
    for i, f in enumerate(exp.test_functions()):
        _parse(f, n, f"analysis.test_functions[{i}]")
    return exp


def load(path) -> Experiment:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err.strerror}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err.msg}", err.pos) from err
    return from_dict(data)


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("subwalk") / "configs" / f"{name}.json"))


def load_bundled(name: str) -> Experiment:
    return load(bundled_path(name))
