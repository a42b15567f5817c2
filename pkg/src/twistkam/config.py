"""Experiment configuration: YAML loading and strict validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .errors import InvalidParameters

REQUIRED = object()

TOP_KEYS = {"genfun", "command", "params", "output", "seed"}
OUTPUT_KEYS = {"dir", "format", "figures"}


def _int(v):
    if isinstance(v, bool) or not float(v).is_integer():
        raise ValueError(f"{v!r} is not an integer")
    return int(v)


def _nonneg_int(v):
    v = _int(v)
    if v < 0:
        raise ValueError(f"{v} is negative")
    return v


def _pos_int(v):
    v = _int(v)
    if v < 1:
        raise ValueError(f"{v} is not positive")
    return v


def _float(v):
    if isinstance(v, bool):
        raise ValueError(f"{v!r} is not a number")
    return float(v)


def _pos_float(v):
    v = _float(v)
    if not v > 0:
        raise ValueError(f"{v} is not positive")
    return v


def _vector(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return [float(v)]
    out = [_float(t) for t in v]
    if not out:
        raise ValueError("empty vector")
    return out


def _int_vector(v):
    return [float(_int(t)) for t in ([v] if isinstance(v, (int, float)) else v)]


def _vector_list(v):
    return [_vector(t) for t in v]


def _res(v):
    if isinstance(v, (int, float)):
        return _pos_int(v)
    return [_pos_int(t) for t in v]


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"{v!r} is not a boolean")
    return v


def _ints(v):
    return [_int(t) for t in ([v] if isinstance(v, (int, float)) else v)]


MINIMIZER = {"n_starts": (_nonneg_int, 4), "scale": (_pos_float, 0.25), "max_iter": (_pos_int, 200)}
TRUNCATION = {"N_max": (_pos_int, REQUIRED), "R_max": (_nonneg_int, REQUIRED)}

SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "audit": {"n_samples": (_pos_int, 256), "assert_twist_above": (_float, None),
              "assert_conjugacy_below": (_pos_float, None)},
    "orbit": {"x": (_vector, REQUIRED), "p": (_vector, REQUIRED), "n": (_int, REQUIRED),
              "assert_symplectic_below": (_pos_float, None)},
    "conjugate-scan": {"x_res": (_pos_int, 16), "p_lo": (_float, REQUIRED), "p_hi": (_float, REQUIRED),
                       "p_res": (_pos_int, 16), "n_max": (_pos_int, REQUIRED), "threshold": (_pos_float, 1e-8),
                       "directions": (_ints, [1, -1]), "assert_degenerate": (_bool, None)},
    "green": {"x": (_vector, REQUIRED), "p": (_vector, REQUIRED), "n_iter": (_ints, [4, 8, 16, 64]),
              "assert_gap_below": (_pos_float, None)},
    "minimize": {"x": (_vector, REQUIRED), "y": (_vector, REQUIRED), "N": (_pos_int, REQUIRED),
                 **MINIMIZER},
    "f-profile": {"N": (_pos_int, 1), "r": (_int_vector, None), "grid": (_res, 64),
                  "assert_gap_above": (_float, None), "assert_gap_below": (_float, None), **MINIMIZER},
    "periodic": {"x": (_vector, REQUIRED), "N": (_pos_int, REQUIRED), "r": (_int_vector, REQUIRED),
                 "assert_residual_below": (_pos_float, None), **MINIMIZER},
    "graph": {"N": (_pos_int, REQUIRED), "r": (_int_vector, REQUIRED), "grid": (_res, 64),
              "assert_residual_below": (_pos_float, None), "assert_asymmetry_below": (_pos_float, None),
              **MINIMIZER},
    "alpha": {"c_grid": (_vector_list, REQUIRED), **TRUNCATION, "probe_grid": (_res, None),
              "assert_convexity_below": (_pos_float, None)},
    "mane": {"c": (_vector, REQUIRED), "grid": (_res, 16), **TRUNCATION, "n_triples": (_nonneg_int, 200),
             "assert_triangle_above": (_float, None), **MINIMIZER},
    "aubry": {"c": (_vector, REQUIRED), "grid": (_res, 64), **TRUNCATION,
              "indicator_tol": (_pos_float, 1e-2), "assert_present_above": (_float, None), **MINIMIZER},
    "foliation": {"x": (_vector, REQUIRED), "c_grid": (_vector_list, REQUIRED), **TRUNCATION,
                  "assert_monotone": (_bool, None), **MINIMIZER},
    "crosscheck": {"N": (_pos_int, REQUIRED), "r": (_int_vector, REQUIRED), "grid": (_res, 64), **TRUNCATION,
                   "assert_match_below": (_pos_float, None), **MINIMIZER},
}

# commands whose results depend on random multistart seeds
STOCHASTIC = {"audit", "minimize", "f-profile", "periodic", "graph", "mane", "aubry", "foliation",
              "crosscheck"}


@dataclass
class ExperimentConfig:
    genfun: dict
    command: str
    params: dict
    output_dir: Path
    output_format: str = "csv"
    figures: bool = False
    seed: int | None = None
    source: dict = field(default_factory=dict, repr=False)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise InvalidParameters(f"cannot parse {path}: {exc}") from exc
    cfg = validate(raw)
    if not cfg.output_dir.is_absolute():
        cfg.output_dir = Path(path).resolve().parent / cfg.output_dir
    return cfg


def validate(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise InvalidParameters("config must be a mapping")
    extra = set(raw) - TOP_KEYS
    if extra:
        raise InvalidParameters(f"unknown config keys: {sorted(extra)}")
    for key in ("genfun", "command"):
        if key not in raw:
            raise InvalidParameters(f"missing config key {key!r}")
    if not isinstance(raw["genfun"], dict):
        raise InvalidParameters("genfun must be a mapping")
    command = raw["command"]
    if command not in SCHEMA:
        raise InvalidParameters(f"unknown command {command!r}; expected one of {sorted(SCHEMA)}")
    params = _validate_params(command, raw.get("params") or {})

    out = raw.get("output") or {}
    if not isinstance(out, dict) or set(out) - OUTPUT_KEYS:
        raise InvalidParameters(f"output accepts only {sorted(OUTPUT_KEYS)}")
    fmt = out.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise InvalidParameters(f"output format must be csv or json, got {fmt!r}")
    figures = out.get("figures", False)
    if not isinstance(figures, bool):
        raise InvalidParameters("output.figures must be a boolean")

    seed = raw.get("seed")
    if seed is not None:
        try:
            seed = _nonneg_int(seed)
        except (TypeError, ValueError) as exc:
            raise InvalidParameters(f"seed: {exc}") from exc
    elif command in STOCHASTIC:
        raise InvalidParameters(f"command {command!r} uses random multistarts and needs a seed")
    return ExperimentConfig(dict(raw["genfun"]), command, params, Path(out.get("dir", "out")), fmt, figures,
                            seed, raw)


def _validate_params(command, given) -> dict:
    if not isinstance(given, dict):
        raise InvalidParameters("params must be a mapping")
    schema = SCHEMA[command]
    extra = set(given) - set(schema)
    if extra:
        raise InvalidParameters(f"unknown parameters for {command}: {sorted(extra)}")
    out = {}
    for name, (conv, default) in schema.items():
        if name in given:
            try:
                out[name] = conv(given[name])
            except (TypeError, ValueError) as exc:
                raise InvalidParameters(f"{command}.{name}: {exc}") from exc
        elif default is REQUIRED:
            raise InvalidParameters(f"{command} requires parameter {name!r}")
        else:
            out[name] = default
    return out
