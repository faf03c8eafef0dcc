"""Run configuration: JSON parsing, validation and canonical serialisation.

Every section is optional in the input.  Missing fields take the values in
``DEFAULTS``; unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass

from .bsde import RegressionBasis
from .core import InvalidArgumentError
from .msa import MsaConfig
from .problem import EXAMPLES

DEFAULTS: dict = {
    "problem": {"kind": "lq_modified", "params": {}, "alpha0": 0.0},
    "grid": {"T": 1.0, "n_steps": 50},
    "ensemble": {"n_paths": 10000, "seed": 42},
    "solver": {
        "tau0": 0.2,
        "max_outer": 200,
        "stop_dJ": 1e-10,
        "backtrack": True,
        "basis_degree": 2,
        "tol": 1e-10,
        "max_iter": 50,
        "mode": "implicit",
        "tau_min": 1e-8,
    },
    "flow": {"S": 1.0, "tau": 0.01, "scheme": "implicit"},
    "verify": {
        "tau_list": [0.1, 0.05, 0.025],
        "S_list": [1.0, 2.0, 4.0, 8.0],
        "eta": 1.0,
        "threshold": 1e-3,
        "n_pairs": 10,
        "bsde_n_paths": 100000,
        "energy_rtol": 0.1,
    },
    "output": {"directory": "out", "formats": ["csv", "json"]},
}


class ConfigError(InvalidArgumentError):
    """Malformed or invalid configuration; ``key`` is the dotted path when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _real(v, key, *, positive=False, allow_negative=True):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {v!r}", key)
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite", key)
    if positive and not v > 0:
        raise ConfigError(f"{key}: must be positive, got {v!r}", key)
    if not allow_negative and v < 0:
        raise ConfigError(f"{key}: must be non-negative, got {v!r}", key)
    return v


def _int(v, key, *, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        else:
            raise ConfigError(f"{key}: expected an integer, got {v!r}", key)
    if minimum is not None and v < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}, got {v!r}", key)
    return v


def _choice(v, key, options):
    if v not in options:
        raise ConfigError(f"{key}: expected one of {sorted(options)}, got {v!r}", key)
    return v


def _bool(v, key):
    if not isinstance(v, bool):
        raise ConfigError(f"{key}: expected true or false, got {v!r}", key)
    return v


def _reals(v, key, *, minimum_len=1, positive=True):
    if not isinstance(v, list) or len(v) < minimum_len:
        raise ConfigError(f"{key}: expected a list of at least {minimum_len} numbers", key)
    return [_real(x, f"{key}[{i}]", positive=positive) for i, x in enumerate(v)]


def _params(v, key):
    if not isinstance(v, dict):
        raise ConfigError(f"{key}: expected an object", key)
    out = {}
    for name, val in v.items():
        if isinstance(val, list):
            out[name] = _nested(val, f"{key}.{name}")
        else:
            out[name] = _real(val, f"{key}.{name}")
    return out


def _nested(v, key):
    if isinstance(v, list):
        return [_nested(x, f"{key}[{i}]") for i, x in enumerate(v)]
    return _real(v, key)


_FIELDS = {
    "problem": {
        "kind": lambda v, k: _choice(v, k, set(EXAMPLES)),
        "params": _params,
        "alpha0": lambda v, k: _nested(v, k),
    },
    "grid": {
        "T": lambda v, k: _real(v, k, positive=True),
        "n_steps": lambda v, k: _int(v, k, minimum=1),
    },
    "ensemble": {
        "n_paths": lambda v, k: _int(v, k, minimum=2),
        "seed": lambda v, k: _int(v, k, minimum=0),
    },
    "solver": {
        "tau0": lambda v, k: _real(v, k, positive=True),
        "max_outer": lambda v, k: _int(v, k, minimum=1),
        "stop_dJ": _real,
        "backtrack": _bool,
        "basis_degree": lambda v, k: _int(v, k, minimum=0),
        "tol": lambda v, k: _real(v, k, positive=True),
        "max_iter": lambda v, k: _int(v, k, minimum=1),
        "mode": lambda v, k: _choice(v, k, {"implicit", "explicit"}),
        "tau_min": lambda v, k: _real(v, k, positive=True),
    },
    "flow": {
        "S": lambda v, k: _real(v, k, positive=True),
        "tau": lambda v, k: _real(v, k, positive=True),
        "scheme": lambda v, k: _choice(v, k, {"implicit", "explicit"}),
    },
    "verify": {
        "tau_list": lambda v, k: _reals(v, k, minimum_len=3),
        "S_list": lambda v, k: _reals(v, k, minimum_len=1),
        "eta": lambda v, k: _real(v, k, positive=True),
        "threshold": lambda v, k: _real(v, k, positive=True),
        "n_pairs": lambda v, k: _int(v, k, minimum=1),
        "bsde_n_paths": lambda v, k: _int(v, k, minimum=2),
        "energy_rtol": lambda v, k: _real(v, k, positive=True),
    },
    "output": {
        "directory": lambda v, k: v if isinstance(v, str) and v else _fail(k, "expected a non-empty string"),
        "formats": lambda v, k: _formats(v, k),
    },
}


def _fail(key, message):
    raise ConfigError(f"{key}: {message}", key)


def _formats(v, key):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{key}: expected a non-empty list", key)
    for i, f in enumerate(v):
        _choice(f, f"{key}[{i}]", {"csv", "json"})
    if len(set(v)) != len(v):
        raise ConfigError(f"{key}: duplicate entries", key)
    return sorted(v)


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration held as a plain nested dictionary."""

    data: dict

    def section(self, name: str) -> dict:
        return self.data[name]

    def to_json(self) -> str:
        return dump_config(self)

    def msa_config(self) -> MsaConfig:
        s = self.data["solver"]
        return MsaConfig(
            tau0=s["tau0"], max_outer=s["max_outer"], stop_dJ=s["stop_dJ"], backtrack=s["backtrack"],
            basis=RegressionBasis(degree=s["basis_degree"]), tol=s["tol"], max_iter=s["max_iter"],
            mode=s["mode"], tau_min=s["tau_min"],
        )

    def problem(self):
        p = self.data["problem"]
        try:
            return EXAMPLES[p["kind"]](p["params"] or None)
        except InvalidArgumentError as exc:
            raise ConfigError(f"problem.params: {exc}", "problem.params") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"problem.params: {exc}", "problem.params") from exc

    def __eq__(self, other):
        return isinstance(other, RunConfig) and dump_config(self) == dump_config(other)

    def __hash__(self):
        return hash(dump_config(self))


def validate(raw) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a JSON object")
    data = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in _FIELDS:
            raise ConfigError(f"{section}: unknown key", section)
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected an object", section)
        for name, value in body.items():
            key = f"{section}.{name}"
            if name not in _FIELDS[section]:
                raise ConfigError(f"{key}: unknown key", key)
            data[section][name] = _FIELDS[section][name](value, key)
    cfg = RunConfig(data)
    cfg.problem()
    return cfg


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON document, filling defaults."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return validate(raw)


def dump_config(cfg: RunConfig) -> str:
    """Canonical form: sorted keys, two-space indent, trailing newline."""
    return json.dumps(cfg.data, indent=2, sort_keys=True, allow_nan=False) + "\n"


def default_config() -> RunConfig:
    return validate({})


def with_overrides(cfg: RunConfig, *, seed: int | None = None, n_paths: int | None = None,
                   directory: str | None = None) -> RunConfig:
    raw = copy.deepcopy(cfg.data)
    if seed is not None:
        raw["ensemble"]["seed"] = seed
    if n_paths is not None:
        raw["ensemble"]["n_paths"] = n_paths
    if directory is not None:
        raw["output"]["directory"] = directory
    return validate(raw)
