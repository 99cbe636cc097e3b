"""Experiment configuration: TOML files validated against a JSON schema.

Example::

    name = "scalar-lq-benchmark"

    [problem]
    name = "scalar-lq"
    params = { D = 0.5 }

    [grid]
    T = 1.0
    n_steps = 1000

    [mc]
    n_paths = 20000
    seed = 11

    [checks]
    run = ["lemma33", "thm34", "lq44"]
    lq44 = { rel = 0.02 }

Matrices are nested arrays (``A = [[0.0, 1.0], [0.0, 0.0]]``); per-node
tables add a leading time axis.
"""

import copy
import hashlib
import json
import sys

import jsonschema

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

CHECKS = ("lemma31", "prop32", "thm32", "lemma33", "thm34", "thm35", "lq44", "lqcert")
LQ_ONLY = ("lq44", "lqcert")

_num = {"type": "number"}
_eps = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "minItems": 3}


def _block(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _block(
    {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "expect_fail": {"type": "boolean"},
        "expected_failures": {"type": "array", "items": {"enum": list(CHECKS)}},
        "problem": _block({"name": {"type": "string"}, "params": {"type": "object"}}, ["name"]),
        "grid": _block({
            "T": {"type": "number", "exclusiveMinimum": 0},
            "n_steps": {"type": "integer", "minimum": 1},
        }),
        "mc": _block({
            "n_paths": {"type": "integer", "minimum": 2},
            "seed": {"type": "integer", "minimum": 0},
            "threads": {"type": "integer", "minimum": 1},
        }),
        "adjoint": _block({
            "basis": {"enum": ["polynomial", "bins"]},
            "degree": {"type": "integer", "minimum": 0},
            "ridge": {"type": "number", "minimum": 0},
            "n_knots": {"type": "integer", "minimum": 1},
        }),
        "checks": _block({
            "run": {"type": "array", "items": {"enum": list(CHECKS)}, "uniqueItems": True},
            "lemma31": _block({"eps": _eps, "slope_range": {"type": "array", "items": _num, "minItems": 2,
                                                              "maxItems": 2}}),
            "prop32": _block({"eps": _eps, "ratio": {"type": "number", "exclusiveMinimum": 0}}),
            "thm32": _block({"eps": _eps, "rel_tol": _num, "atol": _num}),
            "lemma33": _block({"n_se": _num, "atol": _num}),
            "thm34": _block({"n_se": _num, "atol": _num}),
            "thm35": _block({"n_samples": {"type": "integer", "minimum": 1}, "n_se": _num}),
            "lq44": _block({"rel": _num, "n_se": _num}),
            "lqcert": _block({"n_samples": {"type": "integer", "minimum": 1}}),
        }),
    },
    ["problem"],
)

DEFAULTS = {
    "name": "experiment",
    "description": "",
    "expect_fail": False,
    "expected_failures": [],
    "grid": {"T": 1.0, "n_steps": 1000},
    "mc": {"n_paths": 20000, "seed": 0, "threads": 1},
    "adjoint": {"basis": "polynomial", "degree": 2, "ridge": 1e-8, "n_knots": 8},
    "checks": {
        "run": [],
        "lemma31": {"eps": [0.2, 0.1, 0.05, 0.025], "slope_range": [1.8, 2.2]},
        "prop32": {"eps": [0.2, 0.1, 0.05, 0.025], "ratio": 1e-3},
        "thm32": {"eps": [0.2, 0.1, 0.05, 0.025], "rel_tol": 0.05, "atol": 1e-6},
        "lemma33": {"n_se": 3.0, "atol": 1e-8},
        "thm34": {"n_se": 3.0, "atol": 1e-8},
        "thm35": {"n_samples": 50, "n_se": 3.0},
        "lq44": {"rel": 0.02, "n_se": 3.0},
        "lqcert": {"n_samples": 50},
    },
}


def _deep_merge(base, over):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "params":
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate(raw):
    """Schema-check a raw config dict; raises ConfigError naming the block."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        path = [str(p) for p in err.absolute_path]
        block = ".".join(path) if path else "top-level"
        raise ConfigError(err.message, block=block)
    cfg = _deep_merge(DEFAULTS, raw)
    cfg["problem"].setdefault("params", {})
    if cfg["expect_fail"] and not cfg["expected_failures"]:
        raise ConfigError("expect_fail configs must list expected_failures", block="expected_failures")
    unknown_expected = set(cfg["expected_failures"]) - set(cfg["checks"]["run"])
    if unknown_expected:
        raise ConfigError(f"expected failures {sorted(unknown_expected)} are not run", block="expected_failures")
    return cfg


def loads(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}", block="file") from None
    return validate(raw)


def load(path):
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", block="file") from None
    return loads(text)


def config_hash(cfg):
    """SHA-256 of the canonical JSON form, ignoring the thread count (which
    never changes results)."""
    c = copy.deepcopy(cfg)
    c.get("mc", {}).pop("threads", None)
    return hashlib.sha256(json.dumps(c, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
