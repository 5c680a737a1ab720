"""Experiment configuration: YAML file, defaults, validation, overrides.

A config is a nested mapping. Every key has a default, so an empty file is
valid; unknown keys are rejected so typos fail loudly. ``--override a.b=v``
flags are applied after the file, with ``v`` parsed as a YAML scalar or list.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .predictors import PredictorKind

SOURCE_KINDS = ("toy_denoiser", "driven_linear", "stiff")

DEFAULTS = {
    "experiment": "default",
    "seeds": [0],
    "out": "out",
    "workers": 1,
    "source": {
        "kind": "toy_denoiser",
        "weights": None,
        "batch": 256,
        # driven_linear
        "rho": 0.5,
        "theta": 0.3,
        "initial_state": [1.0, 0.5],
        # stiff
        "problem": "two_scale",
        "stiffness": 100.0,
        "h": 1.0,
    },
    "schedule": {"intervals": [2, 3, 5, 7], "total_steps": 50, "warmup": 2},
    "predictors": ["reuse", "taylor", "bdf2", "foca"],
    "taylor_order": 2,
    "diagnostics": {"window": 5, "mmd": True},
    "prop1": {"max_k": 20, "kind": "foca", "slack": 0.05},
    "dump": {"interval": 5, "kind": "foca", "batch": 1},
    "train": {
        "n_samples": 10_000,
        "holdout_fraction": 0.2,
        "hidden": 64,
        "T": 50,
        "alpha_start": 0.9999,
        "alpha_end": 0.72,
        "steps": 20_000,
        "batch_size": 256,
        "learning_rate": 0.1,
        "excess_mse_threshold": 0.05,
        "log_every": 500,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, key in enumerate(keys[:-1]):
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"{'.'.join(keys[:i + 1])}: not a section")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"{dotted}: unknown key")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r}: expected key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key.strip()}: cannot parse value {raw!r}") from exc
    return key.strip(), value


def load_config(path=None, overrides=(), *, seed=None, out=None) -> dict:
    """Defaults, then the file, then ``--override`` flags, then ``--seed``/``--out``."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping at top level")
    cfg = _merge(DEFAULTS, raw)
    for text in overrides:
        _set_dotted(cfg, *parse_override(text))
    if seed is not None:
        cfg["seeds"] = [seed]
    if out is not None:
        cfg["out"] = str(out)
    return validate(cfg)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _int(value, where, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{where}: must be >= {lo}, got {value}")
    return value


def _float(value, where, lo=None, hi=None, open_lo=False, open_hi=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    value = float(value)
    if value != value or value in (float("inf"), float("-inf")):
        raise ConfigError(f"{where}: must be finite")
    if lo is not None and (value <= lo if open_lo else value < lo):
        raise ConfigError(f"{where}: must be {'>' if open_lo else '>='} {lo}, got {value}")
    if hi is not None and (value >= hi if open_hi else value > hi):
        raise ConfigError(f"{where}: must be {'<' if open_hi else '<='} {hi}, got {value}")
    return value


def _int_list(value, where, lo):
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where}: expected a non-empty list of integers")
    items = [_int(v, f"{where}[{i}]", lo) for i, v in enumerate(value)]
    if len(set(items)) != len(items):
        raise ConfigError(f"{where}: duplicate entries")
    return items


def _kind(text, where, order) -> str:
    if not isinstance(text, str):
        raise ConfigError(f"{where}: expected a predictor name")
    try:
        return PredictorKind.parse(text, default_order=order).label
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def validate(cfg: dict) -> dict:
    """Check every field and return the normalized config."""
    c = copy.deepcopy(cfg)
    if not isinstance(c["experiment"], str) or not c["experiment"] or "," in c["experiment"]:
        raise ConfigError("experiment: expected a non-empty name without commas")
    c["seeds"] = _int_list(c["seeds"], "seeds", 0)
    if not isinstance(c["out"], str) or not c["out"]:
        raise ConfigError("out: expected a directory path")
    c["workers"] = _int(c["workers"], "workers", 1)

    s = c["source"]
    if s["kind"] not in SOURCE_KINDS:
        raise ConfigError(f"source.kind: expected one of {SOURCE_KINDS}, got {s['kind']!r}")
    if s["weights"] is not None and not isinstance(s["weights"], str):
        raise ConfigError("source.weights: expected a path or null")
    s["batch"] = _int(s["batch"], "source.batch", 1)
    s["rho"] = _float(s["rho"], "source.rho", 0.0)
    s["theta"] = _float(s["theta"], "source.theta")
    init = s["initial_state"]
    if not isinstance(init, list) or len(init) != 2:
        raise ConfigError("source.initial_state: expected two numbers")
    s["initial_state"] = [_float(v, f"source.initial_state[{i}]") for i, v in enumerate(init)]
    if s["problem"] not in ("two_scale", "van_der_pol"):
        raise ConfigError("source.problem: expected two_scale or van_der_pol")
    s["stiffness"] = _float(s["stiffness"], "source.stiffness", 0.0, open_lo=True)
    s["h"] = _float(s["h"], "source.h", 0.0, open_lo=True)

    sch = c["schedule"]
    sch["intervals"] = _int_list(sch["intervals"], "schedule.intervals", 1)
    sch["total_steps"] = _int(sch["total_steps"], "schedule.total_steps", 1)
    sch["warmup"] = _int(sch["warmup"], "schedule.warmup", 0)

    c["taylor_order"] = _int(c["taylor_order"], "taylor_order", 1)
    preds = c["predictors"]
    if isinstance(preds, str):
        preds = [preds]
    if not isinstance(preds, list) or not preds:
        raise ConfigError("predictors: expected a non-empty list")
    c["predictors"] = [_kind(p, f"predictors[{i}]", c["taylor_order"]) for i, p in enumerate(preds)]
    if len(set(c["predictors"])) != len(c["predictors"]):
        raise ConfigError("predictors: duplicate entries")

    d = c["diagnostics"]
    d["window"] = _int(d["window"], "diagnostics.window", 2)
    if not isinstance(d["mmd"], bool):
        raise ConfigError("diagnostics.mmd: expected true or false")

    p = c["prop1"]
    p["max_k"] = _int(p["max_k"], "prop1.max_k", 0)
    p["kind"] = _kind(p["kind"], "prop1.kind", c["taylor_order"])
    p["slack"] = _float(p["slack"], "prop1.slack", 0.0)

    dm = c["dump"]
    dm["interval"] = _int(dm["interval"], "dump.interval", 1)
    dm["kind"] = _kind(dm["kind"], "dump.kind", c["taylor_order"])
    dm["batch"] = _int(dm["batch"], "dump.batch", 1)

    t = c["train"]
    for key in ("n_samples", "hidden", "T", "batch_size", "log_every"):
        t[key] = _int(t[key], f"train.{key}", 1)
    t["steps"] = _int(t["steps"], "train.steps", 0)
    t["holdout_fraction"] = _float(t["holdout_fraction"], "train.holdout_fraction", 0.0, 1.0,
                                   open_lo=True, open_hi=True)
    t["alpha_start"] = _float(t["alpha_start"], "train.alpha_start", 0.0, 1.0, open_lo=True, open_hi=True)
    t["alpha_end"] = _float(t["alpha_end"], "train.alpha_end", 0.0, 1.0, open_lo=True, open_hi=True)
    t["learning_rate"] = _float(t["learning_rate"], "train.learning_rate", 0.0, open_lo=True)
    t["excess_mse_threshold"] = _float(t["excess_mse_threshold"], "train.excess_mse_threshold",
                                       0.0, open_lo=True)
    return c
