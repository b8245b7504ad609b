"""Scenario configuration: JSON schema, line-aware diagnostics, hashing and object construction."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema

from ..errors import ConfigError
from ..functions import REGISTRY, NamedFunction, from_spec

FUNCTION = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": list(REGISTRY)}},
}
NUMBER_OR_FUNCTION = {"oneOf": [{"type": "number"}, FUNCTION]}
POSITIVE = {"type": "number", "exclusiveMinimum": 0}
GRID_1D = {
    "type": "object",
    "properties": {"v_min": {"type": "number"}, "v_max": {"type": "number"},
                   "n_v": {"type": "integer", "minimum": 5}, "dt": POSITIVE},
    "additionalProperties": False,
}
OPERATIONS = ["ergodic", "primal", "dual", "oce", "verify"]

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["model", "endowment", "numerics", "task"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["theta", "drift_l", "rho", "gamma", "theta_bound", "lipschitz_theta"],
            "additionalProperties": False,
            "properties": {
                "theta": FUNCTION, "drift_l": FUNCTION,
                "rho": {"type": "number", "minimum": 0, "maximum": 1},
                "gamma": POSITIVE, "theta_bound": POSITIVE,
                "lipschitz_theta": {"type": "number", "minimum": 0},
                "dissipativity": POSITIVE, "v0": {"type": "number"},
            },
        },
        "endowment": {
            "type": "object",
            "required": ["kind", "bound", "maturity"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["constant", "terminal-factor-function", "terminal-path-function",
                                  "terminal-factor-wealth-function"]},
                "payoff": NUMBER_OR_FUNCTION,
                "wealth_payoff": FUNCTION,
                "noise": {"enum": ["W1", "W2"]},
                "bound": POSITIVE, "maturity": POSITIVE,
                "lipschitz_x": {"type": "number", "minimum": 0},
            },
        },
        "numerics": {
            "type": "object",
            "required": ["seed"],
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "n_paths": {"type": "integer", "minimum": 2},
                "dt": POSITIVE,
                "ergodic_method": {"enum": ["ode-grid", "vanishing-discount-mc"]},
                "ergodic_grid": GRID_1D,
                "pde_grid": GRID_1D,
                "decoupling": {
                    "type": "object",
                    "required": ["family"],
                    "additionalProperties": False,
                    "properties": {
                        "family": {"enum": ["exponential", "separable", "two-mode"]},
                        "params": {"type": "object"},
                        "n_t": {"type": "integer", "minimum": 3},
                        "v_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                        "x_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                        "n_v": {"type": "integer", "minimum": 8},
                        "n_x": {"type": "integer", "minimum": 8},
                        "quad_nodes": {"type": "integer", "minimum": 2, "maximum": 9},
                    },
                },
                "tolerances": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"sigma": POSITIVE, "martingale_sigma": POSITIVE, "dual_gap": POSITIVE,
                                   "solver": POSITIVE},
                },
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "operations": {"type": "array", "items": {"enum": OPERATIONS}, "uniqueItems": True},
                "regime": {"enum": ["exponential", "decoupling", "complete"]},
                "t0": {"type": "number", "minimum": 0},
                "xi": {"type": "number"},
                "eta": POSITIVE,
                "maturity_factors": {"type": "array", "items": {"type": "number", "minimum": 1}},
                "perturbations": {"type": "integer", "minimum": 1},
                "forced_pi": {"type": "number"},
                "negative_control_pi": {"type": "number"},
                "oce": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"second_payoff": FUNCTION, "second_bound": POSITIVE, "cash": {"type": "number"},
                                   "mix": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                                   "replication_pi": {"type": "number"}},
                },
            },
        },
    },
}

DEFAULTS = {
    "numerics": {"n_paths": 20000, "dt": 0.004, "ergodic_method": "ode-grid",
                 "tolerances": {"sigma": 3.0, "martingale_sigma": 4.0, "dual_gap": 5e-3, "solver": 1e-3}},
    "task": {"operations": ["ergodic", "primal"], "regime": "exponential", "t0": 0.0, "xi": 0.0, "eta": 1.0,
             "maturity_factors": [1.0], "perturbations": 20},
}


def _line_of(text: str, path) -> int | None:
    """Best-effort line number of a JSON pointer, by scanning for each key in order."""
    pos = 0
    found = None
    for part in path:
        if isinstance(part, int):
            continue
        idx = text.find(json.dumps(part), pos)
        if idx < 0:
            break
        pos = idx + 1
        found = idx
    return None if found is None else text.count("\n", 0, found) + 1


def bundled_names() -> list[str]:
    root = resources.files("forward_fbsde") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve(config: str) -> tuple[str, bytes, Path | None]:
    """Read a config given as a path or bundled scenario name; returns (label, raw bytes, base dir)."""
    p = Path(config)
    if p.exists():
        return p.name, p.read_bytes(), p.resolve().parent
    if config in bundled_names():
        res = resources.files("forward_fbsde") / "scenarios" / f"{config}.json"
        return f"{config}.json", res.read_bytes(), None
    raise ConfigError(f"config {config!r} is neither a readable file nor a bundled scenario "
                      f"({', '.join(bundled_names())})", path=config)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def load(config: str, seed: int | None = None) -> dict:
    label, raw, base_dir = resolve(config)
    text = raw.decode("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{label}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}", line=exc.lineno,
                          path=label) from exc
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = []
        first = None
        for e in errors:
            ln = _line_of(text, list(e.absolute_path))
            first = first or ln
            where = "/".join(map(str, e.absolute_path)) or "<root>"
            lines.append(f"{label}:{ln if ln else '?'}: {where}: {e.message}")
        raise ConfigError("\n".join(lines), line=first, path=label)
    cfg = _merge(DEFAULTS, data)
    if seed is not None:
        cfg["numerics"]["seed"] = int(seed)
    _semantic_checks(cfg, text, label)
    inputs = [(label, raw)]
    for spec in _function_specs(cfg):
        if spec.get("kind") == "custom-grid" and "path" in spec:
            fp = Path(spec["path"]) if base_dir is None or Path(spec["path"]).is_absolute() else base_dir / spec["path"]
            try:
                inputs.append((Path(spec["path"]).name, fp.read_bytes()))
            except OSError as exc:
                raise ConfigError(f"{label}: cannot read grid file {spec['path']}: {exc}", path=label) from exc
    cfg["_meta"] = {"label": label, "base_dir": str(base_dir) if base_dir else None, "inputs": inputs}
    return cfg


def _function_specs(cfg: dict):
    yield cfg["model"]["theta"]
    yield cfg["model"]["drift_l"]
    for key in ("payoff", "wealth_payoff"):
        v = cfg["endowment"].get(key)
        if isinstance(v, dict):
            yield v
    sp = cfg["task"].get("oce", {}).get("second_payoff")
    if sp:
        yield sp


def _semantic_checks(cfg: dict, text: str, label: str):
    end = cfg["endowment"]
    if end["kind"] == "constant" and not isinstance(end.get("payoff"), (int, float)):
        raise ConfigError(f"{label}:{_line_of(text, ['endowment', 'kind'])}: constant endowment needs a numeric payoff",
                          line=_line_of(text, ["endowment", "kind"]), path=label)
    if end["kind"] != "constant" and not isinstance(end.get("payoff"), dict):
        ln = _line_of(text, ["endowment", "payoff"]) or _line_of(text, ["endowment"])
        raise ConfigError(f"{label}:{ln}: {end['kind']} endowment needs a function payoff", line=ln, path=label)
    if end["kind"] == "terminal-path-function" and "noise" not in end:
        ln = _line_of(text, ["endowment", "kind"])
        raise ConfigError(f"{label}:{ln}: path endowment must name its noise (W1 or W2)", line=ln, path=label)
    ops = cfg["task"]["operations"]
    if cfg["task"]["regime"] == "decoupling" and "decoupling" not in cfg["numerics"]:
        ln = _line_of(text, ["task", "regime"])
        raise ConfigError(f"{label}:{ln}: decoupling regime needs numerics.decoupling", line=ln, path=label)
    if not ops:
        ln = _line_of(text, ["task", "operations"])
        raise ConfigError(f"{label}:{ln}: task.operations is empty", line=ln, path=label)


def canonical(cfg: dict) -> str:
    return json.dumps({k: v for k, v in cfg.items() if k != "_meta"}, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def blob_hash(data: bytes) -> str:
    """Git blob object id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hashes(cfg: dict) -> dict:
    return {name: blob_hash(raw) for name, raw in cfg["_meta"]["inputs"]}


def function(spec: dict, cfg: dict) -> NamedFunction:
    try:
        return from_spec(spec, cfg["_meta"]["base_dir"])
    except ConfigError as exc:
        raise ConfigError(f"{cfg['_meta']['label']}: {exc}", path=cfg["_meta"]["label"]) from exc


def build_model(cfg: dict):
    from ..market import MarketModel

    m = cfg["model"]
    return MarketModel(theta=function(m["theta"], cfg), drift_l=function(m["drift_l"], cfg), rho=float(m["rho"]),
                       gamma=float(m["gamma"]), theta_bound=float(m["theta_bound"]),
                       lipschitz_theta=float(m["lipschitz_theta"]), dissipativity=m.get("dissipativity"),
                       v0=float(m.get("v0", 0.0)))


def build_endowment(cfg: dict, maturity: float | None = None):
    from ..fbsde.types import EndowmentSpec

    e = cfg["endowment"]
    T = float(e["maturity"] if maturity is None else maturity)
    kind = e["kind"]
    if kind == "constant":
        return EndowmentSpec.constant(float(e["payoff"]), T, bound=float(e["bound"]))
    f = function(e["payoff"], cfg)
    if kind == "terminal-factor-function":
        return EndowmentSpec("terminal-factor-function", f, float(e["bound"]), T, lipschitz_x=0.0, label=f.kind)
    if kind == "terminal-path-function":
        noise = e["noise"]
        pick = (lambda view: f(view.W1[:, -1])) if noise == "W1" else (lambda view: f(view.W2[:, -1]))
        return EndowmentSpec("terminal-path-function", pick, float(e["bound"]), T, filtration=noise, label=f.kind)
    g = function(e["wealth_payoff"], cfg) if "wealth_payoff" in e else None
    lip = float(e.get("lipschitz_x", getattr(g, "lipschitz", 0.0) or 0.0))

    def payoff(v, x):
        return f(v) + (g(x) if g is not None else 0.0)

    return EndowmentSpec("terminal-factor-wealth-function", payoff, float(e["bound"]), T, lipschitz_x=lip,
                         label="factor+wealth")


def np_seed(cfg: dict) -> int:
    return int(cfg["numerics"]["seed"])


__all__ = ["SCHEMA", "DEFAULTS", "load", "config_hash", "input_hashes", "blob_hash", "build_model", "build_endowment",
           "bundled_names", "canonical", "np_seed"]
