"""Named scalar functions with declared sup-norm and Lipschitz certificates.

Model coefficients and payoffs are built from this registry instead of
free-form expressions so that every bound used by the solvers is declared
up front and every function has a stable, hashable description.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ConfigError

Array = np.ndarray


@dataclass(frozen=True)
class NamedFunction:
    """Vectorised real function of one variable plus its certificates.

    ``bound`` is ``None`` for unbounded functions (for example a linear drift).
    """

    kind: str
    params: tuple[tuple[str, Any], ...]
    fn: Callable[[Array], Array] = field(compare=False, repr=False)
    bound: float | None = None
    lipschitz: float | None = None
    derivative: Callable[[Array], Array] | None = field(default=None, compare=False, repr=False)

    def __call__(self, v):
        return self.fn(np.asarray(v, dtype=float))

    def spec(self) -> dict:
        return {"kind": self.kind, **dict(self.params)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.spec(), sort_keys=True).encode()).hexdigest()

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"


def constant(value: float) -> NamedFunction:
    value = float(value)
    return NamedFunction(
        "constant",
        (("value", value),),
        lambda v: np.full(np.shape(v), value),
        bound=abs(value),
        lipschitz=0.0,
        derivative=lambda v: np.zeros(np.shape(v)),
    )


def tanh_scaled(scale: float, slope: float = 1.0, shift: float = 0.0) -> NamedFunction:
    """``scale * tanh(slope * (v - shift))``."""
    scale, slope, shift = float(scale), float(slope), float(shift)
    return NamedFunction(
        "tanh-scaled",
        (("scale", scale), ("slope", slope), ("shift", shift)),
        lambda v: scale * np.tanh(slope * (v - shift)),
        bound=abs(scale),
        lipschitz=abs(scale * slope),
        derivative=lambda v: scale * slope / np.cosh(slope * (v - shift)) ** 2,
    )


def linear(slope: float, intercept: float = 0.0) -> NamedFunction:
    slope, intercept = float(slope), float(intercept)
    return NamedFunction(
        "linear",
        (("slope", slope), ("intercept", intercept)),
        lambda v: intercept + slope * v,
        bound=None if slope != 0.0 else abs(intercept),
        lipschitz=abs(slope),
        derivative=lambda v: np.full(np.shape(v), slope),
    )


def clipped_linear(slope: float, intercept: float = 0.0, lo: float = -1.0, hi: float = 1.0) -> NamedFunction:
    slope, intercept, lo, hi = float(slope), float(intercept), float(lo), float(hi)
    if not lo < hi:
        raise ConfigError(f"clipped-linear needs lo < hi, got {lo} >= {hi}")

    def deriv(v):
        raw = intercept + slope * v
        return np.where((raw > lo) & (raw < hi), slope, 0.0)

    return NamedFunction(
        "clipped-linear",
        (("slope", slope), ("intercept", intercept), ("lo", lo), ("hi", hi)),
        lambda v: np.clip(intercept + slope * v, lo, hi),
        bound=max(abs(lo), abs(hi)),
        lipschitz=abs(slope),
        derivative=deriv,
    )


def custom_grid(knots: Array, values: Array, source: str = "inline") -> NamedFunction:
    """Piecewise-linear interpolant with flat extension beyond the knots."""
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    if knots.ndim != 1 or knots.shape != values.shape or knots.size < 2:
        raise ConfigError("custom-grid needs two equal-length 1-D columns with at least two rows")
    if np.any(np.diff(knots) <= 0):
        raise ConfigError("custom-grid knots must be strictly increasing")
    if not np.all(np.isfinite(values)):
        raise ConfigError("custom-grid values must be finite")
    slopes = np.diff(values) / np.diff(knots)
    content = hashlib.sha256(knots.tobytes() + values.tobytes()).hexdigest()

    def deriv(v):
        idx = np.clip(np.searchsorted(knots, v, side="right") - 1, 0, slopes.size - 1)
        inside = (v >= knots[0]) & (v <= knots[-1])
        return np.where(inside, slopes[idx], 0.0)

    return NamedFunction(
        "custom-grid",
        (("source", source), ("content", content)),
        lambda v: np.interp(v, knots, values),
        bound=float(np.max(np.abs(values))),
        lipschitz=float(np.max(np.abs(slopes))),
        derivative=deriv,
    )


def read_grid_csv(path: str | Path) -> tuple[Array, Array]:
    """Read a two-column CSV with header ``v,f``."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read custom-grid file {path}: {exc}") from exc
    if not rows or set(rows[0]) != {"v", "f"}:
        raise ConfigError(f"{path}: expected header 'v,f'")
    try:
        knots = np.array([float(r["v"]) for r in rows])
        values = np.array([float(r["f"]) for r in rows])
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry ({exc})") from exc
    return knots, values


_BUILDERS: dict[str, Callable[..., NamedFunction]] = {
    "constant": constant,
    "tanh-scaled": tanh_scaled,
    "linear": linear,
    "clipped-linear": clipped_linear,
}

REGISTRY = tuple(sorted([*_BUILDERS, "custom-grid"]))


def from_spec(spec: dict, base_dir: str | Path | None = None) -> NamedFunction:
    """Build a registered function from its JSON description."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"function spec must be an object with a 'kind' key, got {spec!r}")
    kind = spec["kind"]
    params = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "custom-grid":
        if "path" in params:
            path = Path(params["path"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            knots, values = read_grid_csv(path)
            return custom_grid(knots, values, source=str(params["path"]))
        if "v" in params and "f" in params:
            return custom_grid(params["v"], params["f"])
        raise ConfigError("custom-grid needs either 'path' or inline 'v' and 'f' arrays")
    if kind not in _BUILDERS:
        raise ConfigError(f"unknown function kind {kind!r}; registry: {', '.join(REGISTRY)}")
    try:
        return _BUILDERS[kind](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind!r}: {exc}") from exc


def differentiate(f: Callable[[Array], Array], v: Array, h: float = 1e-5) -> Array:
    """Derivative of ``f``: exact when ``f`` carries one, central difference otherwise."""
    deriv = getattr(f, "derivative", None)
    if deriv is not None:
        return np.asarray(deriv(np.asarray(v, dtype=float)), dtype=float)
    v = np.asarray(v, dtype=float)
    return (np.asarray(f(v + h)) - np.asarray(f(v - h))) / (2.0 * h)
