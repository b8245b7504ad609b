from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..errors import DomainError
from ..market import ControlPath, MarketModel, PathEnsemble

Array = np.ndarray

KINDS = ("constant", "terminal-factor-function", "terminal-path-function", "terminal-factor-wealth-function")
FILTRATIONS = ("W1", "W2", "full")


class ClippingWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PathView:
    """Read-only view of Brownian and factor paths handed to path-dependent payoffs."""

    times: Array
    W1: Array
    W2: Array
    V: Array


@dataclass(frozen=True, eq=False)
class EndowmentSpec:
    """Bounded claim paid at ``maturity``.

    ``payoff`` is a float for the constant kind, ``f(v)`` for factor claims,
    ``f(v, x)`` for factor-and-wealth claims (decoupling regime only) and
    ``f(PathView)`` for path claims.  ``filtration`` records which noise a path
    claim depends on.
    """

    kind: str
    payoff: Any
    bound: float
    maturity: float
    filtration: str = "full"
    lipschitz_x: float | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown endowment kind {self.kind!r}", module="fbsde", operation="EndowmentSpec")
        if not self.bound > 0:
            raise DomainError("endowment bound must be positive", module="fbsde", operation="EndowmentSpec")
        if self.filtration not in FILTRATIONS:
            raise DomainError(f"filtration must be one of {FILTRATIONS}", module="fbsde", operation="EndowmentSpec")
        if self.kind == "constant" and abs(float(self.payoff)) > self.bound:
            raise DomainError("constant endowment exceeds its bound", module="fbsde", operation="EndowmentSpec")

    @classmethod
    def constant(cls, c: float, maturity: float, bound: float | None = None) -> "EndowmentSpec":
        return cls("constant", float(c), bound if bound is not None else max(abs(c), 1.0), maturity,
                   filtration="W1", lipschitz_x=0.0, label=f"constant {c}")

    @classmethod
    def factor(cls, fn: Callable[[Array], Array], bound: float, maturity: float, label: str = "") -> "EndowmentSpec":
        return cls("terminal-factor-function", fn, bound, maturity, lipschitz_x=0.0, label=label)

    @property
    def is_zero(self) -> bool:
        return self.kind == "constant" and float(self.payoff) == 0.0

    def _clip(self, vals: Array) -> Array:
        vals = np.asarray(vals, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise DomainError("endowment payoff returned non-finite values", module="fbsde",
                              operation="EndowmentSpec")
        if np.any(np.abs(vals) > self.bound):
            warnings.warn(f"endowment payoff clipped at its bound {self.bound}", ClippingWarning, stacklevel=3)
            vals = np.clip(vals, -self.bound, self.bound)
        return vals

    def of_factor(self, v: Array) -> Array:
        v = np.asarray(v, dtype=float)
        if self.kind == "constant":
            return np.full(v.shape, float(self.payoff))
        if self.kind != "terminal-factor-function":
            raise DomainError(f"{self.kind} endowment is not a function of the factor alone", module="fbsde",
                              operation="EndowmentSpec")
        return self._clip(np.broadcast_to(self.payoff(v), v.shape))

    def of_factor_wealth(self, v: Array, x: Array) -> Array:
        v, x = np.broadcast_arrays(np.asarray(v, dtype=float), np.asarray(x, dtype=float))
        if self.kind == "terminal-factor-wealth-function":
            return self._clip(self.payoff(v, x))
        return self.of_factor(v) + 0.0 * x

    def on_paths(self, ensemble: PathEnsemble, t_index: int | None = None) -> Array:
        """Payoff per ensemble path, with the maturity read off the ensemble grid."""
        k = ensemble.index_of(self.maturity) if t_index is None else t_index
        if self.kind == "constant":
            return np.full(ensemble.n_paths, float(self.payoff))
        if self.kind == "terminal-factor-function":
            return self.of_factor(ensemble.V[:, k])
        if self.kind == "terminal-path-function":
            view = PathView(ensemble.times[: k + 1], ensemble.W1()[:, : k + 1], ensemble.W2()[:, : k + 1],
                            ensemble.V[:, : k + 1])
            return self._clip(self.payoff(view))
        raise DomainError("wealth-dependent endowment needs the wealth path; use of_factor_wealth", module="fbsde",
                          operation="EndowmentSpec")


@dataclass(frozen=True, eq=False)
class PrimalSolution:
    """Solution of the primal system in one of the supported regimes.

    Grid fields use axes (t, v) or (t, v, x).  Per-path arrays have one row per
    path and one column per entry of ``path_index`` (ensemble time indices).
    """

    regime: str
    Y0: float
    xi: float
    t0: float
    T: float
    grid_t: Array | None = None
    grid_v: Array | None = None
    grid_x: Array | None = None
    y: Array | None = None
    z1: Array | None = None
    z2: Array | None = None
    X: Array | None = None
    Y: Array | None = None
    Z1: Array | None = None
    Z2: Array | None = None
    path_index: Array | None = None
    pi_star: ControlPath | None = None
    q_star: ControlPath | None = None
    bsde_residual: float = 0.0
    model: MarketModel | None = None
    ensemble: PathEnsemble | None = None
    endowment: EndowmentSpec | None = None
    meta: dict = field(default_factory=dict)

    @property
    def has_paths(self) -> bool:
        return self.X is not None

    def field_at(self, t: float, v: Array) -> tuple[Array, Array, Array]:
        """(y, z1, z2) at time ``t`` (linear in t between grid slices) and factor values ``v``."""
        if self.grid_t is None or self.y is None or self.y.ndim != 2:
            raise DomainError("solution has no (t, v) field", module="fbsde", operation="field_at")
        gt = self.grid_t
        j = int(np.clip(np.searchsorted(gt, t, side="right") - 1, 0, gt.size - 2))
        w = (t - gt[j]) / (gt[j + 1] - gt[j])
        out = []
        for arr in (self.y, self.z1, self.z2):
            a = np.interp(v, self.grid_v, arr[j])
            b = np.interp(v, self.grid_v, arr[j + 1])
            out.append((1 - w) * a + w * b)
        return tuple(out)


@dataclass(frozen=True, eq=False)
class DualSolution:
    D: Array
    Y_tilde: Array
    Z1_tilde: Array
    Z2_tilde: Array
    eta0: float
    residual: float
    path_index: Array
    model: MarketModel | None = None
    ensemble: PathEnsemble | None = None
    endowment: EndowmentSpec | None = None
    t0: float = 0.0
    T: float = 0.0
    regime: str = ""
    meta: dict = field(default_factory=dict)

    def density_martingale_stat(self) -> float:
        from ..market import mean_se

        mean, se = mean_se(self.D[:, -1])
        return abs(mean - self.eta0) / se if se > 0 else abs(mean - self.eta0)
