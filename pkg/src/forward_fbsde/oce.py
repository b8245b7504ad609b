"""Optimized certainty equivalents: the static functional on samples and its forward counterpart.

The forward version is evaluated in the exponential regime, where the
normalized value is the deflator times the initial value of the endowment
BSDE.  Its dual certificate reweights simulated paths by the state-price
density of a candidate control, which yields an upper bound for any control
and equality at the optimal one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ArgumentError, BoxTooSmallError, DomainError, PreconditionError, RegimeError
from .fbsde.exponential import exponential_handle, solve_exponential_primal
from .fbsde.export import to_json
from .fbsde.types import EndowmentSpec
from .forward_core import golden_section_max
from .market import (ControlPath, MarketModel, PathEnsemble, density_control_variate, density_path, gains_path,
                     mean_se)

AXIOMS = ("monotonicity", "cash_invariance", "concavity", "replication_invariance", "positivity", "constancy")


@dataclass(frozen=True, eq=False)
class DeflatorSpec:
    """Deflator at the evaluation time.

    A positive scalar, or one positive sample per path.  Sample arrays must
    have unit mean within four standard errors.
    """

    eta: float | np.ndarray

    def __post_init__(self):
        e = np.asarray(self.eta, dtype=float)
        if not np.all(e > 0) or not np.all(np.isfinite(e)):
            raise DomainError("deflator must be positive and finite", module="oce", operation="DeflatorSpec")
        if e.ndim:
            m, se = mean_se(e)
            if abs(m - 1.0) > 4.0 * se + 1e-12:
                raise DomainError(f"deflator samples have mean {m:.6g}, expected 1", module="oce",
                                  operation="DeflatorSpec")
        object.__setattr__(self, "eta", float(e) if e.ndim == 0 else e)

    @property
    def is_scalar(self) -> bool:
        return np.ndim(self.eta) == 0

    @classmethod
    def of(cls, eta) -> "DeflatorSpec":
        return eta if isinstance(eta, DeflatorSpec) else cls(eta)


@dataclass
class OceReport:
    value: float
    normalized: float
    xi_star: float
    dual_value: float | None = None
    dual_gap: float | None = None
    dual_se: float | None = None
    axiom_results: dict = field(default_factory=dict)
    maturity_check: tuple | None = None
    forward_entropic_risk: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "normalized": self.normalized, "xi_star": self.xi_star,
                "dual_value": self.dual_value, "dual_gap": self.dual_gap, "dual_se": self.dual_se,
                "axiom_results": self.axiom_results,
                "maturity_check": list(self.maturity_check) if self.maturity_check else None,
                "forward_entropic_risk": self.forward_entropic_risk, "meta": self.meta}

    def to_json(self) -> str:
        return to_json(self.to_dict())


# ---------------------------------------------------------------- static OCE


def normalize_utility(u: Callable[[np.ndarray], np.ndarray], h: float = 1e-5) -> Callable[[np.ndarray], np.ndarray]:
    """Affine rescaling so that ``u(0) = 0`` and ``u'(0) = 1``."""
    u0 = float(u(np.array(0.0)))
    du0 = float((u(np.array(h)) - u(np.array(-h))) / (2 * h))
    if not du0 > 0:
        raise DomainError("utility must be increasing at 0", module="oce", operation="static_oce")
    return lambda x: (u(x) - u0) / du0


def static_oce(u: Callable[[np.ndarray], np.ndarray], P_samples, search_box: tuple[float, float] | None = None,
               *, normalize: bool = True, tol: float = 1e-10) -> float:
    """``sup_r mean(u(P - r)) + r`` by golden section over ``search_box``."""
    P = np.asarray(P_samples, dtype=float).ravel()
    if P.size == 0 or not np.all(np.isfinite(P)):
        raise DomainError("OCE samples must be finite and non-empty", module="oce", operation="static_oce")
    un = normalize_utility(u) if normalize else u
    lo, hi = search_box if search_box is not None else (float(P.min()) - 10.0, float(P.max()) + 10.0)
    obj = lambda r: float(np.mean(un(P - r)) + r)  # noqa: E731
    r, val = golden_section_max(obj, lo, hi, tol)
    flat = abs(obj(lo) - obj(hi)) <= 1e-12 * max(1.0, abs(val))
    if not flat and min(r - lo, hi - r) <= 1e-6 * (hi - lo):
        raise BoxTooSmallError(f"OCE maximiser r = {r:.6g} sits on the search box [{lo}, {hi}]", module="oce",
                               operation="static_oce")
    return val


# ------------------------------------------------------ exponential engine


def _shifted(P: EndowmentSpec, c: float) -> EndowmentSpec:
    if P.kind == "constant":
        return EndowmentSpec.constant(float(P.payoff) + c, P.maturity, P.bound + abs(c))
    return EndowmentSpec(P.kind, lambda *a: P.payoff(*a) + c, P.bound + abs(c), P.maturity, P.filtration,
                         P.lipschitz_x, f"{P.label}+{c}")


def _mixed(P1: EndowmentSpec, P2: EndowmentSpec, lam: float) -> EndowmentSpec:
    f1 = (lambda v: np.full(np.shape(v), float(P1.payoff))) if P1.kind == "constant" else P1.payoff
    f2 = (lambda v: np.full(np.shape(v), float(P2.payoff))) if P2.kind == "constant" else P2.payoff
    return EndowmentSpec.factor(lambda v: lam * f1(v) + (1 - lam) * f2(v), lam * P1.bound + (1 - lam) * P2.bound,
                                P1.maturity, label="mixture")


class ExponentialOceEngine:
    """Forward OCE evaluations sharing one market, ergodic solution, deflator and (optionally) path ensemble."""

    def __init__(self, model: MarketModel, erg, t: float, T: float, eta=1.0, *, grid: dict | None = None,
                 ensemble: PathEnsemble | None = None, solver_tol: float = 1e-3):
        if not T > t:
            raise ArgumentError("T must exceed t", module="oce", operation="ExponentialOceEngine")
        self.model, self.erg, self.t, self.T = model, erg, float(t), float(T)
        self.deflator = DeflatorSpec.of(eta)
        self.grid, self.ensemble, self.solver_tol = grid, ensemble, solver_tol
        self.U = exponential_handle(model, erg)

    @property
    def eta(self) -> float:
        e = self.deflator.eta
        return float(e) if self.deflator.is_scalar else float(np.mean(e))

    def _check(self, P: EndowmentSpec):
        if P.kind not in ("constant", "terminal-factor-function"):
            raise RegimeError(f"exponential forward OCE needs a constant or factor endowment, got {P.kind}",
                              module="oce", operation="forward_oce_exponential")
        if abs(P.maturity - self.T) > 1e-12:
            raise ArgumentError(f"endowment matures at {P.maturity}, OCE horizon is {self.T}", module="oce",
                                operation="forward_oce_exponential")

    def primal(self, P: EndowmentSpec, with_paths: bool = False):
        self._check(P)
        return solve_exponential_primal(self.model, self.erg, P, self.t, self.T, self.grid,
                                        ensemble=self.ensemble if with_paths else None)

    def _y_at_t(self, sol) -> np.ndarray | float:
        if self.deflator.is_scalar:
            return sol.Y0
        k = self.ensemble.index_of(self.t)
        return np.interp(self.ensemble.V[:, k], sol.grid_v, sol.y[0])

    def normalized(self, P: EndowmentSpec) -> float:
        sol = self.primal(P)
        return float(np.mean(self.deflator.eta * self._y_at_t(sol)))

    def value(self, P: EndowmentSpec) -> float:
        v0 = self.model.v0
        return float(np.mean(self.U.conj(self.t, v0, self.deflator.eta))) + self.normalized(P)

    def q_star(self, P: EndowmentSpec) -> ControlPath:
        if self.ensemble is None:
            raise ArgumentError("certificate needs a path ensemble", module="oce", operation="q_star")
        return self.primal(P, with_paths=True).q_star

    def certificate(self, P: EndowmentSpec, q: ControlPath, extra: np.ndarray | None = None) -> tuple[float, float]:
        """``eta E^{Q^q}[P + extra + (1/2 gamma) int |z_e2 + q|^2 dr]`` with its standard error."""
        samples, M = certificate_samples(self.model, self.erg, P, self.deflator.eta, self.t, self.T, q,
                                         self.ensemble, extra, return_density=True)
        return density_control_variate(samples, np.asarray(self.deflator.eta) * M, self.eta)

    def report(self, P: EndowmentSpec, q: ControlPath | None = None) -> OceReport:
        sol = self.primal(P, with_paths=self.ensemble is not None)
        eta = self.deflator.eta
        v0 = self.model.v0
        y_t = self._y_at_t(sol)
        normalized = float(np.mean(eta * y_t))
        value = float(np.mean(self.U.conj(self.t, v0, eta))) + normalized
        xi_star = float(np.mean(-self.U.conj_z(self.t, v0, eta) - y_t))
        rep = OceReport(value, normalized, xi_star, meta={"eta": self.eta, "t": self.t, "T": self.T,
                                                           "Y0": sol.Y0, "bsde_residual": sol.bsde_residual})
        if self.deflator.is_scalar and eta == 1.0:
            rep.forward_entropic_risk = -sol.Y0
        if self.ensemble is not None:
            cand = q if q is not None else sol.q_star
            d, se = self.certificate(P, cand)
            rep.dual_value, rep.dual_se, rep.dual_gap = d, se, abs(normalized - d)
        return rep


def certificate_samples(model: MarketModel, erg, P: EndowmentSpec, eta, t: float, T: float, q: ControlPath,
                        ensemble: PathEnsemble, extra: np.ndarray | None = None, return_density: bool = False):
    if ensemble is None:
        raise ArgumentError("certificate needs a path ensemble", module="oce", operation="forward_oce_dual_certificate")
    k0, kT = ensemble.index_of(t), ensemble.index_of(T)
    M = density_path(model, ensemble, q, k0)[:, kT - k0]
    z2e = erg.z2_at(ensemble.V[:, k0:kT])
    penalty = np.sum((z2e + q.values[:, k0:kT]) ** 2, axis=1) * ensemble.dt / (2.0 * model.gamma)
    payoff = P.on_paths(ensemble, kT)
    if extra is not None:
        payoff = payoff + extra
    out = np.asarray(eta) * M * (payoff + penalty)
    return (out, M) if return_density else out


def forward_oce_exponential(model: MarketModel, erg, P: EndowmentSpec, eta, t: float, T: float, *,
                            grid: dict | None = None, ensemble: PathEnsemble | None = None) -> OceReport:
    return ExponentialOceEngine(model, erg, t, T, eta, grid=grid, ensemble=ensemble).report(P)


def forward_oce_dual_certificate(model: MarketModel, erg, P: EndowmentSpec, eta, t: float, T: float,
                                 candidate_q: ControlPath, ensemble: PathEnsemble) -> float:
    defl = DeflatorSpec.of(eta)
    samples, M = certificate_samples(model, erg, P, defl.eta, t, T, candidate_q, ensemble, return_density=True)
    return density_control_variate(samples, np.asarray(defl.eta) * M, float(np.mean(defl.eta)))[0]


# ---------------------------------------------------------------- axioms


def axiom_suite(engine: ExponentialOceEngine, P1: EndowmentSpec, P2: EndowmentSpec, c: float, lam: float,
                pi: ControlPath, eta=None, t: float | None = None, T: float | None = None,
                sigma: float = 3.0) -> dict:
    """Six structural checks; each entry maps to ``{"passed", "margin", ...}`` with margin >= 0 meaning slack."""
    if eta is not None or t is not None or T is not None:
        engine = ExponentialOceEngine(engine.model, engine.erg, engine.t if t is None else t,
                                      engine.T if T is None else T, engine.deflator if eta is None else eta,
                                      grid=engine.grid, ensemble=engine.ensemble, solver_tol=engine.solver_tol)
    if not 0.0 < lam < 1.0:
        raise ArgumentError("lambda must lie in (0, 1)", module="oce", operation="axiom_suite")
    eta_v = engine.eta
    tol = engine.solver_tol
    F = engine.normalized
    out = {}
    f1, f2 = F(P1), F(P2)

    grid_v = np.linspace(-6.0, 6.0, 241)
    dominated = bool(np.all(P1.of_factor(grid_v) >= P2.of_factor(grid_v)))
    out["monotonicity"] = {"passed": (f1 >= f2 - tol) if dominated else None, "margin": f1 - f2 + tol,
                           "applicable": dominated}

    shift = F(_shifted(P1, c)) - f1 - eta_v * c
    out["cash_invariance"] = {"passed": abs(shift) <= tol, "margin": tol - abs(shift), "defect": shift}

    mix = F(_mixed(P1, P2, lam))
    out["concavity"] = {"passed": lam * f1 + (1 - lam) * f2 <= mix + tol, "margin": mix + tol - lam * f1 - (1 - lam) * f2}

    if engine.ensemble is not None:
        ens = engine.ensemble
        k0, kT = ens.index_of(engine.t), ens.index_of(engine.T)
        gains = gains_path(engine.model, ens, pi, k0)[:, kT - k0]
        qs = engine.q_star(P1)
        samples = certificate_samples(engine.model, engine.erg, P1, engine.deflator.eta, engine.t, engine.T, qs, ens)
        with_gains = certificate_samples(engine.model, engine.erg, P1, engine.deflator.eta, engine.t, engine.T, qs, ens,
                                         extra=gains)
        m, se = mean_se(with_gains - samples)
        out["replication_invariance"] = {"passed": abs(m) <= sigma * se or m == 0.0,
                                         "margin": sigma * se - abs(m), "difference": m, "se": se,
                                         "certificate": float(np.mean(with_gains)), "value": f1}
    else:
        out["replication_invariance"] = {"passed": None, "margin": None, "applicable": False}

    pos = EndowmentSpec.factor(lambda v: np.maximum(P1.of_factor(v), 0.0), P1.bound, P1.maturity, label="positive part")
    fp = F(pos)
    out["positivity"] = {"passed": fp >= -tol, "margin": fp + tol}

    const = F(EndowmentSpec.constant(c, engine.T, bound=max(abs(c), 1.0)))
    out["constancy"] = {"passed": abs(const - eta_v * c) <= tol, "margin": tol - abs(const - eta_v * c),
                        "defect": const - eta_v * c}
    for v in out.values():
        if v["passed"] is not None:
            v["passed"] = bool(v["passed"])
    return out


def axioms_passed(results: dict) -> bool:
    return all(r["passed"] is not False for r in results.values())


def write_axiom_csv(results: dict, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axiom", "passed", "margin"])
        for name in AXIOMS:
            r = results.get(name, {})
            margin = r.get("margin")
            w.writerow([name, "" if r.get("passed") is None else str(r["passed"]).lower(),
                        "" if margin is None else repr(float(margin))])
    return path


# ------------------------------------------------------------- horizons


def oce_maturity_check(engine: ExponentialOceEngine, P: EndowmentSpec, t: float, T: float, T_prime: float,
                       sigma: float = 3.0) -> dict:
    """Forward OCE at horizons ``T`` and ``T_prime``; past ``T`` the dual density follows the no-endowment optimum."""
    if T_prime < T:
        raise ArgumentError(f"T' = {T_prime} precedes T = {T}", module="oce", operation="oce_maturity_check")
    ens = engine.ensemble
    if ens is None or ens.horizon < T_prime - 1e-12:
        raise ArgumentError("maturity check needs an ensemble reaching T'", module="oce",
                            operation="oce_maturity_check")
    if abs(engine.t - t) > 1e-12 or abs(engine.T - T) > 1e-12:
        engine = ExponentialOceEngine(engine.model, engine.erg, t, T, engine.deflator, grid=engine.grid, ensemble=ens,
                                      solver_tol=engine.solver_tol)
    sol = engine.primal(P, with_paths=True)
    U, eta = engine.U, engine.deflator.eta
    k0, kT, kP = ens.index_of(t), ens.index_of(T), ens.index_of(T_prime)
    M = density_path(engine.model, ens, sol.q_star, k0)
    payoff = P.on_paths(ens, kT)
    base = np.asarray(U.conj(t, engine.model.v0, eta))

    def F_at(k, tt):
        Mk = M[:, k - k0]
        return np.asarray(U.conj(tt, ens.V[:, k], eta * Mk)) + eta * Mk * payoff

    a, b = F_at(kT, T), F_at(kP, T_prime)
    m, se = mean_se(b - a)
    fa = float(np.mean(a))
    fb = float(np.mean(b))
    return {"T": T, "T_prime": T_prime, "value_T": fa, "value_T_prime": fb, "diff": m, "se": se,
            "normalized_T": fa - float(np.mean(base)), "normalized_T_prime": fb - float(np.mean(base)),
            "passed": bool(abs(m) <= sigma * se or m == 0.0)}


# ---------------------------------------------------- classical reduction


def classical_reduction_check(model: MarketModel, erg, P: EndowmentSpec, gamma: float, t: float, T: float,
                              ensemble: PathEnsemble, *, grid: dict | None = None, sigma: float = 3.0,
                              grid_tol: float = 1e-3) -> dict:
    """Compare the forward OCE with the static one on the same samples when the market is orthogonal to ``P``."""
    if not model.theta_is_zero or model.rho != 0.0:
        raise PreconditionError("classical reduction needs theta = 0 and a factor driven by the second noise only",
                                module="oce", operation="classical_reduction_check")
    if abs(model.gamma - gamma) > 1e-15:
        raise PreconditionError(f"model risk aversion {model.gamma} differs from gamma = {gamma}", module="oce",
                                operation="classical_reduction_check")
    if P.kind not in ("constant", "terminal-factor-function"):
        raise PreconditionError("endowment must be a function of the second-noise factor", module="oce",
                                operation="classical_reduction_check")
    forward = ExponentialOceEngine(model, erg, t, T, 1.0, grid=grid).normalized(P)
    samples = P.on_paths(ensemble, ensemble.index_of(T))
    u = lambda x: -np.exp(-gamma * x)  # noqa: E731
    static = static_oce(u, samples)
    e = np.exp(-gamma * (samples - samples.mean()))
    m, s = mean_se(e)
    se = s / (gamma * m)
    diff = abs(forward - static)
    return {"forward": forward, "static": static, "difference": diff, "se": se,
            "entropic": float(samples.mean() - math.log(m) / gamma),
            "passed": bool(diff <= sigma * se + grid_tol)}


__all__ = ["AXIOMS", "DeflatorSpec", "ExponentialOceEngine", "OceReport", "axiom_suite", "axioms_passed",
           "certificate_samples", "classical_reduction_check", "forward_oce_dual_certificate",
           "forward_oce_exponential", "normalize_utility", "oce_maturity_check", "static_oce",
           "write_axiom_csv"]
