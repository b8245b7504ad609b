"""Monte Carlo certificates for optimality, self-generation, martingale identities and horizon independence.

Comparisons between two controls are made on common random numbers, so
standard errors are those of the per-path difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ArgumentError, RegimeError
from ..forward_core import ConjugatePair, ForwardProcess
from ..market import ControlPath, MarketModel, PathEnsemble, density_path, mean_se, wealth_path
from .types import EndowmentSpec, PrimalSolution

EPSILONS = (0.1, -0.1, 0.05, -0.05)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    statistic: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "statistic": _num(self.statistic),
                "threshold": _num(self.threshold), **{k: _num(v) for k, v in self.detail.items()}}


@dataclass
class Report:
    name: str
    checks: list[CheckResult] = field(default_factory=list)
    values: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    def get(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "values": {k: _num(v) for k, v in self.values.items()},
                "checks": [c.to_dict() for c in self.checks]}


def _num(v: Any):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _z_stat(mean: float, se: float) -> float:
    if se == 0.0:
        return 0.0 if mean == 0.0 else float(np.sign(mean) * np.inf)
    return mean / se


def perturbation_directions(ensemble: PathEnsemble, n: int, seed: int, start: int, stop: int,
                            bound: float = 1.0) -> list[ControlPath]:
    """Random bounded adapted feedback directions ``a + b tanh(V_s)`` active on ``[start, stop)``."""
    rng = np.random.default_rng(seed)
    coef = rng.uniform(-0.5, 0.5, size=(n, 2)) * bound
    tv = np.tanh(ensemble.V[:, start:stop])
    out = []
    for a, b in coef:
        vals = np.zeros((ensemble.n_paths, ensemble.n_steps))
        vals[:, start:stop] = a + b * tv
        out.append(ControlPath(vals, bound, "direction"))
    return out


def _terminal(primal: PrimalSolution) -> tuple[PathEnsemble, MarketModel, int, int, np.ndarray]:
    ens, model = primal.ensemble, primal.model
    if ens is None or primal.pi_star is None or primal.q_star is None:
        raise ArgumentError("solution must carry full-resolution controls on an ensemble", module="fbsde",
                            operation="verify")
    k0, kT = ens.index_of(primal.t0), ens.index_of(primal.T)
    payoff = primal.endowment.on_paths(ens, kT)
    return ens, model, k0, kT, payoff


def marginal_martingale_statistic(primal: PrimalSolution, U: ForwardProcess) -> dict:
    """Max over checkpoints of ``|E[U_x(s, X_s + Y_s)] - U_x(t, xi + Y_t)| / SE``."""
    ens = primal.ensemble
    idx = np.asarray(primal.path_index)
    t = ens.times[idx][None, :]
    Ux = np.asarray(U.U_x(t, ens.V[:, idx], primal.X + primal.Y))
    ref = float(np.mean(Ux[:, 0]))
    stats = []
    for c in range(1, idx.size):
        m, se = mean_se(Ux[:, c])
        stats.append(abs(_z_stat(m - ref, se)))
    return {"statistic": max(stats) if stats else 0.0, "per_checkpoint": stats, "reference": ref}


def xz_martingale_statistic(model: MarketModel, ensemble: PathEnsemble, pi: ControlPath, q: ControlPath,
                            x0: float, t_index: int = 0) -> dict:
    """Deflated wealth ``X^pi M^q`` and the density itself must both be martingales."""
    X = wealth_path(model, ensemble, pi, x0)[:, t_index:]
    M = density_path(model, ensemble, q, t_index)
    m1, s1 = mean_se(X[:, -1] * M[:, -1])
    m2, s2 = mean_se(M[:, -1])
    return {"wealth": abs(_z_stat(m1 - x0, s1)), "density": abs(_z_stat(m2 - 1.0, s2))}


def verify_optimality(primal: PrimalSolution, U: ForwardProcess, ensemble: PathEnsemble | None = None,
                      n_perturbations: int = 20, *, pair: ConjugatePair | None = None, eps=EPSILONS, seed: int = 0,
                      sigma: float = 3.0, candidate_pi: ControlPath | None = None,
                      negative_control: ControlPath | None = None) -> Report:
    """One-sided perturbation tests of the primal and dual candidates plus the bidual gap.

    ``candidate_pi`` replaces the solver's allocation (to certify a forced
    policy); ``negative_control`` is an alternative that must lose by more
    than ``sigma`` standard errors.
    """
    if ensemble is not None and primal.ensemble is not ensemble:
        raise ArgumentError("primal solution was realised on a different ensemble", module="fbsde",
                            operation="verify_optimality")
    ens, model, k0, kT, payoff = _terminal(primal)
    pair = pair or ConjugatePair.of(U)
    T, vT = primal.T, ens.V[:, kT]
    pi = candidate_pi if candidate_pi is not None else primal.pi_star
    th_dt = model.theta_on(ens.V[:, :-1]) * ens.dt + ens.dW1

    def terminal_wealth(control: np.ndarray) -> np.ndarray:
        return primal.xi + np.sum(control[:, k0:kT] * th_dt[:, k0:kT], axis=1)

    XT = terminal_wealth(pi.values)
    base_u = np.asarray(U.U(T, vT, XT + payoff))
    report = Report("optimality", values={"primal_objective": float(np.mean(base_u))})
    dirs = perturbation_directions(ens, n_perturbations, seed, k0, kT)
    worst = -np.inf
    for j, d in enumerate(dirs):
        e = eps[j % len(eps)]
        Xe = XT + e * np.sum(d.values[:, k0:kT] * th_dt[:, k0:kT], axis=1)
        m, se = mean_se(np.asarray(U.U(T, vT, Xe + payoff)) - base_u)
        worst = max(worst, _z_stat(m, se))
    report.add(CheckResult("primal_perturbation", bool(worst <= sigma), float(worst), sigma,
                           {"n": n_perturbations}))

    s0 = primal.xi + primal.Y0
    eta = float(np.mean(U.U_x(primal.t0, ens.V[:, k0], s0)))
    M = density_path(model, ens, primal.q_star, k0)[:, kT - k0]
    base_d = np.asarray(pair.value_tilde(T, vT, eta * M)) + eta * M * payoff
    report.values["dual_objective"] = float(np.mean(base_d))
    report.values["eta_hat"] = eta
    worst = np.inf
    qdirs = perturbation_directions(ens, n_perturbations, seed + 1, k0, kT)
    for j, d in enumerate(qdirs):
        e = eps[j % len(eps)]
        Me = density_path(model, ens, primal.q_star.shifted(d, e), k0)[:, kT - k0]
        m, se = mean_se(np.asarray(pair.value_tilde(T, vT, eta * Me)) + eta * Me * payoff - base_d)
        worst = min(worst, _z_stat(m, se))
    report.add(CheckResult("dual_perturbation", bool(worst >= -sigma), float(worst), -sigma,
                           {"n": n_perturbations}))

    gap = base_u - base_d - primal.xi * eta
    m, se = mean_se(gap)
    report.values["bidual_gap"] = abs(m)
    report.add(CheckResult("bidual", bool(abs(m) <= sigma * se or m == 0.0), abs(_z_stat(m, se)), sigma,
                           {"gap": abs(m), "se": se}))

    if negative_control is not None:
        m, se = mean_se(np.asarray(U.U(T, vT, terminal_wealth(negative_control.values) + payoff)) - base_u)
        z = _z_stat(m, se)
        report.add(CheckResult("negative_control", bool(z < -sigma), float(z), -sigma, {"difference": m}))
    return report


def _no_endowment_flows(U: ForwardProcess, pair: ConjugatePair, model: MarketModel, ens: PathEnsemble, k0: int,
                        kT: int, xi: float, eta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Wealth under the no-endowment optimal allocation and the dual density under its optimal q."""
    n, dt = ens.n_paths, ens.dt
    X = np.full(n, float(xi))
    logM = np.zeros(n)
    qs = np.zeros((n, ens.n_steps))
    for k in range(k0, kT):
        t, V = ens.times[k], ens.V[:, k]
        th = model.theta_on(V)
        a1, _ = U.alpha_x(t, V, X)
        pi = -(np.asarray(U.U_x(t, V, X)) * th + a1) / np.asarray(U.U_xx(t, V, X))
        x_dual = -np.asarray(pair.deriv_tilde_z(t, V, eta * np.exp(logM)))
        _, a2 = U.alpha_x(t, V, x_dual)
        q = -np.asarray(a2) / np.asarray(U.U_x(t, V, x_dual))
        qs[:, k] = q
        X = X + pi * (th * dt + ens.dW1[:, k])
        logM += -(th * ens.dW1[:, k] + q * ens.dW2[:, k]) - 0.5 * (th**2 + q**2) * dt
    return X, np.exp(logM), qs


def verify_self_generation(U: ForwardProcess, pair: ConjugatePair, ensemble: PathEnsemble, T: float, *,
                           model: MarketModel, eta: float = 1.0, xi: float = 0.0, t: float | None = None,
                           n_random_q: int = 3, seed: int = 0, sigma: float = 4.0) -> Report:
    ens = ensemble
    t = ens.t0 if t is None else t
    k0, kT = ens.index_of(t), ens.index_of(T)
    v0 = ens.V[:, k0]
    XT, MT, qs = _no_endowment_flows(U, pair, model, ens, k0, kT, xi, eta)
    vT = ens.V[:, kT]
    report = Report("self_generation")
    m, se = mean_se(np.asarray(U.U(T, vT, XT)) - np.asarray(U.U(t, v0, xi)))
    report.add(CheckResult("primal", bool(abs(_z_stat(m, se)) <= sigma), abs(_z_stat(m, se)), sigma,
                           {"difference": m}))
    ref = np.asarray(pair.value_tilde(t, v0, eta))
    m, se = mean_se(np.asarray(pair.value_tilde(T, vT, eta * MT)) - ref)
    report.add(CheckResult("dual", bool(abs(_z_stat(m, se)) <= sigma), abs(_z_stat(m, se)), sigma,
                           {"difference": m}))
    report.values.update({"U_t": float(np.mean(U.U(t, v0, xi))), "U_tilde_t": float(np.mean(ref))})
    worst = np.inf
    base = ControlPath(qs, float(np.max(np.abs(qs))) + 1.0, "q_star")
    for d in perturbation_directions(ens, n_random_q, seed, k0, kT):
        M = density_path(model, ens, base.shifted(d, 1.0), k0)[:, kT - k0]
        m, se = mean_se(np.asarray(pair.value_tilde(T, vT, eta * M)) - ref)
        worst = min(worst, _z_stat(m, se))
    if n_random_q:
        report.add(CheckResult("infimum_side", bool(worst >= -3.0), float(worst), -3.0))
    return report


def verify_maturity_independence(P: EndowmentSpec, T: float, T_prime: float, context: dict,
                                 sigma: float = 3.0) -> Report:
    """Values at horizons ``T`` and ``T_prime`` with the optimum extended by the no-endowment flow past ``T``.

    ``context`` holds ``model``, ``ergodic``, ``ensemble`` (horizon at least
    ``T_prime``), ``xi`` and optionally ``t0`` and ``grid``.
    """
    from .exponential import exponential_handle, solve_exponential_primal

    if T_prime < T:
        raise ArgumentError(f"T' = {T_prime} precedes T = {T}", module="fbsde",
                            operation="verify_maturity_independence")
    if P.kind not in ("constant", "terminal-factor-function"):
        raise RegimeError("maturity check runs in the exponential regime", module="fbsde",
                          operation="verify_maturity_independence")
    model, erg, ens = context["model"], context["ergodic"], context["ensemble"]
    t0 = float(context.get("t0", ens.t0))
    xi = float(context.get("xi", 0.0))
    if ens.horizon < T_prime - 1e-12:
        raise ArgumentError("ensemble horizon is shorter than T'", module="fbsde",
                            operation="verify_maturity_independence")
    primal = context.get("primal") or solve_exponential_primal(model, erg, P, t0, T, context.get("grid"),
                                                               ensemble=ens, xi=xi)
    U = exponential_handle(model, erg)
    pair = ConjugatePair.of(U)
    k0, kT, kP = ens.index_of(t0), ens.index_of(T), ens.index_of(T_prime)
    payoff = P.on_paths(ens, kT)
    X = wealth_path(model, ens, primal.pi_star, xi)
    eta = float(np.mean(U.U_x(t0, ens.V[:, k0], xi + primal.Y0)))
    M = density_path(model, ens, primal.q_star, k0)

    def primal_value(k, tt):
        return np.asarray(U.U(tt, ens.V[:, k], X[:, k] + payoff))

    def dual_value(k, tt):
        Mk = M[:, k - k0]
        return np.asarray(pair.value_tilde(tt, ens.V[:, k], eta * Mk)) + eta * Mk * payoff

    report = Report("maturity_independence", values={"T": T, "T_prime": T_prime})
    for name, fn in (("primal", primal_value), ("dual", dual_value)):
        a, b = fn(kT, T), fn(kP, T_prime)
        m, se = mean_se(b - a)
        report.values[f"{name}_T"] = float(np.mean(a))
        report.values[f"{name}_T_prime"] = float(np.mean(b))
        report.values[f"{name}_difference"] = m
        report.add(CheckResult(name, bool(abs(m) <= sigma * se or m == 0.0), abs(_z_stat(m, se)), sigma,
                               {"difference": m, "se": se}))
    return report


def collapse_check(primal: PrimalSolution, no_endowment_pi: ControlPath | None = None, tol: float = 1e-12) -> dict:
    """With a zero endowment the backward component vanishes and the allocation is the no-endowment optimum."""
    y_max = float(np.max(np.abs(primal.y))) if primal.y is not None else float(np.max(np.abs(primal.Y)))
    z_max = max(float(np.max(np.abs(primal.z1))), float(np.max(np.abs(primal.z2)))) if primal.z1 is not None else 0.0
    out = {"y_max": y_max, "z_max": z_max, "passed": y_max <= tol and z_max <= tol}
    if no_endowment_pi is not None and primal.pi_star is not None:
        diff = float(np.max(np.abs(primal.pi_star.values - no_endowment_pi.values)))
        out["pi_difference"] = diff
        out["passed"] = out["passed"] and diff <= tol
    return out
