"""Exponential regime: the endowment BSDE becomes a semilinear PDE in (t, v).

With ``Y = y(t, V_t)`` and ``Z = (rho, sqrt(1-rho^2)) y_v`` the backward
equation reads

    y_t + 0.5 y_vv + (l - rho theta + (1-rho^2) y_e') y_v - (gamma/2)(1-rho^2) y_v^2 = 0,

with ``y(T, v) = p(v)``.  The linear part is implicit, the quadratic term is
lagged one step.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .._interp import bracket
from ..errors import AlignmentError, ArgumentError, GridError, RegimeError, StabilityError
from ..forward_core import ExpForwardProcess
from ..market import ControlPath, MarketModel, PathEnsemble
from .types import EndowmentSpec, PrimalSolution

DEFAULT_GRID = {"v_min": -6.0, "v_max": 6.0, "n_v": 601, "dt": 1.0 / 1000.0}


def _operator(beta: np.ndarray, h: float, dt: float):
    n = beta.size
    i = np.arange(1, n - 1)
    lo = 0.5 / h**2 - beta[i] / (2 * h)
    di = -1.0 / h**2 * np.ones(n - 2)
    up = 0.5 / h**2 + beta[i] / (2 * h)
    rows = np.concatenate([i, i, i, [0, 0, 0, n - 1, n - 1, n - 1]])
    cols = np.concatenate([i - 1, i, i + 1, [0, 1, 2, n - 1, n - 2, n - 3]])
    a_vals = np.concatenate([-dt * lo, 1.0 - dt * di, -dt * up, [1.0, -2.0, 1.0, 1.0, -2.0, 1.0]])
    A = sp.csc_matrix((a_vals, (rows, cols)), shape=(n, n))
    L = sp.csr_matrix((np.concatenate([lo, di, up]), (np.concatenate([i, i, i]), np.concatenate([i - 1, i, i + 1]))),
                      shape=(n, n))
    return splu(A), L


def exponential_handle(model: MarketModel, erg) -> ExpForwardProcess:
    return ExpForwardProcess(model.gamma, erg)


def solve_exponential_primal(model: MarketModel, erg, P: EndowmentSpec, t0: float, T: float, grid: dict | None = None,
                             *, ensemble: PathEnsemble | None = None, xi: float = 0.0,
                             z_cap: float = 50.0) -> PrimalSolution:
    if P.kind not in ("constant", "terminal-factor-function"):
        raise RegimeError(f"exponential solver needs a constant or factor endowment, got {P.kind}",
                          module="fbsde", operation="solve_exponential_primal")
    if not T > t0:
        raise ArgumentError("T must exceed t0", module="fbsde", operation="solve_exponential_primal")
    if abs(P.maturity - T) > 1e-12:
        raise ArgumentError(f"endowment matures at {P.maturity}, solver horizon is {T}", module="fbsde",
                            operation="solve_exponential_primal")
    g = dict(DEFAULT_GRID)
    g.update(grid or {})
    if ensemble is not None:
        g["dt"] = ensemble.dt / max(1, int(np.ceil(ensemble.dt / g["dt"] - 1e-9)))
    gv = np.linspace(g["v_min"], g["v_max"], int(g["n_v"]))
    h = gv[1] - gv[0]
    n_t = int(round((T - t0) / g["dt"]))
    if n_t < 1 or abs(n_t * g["dt"] - (T - t0)) > 1e-9 * (T - t0):
        raise GridError(f"T - t0 = {T - t0} is not a multiple of dt = {g['dt']}", module="fbsde",
                        operation="solve_exponential_primal")
    dt = (T - t0) / n_t
    gt = t0 + dt * np.arange(n_t + 1)

    rp = model.rho_perp
    th = model.theta_on(gv)
    beta = model.drift_on(gv) - model.rho * th + rp * erg.z2_at(gv)
    kappa = 0.5 * model.gamma * rp**2
    lu, L = _operator(beta, h, dt)

    y = np.empty((n_t + 1, gv.size))
    y[-1] = P.of_factor(gv)
    for n in range(n_t - 1, -1, -1):
        nxt = y[n + 1]
        d1 = np.gradient(nxt, h, edge_order=2)
        rhs = nxt - dt * kappa * d1**2
        rhs[0] = rhs[-1] = 0.0
        y[n] = lu.solve(rhs)
        z2_peak = rp * float(np.max(np.abs(d1)))
        if not np.all(np.isfinite(y[n])) or z2_peak > z_cap:
            raise StabilityError(
                f"|Z2| reached {z2_peak:.3g} (cap {z_cap}) at t={gt[n + 1]:.4g}; refine the v-grid or reduce dt",
                module="fbsde", operation="solve_exponential_primal")
    yv = np.gradient(y, h, axis=1, edge_order=2)
    z1, z2 = model.rho * yv, rp * yv

    res = (y[1:] - y[:-1]) / dt + np.asarray(L @ y[:-1].T).T - kappa * yv[:-1] ** 2
    bsde_residual = float(np.max(np.abs(res[:, 1:-1])))
    Y0 = float(np.interp(model.v0, gv, y[0]))
    sol = PrimalSolution("exponential", Y0, float(xi), float(t0), float(T), grid_t=gt, grid_v=gv, y=y, z1=z1, z2=z2,
                         bsde_residual=bsde_residual, model=model, endowment=P,
                         meta={"dt": dt, "n_v": gv.size, "z_cap": z_cap, "ergodic_lambda": erg.lam,
                               "ergodic": erg})
    if ensemble is not None:
        sol = realize_exponential(sol, erg, ensemble, xi)
    return sol


def realize_exponential(sol: PrimalSolution, erg, ensemble: PathEnsemble, xi: float) -> PrimalSolution:
    """Per-path (X, Y, Z) and optimal controls; past T the controls follow the no-endowment optimum."""
    from dataclasses import replace

    model = sol.model
    k0 = ensemble.index_of(sol.t0)
    kT = ensemble.index_of(sol.T)
    m = int(round(ensemble.dt / sol.meta["dt"]))
    if m < 1 or abs(m * sol.meta["dt"] - ensemble.dt) > 1e-12:
        raise AlignmentError("PDE step must divide the ensemble step", module="fbsde", operation="realize_exponential")
    n, N = ensemble.n_paths, ensemble.n_steps
    gamma = model.gamma
    cols = kT - k0 + 1
    X = np.empty((n, cols))
    Y = np.empty((n, cols))
    Z1 = np.empty((n, cols))
    Z2 = np.empty((n, cols))
    pis = np.zeros((n, N))
    qs = np.zeros((n, N))
    X[:, 0] = xi
    dt = ensemble.dt
    for c in range(cols):
        k = k0 + c
        j = c * m
        V = ensemble.V[:, k]
        i, w = bracket(sol.grid_v, V)
        for out, arr in ((Y, sol.y[j]), (Z1, sol.z1[j]), (Z2, sol.z2[j])):
            out[:, c] = (1 - w) * arr[i] + w * arr[i + 1]
        if k < kT:
            th = model.theta_on(V)
            ie, we = bracket(erg.grid_v, V)
            pis[:, k] = (th + (1 - we) * erg.z1[ie] + we * erg.z1[ie + 1]) / gamma - Z1[:, c]
            qs[:, k] = gamma * Z2[:, c] - ((1 - we) * erg.z2[ie] + we * erg.z2[ie + 1])
            X[:, c + 1] = X[:, c] + pis[:, k] * (th * dt + ensemble.dW1[:, k])
    for k in range(kT, N):
        V = ensemble.V[:, k]
        pis[:, k] = (model.theta_on(V) + erg.z1_at(V)) / gamma
        qs[:, k] = -erg.z2_at(V)
    z_sup = float(max(np.abs(erg.z1).max(), np.abs(erg.z2).max()))
    pi_bound = (model.theta_bound + z_sup) / gamma + float(np.abs(sol.z1).max()) + 1e-9
    q_bound = gamma * float(np.abs(sol.z2).max()) + z_sup + 1e-9
    return replace(sol, xi=float(xi), X=X, Y=Y, Z1=Z1, Z2=Z2, path_index=np.arange(k0, kT + 1),
                   pi_star=ControlPath(pis, pi_bound, "pi_star"), q_star=ControlPath(qs, q_bound, "q_star"),
                   ensemble=ensemble)
