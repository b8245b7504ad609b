"""Markovian regime: backward induction for the decoupling field ``Y_s = w(s, V_s, X_s)``.

Each backward step couples the forward Euler map of the wealth with the
backward driver through ``w`` itself, so the step is solved node by node with
a damped fixed-point iteration.  Conditional expectations over one step use a
tensor Gauss-Hermite rule in the two Brownian increments and bicubic
interpolation of the next slice.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy.interpolate import RectBivariateSpline, RegularGridInterpolator, make_interp_spline

from ..errors import AlignmentError, ArgumentError, InvariantViolation, IterationError, PreconditionError, RegimeError, StabilityError
from ..forward_core import MarkovianForwardField
from ..market import ControlPath, MarketModel, PathEnsemble
from .types import EndowmentSpec, PrimalSolution

# slopes of the risk-tolerance ratios below this (relative) level count as zero;
# quintic-spline derivatives of a tabulated field carry errors of this order
CASE1_TOL = 5e-3


def _row_interp(grid_x: np.ndarray, table: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``table[j, :]`` at ``s[j, :]`` row by row, flat outside the grid."""
    s = np.clip(s, grid_x[0], grid_x[-1])
    idx = np.clip(np.searchsorted(grid_x, s, side="right") - 1, 0, grid_x.size - 2)
    x0 = grid_x[idx]
    w = (s - x0) / (grid_x[idx + 1] - x0)
    a = np.take_along_axis(table, idx, axis=1)
    b = np.take_along_axis(table, idx + 1, axis=1)
    return (1 - w) * a + w * b


def _cubic_rows(grid_x: np.ndarray, rows: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Four-point Lagrange interpolation of ``rows[..., q, :]`` at ``s[..., k, q]`` (x-grid on the last row axis)."""
    n = grid_x.size
    s = np.clip(s, grid_x[0], grid_x[-1])
    i0 = np.clip(np.searchsorted(grid_x, s, side="right") - 2, 0, n - 4)
    # rows: (nv, Q, nx) -> gather along x for each (j, k, q)
    nv, nk, nq = s.shape
    base = rows[:, None, :, :]
    nodes = [grid_x[i0 + a] for a in range(4)]
    vals = [np.take_along_axis(base, (i0 + a)[..., None], axis=-1)[..., 0] for a in range(4)]
    out = np.zeros_like(s)
    for a in range(4):
        wgt = np.ones_like(s)
        for b in range(4):
            if a != b:
                wgt *= (s - nodes[b]) / (nodes[a] - nodes[b])
        out += wgt * vals[a]
    return out


def classify(field: MarkovianForwardField, model: MarketModel, P: EndowmentSpec, T: float, t0: float,
             lipschitz_x: float | None = None) -> dict:
    """Measure the structural constants and decide which well-posedness case applies."""
    b = field.assumption_bounds(model.rho)
    gv, gx = field.grid_v, field.grid_x
    Vg, Xg = np.meshgrid(gv, gx, indexing="ij")
    pvals = P.of_factor_wealth(Vg, Xg)
    measured_L = float(np.max(np.abs(np.gradient(pvals, gx, axis=1, edge_order=2))))
    declared = P.lipschitz_x if lipschitz_x is None else lipschitz_x
    L = measured_L if declared is None else max(float(declared), measured_L)
    info = {**b, "L_P_x": L, "L_P_x_measured": measured_L, "horizon": T - t0}
    if not L < 1:
        raise PreconditionError(f"endowment Lipschitz constant in wealth is {L:.4g}, must be < 1",
                                module="fbsde", operation="solve_decoupling_field")
    scale = max(1.0, b["phi1_sup"])
    if b["phi2_x_sup"] <= CASE1_TOL * scale:
        info["case"] = 1
        if b["phi1_x_max"] > CASE1_TOL * scale:
            raise PreconditionError(f"phi1 must be non-increasing in wealth; measured max phi1_x = "
                                    f"{b['phi1_x_max']:.3g}", module="fbsde", operation="solve_decoupling_field")
        info["horizon_bound"] = math.inf
    else:
        info["case"] = 2
        if not b["phi1_x_max"] < 0:
            raise PreconditionError(f"case 2 needs phi1_x <= -delta < 0; measured max {b['phi1_x_max']:.3g}",
                                    module="fbsde", operation="solve_decoupling_field")
        K = b["K"]
        bound = math.log(2.0 / (1.0 + L)) / K if K > 0 else math.inf
        info["horizon_bound"] = bound
        info["wx_bound"] = (1.0 + L) * math.exp(K * (T - t0)) - 1.0
        if not (T - t0) < bound:
            raise PreconditionError(
                f"case-2 horizon gate: T - t0 = {T - t0:.6g} >= (1/K) ln(2/(1+L)) = {bound:.6g} "
                f"(K = {K:.6g}, L = {L:.4g})", module="fbsde", operation="solve_decoupling_field")
    return info


def solve_decoupling_field(field: MarkovianForwardField, model: MarketModel, P: EndowmentSpec, T: float,
                           grid: dict | None = None, *, xi: float = 0.0, damping: float = 0.5, max_iter: int = 200,
                           tol: float = 1e-10, quad_nodes: int = 3, z_cap: float = 50.0,
                           lipschitz_x: float | None = None, ensemble: PathEnsemble | None = None) -> PrimalSolution:
    if P.kind == "terminal-path-function":
        raise RegimeError("decoupling solver needs an endowment of the form P(V_T, X_T)", module="fbsde",
                          operation="solve_decoupling_field")
    gt, gv, gx = field.grid_t, field.grid_v, field.grid_x
    t0 = float(gt[0])
    if grid and "t0" in grid:
        t0 = float(grid["t0"])
    if not T > t0:
        raise ArgumentError("T must exceed the initial time", module="fbsde", operation="solve_decoupling_field")
    k0 = int(np.argmin(np.abs(gt - t0)))
    kT = int(np.argmin(np.abs(gt - T)))
    if abs(gt[kT] - T) > 1e-9 or abs(gt[k0] - t0) > 1e-9:
        raise AlignmentError("t0 and T must be nodes of the field's time grid", module="fbsde",
                             operation="solve_decoupling_field")
    if abs(P.maturity - T) > 1e-12:
        raise ArgumentError(f"endowment matures at {P.maturity}, solver horizon is {T}", module="fbsde",
                            operation="solve_decoupling_field")
    info = classify(field, model, P, T, t0, lipschitz_x)

    rho, rp = model.rho, model.rho_perp
    d = field.derivs
    th_v = model.theta_on(gv)
    l_v = model.drift_on(gv)
    phi1 = d["u_xxx"] / d["u_xx"]
    phi2 = d["u_xxv"] / d["u_xx"]
    psi = (d["u_x"] * th_v[None, :, None] + rho * d["u_xv"]) / d["u_xx"]

    nodes, weights = np.polynomial.hermite_e.hermegauss(quad_nodes)
    weights = weights / math.sqrt(2.0 * math.pi)
    xa, xb = (a.ravel() for a in np.meshgrid(nodes, nodes, indexing="ij"))
    wq = np.outer(weights, weights).ravel()

    nv, nx = gv.size, gx.size
    Vn = np.broadcast_to(gv[:, None], (nv, nx))
    Xn = np.broadcast_to(gx[None, :], (nv, nx))
    steps = kT - k0
    w = np.empty((steps + 1, nv, nx))
    z1 = np.zeros((steps + 1, nv, nx))
    z2 = np.zeros((steps + 1, nv, nx))
    w[-1] = P.of_factor_wealth(Vn, Xn)
    sup_wx = float(np.max(np.abs(np.gradient(w[-1], gx, axis=1, edge_order=2))))
    iters = []
    vlo, vhi = gv[0], gv[-1]

    for c in range(steps - 1, -1, -1):
        n = k0 + c
        dt = gt[n + 1] - gt[n]
        sq = math.sqrt(dt)
        dW1 = sq * xa
        dW2 = sq * xb
        # the factor step does not depend on the unknowns: interpolate in v once per step
        Vp = np.clip(gv[:, None] + l_v[:, None] * dt + rho * dW1 + rp * dW2, vlo, vhi)
        rows = make_interp_spline(gv, w[c + 1], k=3, axis=0)(Vp.ravel()).reshape(nv, wq.size, nx)
        Y = w[c + 1].copy()
        if c == steps - 1:
            wv = RectBivariateSpline(gv, gx, w[c + 1], kx=3, ky=3).ev(Vn, Xn, dx=1)
            Z1, Z2 = rho * wv, rp * wv
        else:
            Z1, Z2 = z1[c + 1].copy(), z2[c + 1].copy()
        p1, p2, ps = phi1[n], phi2[n], psi[n]
        for it in range(max_iter):
            s = Xn + Y
            ps_s = _row_interp(gx, ps, s)
            p1_s = _row_interp(gx, p1, s)
            p2_s = _row_interp(gx, p2, s)
            Xp = Xn[..., None] - (ps_s + Z1)[..., None] * (th_v[:, None, None] * dt + dW1)
            vals = _cubic_rows(gx, rows, Xp)
            ew = vals @ wq
            Z1n = (vals * dW1) @ wq / dt
            Z2n = (vals * dW2) @ wq / dt
            Yn = ew + dt * (-Z1n * th_v[:, None] + 0.5 * p1_s * Z2n**2 + rp * p2_s * Z2n)
            change = max(float(np.max(np.abs(Yn - Y))), float(np.max(np.abs(Z1n - Z1))) * sq,
                         float(np.max(np.abs(Z2n - Z2))) * sq)
            Y = damping * Y + (1 - damping) * Yn
            Z1 = damping * Z1 + (1 - damping) * Z1n
            Z2 = damping * Z2 + (1 - damping) * Z2n
            if not np.all(np.isfinite(Y)):
                raise IterationError(f"fixed point diverged at t={gt[n]:.4g}", module="fbsde",
                                     operation="solve_decoupling_field")
            if change <= tol:
                break
        else:
            gap = np.abs(Yn - Y)
            j, k = np.unravel_index(int(np.argmax(gap)), gap.shape)
            raise IterationError(
                f"per-node fixed point did not contract in {max_iter} iterations at t={gt[n]:.4g}, "
                f"v={gv[j]:.4g}, x={gx[k]:.4g} (last change {change:.3e})", module="fbsde",
                operation="solve_decoupling_field")
        iters.append(it + 1)
        if float(np.max(np.abs(Z2))) > z_cap:
            raise StabilityError(f"|Z2| exceeded cap {z_cap} at t={gt[n]:.4g}; refine the grid", module="fbsde",
                                 operation="solve_decoupling_field")
        w[c] = Y
        z1[c] = Z1
        z2[c] = Z2
        wx = np.gradient(Y, gx, axis=1, edge_order=2)
        sup_wx = max(sup_wx, float(np.max(np.abs(wx[1:-1, 1:-1]))))

    if not sup_wx < 1.0:
        raise InvariantViolation(f"decoupling field slope sup|w_x| = {sup_wx:.6g} is not below 1",
                                 statistic=sup_wx, module="fbsde", operation="solve_decoupling_field")
    Y0 = float(RectBivariateSpline(gv, gx, w[0], kx=3, ky=3).ev(model.v0, xi))
    sol = PrimalSolution("decoupling", Y0, float(xi), t0, float(T), grid_t=gt[k0:kT + 1], grid_v=gv, grid_x=gx,
                         y=w, z1=z1, z2=z2, model=model, endowment=P,
                         meta={**info, "sup_wx": sup_wx, "iterations_max": max(iters), "quad_nodes": quad_nodes,
                               "damping": damping, "field": field})
    if ensemble is not None:
        sol = realize_decoupling(sol, ensemble, xi)
    return sol


def realize_decoupling(sol: PrimalSolution, ensemble: PathEnsemble, xi: float) -> PrimalSolution:
    """Run the forward wealth equation along ensemble paths using the computed field."""
    gt = sol.grid_t
    k0 = ensemble.index_of(sol.t0)
    kT = ensemble.index_of(sol.T)
    if kT - k0 != gt.size - 1 or not np.allclose(ensemble.times[k0:kT + 1], gt, atol=1e-12):
        raise AlignmentError("ensemble grid must match the field's time grid", module="fbsde",
                             operation="realize_decoupling")
    model = sol.model
    field: MarkovianForwardField = sol.meta["field"]
    rho = model.rho
    n, N = ensemble.n_paths, ensemble.n_steps
    cols = kT - k0 + 1
    X = np.empty((n, cols))
    Y = np.empty((n, cols))
    Z1 = np.empty((n, cols))
    Z2 = np.empty((n, cols))
    pis = np.zeros((n, N))
    X[:, 0] = xi
    lo = np.array([sol.grid_v[0], sol.grid_x[0]])
    hi = np.array([sol.grid_v[-1], sol.grid_x[-1]])
    dt = ensemble.dt
    for c in range(cols):
        k = k0 + c
        pts = np.clip(np.stack([ensemble.V[:, k], X[:, c]], axis=-1), lo, hi)
        interp = lambda a: RegularGridInterpolator((sol.grid_v, sol.grid_x), a, method="cubic")(pts)  # noqa: E731
        Y[:, c] = interp(sol.y[c])
        Z1[:, c] = interp(sol.z1[c])
        Z2[:, c] = interp(sol.z2[c])
        if k < kT:
            V = ensemble.V[:, k]
            s = X[:, c] + Y[:, c]
            t = gt[c]
            ux = field.U_x(t, V, s)
            uxx = field.U_xx(t, V, s)
            uxv = field.evaluate("u_xv", t, V, s)
            th = model.theta_on(V)
            pis[:, k] = -(ux * th + rho * uxv) / uxx - Z1[:, c]
            X[:, c + 1] = X[:, c] + pis[:, k] * (th * dt + ensemble.dW1[:, k])
    bound = float(np.max(np.abs(pis))) + 1e-9
    return replace(sol, xi=float(xi), X=X, Y=Y, Z1=Z1, Z2=Z2, path_index=np.arange(k0, kT + 1),
                   pi_star=ControlPath(pis, bound, "pi_star"), ensemble=ensemble)
