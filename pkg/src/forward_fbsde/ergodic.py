"""Stationary Markovian solution of the quadratic ergodic BSDE.

Writing ``Y_t = y(V_t)`` and matching Itô drifts gives, with ``b = l - rho*theta``,

    0.5 y'' + b y' + 0.5 (1 - rho^2) y'^2 - 0.5 theta^2 = lam,

with ``Z = (rho y', sqrt(1 - rho^2) y')``.  Two independent solvers are offered.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import spsolve

from ._interp import interp
from .errors import GridError, ModelError, SolverError
from .forward_core import ExpForwardProcess
from .market import CACHE_ENV, MarketModel, PathEnsemble, mean_se, simulate_feedback

Array = np.ndarray

DEFAULT_GRID = (-6.0, 6.0, 1201)
DISCOUNTS = (0.1, 0.05, 0.025)
METHODS = ("ode-grid", "vanishing-discount-mc")


@dataclass(frozen=True, eq=False)
class ErgodicSolution:
    grid_v: Array
    y: Array
    z1: Array
    z2: Array
    lam: float
    method: str
    residual: float
    rho: float
    meta: dict = field(default_factory=dict)

    @property
    def v0(self) -> float:
        return float(self.grid_v[self.grid_v.size // 2])

    @property
    def dy(self) -> Array:
        return np.gradient(self.y, self.grid_v, edge_order=2)

    def y_at(self, v):
        """Piecewise-linear y with linear-growth extension beyond the grid."""
        g, y = self.grid_v, self.y
        v = np.asarray(v, dtype=float)
        out = interp(g, y, v)
        lo_slope = (y[1] - y[0]) / (g[1] - g[0])
        hi_slope = (y[-1] - y[-2]) / (g[-1] - g[-2])
        out = np.where(v < g[0], y[0] + lo_slope * (v - g[0]), out)
        return np.where(v > g[-1], y[-1] + hi_slope * (v - g[-1]), out)

    def z1_at(self, v):
        return interp(self.grid_v, self.z1, v)

    def z2_at(self, v):
        return interp(self.grid_v, self.z2, v)

    def check_invariants(self) -> dict:
        growth = float(np.max(np.abs(self.y) / (1.0 + np.abs(self.grid_v))))
        dy = self.dy
        chain = max(float(np.max(np.abs(self.z1 - self.rho * dy))),
                    float(np.max(np.abs(self.z2 - np.sqrt(1 - self.rho**2) * dy))))
        return {"linear_growth_ratio": growth, "z_sup": float(max(np.abs(self.z1).max(), np.abs(self.z2).max())),
                "chain_rule_defect": chain}


def _grid_from_spec(grid) -> Array:
    if grid is None:
        grid = DEFAULT_GRID
    if isinstance(grid, dict):
        grid = (grid["v_min"], grid["v_max"], grid["n"])
    if isinstance(grid, np.ndarray):
        g = grid.astype(float)
    else:
        lo, hi, n = grid
        if int(n) < 5 or not hi > lo:
            raise GridError("ergodic grid needs v_max > v_min and at least 5 nodes", module="ergodic",
                            operation="solve_ergodic")
        g = np.linspace(float(lo), float(hi), int(n))
    if g.size % 2 == 0:
        raise GridError("ergodic grid needs an odd node count so the midpoint is a node", module="ergodic",
                        operation="solve_ergodic")
    if np.any(np.diff(g) <= 0):
        raise GridError("ergodic grid must be increasing", module="ergodic", operation="solve_ergodic")
    return g


def _check_model(model: MarketModel):
    if model.theta_is_constant():
        return
    c = model.dissipativity if model.dissipativity is not None else model.measured_dissipativity()
    if not c > 0:
        raise ModelError("factor drift is not dissipative; the ergodic problem is ill-posed", module="ergodic",
                         operation="solve_ergodic")


def _pack(model, g, y, lam, method, residual, meta) -> ErgodicSolution:
    dy = np.gradient(y, g, edge_order=2)
    rp = np.sqrt(1.0 - model.rho**2)
    return ErgodicSolution(g, y, model.rho * dy, rp * dy, float(lam), method, float(residual), model.rho, meta)


def _newton(model: MarketModel, g: Array, tol: float, max_iter: int, y_init: Array | None, lam_init: float | None):
    n = g.size
    h = g[1] - g[0]
    if not np.allclose(np.diff(g), h, rtol=1e-9, atol=0):
        raise GridError("ode-grid method requires a uniform grid", module="ergodic", operation="solve_ergodic")
    th = model.theta_on(g)
    b = model.drift_on(g) - model.rho * th
    q = 1.0 - model.rho**2
    m = n // 2
    y = np.zeros(n) if y_init is None else np.array(y_init, dtype=float)
    lam = -0.5 * float(np.mean(th**2)) if lam_init is None else float(lam_init)

    def residual(y, lam):
        d1 = (y[2:] - y[:-2]) / (2 * h)
        d2 = (y[2:] - 2 * y[1:-1] + y[:-2]) / h**2
        F = np.empty(n + 1)
        F[1:-2] = 0.5 * d2 + b[1:-1] * d1 + 0.5 * q * d1**2 - 0.5 * th[1:-1] ** 2 - lam
        F[0] = (y[0] - 2 * y[1] + y[2]) / h**2
        F[n - 1] = (y[-1] - 2 * y[-2] + y[-3]) / h**2
        F[n] = y[m]
        return F, d1

    interior = np.arange(1, n - 1)
    F, d1 = residual(y, lam)
    err = float(np.max(np.abs(F)))
    for it in range(max_iter):
        if err <= tol:
            return y, lam, err, it
        adv = (b[1:-1] + q * d1) / (2 * h)
        rows = np.concatenate([interior, interior, interior, interior,
                               [0, 0, 0, n - 1, n - 1, n - 1, n]])
        cols = np.concatenate([interior - 1, interior, interior + 1, np.full(n - 2, n),
                               [0, 1, 2, n - 1, n - 2, n - 3, m]])
        vals = np.concatenate([0.5 / h**2 - adv, np.full(n - 2, -1.0 / h**2), 0.5 / h**2 + adv,
                               np.full(n - 2, -1.0),
                               np.array([1.0, -2.0, 1.0, 1.0, -2.0, 1.0]) / h**2, [1.0]])
        J = sp.csc_matrix((vals, (rows, cols)), shape=(n + 1, n + 1))
        step = spsolve(J, -F)
        if not np.all(np.isfinite(step)):
            raise SolverError(f"singular Newton system at iteration {it}; last residual {err:.3e}",
                              module="ergodic", operation="solve_ergodic")
        alpha = 1.0
        while True:
            y_new, lam_new = y + alpha * step[:n], lam + alpha * step[n]
            F_new, d1_new = residual(y_new, lam_new)
            err_new = float(np.max(np.abs(F_new)))
            if err_new < err or alpha < 1e-6:
                break
            alpha *= 0.5
        y, lam, F, d1, err = y_new, lam_new, F_new, d1_new, err_new
    if err <= tol:
        return y, lam, err, max_iter
    raise SolverError(f"Newton did not converge in {max_iter} iterations; last residual {err:.3e}",
                      module="ergodic", operation="solve_ergodic")


def _discounted_value(model: MarketModel, g: Array, discount: float, dt: float, horizon: float,
                      eps: Array) -> Array:
    """Backward recursion for the discounted equation with sampled one-step transitions."""
    th = model.theta_on(g)
    b = model.drift_on(g) - model.rho * th
    q = 1.0 - model.rho**2
    sq = np.sqrt(dt)
    pts = (g + b * dt)[:, None] + sq * eps[None, :]
    w = eps / (sq * eps.size)
    src = -0.5 * th**2
    y = np.zeros_like(g)
    for _ in range(int(np.ceil(horizon / dt))):
        vals = np.interp(pts, g, y)
        ey = vals.mean(axis=1)
        z = vals @ w
        y = (ey + dt * (src + 0.5 * q * z**2)) / (1.0 + discount * dt)
    return y


def solve_ergodic(model: MarketModel, grid=None, method: str = "ode-grid", tol: float = 1e-10, *,
                  max_iter: int = 100, initial: tuple[Array, float] | None = None,
                  discounts: tuple[float, ...] = DISCOUNTS, mc_dt: float = 0.02, mc_samples: int = 64,
                  horizon_factor: float = 6.0, seed: int = 0, cache_dir: str | Path | None = None) -> ErgodicSolution:
    if method not in METHODS:
        raise ModelError(f"unknown ergodic method {method!r}; choose one of {METHODS}", module="ergodic",
                         operation="solve_ergodic")
    _check_model(model)
    if method == "vanishing-discount-mc" and grid is None:
        grid = (-6.0, 6.0, 601)
    g = _grid_from_spec(grid)

    key = None
    cdir = Path(cache_dir) if cache_dir else (Path(os.environ[CACHE_ENV]) if os.environ.get(CACHE_ENV) else None)
    fp = model.fingerprint()
    if cdir is not None and fp is not None and initial is None:
        payload = {"model": fp, "grid": [g[0], g[-1], g.size], "method": method, "tol": tol,
                   "discounts": list(discounts), "mc_dt": mc_dt, "mc_samples": mc_samples,
                   "horizon_factor": horizon_factor, "seed": seed}
        key = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:32]
        hit = cdir / f"ergodic-{key}.npz"
        if hit.exists():
            with np.load(hit, allow_pickle=False) as d:
                meta = json.loads(str(d["meta"]))
                return ErgodicSolution(d["grid_v"], d["y"], d["z1"], d["z2"], float(d["lam"]), method,
                                       float(d["residual"]), model.rho, meta)

    if method == "ode-grid":
        y0, l0 = initial if initial is not None else (None, None)
        y, lam, err, its = _newton(model, g, tol, max_iter, y0, l0)
        sol = _pack(model, g, y, lam, method, err, {"iterations": its})
    else:
        rng = np.random.Generator(np.random.Philox(key=seed))
        half = rng.standard_normal(mc_samples // 2)
        eps = np.concatenate([half, -half])
        eps /= np.sqrt(np.mean(eps**2))
        m = g.size // 2
        vals, profiles = [], []
        for d in discounts:
            yd = _discounted_value(model, g, d, mc_dt, horizon_factor / d, eps)
            vals.append(d * yd[m])
            profiles.append(yd - yd[m])
        coeffs = np.polyfit(np.asarray(discounts), np.asarray(vals), len(discounts) - 1)
        lam = float(coeffs[-1])
        y = profiles[-1]
        spread = float(abs(vals[-1] - lam))
        sol = _pack(model, g, y, lam, method, spread,
                    {"discounts": list(discounts), "discounted_lambdas": [float(v) for v in vals],
                     "mc_dt": mc_dt, "mc_samples": mc_samples, "seed": seed})

    if key is not None:
        cdir.mkdir(parents=True, exist_ok=True)
        tmp = cdir / f".ergodic-{key}.{os.getpid()}.npz"
        np.savez(tmp, grid_v=sol.grid_v, y=sol.y, z1=sol.z1, z2=sol.z2, lam=sol.lam, residual=sol.residual,
                 meta=json.dumps(sol.meta, sort_keys=True))
        tmp.replace(cdir / f"ergodic-{key}.npz")
    return sol


def ergodic_residual(sol: ErgodicSolution, model: MarketModel) -> float:
    """Max interior-node gap between the Itô drift of y(V) and the driver.

    The drift uses cubic-spline derivatives of the nodal y while the driver
    uses the stored z, so the value measures truncation error, not just the
    algebraic residual of the discrete system.
    """
    g = sol.grid_v
    spline = CubicSpline(g, sol.y, bc_type="not-a-knot")
    d1 = spline(g, 1)
    d2 = spline(g, 2)
    th = model.theta_on(g)
    ito = model.drift_on(g) * d1 + 0.5 * d2
    driver = th * sol.z1 + 0.5 * th**2 - 0.5 * sol.z2**2 + sol.lam
    return float(np.max(np.abs(ito - driver)[1:-1]))


def optimal_policy(sol: ErgodicSolution, model: MarketModel, gamma: float | None = None):
    """No-endowment optimal investment ``(theta + z1)/gamma`` as a function of v."""
    gamma = model.gamma if gamma is None else gamma
    return lambda v: (model.theta_on(v) + sol.z1_at(v)) / gamma


def long_run_check(sol: ErgodicSolution, model: MarketModel, ensemble: PathEnsemble, x0: float = 0.0) -> float:
    """``|E[U(T, X*_T)] - U(0, x0)| / SE`` for the no-endowment optimum."""
    proc = ExpForwardProcess(model.gamma, sol)
    pol = optimal_policy(sol, model)
    bound = (model.theta_bound + float(np.abs(sol.z1).max())) / model.gamma + 1e-12
    X, _ = simulate_feedback(model, ensemble, x0, lambda k, v, x: pol(v), bound)
    uT = proc.U(ensemble.horizon, ensemble.V[:, -1], X[:, -1])
    mean, se = mean_se(uT)
    target = float(proc.U(ensemble.t0, ensemble.V[0, 0], x0))
    if se == 0.0:
        return abs(mean - target)
    return abs(mean - target) / se


def export_csv(sol: ErgodicSolution, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"lambda={sol.lam!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["v", "y", "z1", "z2"])
        for row in zip(sol.grid_v, sol.y, sol.z1, sol.z2):
            w.writerow([repr(float(a)) for a in row])
    return path


def read_csv(path: str | Path) -> tuple[float, Array]:
    path = Path(path)
    with path.open() as fh:
        head = fh.readline().strip()
        if not head.startswith("lambda="):
            raise GridError(f"{path}: missing lambda header", module="ergodic", operation="read_csv")
        lam = float(head.split("=", 1)[1])
        rows = list(csv.DictReader(fh))
    table = np.array([[float(r[k]) for k in ("v", "y", "z1", "z2")] for r in rows])
    return lam, table
