"""Complete market driven by ``W1`` alone with a deterministic market price of risk.

Here ``Y_s = E^{Q0}[P | F_s]`` where ``Q0`` removes the drift ``theta``, the
optimal density is the minimal martingale density and ``q* = 0``.  Initial
values come from reweighting the outer ensemble; conditional values at later
checkpoints come from restarting fresh inner paths from each outer prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from ..errors import RegimeError
from ..forward_core import ExpForwardProcess
from ..market import ControlPath, PathEnsemble, density_control_variate
from .types import DualSolution, EndowmentSpec, PathView, PrimalSolution


@dataclass(frozen=True)
class _FlatErgodic:
    """Stand-in ergodic solution with y = 0 for deterministic market prices of risk."""

    lam: float = 0.0
    grid_v: np.ndarray = np.array([-np.inf, np.inf])

    def y_at(self, v):
        return np.zeros(np.shape(v))

    def z1_at(self, v):
        return np.zeros(np.shape(v))

    z2_at = z1_at


class DeterministicExpProcess(ExpForwardProcess):
    """``-exp(-gamma x + 0.5 int_0^t theta(r)^2 dr)``: exponential forward process of a complete market."""

    def __init__(self, gamma: float, theta_fn: Callable[[float], float], n_quad: int = 2001):
        super().__init__(gamma, _FlatErgodic())
        object.__setattr__(self, "_theta_fn", theta_fn)
        object.__setattr__(self, "_n_quad", n_quad)

    def integrated_theta2(self, t):
        t = np.asarray(t, dtype=float)
        flat = t.ravel()
        out = np.empty_like(flat)
        for i, s in enumerate(flat):
            r = np.linspace(0.0, s, self._n_quad)
            out[i] = trapezoid(np.asarray(self._theta_fn(r), dtype=float) ** 2 * np.ones_like(r), r) if s > 0 else 0.0
        return out.reshape(t.shape)

    def exponent(self, t, v):
        return 0.5 * self.integrated_theta2(t) + 0.0 * np.asarray(v, dtype=float)


def _theta_fn(theta) -> Callable[[np.ndarray], np.ndarray]:
    if callable(theta):
        return lambda t: np.broadcast_to(np.asarray(theta(np.asarray(t, dtype=float)), dtype=float), np.shape(t))
    value = float(theta)
    return lambda t: np.full(np.shape(t), value)


def _restart_normals(seed: int, checkpoint: int, n_inner: int, n_steps: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 1, checkpoint]))
    return gen.standard_normal((n_inner, n_steps))


def solve_complete_market(theta, P: EndowmentSpec, xi: float, eta: float, ensemble: PathEnsemble, *,
                          gamma: float = 1.0, t_index: int = 0, checkpoints: int = 5, n_outer: int = 500,
                          n_inner: int = 4000, shift: float = 0.05) -> tuple[PrimalSolution, DualSolution]:
    if P.kind not in ("constant", "terminal-path-function") or (P.kind != "constant" and P.filtration != "W1"):
        raise RegimeError("complete market needs a constant or W1-measurable path endowment",
                          module="fbsde", operation="solve_complete_market")
    if not eta > 0:
        raise RegimeError("eta must be positive", module="fbsde", operation="solve_complete_market")
    th_fn = _theta_fn(theta)
    kT = ensemble.index_of(P.maturity)
    times = ensemble.times
    dt = ensemble.dt
    th_grid = th_fn(times[:-1])
    W1 = ensemble.W1()

    # minimal density E(-int theta dW1) from t_index
    inc = -(th_grid[None, t_index:kT] * ensemble.dW1[:, t_index:kT]) - 0.5 * th_grid[None, t_index:kT] ** 2 * dt
    logE = np.zeros((ensemble.n_paths, kT - t_index + 1))
    np.cumsum(inc, axis=1, out=logE[:, 1:])
    dens = np.exp(logE)

    payoff = P.on_paths(ensemble, kT)
    # the density has unit mean; regressing it out makes constant claims exact
    Y0, Y0_se = density_control_variate(dens[:, -1] * payoff, dens[:, -1], 1.0)

    proc = DeterministicExpProcess(gamma, th_fn)
    t0 = float(times[t_index])
    eta_hat = float(proc.U_x(t0, 0.0, xi + Y0))
    D = eta * dens

    cps = np.unique(np.linspace(t_index, kT, checkpoints + 1).round().astype(int))
    n_out = min(n_outer, ensemble.n_paths)
    Yc = np.empty((n_out, cps.size))
    Zc = np.empty((n_out, cps.size))
    for c, k in enumerate(cps):
        if k == kT:
            Yc[:, c] = payoff[:n_out]
            Zc[:, c] = 0.0
            continue
        steps = kT - k
        z = _restart_normals(ensemble.seed, int(k), n_inner, steps)
        cont = np.cumsum(z * np.sqrt(dt) - th_grid[None, k:kT] * dt, axis=1)
        for i in range(n_out):
            base = np.broadcast_to(W1[i, : k + 1], (n_inner, k + 1))
            vals = []
            for s in (0.0, shift, -shift):
                w = np.concatenate([base, W1[i, k] + s + cont], axis=1)
                view = PathView(times[: kT + 1], w, np.zeros_like(w), np.zeros_like(w))
                vals.append(P._clip(P.payoff(view)) if P.kind != "constant" else np.full(n_inner, P.payoff))
            Yc[i, c] = float(np.mean(vals[0]))
            Zc[i, c] = float(np.mean(vals[1] - vals[2]) / (2 * shift))

    if t_index == 0:
        Yc[:, 0] = Y0
    Dc = eta_hat * dens[:n_out][:, cps - t_index]
    Xc = -proc.conj_z(times[cps][None, :], 0.0, Dc) - Yc

    primal = PrimalSolution(
        "complete", float(Y0), float(xi), t0, float(P.maturity), X=Xc, Y=Yc, Z1=Zc, Z2=np.zeros_like(Zc),
        path_index=cps, q_star=ControlPath(np.zeros((ensemble.n_paths, ensemble.n_steps)), 1.0, "q_star"),
        ensemble=ensemble, endowment=P,
        meta={"Y0_se": Y0_se, "eta_hat": eta_hat, "gamma": gamma, "n_outer": n_out, "n_inner": n_inner,
              "process": proc})
    dual_value = float(proc.conj(t0, 0.0, eta)) + eta * float(Y0)
    # D on every path at the checkpoints; Y~ and Z~ only on the outer rows
    dual = DualSolution(D[:, cps - t_index], Yc, Zc, np.zeros_like(Zc), float(eta), 0.0, cps, ensemble=ensemble,
                        endowment=P, t0=t0, T=float(P.maturity), regime="complete",
                        meta={"dual_value": dual_value, "process": proc, "Y0": float(Y0), "Y0_se": Y0_se})
    return primal, dual
