"""Maps between primal and dual solutions through the marginal-utility relation ``D = U_x(X + Y)``."""

from __future__ import annotations

import numpy as np

from ..errors import AlignmentError, InvariantViolation
from ..forward_core import ConjugatePair, ForwardProcess
from ..market import ControlPath
from .types import DualSolution, PrimalSolution


def _path_grid(sol) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ens = sol.ensemble
    if ens is None or sol.path_index is None:
        raise AlignmentError("solution carries no per-path realisation", module="fbsde", operation="transform")
    idx = np.asarray(sol.path_index)
    t = ens.times[idx][None, :]
    V = ens.V[:, idx]
    return idx, t, V


def _euler_defect(idx: np.ndarray, values: np.ndarray, increments: np.ndarray) -> float:
    """Largest (over steps) path-averaged absolute gap between an Euler step and the realised change."""
    if idx.size < 2:
        return 0.0
    if np.any(np.diff(idx) != 1):
        return float("nan")
    gap = np.diff(values, axis=1) - increments
    return float(np.max(np.mean(np.abs(gap), axis=0)))


def dual_from_primal(primal: PrimalSolution, U: ForwardProcess) -> DualSolution:
    if not primal.has_paths:
        raise AlignmentError("primal solution has no path realisation; pass an ensemble to the solver",
                             module="fbsde", operation="dual_from_primal")
    idx, t, V = _path_grid(primal)
    ens, model = primal.ensemble, primal.model
    s = primal.X + primal.Y
    D = np.asarray(U.U_x(t, V, s), dtype=float)
    bad = ~(D > 0)
    if np.any(bad):
        raise InvariantViolation(f"dual process is non-positive on {int(bad.sum())} path points",
                                 statistic=float(np.nanmin(D)), module="fbsde", operation="dual_from_primal")
    eta_hat = float(np.mean(D[:, 0]))
    # dual forward equation: dD = -D theta dW1 - (U_xx Z2 + alpha2_x) dW2
    k = idx[:-1]
    th = model.theta_on(V[:, :-1])
    c = -(np.asarray(U.U_xx(t[:, :-1], V[:, :-1], s[:, :-1])) * primal.Z2[:, :-1]
          + np.asarray(U.alpha_x(t[:, :-1], V[:, :-1], s[:, :-1])[1]))
    inc = -D[:, :-1] * th * ens.dW1[:, k] - c * ens.dW2[:, k]
    residual = _euler_defect(idx, D, inc)
    return DualSolution(D, primal.Y.copy(), primal.Z1.copy(), primal.Z2.copy(), eta_hat, residual, idx,
                        model=model, ensemble=ens, endowment=primal.endowment, t0=primal.t0, T=primal.T,
                        regime=primal.regime, meta={"xi": primal.xi, "Y0": primal.Y0})


def primal_from_dual(dual: DualSolution, pair: ConjugatePair) -> PrimalSolution:
    idx, t, V = _path_grid(dual)
    if np.any(~(dual.D > 0)):
        raise InvariantViolation("dual process must be positive", statistic=float(np.min(dual.D)), module="fbsde",
                                 operation="primal_from_dual")
    ens, model = dual.ensemble, dual.model
    D = dual.D
    s = -np.asarray(pair.deriv_tilde_z(t, V, D), dtype=float)
    X = s - dual.Y_tilde
    xi_hat = float(np.mean(X[:, 0]))
    # optimal allocation written through the conjugate: U_x/U_xx = -D U~_zz, 1/U_xx = -U~_zz
    uzz = np.asarray(pair.tilde_zz(t[:, :-1], V[:, :-1], D[:, :-1]), dtype=float)
    th = model.theta_on(V[:, :-1])
    a1 = np.asarray(pair.primal.alpha_x(t[:, :-1], V[:, :-1], s[:, :-1])[0], dtype=float)
    pis = D[:, :-1] * uzz * th + a1 * uzz - dual.Z1_tilde[:, :-1]
    k = idx[:-1]
    inc = pis * (th * ens.dt + ens.dW1[:, k])
    residual = _euler_defect(idx, X, inc)
    full = np.zeros((ens.n_paths, ens.n_steps))
    full[:, k] = pis
    pi_star = ControlPath(full, float(np.max(np.abs(pis))) + 1e-9 if pis.size else 1.0, "pi_star")
    return PrimalSolution(dual.regime, float(np.mean(dual.Y_tilde[:, 0])), xi_hat, dual.t0, dual.T, X=X,
                          Y=dual.Y_tilde.copy(), Z1=dual.Z1_tilde.copy(), Z2=dual.Z2_tilde.copy(), path_index=idx,
                          pi_star=pi_star, bsde_residual=residual, model=model, ensemble=ens,
                          endowment=dual.endowment, meta={"eta": dual.eta0, "xi_hat": xi_hat})
