"""Single-factor incomplete market: model, path ensembles, wealth and densities.

The stock is driven by ``W1`` and the factor ``V`` loads on ``W1`` with
correlation ``rho`` and on an orthogonal ``W2``.  Paths are generated with
one counter-based Philox stream per path index, so enlarging an ensemble
leaves the existing paths untouched.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import AlignmentError, DomainError, GridError, ModelError, ModelEvaluationError, NumericRangeError
from .functions import NamedFunction

Array = np.ndarray

CACHE_ENV = "FORWARD_FBSDE_CACHE"
DEFAULT_DT = 1.0 / 250.0
DEFAULT_N_PATHS = 100_000
CHECK_GRID = np.linspace(-6.0, 6.0, 241)


def mean_se(sample: Array) -> tuple[float, float]:
    """Sample mean and its standard error (pairwise summation via numpy)."""
    sample = np.ascontiguousarray(sample, dtype=float).ravel()
    n = sample.size
    mean = float(np.mean(sample))
    if n < 2:
        return mean, 0.0
    return mean, float(np.std(sample, ddof=1) / np.sqrt(n))


def density_control_variate(samples: np.ndarray, control: np.ndarray, control_mean: float) -> tuple[float, float]:
    """Mean and standard error of ``samples`` after regressing out a control with known mean."""
    cov = np.cov(samples, control)
    beta = cov[0, 1] / cov[1, 1] if cov[1, 1] > 0 else 0.0
    return mean_se(samples - beta * (control - control_mean))



@dataclass(frozen=True)
class MarketModel:
    theta: Callable[[Array], Array]
    drift_l: Callable[[Array], Array]
    rho: float
    gamma: float
    theta_bound: float
    lipschitz_theta: float
    dissipativity: float | None = None
    v0: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ModelError(f"gamma must be positive, got {self.gamma}", module="market", operation="MarketModel")
        if not 0.0 <= self.rho <= 1.0:
            raise ModelError(f"rho must lie in [0, 1], got {self.rho}", module="market", operation="MarketModel")
        if not self.theta_bound > 0 or not self.lipschitz_theta >= 0:
            raise ModelError("theta_bound must be positive and lipschitz_theta non-negative",
                             module="market", operation="MarketModel")
        th = self.theta_on(CHECK_GRID)
        excess = float(np.max(np.abs(th))) - self.theta_bound
        if excess > 1e-12:
            raise ModelError(f"|theta| exceeds declared bound {self.theta_bound} by {excess:.3g} on the check grid",
                             module="market", operation="MarketModel")
        if self.dissipativity is not None:
            measured = self.measured_dissipativity()
            if measured < self.dissipativity - 1e-12:
                raise ModelError(
                    f"declared dissipativity {self.dissipativity} but drift only achieves {measured:.6g}",
                    module="market", operation="MarketModel")

    @property
    def rho_perp(self) -> float:
        return float(np.sqrt(max(0.0, 1.0 - self.rho**2)))

    def theta_on(self, v: Array) -> Array:
        out = np.broadcast_to(np.asarray(self.theta(np.asarray(v, dtype=float)), dtype=float), np.shape(v))
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError("theta returned non-finite values", module="market", operation="theta")
        return out

    def drift_on(self, v: Array) -> Array:
        out = np.broadcast_to(np.asarray(self.drift_l(np.asarray(v, dtype=float)), dtype=float), np.shape(v))
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError("factor drift returned non-finite values", module="market", operation="drift_l")
        return out

    def measured_dissipativity(self, grid: Array = CHECK_GRID[::4]) -> float:
        """Largest C with (l(v)-l(w))(v-w) <= -C|v-w|^2 over all grid pairs."""
        lv = self.drift_on(grid)
        dv = grid[:, None] - grid[None, :]
        dl = lv[:, None] - lv[None, :]
        mask = dv != 0
        return float(np.min(-(dl[mask] * dv[mask]) / dv[mask] ** 2))

    def theta_is_constant(self) -> bool:
        th = self.theta_on(CHECK_GRID)
        return bool(np.ptp(th) == 0.0)

    def theta_is_zero(self) -> bool:
        return bool(np.all(self.theta_on(CHECK_GRID) == 0.0))

    def describe(self) -> dict | None:
        """Stable description for hashing; ``None`` if a coefficient is an anonymous callable."""
        if not (isinstance(self.theta, NamedFunction) and isinstance(self.drift_l, NamedFunction)):
            return None
        return {
            "theta": self.theta.spec(),
            "drift_l": self.drift_l.spec(),
            "rho": self.rho,
            "gamma": self.gamma,
            "theta_bound": self.theta_bound,
            "lipschitz_theta": self.lipschitz_theta,
            "dissipativity": self.dissipativity,
            "v0": self.v0,
        }

    def fingerprint(self) -> str | None:
        desc = self.describe()
        if desc is None:
            return None
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    times: Array
    dW1: Array
    dW2: Array
    V: Array
    seed: int
    n_paths: int
    model_fingerprint: str | None = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def W1(self) -> Array:
        return _cumulative(self.dW1)

    def W2(self) -> Array:
        return _cumulative(self.dW2)

    def index_of(self, t: float) -> int:
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise AlignmentError(f"time {t} is not a grid point of the ensemble", module="market", operation="index_of")
        return k

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.dW1, self.dW2, self.V):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.seed).encode())
        return h.hexdigest()

    def check_invariants(self, model: MarketModel) -> dict:
        """Re-run the Euler recursion and the seeded increment-mean bound."""
        dt = self.dt
        expected = self.V[:, :-1] + model.drift_on(self.V[:, :-1]) * dt + model.rho * self.dW1 + model.rho_perp * self.dW2
        euler_exact = bool(np.array_equal(expected, self.V[:, 1:]))
        limit = 4.0 * np.sqrt(dt / self.n_paths)
        worst = max(float(np.max(np.abs(self.dW1.mean(axis=0)))), float(np.max(np.abs(self.dW2.mean(axis=0)))))
        return {"euler_exact": euler_exact, "max_increment_mean": worst, "increment_mean_limit": float(limit),
                "increment_means_ok": worst <= limit}


def _cumulative(increments: Array) -> Array:
    out = np.zeros((increments.shape[0], increments.shape[1] + 1))
    np.cumsum(increments, axis=1, out=out[:, 1:])
    return out


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant control: ``values[:, k]`` acts on the step ``[t_k, t_{k+1})``."""

    values: Array
    bound: float
    name: str = field(default="control")

    def __post_init__(self):
        if not self.bound > 0:
            raise DomainError("control bound must be positive", module="market", operation="ControlPath")
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise AlignmentError("control values must be a 2-D (paths, steps) array", module="market",
                                 operation="ControlPath")
        if not np.all(np.isfinite(vals)):
            raise DomainError(f"{self.name} has non-finite values", module="market", operation="ControlPath")
        peak = float(np.max(np.abs(vals))) if vals.size else 0.0
        if peak > self.bound * (1 + 1e-12):
            raise DomainError(f"{self.name} reaches {peak:.6g}, above its admissibility cap {self.bound}",
                              module="market", operation="ControlPath")
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value: float, ensemble: PathEnsemble, bound: float | None = None, name: str = "control"):
        vals = np.broadcast_to(np.float64(value), (ensemble.n_paths, ensemble.n_steps))
        return cls(vals, bound if bound is not None else max(abs(value), 1.0), name)

    @classmethod
    def feedback(cls, fn: Callable[[float, Array], Array], ensemble: PathEnsemble, bound: float,
                 name: str = "control"):
        """Control given as a function of (time, factor state), evaluated at left endpoints."""
        vals = np.empty((ensemble.n_paths, ensemble.n_steps))
        for k in range(ensemble.n_steps):
            vals[:, k] = fn(float(ensemble.times[k]), ensemble.V[:, k])
        return cls(vals, bound, name)

    def shifted(self, other: "ControlPath", eps: float) -> "ControlPath":
        return ControlPath(self.values + eps * other.values, self.bound + abs(eps) * other.bound, self.name)

    def check_aligned(self, ensemble: PathEnsemble):
        if self.values.shape != (ensemble.n_paths, ensemble.n_steps):
            raise AlignmentError(
                f"{self.name} has shape {self.values.shape}, ensemble needs {(ensemble.n_paths, ensemble.n_steps)}",
                module="market", operation="check_aligned")


def _ensemble_key(model: MarketModel, t0, horizon, dt, n_paths, seed) -> str | None:
    fp = model.fingerprint()
    if fp is None:
        return None
    payload = json.dumps({"model": fp, "t0": t0, "horizon": horizon, "dt": dt, "n_paths": n_paths,
                          "seed": seed, "layout": 1}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _cache_dir(cache_dir: str | Path | None) -> Path | None:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else None


def _path_normals(seed: int, path_id: int, n: int) -> Array:
    bitgen = np.random.Philox(key=seed, counter=[0, 0, 0, path_id])
    return np.random.Generator(bitgen).standard_normal(n)


def simulate_factor_paths(model: MarketModel, t0: float, horizon: float, dt: float, n_paths: int, seed: int,
                          *, threads: int = 1, cache_dir: str | Path | None = None) -> PathEnsemble:
    if not dt > 0:
        raise GridError("dt must be positive", module="market", operation="simulate_factor_paths")
    if not horizon > t0:
        raise GridError("horizon must exceed t0", module="market", operation="simulate_factor_paths")
    if dt >= horizon - t0:
        raise GridError(f"dt={dt} leaves no interior step on [{t0}, {horizon}]", module="market",
                        operation="simulate_factor_paths")
    if n_paths < 1:
        raise GridError("n_paths must be at least 1", module="market", operation="simulate_factor_paths")
    if seed < 0:
        raise GridError("seed must be non-negative", module="market", operation="simulate_factor_paths")
    n_steps = int(round((horizon - t0) / dt))
    if abs(n_steps * dt - (horizon - t0)) > 1e-9 * (horizon - t0):
        raise GridError(f"(horizon - t0) = {horizon - t0} is not a multiple of dt = {dt}", module="market",
                        operation="simulate_factor_paths")

    key = _ensemble_key(model, t0, horizon, dt, n_paths, seed)
    cdir = _cache_dir(cache_dir)
    if key is not None and cdir is not None:
        cached = cdir / f"ensemble-{key[:32]}.npz"
        if cached.exists():
            with np.load(cached) as data:
                return PathEnsemble(data["times"], data["dW1"], data["dW2"], data["V"], seed, n_paths,
                                    model.fingerprint())

    times = t0 + dt * np.arange(n_steps + 1)
    dW1 = np.empty((n_paths, n_steps))
    dW2 = np.empty((n_paths, n_steps))
    sq = np.sqrt(dt)

    def fill(lo, hi):
        for i in range(lo, hi):
            z = _path_normals(seed, i, 2 * n_steps)
            dW1[i] = z[:n_steps] * sq
            dW2[i] = z[n_steps:] * sq

    threads = max(1, int(threads))
    bounds = np.linspace(0, n_paths, threads + 1).astype(int)
    if threads == 1:
        fill(0, n_paths)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda ab: fill(*ab), zip(bounds[:-1], bounds[1:])))

    V = np.empty((n_paths, n_steps + 1))
    V[:, 0] = model.v0
    rho, rho_perp = model.rho, model.rho_perp
    for k in range(n_steps):
        V[:, k + 1] = V[:, k] + model.drift_on(V[:, k]) * dt + rho * dW1[:, k] + rho_perp * dW2[:, k]
    if not np.all(np.isfinite(V[:, -1])):
        raise ModelEvaluationError("factor paths left the finite range", module="market",
                                   operation="simulate_factor_paths")

    ens = PathEnsemble(times, dW1, dW2, V, seed, n_paths, model.fingerprint())
    if key is not None and cdir is not None:
        cdir.mkdir(parents=True, exist_ok=True)
        tmp = cdir / f".ensemble-{key[:32]}.{os.getpid()}.npz"
        np.savez(tmp, times=times, dW1=dW1, dW2=dW2, V=V)
        tmp.replace(cdir / f"ensemble-{key[:32]}.npz")
    return ens


def wealth_path(model: MarketModel, ensemble: PathEnsemble, pi: ControlPath, x0: float) -> Array:
    """Euler wealth ``X_{k+1} = X_k + pi_k (theta(V_k) dt + dW1_k)``; shape (paths, steps+1)."""
    pi.check_aligned(ensemble)
    gains = pi.values * (model.theta_on(ensemble.V[:, :-1]) * ensemble.dt + ensemble.dW1)
    X = np.empty((ensemble.n_paths, ensemble.n_steps + 1))
    X[:, 0] = x0
    np.cumsum(gains, axis=1, out=X[:, 1:])
    X[:, 1:] += x0
    return X


def gains_path(model: MarketModel, ensemble: PathEnsemble, pi: ControlPath, t_index: int = 0) -> Array:
    """Stochastic integral of ``pi`` against ``theta dt + dW1`` started at ``t_index``."""
    G = wealth_path(model, ensemble, pi, 0.0)
    return G[:, t_index:] - G[:, [t_index]]


def log_density_increments(model: MarketModel, ensemble: PathEnsemble, q: Array) -> Array:
    th = model.theta_on(ensemble.V[:, :-1])
    return -(th * ensemble.dW1 + q * ensemble.dW2) - 0.5 * (th**2 + q**2) * ensemble.dt


def density_path(model: MarketModel, ensemble: PathEnsemble, q: ControlPath, t_index: int = 0) -> Array:
    """State-price density ``M^{t,q}`` on the grid from ``t_index`` to the horizon, shape (paths, steps+1-t)."""
    q.check_aligned(ensemble)
    if not 0 <= t_index <= ensemble.n_steps:
        raise AlignmentError(f"t_index {t_index} outside 0..{ensemble.n_steps}", module="market",
                             operation="density_path")
    inc = log_density_increments(model, ensemble, q.values)[:, t_index:]
    logM = np.zeros((ensemble.n_paths, inc.shape[1] + 1))
    np.cumsum(inc, axis=1, out=logM[:, 1:])
    if not np.all(np.isfinite(logM)) or np.max(np.abs(logM)) > 700.0:
        raise NumericRangeError("log-density left the representable range", module="market",
                                operation="density_path")
    M = np.exp(logM)
    if np.any(M <= 0):
        raise NumericRangeError("density underflowed to zero", module="market", operation="density_path")
    return M


def martingale_residual(ensemble: PathEnsemble, M: Array, A: Array) -> float:
    """``|mean(M_T A_T)| / SE``; accepts full path arrays or terminal columns."""
    M = np.asarray(M, dtype=float)
    A = np.asarray(A, dtype=float)
    mT = M[:, -1] if M.ndim == 2 else M
    aT = A[:, -1] if A.ndim == 2 else A
    if mT.shape != (ensemble.n_paths,) or aT.shape != (ensemble.n_paths,):
        raise AlignmentError("density and gains must have one terminal value per path", module="market",
                             operation="martingale_residual")
    mean, se = mean_se(mT * aT)
    if se == 0.0:
        if mean != 0.0:
            warnings.warn("martingale_residual: zero-variance input, reporting |mean|", RuntimeWarning,
                          stacklevel=2)
        return abs(mean)
    return abs(mean) / se


def simulate_feedback(model: MarketModel, ensemble: PathEnsemble, x0: float | Array,
                      policy: Callable[[int, Array, Array], Array], bound: float,
                      t_index: int = 0, stop_index: int | None = None) -> tuple[Array, ControlPath]:
    """Wealth under a feedback rule ``pi_k = policy(k, V_k, X_k)``; returns (X, realised control).

    Steps before ``t_index`` carry zero control and constant wealth.
    """
    stop = ensemble.n_steps if stop_index is None else stop_index
    X = np.empty((ensemble.n_paths, ensemble.n_steps + 1))
    x0 = np.asarray(x0, dtype=float)
    X[:, : t_index + 1] = x0[:, None] if x0.ndim else x0
    pis = np.zeros((ensemble.n_paths, ensemble.n_steps))
    dt = ensemble.dt
    for k in range(t_index, ensemble.n_steps):
        if k < stop:
            pis[:, k] = policy(k, ensemble.V[:, k], X[:, k])
        X[:, k + 1] = X[:, k] + pis[:, k] * (model.theta_on(ensemble.V[:, k]) * dt + ensemble.dW1[:, k])
    return X, ControlPath(pis, bound, "pi")


def export_terminal_csv(path: str | Path, ensemble: PathEnsemble, X: Array, M: Array) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xT = X[:, -1] if np.ndim(X) == 2 else np.asarray(X)
    mT = M[:, -1] if np.ndim(M) == 2 else np.asarray(M)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "V_T", "X_T", "M_T"])
        for i in range(ensemble.n_paths):
            w.writerow([i, repr(float(ensemble.V[i, -1])), repr(float(xT[i])), repr(float(mT[i]))])
    return path
