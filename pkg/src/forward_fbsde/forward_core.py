"""Forward performance processes and their convex conjugates.

Two concrete process types are provided:

* ``ExpForwardProcess``: the exponential family built on an ergodic solution,
  with every primal and dual derivative in closed form.
* ``MarkovianForwardField``: a tabulated random field u(t, v, x) with finite
  difference derivatives, loaded from CSV or generated from analytic test
  families.

Both expose the same evaluation interface (``U``, ``U_x`` ... ``conj_zzz``,
``alpha_x``), which is what the FBSDE solvers and the duality residuals use.
Conjugates are taken in the sense ``Ũ(z) = sup_x (U(x) - x z)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.interpolate import RectBivariateSpline, make_interp_spline
from scipy.optimize import brentq
from scipy.special import erfcx

from .errors import BoxTooSmallError, ConfigError, DomainError, ExtrapolationError, GridError, ModelError
from ._interp import bracket

Array = np.ndarray
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class ExtrapolationWarning(RuntimeWarning):
    pass


class ForwardProcess(Protocol):
    def U(self, t, v, x): ...
    def U_x(self, t, v, x): ...
    def U_xx(self, t, v, x): ...
    def U_xxx(self, t, v, x): ...
    def alpha_x(self, t, v, x) -> tuple[Array, Array]: ...
    def conj(self, t, v, z): ...
    def conj_z(self, t, v, z): ...
    def conj_zz(self, t, v, z): ...
    def conj_zzz(self, t, v, z): ...


# ---------------------------------------------------------------- exponential


@dataclass(frozen=True, eq=False)
class ExpForwardProcess:
    """``U(t,x) = -exp(-gamma x + y(V_t) - lambda t)`` for an ergodic solution ``(y, lambda)``."""

    gamma: float
    ergodic: object
    strict: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError("gamma must be positive", module="forward_core", operation="ExpForwardProcess")

    @property
    def lam(self) -> float:
        return float(self.ergodic.lam)

    def _y(self, v):
        grid = self.ergodic.grid_v
        v = np.asarray(v, dtype=float)
        if np.any(v < grid[0]) or np.any(v > grid[-1]):
            if self.strict:
                raise ExtrapolationError(f"factor value outside ergodic grid [{grid[0]}, {grid[-1]}]",
                                         module="forward_core", operation="exp_forward_value")
            warnings.warn("factor state outside ergodic grid; using linear-growth extension", ExtrapolationWarning,
                          stacklevel=3)
        return self.ergodic.y_at(v)

    def exponent(self, t, v):
        return self._y(v) - self.lam * np.asarray(t, dtype=float)

    def U(self, t, v, x):
        return -np.exp(-self.gamma * np.asarray(x, dtype=float) + self.exponent(t, v))

    def U_x(self, t, v, x):
        return -self.gamma * self.U(t, v, x)

    def U_xx(self, t, v, x):
        return self.gamma**2 * self.U(t, v, x)

    def U_xxx(self, t, v, x):
        return -self.gamma**3 * self.U(t, v, x)

    def alpha(self, t, v, x) -> tuple[Array, Array]:
        u = self.U(t, v, x)
        return u * self.ergodic.z1_at(v), u * self.ergodic.z2_at(v)

    def alpha_x(self, t, v, x) -> tuple[Array, Array]:
        ux = self.U_x(t, v, x)
        return ux * self.ergodic.z1_at(v), ux * self.ergodic.z2_at(v)

    def risk_tolerance_bounds(self) -> dict:
        return {"C_l": 1.0 / self.gamma, "C_u": 1.0 / self.gamma}

    @staticmethod
    def _check_z(z):
        z = np.asarray(z, dtype=float)
        if np.any(~(z > 0)):
            raise DomainError("conjugate argument z must be positive", module="forward_core",
                              operation="exp_conjugate_value")
        return z

    def conj(self, t, v, z):
        z = self._check_z(z)
        g = self.gamma
        return -z / g + (z / g) * np.log(z / g) - (z / g) * self.exponent(t, v)

    def conj_z(self, t, v, z):
        z = self._check_z(z)
        return (np.log(z / self.gamma) - self.exponent(t, v)) / self.gamma

    def conj_zz(self, t, v, z):
        z = self._check_z(z)
        return 1.0 / (self.gamma * z) + 0.0 * np.asarray(v, dtype=float)

    def conj_zzz(self, t, v, z):
        z = self._check_z(z)
        return -1.0 / (self.gamma * z**2) + 0.0 * np.asarray(v, dtype=float)


def exp_forward_value(p: ExpForwardProcess, t: float, v: float, x: float) -> float:
    return float(p.U(t, v, x))


def exp_conjugate_value(p: ExpForwardProcess, t: float, v: float, z: float) -> float:
    return float(p.conj(t, v, z))


# -------------------------------------------------------------- numeric conjugate


def golden_section_max(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10) -> tuple[float, float]:
    """Maximiser and maximum of a unimodal function on [lo, hi]."""
    a, b = float(lo), float(hi)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def _check_concave(f: Callable[[float], float], lo: float, hi: float, n: int = 41):
    xs = np.linspace(lo, hi, n)
    vals = np.array([f(x) for x in xs])
    finite = np.isfinite(vals)
    if not np.all(finite):
        return
    second = vals[2:] - 2.0 * vals[1:-1] + vals[:-2]
    scale = np.maximum(np.abs(vals[1:-1]), 1.0)
    if np.any(second > 1e-9 * scale):
        raise DomainError("function is not concave on the search box", module="forward_core",
                          operation="fenchel_conjugate_numeric")


def fenchel_argmax(u_slice: Callable[[float], float], z: float, search_box: tuple[float, float] | None = None,
                   *, gamma: float = 1.0, max_doublings: int = 6, tol: float = 1e-10) -> tuple[float, float]:
    """Return ``(x*, sup_x u(x) - x z)``; the default box doubles on boundary hits."""
    auto = search_box is None
    lo, hi = search_box if search_box is not None else (-50.0 / gamma, 50.0 / gamma)
    obj = lambda x: float(u_slice(x)) - x * z  # noqa: E731
    _check_concave(u_slice, lo, hi)
    for _ in range(max_doublings + 1):
        x, val = golden_section_max(obj, lo, hi, tol)
        margin = 10 * tol + 1e-9 * (hi - lo)
        if x - lo > margin and hi - x > margin:
            return x, val
        if not auto:
            break
        lo, hi = 2.0 * lo, 2.0 * hi
    raise BoxTooSmallError(f"maximiser at the edge of [{lo}, {hi}] for z={z}", module="forward_core",
                           operation="fenchel_conjugate_numeric")


def fenchel_conjugate_numeric(u_slice: Callable[[float], float], z: float,
                              search_box: tuple[float, float] | None = None, *, gamma: float = 1.0) -> float:
    return fenchel_argmax(u_slice, z, search_box, gamma=gamma)[1]


# ----------------------------------------------------------------- Markovian


BOUND_MARGIN = 4


def _grad(a: Array, h: Array, axis: int) -> Array:
    return np.gradient(a, h, axis=axis, edge_order=2)


def _sderiv(a: Array, g: Array, axis: int, order: int = 1) -> Array:
    """Derivative along ``axis`` from a quintic interpolating spline; falls back to differences on short grids."""
    if g.size < 8:
        out = a
        for _ in range(order):
            out = _grad(out, g, axis)
        return out
    return make_interp_spline(g, a, k=5, axis=axis).derivative(order)(g)


@dataclass(frozen=True, eq=False)
class MarkovianForwardField:
    """Tabulated field ``u[t, v, x]``.

    Derivatives come from quintic splines along v and x (differences along t)
    unless ``exact`` supplies some of them on the same grid, as the analytic
    families do.
    """

    grid_t: Array
    grid_v: Array
    grid_x: Array
    u: Array
    family: str = "table"
    params: dict = field(default_factory=dict)
    exact: dict | None = field(default=None, repr=False)
    derivs: dict = field(init=False, repr=False)

    def __post_init__(self):
        gt, gv, gx = (np.asarray(g, dtype=float) for g in (self.grid_t, self.grid_v, self.grid_x))
        u = np.asarray(self.u, dtype=float)
        if u.shape != (gt.size, gv.size, gx.size):
            raise GridError(f"u has shape {u.shape}, grids imply {(gt.size, gv.size, gx.size)}",
                            module="forward_core", operation="MarkovianForwardField")
        for name, g in (("t", gt), ("v", gv), ("x", gx)):
            if g.size < 3 or np.any(np.diff(g) <= 0):
                raise GridError(f"grid_{name} needs at least 3 increasing nodes", module="forward_core",
                                operation="MarkovianForwardField")
        if not np.all(np.isfinite(u)):
            raise GridError("u contains non-finite values", module="forward_core", operation="MarkovianForwardField")
        d = {}
        d["u_t"] = _grad(u, gt, 0)
        d["u_v"] = _sderiv(u, gv, 1)
        d["u_vv"] = _sderiv(u, gv, 1, 2)
        d["u_x"] = _sderiv(u, gx, 2)
        d["u_xx"] = _sderiv(u, gx, 2, 2)
        d["u_xxx"] = _sderiv(u, gx, 2, 3)
        d["u_xv"] = _sderiv(d["u_x"], gv, 1)
        d["u_xxv"] = _sderiv(d["u_xx"], gv, 1)
        for name, arr in (self.exact or {}).items():
            if name not in d or np.shape(arr) != u.shape:
                raise GridError(f"exact derivative {name!r} missing from the table or misshaped",
                                module="forward_core", operation="MarkovianForwardField")
            d[name] = np.asarray(arr, dtype=float)
        for k in ("grid_t", "grid_v", "grid_x", "u"):
            object.__setattr__(self, k, {"grid_t": gt, "grid_v": gv, "grid_x": gx, "u": u}[k])
        object.__setattr__(self, "derivs", d)

    # ---- invariants and bounds

    def interior(self, a: Array, margin: int = 1) -> Array:
        return a[:, margin:-margin, margin:-margin]

    def ratios(self) -> dict:
        d = self.derivs
        uxx = d["u_xx"]
        return {
            "phi": d["u_x"] / uxx,
            "phi1": d["u_xxx"] / uxx,
            "phi2": d["u_xxv"] / uxx,
            "xv_ratio": d["u_xv"] / uxx,
        }

    def check_invariants(self):
        d = self.derivs
        if np.any(self.interior(d["u_x"]) <= 0):
            raise ModelError("u_x must be positive on the interior grid", module="forward_core",
                             operation="MarkovianForwardField")
        if np.any(self.interior(d["u_xx"]) >= 0):
            raise ModelError("u_xx must be negative on the interior grid", module="forward_core",
                             operation="MarkovianForwardField")

    def assumption_bounds(self, rho: float = 0.0) -> dict:
        """Measured risk-tolerance bounds and the constants used by the decoupling solver."""
        self.check_invariants()
        r = self.ratios()
        gx = self.grid_x
        # nested one-sided stencils reach four nodes in from the edges
        inner = lambda a: self.interior(a, BOUND_MARGIN)  # noqa: E731
        tol = -inner(r["phi"])
        phi1_x = inner(_sderiv(r["phi1"], gx, 2))
        phi2_x = inner(_sderiv(r["phi2"], gx, 2))
        out = {
            "C_l": float(tol.min()),
            "C_u": float(tol.max()),
            "C_alpha": float(np.abs(inner(r["xv_ratio"])).max()),
            "phi1_sup": float(np.abs(inner(r["phi1"])).max()),
            "phi2_sup": float(np.abs(inner(r["phi2"])).max()),
            "phi1_x_max": float(phi1_x.max()),
            "phi2_x_sup": float(np.abs(phi2_x).max()),
        }
        if not all(np.isfinite(v) for v in out.values()):
            raise ModelError("risk-tolerance bounds are not finite on the grid", module="forward_core",
                             operation="assumption_bounds")
        scale = max(1.0, out["phi1_sup"], out["phi2_sup"])
        active = np.abs(phi2_x) > 1e-8 * scale
        ratio = 0.5 * (1.0 - rho**2) * phi2_x[active] ** 2 / np.maximum(-phi1_x[active], 1e-300)
        out["K"] = float(ratio.max()) if ratio.size else 0.0
        return out

    def hjb_residual(self, model) -> float:
        """Max interior residual of ``u_t - |u_x theta + rho u_xv|^2/(2 u_xx) + u_vv/2 + l u_v``."""
        d = self.derivs
        v = self.grid_v[None, :, None]
        th = model.theta_on(v)
        lv = model.drift_on(v)
        res = d["u_t"] - 0.5 * (d["u_x"] * th + model.rho * d["u_xv"]) ** 2 / d["u_xx"] + 0.5 * d["u_vv"] + lv * d["u_v"]
        return float(np.abs(res[1:-1, 2:-2, 2:-2]).max())

    # ---- pointwise evaluation

    def _slice(self, name: str, j: int) -> RectBivariateSpline:
        cache = self.__dict__.setdefault("_slice_cache", {})
        if (name, j) not in cache:
            arr = self.u if name == "u" else self.derivs[name]
            cache[(name, j)] = RectBivariateSpline(self.grid_v, self.grid_x, arr[j], kx=3, ky=3)
        return cache[(name, j)]

    def evaluate(self, name: str, t, v, x) -> Array:
        """Bicubic in (v, x) on each time slice, linear in t; points are clamped to the grid box.

        Linear interpolation in v would overstate convex profiles between nodes
        and show up as a spurious drift in martingale checks.
        """
        t, v, x = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, v, x)))
        shape = t.shape
        t, v, x = t.ravel(), v.ravel(), x.ravel()
        gt, gv, gx = self.grid_t, self.grid_v, self.grid_x
        v = np.clip(v, gv[0], gv[-1])
        x = np.clip(x, gx[0], gx[-1])
        out = np.empty(t.size)
        for tt in np.unique(t):
            sel = t == tt
            j, w = bracket(gt, tt)
            j, w = int(j), float(w)
            if w > 1.0 - 1e-12:
                j, w = j + 1, 0.0
            val = self._slice(name, j).ev(v[sel], x[sel])
            if w > 1e-12:
                val = (1.0 - w) * val + w * self._slice(name, j + 1).ev(v[sel], x[sel])
            out[sel] = val
        return out.reshape(shape)

    def U(self, t, v, x):
        return self.evaluate("u", t, v, x)

    def U_x(self, t, v, x):
        return self.evaluate("u_x", t, v, x)

    def U_xx(self, t, v, x):
        return self.evaluate("u_xx", t, v, x)

    def U_xxx(self, t, v, x):
        return self.evaluate("u_xxx", t, v, x)

    def rho(self) -> float:
        return float(self.params.get("rho", 0.0))

    def alpha_x(self, t, v, x) -> tuple[Array, Array]:
        uxv = self.evaluate("u_xv", t, v, x)
        rho = self.rho()
        return rho * uxv, math.sqrt(1.0 - rho**2) * uxv

    def x_slice(self, t: float, v: float):
        """Quintic spline of ``x -> u(t, v, x)`` with (t, v) interpolated linearly."""
        xs = self.grid_x
        vals = self.evaluate("u", np.full_like(xs, t), np.full_like(xs, v), xs)
        return make_interp_spline(xs, vals, k=5)

    def _argmax(self, t: float, v: float, z: float) -> tuple[float, object]:
        s = self.x_slice(t, v)
        ds = s.derivative()
        lo, hi = self.grid_x[0], self.grid_x[-1]
        g = lambda x: float(ds(x)) - z  # noqa: E731
        if g(lo) < 0 or g(hi) > 0:
            raise ExtrapolationError(f"z={z} outside the marginal-utility range of the tabulated slice",
                                     module="forward_core", operation="conjugate")
        return brentq(g, lo, hi, xtol=1e-14, rtol=1e-14), s

    def _conj_point(self, t, v, z, order):
        x, s = self._argmax(float(t), float(v), float(z))
        if order == 0:
            return float(s(x)) - x * z
        if order == 1:
            return -x
        d2 = float(s.derivative(2)(x))
        if order == 2:
            return -1.0 / d2
        return float(s.derivative(3)(x)) / d2**3

    def _conj_vec(self, t, v, z, order):
        t, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, v, z)))
        if np.any(~(z > 0)):
            raise DomainError("conjugate argument z must be positive", module="forward_core", operation="conjugate")
        out = np.array([self._conj_point(a, b, c, order) for a, b, c in zip(t.ravel(), v.ravel(), z.ravel())])
        return out.reshape(t.shape)

    def conj(self, t, v, z):
        return self._conj_vec(t, v, z, 0)

    def conj_z(self, t, v, z):
        return self._conj_vec(t, v, z, 1)

    def conj_zz(self, t, v, z):
        return self._conj_vec(t, v, z, 2)

    def conj_zzz(self, t, v, z):
        return self._conj_vec(t, v, z, 3)


def load_field_csv(path: str | Path, **params) -> MarkovianForwardField:
    """Read a dump with header ``t,v,x,u`` covering a full tensor grid."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read field dump {path}: {exc}") from exc
    if not rows or set(rows[0]) != {"t", "v", "x", "u"}:
        raise ConfigError(f"{path}: expected header 't,v,x,u'")
    data = np.array([[float(r[k]) for k in ("t", "v", "x", "u")] for r in rows])
    gt, gv, gx = (np.unique(data[:, i]) for i in range(3))
    if gt.size * gv.size * gx.size != len(rows):
        raise ConfigError(f"{path}: rows do not form a full (t, v, x) grid")
    it = np.searchsorted(gt, data[:, 0])
    iv = np.searchsorted(gv, data[:, 1])
    ix = np.searchsorted(gx, data[:, 2])
    u = np.full((gt.size, gv.size, gx.size), np.nan)
    u[it, iv, ix] = data[:, 3]
    if np.any(np.isnan(u)):
        raise ConfigError(f"{path}: duplicate or missing grid nodes")
    return MarkovianForwardField(gt, gv, gx, u, family="csv", params={"source": str(path), **params})


def dump_field_csv(field_: MarkovianForwardField, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "v", "x", "u"])
        for i, t in enumerate(field_.grid_t):
            for j, v in enumerate(field_.grid_v):
                for k, x in enumerate(field_.grid_x):
                    w.writerow([repr(float(t)), repr(float(v)), repr(float(x)), repr(float(field_.u[i, j, k]))])
    return path


# ------------------------------------------------------ analytic test families


def quadratic_exponent_utility(x: Array, delta: float) -> tuple[Array, Array]:
    """Static utility with ``u'' = -exp(-x - delta x^2/2)``; returns ``(u, u')``.

    ``delta = 0`` gives ``-exp(-x)``.  For ``delta > 0`` the absolute risk
    aversion ``1 + delta x`` grows with wealth, which makes the ratio
    ``u'''/u''`` strictly decreasing in x.
    """
    x = np.asarray(x, dtype=float)
    if delta == 0.0:
        e = np.exp(-x)
        return -e, e
    if delta < 0:
        raise DomainError("delta must be non-negative", module="forward_core", operation="analytic_field")
    ek = np.exp(-x - 0.5 * delta * x**2)
    d = (x + 1.0 / delta) * math.sqrt(delta)
    ex = erfcx(d / math.sqrt(2.0))
    up = math.sqrt(math.pi / (2.0 * delta)) * ex * ek
    u = -(ek / delta) * (1.0 - d * math.sqrt(math.pi / 2.0) * ex)
    return u, up


def analytic_field(family: str, grid_t: Array, grid_v: Array, grid_x: Array, **params) -> MarkovianForwardField:
    """Generate a tabulated forward field from a named closed-form family.

    exponential  ``-exp(-gamma x + y(v) - lam t)`` (pass ``ergodic`` for y and lam, else zero)
    separable    ``u_delta(x) + c exp(a v - a^2 t/2)``; solves the HJB with theta = 0, l = 0, any rho
    two-mode     ``u_delta(x) - eps exp(-x) exp(a v - a^2 t/2)``; solves it with theta = 0, l = 0, rho = 0
    """
    gt, gv, gx = (np.asarray(g, dtype=float) for g in (grid_t, grid_v, grid_x))
    T, Vv, X = np.meshgrid(gt, gv, gx, indexing="ij")
    if family == "exponential":
        gamma = float(params.get("gamma", 1.0))
        erg = params.get("ergodic")
        if erg is not None:
            expo = erg.y_at(Vv) - erg.lam * T
        else:
            expo = 0.0
        u = -np.exp(-gamma * X + expo)
        if erg is not None:
            y1 = np.interp(Vv, erg.grid_v, erg.dy)
            y2 = np.interp(Vv, erg.grid_v, np.gradient(erg.dy, erg.grid_v, edge_order=2))
            lam = erg.lam
        else:
            y1 = y2 = np.zeros_like(u)
            lam = 0.0
        g = gamma
        exact = {"u_t": -lam * u, "u_v": y1 * u, "u_vv": (y2 + y1**2) * u, "u_x": -g * u, "u_xx": g**2 * u,
                 "u_xxx": -(g**3) * u, "u_xv": -g * y1 * u, "u_xxv": g**2 * y1 * u}
        clean = {k: v for k, v in params.items() if k != "ergodic"}
        return MarkovianForwardField(gt, gv, gx, u, family=family, params=clean, exact=exact)
    a = float(params.get("a", 0.5))
    delta = float(params.get("delta", 0.0))
    heat = np.exp(a * Vv - 0.5 * a**2 * T)
    base, b1 = quadratic_exponent_utility(X, delta)
    b2 = -np.exp(-X - 0.5 * delta * X**2)
    b3 = -(1.0 + delta * X) * b2
    if family == "separable":
        c = float(params.get("c", 0.1))
        u = base + c * heat
        zero = np.zeros_like(u)
        exact = {"u_t": -0.5 * a**2 * c * heat, "u_v": a * c * heat, "u_vv": a**2 * c * heat, "u_x": b1, "u_xx": b2,
                 "u_xxx": b3, "u_xv": zero, "u_xxv": zero}
    elif family == "two-mode":
        eps = float(params.get("eps", 0.05))
        m = eps * np.exp(-X) * heat
        u = base - m
        exact = {"u_t": 0.5 * a**2 * m, "u_v": -a * m, "u_vv": -(a**2) * m, "u_x": b1 + m, "u_xx": b2 - m,
                 "u_xxx": b3 + m, "u_xv": a * m, "u_xxv": -a * m}
    else:
        raise ConfigError(f"unknown field family {family!r}; choose exponential, separable or two-mode")
    return MarkovianForwardField(gt, gv, gx, u, family=family, params=dict(params), exact=exact)


# -------------------------------------------------------------- conjugate pair


@dataclass(frozen=True, eq=False)
class ConjugatePair:
    primal: ForwardProcess
    value_tilde: Callable
    deriv_tilde_z: Callable
    tilde_zz: Callable
    tilde_zzz: Callable

    @classmethod
    def of(cls, process: ForwardProcess) -> "ConjugatePair":
        return cls(process, process.conj, process.conj_z, process.conj_zz, process.conj_zzz)


def bidual_value(pair: ConjugatePair, t: float, v: float, x: float) -> float:
    """``inf_z (Ũ(t,z) + x z)`` by golden section in log z around the marginal utility."""
    z0 = float(pair.primal.U_x(t, v, x))
    lo, hi = math.log(z0) - 5.0, math.log(z0) + 5.0
    f = lambda s: -float(pair.value_tilde(t, v, math.exp(s)) + x * math.exp(s))  # noqa: E731
    _, val = golden_section_max(f, lo, hi, 1e-12)
    return -val


def dual_relation_residuals(pair: ConjugatePair, sample_points: Sequence[tuple[float, float, float]]) -> dict:
    """Max absolute residual of each duality identity over the sample points."""
    P = pair.primal
    names = ("inverse_marginal", "marginal_inverse", "value", "second_order", "third_order", "bidual")
    worst = dict.fromkeys(names, 0.0)
    for t, v, x in sample_points:
        z = float(P.U_x(t, v, x))
        u = float(P.U(t, v, x))
        uxx = float(P.U_xx(t, v, x))
        uxxx = float(P.U_xxx(t, v, x))
        xz = -float(pair.deriv_tilde_z(t, v, z))
        res = {
            "inverse_marginal": xz - x,
            "marginal_inverse": float(P.U_x(t, v, xz)) - z,
            "value": u - (float(pair.value_tilde(t, v, z)) + x * z),
            "second_order": float(pair.tilde_zz(t, v, z)) + 1.0 / uxx,
            "third_order": float(pair.tilde_zzz(t, v, z)) - uxxx / uxx**3,
            "bidual": bidual_value(pair, t, v, x) - u,
        }
        for k, r in res.items():
            worst[k] = max(worst[k], abs(r))
    worst["max"] = max(worst[k] for k in names)
    return worst
