"""Operations behind the subcommands.  Each one fills ``ctx.results`` and writes its artifacts."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .. import ergodic as ergodic_mod
from ..errors import InvariantViolation
from ..fbsde import (
    collapse_check,
    dual_from_primal,
    marginal_martingale_statistic,
    primal_from_dual,
    solve_complete_market,
    solve_decoupling_field,
    solve_exponential_primal,
    verify_maturity_independence,
    verify_optimality,
    verify_self_generation,
    xz_martingale_statistic,
)
from ..fbsde.export import dump_field_csv, write_json
from ..fbsde.types import EndowmentSpec
from ..forward_core import ConjugatePair, ExpForwardProcess, analytic_field
from ..market import ControlPath, simulate_factor_paths
from ..oce import ExponentialOceEngine, axiom_suite, axioms_passed, oce_maturity_check, write_axiom_csv
from . import config as C


class Failure:
    """A hard invariant that did not hold; collected so every artifact is still written."""

    def __init__(self, check: str, statistic, threshold):
        self.check, self.statistic, self.threshold = check, statistic, threshold

    def to_dict(self) -> dict:
        return {"check": self.check, "statistic": self.statistic, "threshold": self.threshold}


class Context:
    def __init__(self, cfg: dict, out_dir: Path, threads: int = 1):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = threads
        self.model = C.build_model(cfg)
        self.P = C.build_endowment(cfg)
        self.T = float(cfg["endowment"]["maturity"])
        task, num = cfg["task"], cfg["numerics"]
        self.t0, self.xi, self.eta = float(task["t0"]), float(task["xi"]), float(task["eta"])
        self.regime = task["regime"]
        self.tol = num["tolerances"]
        self.results: dict = {}
        self.failures: list[Failure] = []
        self._erg = self._ens = self._primal = None

    # ---- shared objects

    @property
    def seed(self) -> int:
        return C.np_seed(self.cfg)

    def require(self, name: str, passed: bool, statistic, threshold):
        if not passed:
            self.failures.append(Failure(name, statistic, threshold))

    @property
    def erg(self):
        if self._erg is None:
            g = self.cfg["numerics"].get("ergodic_grid")
            grid = (g["v_min"], g["v_max"], g["n_v"]) if g else None
            self._erg = ergodic_mod.solve_ergodic(self.model, grid, self.cfg["numerics"]["ergodic_method"],
                                                  seed=self.seed)
        return self._erg

    @property
    def horizon(self) -> float:
        dt = self.cfg["numerics"]["dt"]
        raw = self.T * max(self.cfg["task"]["maturity_factors"] + [1.0])
        return self.t0 + math.ceil((raw - self.t0) / dt - 1e-9) * dt

    @property
    def ensemble(self):
        if self._ens is None:
            num = self.cfg["numerics"]
            self._ens = simulate_factor_paths(self.model, 0.0, self.horizon, num["dt"], num["n_paths"], self.seed,
                                              threads=self.threads)
        return self._ens

    @property
    def handle(self):
        if self.regime == "decoupling":
            return self.primal.meta["field"]
        return ExpForwardProcess(self.model.gamma, self.erg)

    def pde_grid(self) -> dict | None:
        g = self.cfg["numerics"].get("pde_grid")
        return dict(g) if g else None

    @property
    def primal(self):
        if self._primal is None:
            self._primal = self._solve_primal()
        return self._primal

    def _decoupling_field(self):
        d = self.cfg["numerics"]["decoupling"]
        vr, xr = d.get("v_range", [-2.0, 2.0]), d.get("x_range", [-2.0, 2.0])
        gt = np.linspace(self.t0, self.T, int(d.get("n_t", 41)))
        gv = np.linspace(vr[0], vr[1], int(d.get("n_v", 41)))
        gx = np.linspace(xr[0], xr[1], int(d.get("n_x", 41)))
        params = dict(d.get("params", {}))
        if d["family"] == "exponential":
            params.setdefault("gamma", self.model.gamma)
            params["ergodic"] = self.erg
        return analytic_field(d["family"], gt, gv, gx, **params)

    def _solve_primal(self):
        if self.regime == "exponential":
            return solve_exponential_primal(self.model, self.erg, self.P, self.t0, self.T, self.pde_grid(),
                                            ensemble=self.ensemble, xi=self.xi)
        if self.regime == "decoupling":
            field = self._decoupling_field()
            d = self.cfg["numerics"]["decoupling"]
            ens = None
            num = self.cfg["numerics"]
            if abs((field.grid_t[1] - field.grid_t[0]) - num["dt"]) < 1e-12:
                ens = self.ensemble
            return solve_decoupling_field(field, self.model, self.P, self.T, xi=self.xi,
                                          quad_nodes=int(d.get("quad_nodes", 3)), ensemble=ens)
        if not self.model.theta_is_constant():
            from ..errors import RegimeError

            raise RegimeError("complete-market regime needs a deterministic (constant) theta", module="cli",
                              operation="primal")
        theta = float(self.model.theta_on(np.array(0.0)))
        primal, dual = solve_complete_market(theta, self.P, self.xi, self.eta, self.ensemble,
                                             gamma=self.model.gamma, t_index=self.ensemble.index_of(self.t0))
        self._complete_dual = dual
        return primal


# ---------------------------------------------------------------- operations


def op_ergodic(ctx: Context):
    erg = ctx.erg
    ergodic_mod.export_csv(erg, ctx.out / "ergodic.csv")
    inv = erg.check_invariants()
    ctx.results["ergodic"] = {"lambda": erg.lam, "method": erg.method, "residual": erg.residual,
                              "grid": [float(erg.grid_v[0]), float(erg.grid_v[-1]), int(erg.grid_v.size)],
                              "invariants": inv}
    ctx.require("ergodic.chain_rule", inv["chain_rule_defect"] <= 1e-8, inv["chain_rule_defect"], 1e-8)


def op_primal(ctx: Context):
    sol = ctx.primal
    out = {"regime": sol.regime, "Y0": sol.Y0, "xi": sol.xi, "t0": sol.t0, "T": sol.T,
           "bsde_residual": sol.bsde_residual}
    if sol.y is not None:
        dump_field_csv(sol, ctx.out / "primal_field.csv")
    if sol.regime == "decoupling":
        for k in ("case", "K", "L_P_x", "horizon_bound", "sup_wx", "iterations_max", "wx_bound"):
            if k in sol.meta:
                out[k] = sol.meta[k]
        ctx.require("decoupling.sup_wx", sol.meta["sup_wx"] < 1.0, sol.meta["sup_wx"], 1.0)
    if sol.regime == "complete":
        out["Y0_se"] = sol.meta["Y0_se"]
    if ctx.P.is_zero and sol.y is not None:
        col = collapse_check(sol)
        out["zero_endowment_collapse"] = col
        ctx.require("primal.zero_endowment_collapse", col["passed"], col["y_max"], 1e-12)
    ctx.results["primal"] = out


def op_dual(ctx: Context):
    sigma = ctx.tol["martingale_sigma"]
    if ctx.regime == "complete":
        ctx.primal
        dual = ctx._complete_dual
        stat = dual.density_martingale_stat()
        ctx.results["dual"] = {"eta": dual.eta0, "dual_value": dual.meta["dual_value"],
                               "density_martingale_stat": stat}
        ctx.require("dual.density_martingale", stat <= sigma, stat, sigma)
        return
    sol = ctx.primal
    if not sol.has_paths:
        ctx.results["dual"] = {"skipped": "primal has no path realisation on the configured time grid"}
        return
    U = ctx.handle
    dual = dual_from_primal(sol, U)
    back = primal_from_dual(dual, ConjugatePair.of(U))
    roundtrip = float(np.max(np.abs(back.X - sol.X)))
    stat = dual.density_martingale_stat()
    ctx.results["dual"] = {"eta_hat": dual.eta0, "dual_residual": dual.residual, "xi_hat": back.xi,
                           "primal_residual": back.bsde_residual, "roundtrip_max_error": roundtrip,
                           "density_martingale_stat": stat}
    ctx.require("dual.density_martingale", stat <= sigma, stat, sigma)
    ctx.require("dual.roundtrip", roundtrip <= 1e-8, roundtrip, 1e-8)


def _oce_engine(ctx: Context) -> ExponentialOceEngine:
    return ExponentialOceEngine(ctx.model, ctx.erg, ctx.t0, ctx.T, ctx.eta, grid=ctx.pde_grid(),
                                ensemble=ctx.ensemble, solver_tol=ctx.tol["solver"])


def _second_payoff(ctx: Context) -> EndowmentSpec:
    o = ctx.cfg["task"].get("oce", {})
    if "second_payoff" in o:
        f = C.function(o["second_payoff"], ctx.cfg)
        return EndowmentSpec.factor(f, float(o.get("second_bound", ctx.P.bound)), ctx.T, label=f.kind)
    return EndowmentSpec.constant(-ctx.P.bound, ctx.T, bound=ctx.P.bound)


def op_oce(ctx: Context):
    if ctx.regime != "exponential":
        ctx.results["oce"] = {"skipped": f"forward OCE is evaluated in the exponential regime, not {ctx.regime}"}
        return
    eng = _oce_engine(ctx)
    rep = eng.report(ctx.P)
    o = ctx.cfg["task"].get("oce", {})
    ens = ctx.ensemble
    pi = ControlPath.constant(float(o.get("replication_pi", 1.0)), ens)
    rep.axiom_results = axiom_suite(eng, ctx.P, _second_payoff(ctx), float(o.get("cash", 0.3)),
                                    float(o.get("mix", 0.4)), pi, sigma=ctx.tol["sigma"])
    write_axiom_csv(rep.axiom_results, ctx.out / "oce_axioms.csv")
    checks = []
    for f in ctx.cfg["task"]["maturity_factors"]:
        Tp = ens.times[ens.index_of(ctx.T)] if f == 1.0 else ens.times[int(round((ctx.T * f - ens.t0) / ens.dt))]
        checks.append(oce_maturity_check(eng, ctx.P, ctx.t0, ctx.T, float(Tp), sigma=ctx.tol["sigma"]))
    rep.maturity_check = tuple((c["T"], c["T_prime"], c["diff"]) for c in checks)
    q0 = ControlPath.constant(0.0, ens)
    c0, se0 = eng.certificate(ctx.P, q0)
    d = rep.to_dict()
    d["maturity_checks"] = checks
    d["certificate_q_zero"] = {"value": c0, "se": se0,
                               "passed": bool(c0 >= rep.normalized - ctx.tol["sigma"] * se0)}
    ctx.results["oce"] = d
    write_json(d, ctx.out / "oce.json")
    ctx.require("oce.dual_gap", rep.dual_gap <= ctx.tol["dual_gap"], rep.dual_gap, ctx.tol["dual_gap"])
    ctx.require("oce.certificate_upper_bound", d["certificate_q_zero"]["passed"], c0, rep.normalized)
    ctx.require("oce.axioms", axioms_passed(rep.axiom_results), None, None)
    for c in checks:
        ctx.require(f"oce.maturity[{c['T_prime']!r}]", c["passed"], c["diff"], c["se"])


def _bounded_pairs(ens):
    tv = np.tanh(ens.V[:, :-1])
    yield "pi=0.5,q=0.3", ControlPath.constant(0.5, ens), ControlPath.constant(0.3, ens)
    yield "pi=tanh(V),q=-0.2", ControlPath(tv, 1.0, "pi"), ControlPath.constant(-0.2, ens)
    yield "pi=1,q=0.5tanh(V)", ControlPath.constant(1.0, ens), ControlPath(0.5 * tv, 0.5, "q")


def op_verify(ctx: Context):
    sigma, msig = ctx.tol["sigma"], ctx.tol["martingale_sigma"]
    out: dict = {}
    sol = ctx.primal
    if ctx.regime == "decoupling":
        out["sup_wx"] = {"passed": bool(sol.meta["sup_wx"] < 1.0), "statistic": sol.meta["sup_wx"]}
        ctx.require("verify.sup_wx", out["sup_wx"]["passed"], sol.meta["sup_wx"], 1.0)
        if sol.has_paths:
            nm = marginal_martingale_statistic(sol, ctx.handle)["statistic"]
            out["marginal_martingale"] = {"passed": bool(nm <= msig), "statistic": nm}
            ctx.require("verify.marginal_martingale", nm <= msig, nm, msig)
        ctx.results["verify"] = out
        return
    if ctx.regime == "complete":
        ctx.results["verify"] = {"skipped": "verification battery runs in the exponential and decoupling regimes"}
        return
    ens, U = ctx.ensemble, ctx.handle
    pair = ConjugatePair.of(U)
    k0 = ens.index_of(ctx.t0)

    nm = marginal_martingale_statistic(sol, U)["statistic"]
    out["marginal_martingale"] = {"passed": bool(nm <= msig), "statistic": nm}
    xz = {}
    for name, pi, q in _bounded_pairs(ens):
        xz[name] = xz_martingale_statistic(ctx.model, ens, pi, q, ctx.xi, k0)
    xz["optimal"] = xz_martingale_statistic(ctx.model, ens, sol.pi_star, sol.q_star, ctx.xi, k0)
    worst = max(max(v.values()) for v in xz.values())
    out["xz_martingale"] = {"passed": bool(worst <= msig), "statistic": worst, "pairs": xz}

    sg = verify_self_generation(U, pair, ens, ctx.T, model=ctx.model, eta=ctx.eta, xi=ctx.xi, t=ctx.t0,
                                seed=ctx.seed, sigma=msig)
    out["self_generation"] = sg.to_dict()

    task = ctx.cfg["task"]
    cand = ControlPath.constant(float(task["forced_pi"]), ens) if "forced_pi" in task else None
    neg = ControlPath.constant(float(task["negative_control_pi"]), ens) if "negative_control_pi" in task else None
    opt = verify_optimality(sol, U, n_perturbations=int(task["perturbations"]), seed=ctx.seed, sigma=sigma,
                            candidate_pi=cand, negative_control=neg)
    out["optimality"] = opt.to_dict()

    mats = []
    for f in task["maturity_factors"]:
        Tp = float(ens.times[int(round((ctx.T * f - ens.t0) / ens.dt))])
        rep = verify_maturity_independence(ctx.P, ctx.T, Tp, {"model": ctx.model, "ergodic": ctx.erg,
                                                              "ensemble": ens, "xi": ctx.xi, "t0": ctx.t0,
                                                              "primal": sol}, sigma=sigma)
        mats.append(rep.to_dict())
    out["maturity_independence"] = mats

    if ctx.regime == "exponential" and "oce" not in ctx.results:
        op_oce(ctx)
    if "oce" in ctx.results and "axiom_results" in ctx.results["oce"]:
        out["oce_axioms"] = {"passed": axioms_passed(ctx.results["oce"]["axiom_results"])}

    ctx.results["verify"] = out
    ctx.require("verify.marginal_martingale", nm <= msig, nm, msig)
    ctx.require("verify.xz_martingale", worst <= msig, worst, msig)
    for c in sg.checks:
        ctx.require(f"verify.self_generation.{c.name}", c.passed, c.statistic, c.threshold)
    for c in opt.checks:
        ctx.require(f"verify.optimality.{c.name}", c.passed, c.statistic, c.threshold)
    for m in mats:
        for c in m["checks"]:
            ctx.require(f"verify.maturity[{m['values']['T_prime']!r}].{c['name']}", c["passed"], c["statistic"],
                        c["threshold"])


OPS = {"ergodic": op_ergodic, "primal": op_primal, "dual": op_dual, "oce": op_oce, "verify": op_verify}


def run(ctx: Context, operations) -> dict:
    for name in operations:
        OPS[name](ctx)
    return ctx.results


def finalize(ctx: Context):
    if ctx.failures:
        first = ctx.failures[0]
        raise InvariantViolation(f"hard invariant {first.check} failed", statistic=first.statistic, module="cli",
                                 operation="run")


__all__ = ["Context", "OPS", "run", "finalize"]
