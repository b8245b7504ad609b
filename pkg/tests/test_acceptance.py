"""Acceptance gates, one or more tests per numbered criterion.

Each test carries ``@pytest.mark.criterion(n)``; the summary hook in
conftest prints one ``criterion n: PASS/FAIL`` line per number.
Run directly with ``python tests/test_acceptance.py`` or through pytest.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from forward_fbsde.ergodic import solve_ergodic
from forward_fbsde.errors import PreconditionError
from forward_fbsde.fbsde import (
    EndowmentSpec,
    classify,
    dual_from_primal,
    exponential_handle,
    marginal_martingale_statistic,
    primal_from_dual,
    realize_decoupling,
    solve_decoupling_field,
    solve_exponential_primal,
    verify_optimality,
    verify_self_generation,
    xz_martingale_statistic,
)
from forward_fbsde.forward_core import ConjugatePair, analytic_field
from forward_fbsde.functions import constant, tanh_scaled
from forward_fbsde.market import ControlPath, MarketModel, mean_se, simulate_factor_paths
from forward_fbsde.oce import ExponentialOceEngine, axiom_suite, classical_reduction_check, oce_maturity_check

from conftest import make_model

T = 0.4
BIG = 100_000
criterion = pytest.mark.criterion


def tanh_claim(T=T):
    return EndowmentSpec.factor(tanh_scaled(1.0), 1.0, T)


def cli(*args):
    return subprocess.run([sys.executable, "-m", "forward_fbsde", *args], capture_output=True, text=True)


# ---------------------------------------------------------------- ergodic


@criterion(1)
def test_flat_ergodic(flat_model):
    start = time.perf_counter()
    sol = solve_ergodic(flat_model)
    elapsed = time.perf_counter() - start
    assert abs(sol.lam - (-0.02)) <= 1e-6
    assert np.max(np.abs(sol.y)) <= 1e-8
    assert max(np.max(np.abs(sol.z1)), np.max(np.abs(sol.z2))) <= 1e-8
    assert elapsed < 5.0


@criterion(2)
def test_ergodic_cross_method(tanh_model):
    start = time.perf_counter()
    grid = solve_ergodic(tanh_model, method="ode-grid")
    mc = solve_ergodic(tanh_model, method="vanishing-discount-mc")
    assert abs(grid.lam - mc.lam) <= 2e-3
    assert time.perf_counter() - start < 180.0


# ---------------------------------------------------------------- entropic reduction


@criterion(3)
def test_entropic_reduction():
    gamma = 2.0
    m = make_model(0.0, rho=0.0, gamma=gamma)
    start = time.perf_counter()
    P = tanh_claim()
    Y0 = solve_exponential_primal(m, solve_ergodic(m), P, 0.0, T).Y0
    # independent oracle: plain Monte Carlo of the certainty equivalent on fresh factor samples
    vT = simulate_factor_paths(m, 0.0, T, 1 / 250, BIG, 101).V[:, -1]
    A = np.exp(-gamma * np.tanh(vT))
    mean, se = mean_se(A)
    oracle, oracle_se = -math.log(mean) / gamma, se / (gamma * mean)
    assert abs(Y0 - oracle) <= 3 * oracle_se + 1e-3
    assert time.perf_counter() - start < 120.0


# ---------------------------------------------------------------- martingale statistics on 1e5 paths


@pytest.fixture(scope="module")
def big_tanh(tanh_model, tanh_erg):
    ens = simulate_factor_paths(tanh_model, 0.0, T, 1 / 250, BIG, 202)
    sol = solve_exponential_primal(tanh_model, tanh_erg, tanh_claim(), 0.0, T, ensemble=ens, xi=0.2)
    return ens, sol


@criterion(4)
@pytest.mark.parametrize("pair", ["const", "opposed", "feedback", "optimal"])
def test_xz_martingale(big_tanh, tanh_model, pair):
    ens, sol = big_tanh
    start = time.perf_counter()
    if pair == "const":
        pi, q = ControlPath.constant(0.5, ens), ControlPath.constant(0.0, ens)
    elif pair == "opposed":
        pi, q = ControlPath.constant(1.0, ens), ControlPath.constant(-0.3, ens)
    elif pair == "feedback":
        pi = ControlPath.feedback(lambda t, v: np.tanh(v), ens, 1.0)
        q = ControlPath.feedback(lambda t, v: 0.5 * np.cos(v), ens, 0.5)
    else:
        pi, q = sol.pi_star, sol.q_star
    st = xz_martingale_statistic(tanh_model, ens, pi, q, 0.2)
    assert max(st.values()) <= 4.0, st
    assert time.perf_counter() - start < 120.0


@criterion(4)
def test_marginal_martingale_optimal(big_tanh, tanh_model, tanh_erg):
    _, sol = big_tanh
    assert marginal_martingale_statistic(sol, exponential_handle(tanh_model, tanh_erg))["statistic"] <= 4.0


# ---------------------------------------------------------------- self-generation, optimality, bidual


@criterion(5)
def test_self_generation(flat_model, flat_erg, flat_paths):
    U = exponential_handle(flat_model, flat_erg)
    rep = verify_self_generation(U, ConjugatePair.of(U), flat_paths, 0.8, model=flat_model)
    assert rep.get("primal").statistic <= 4.0
    assert rep.get("dual").statistic <= 4.0


@pytest.fixture(scope="module")
def flat_primal(flat_model, flat_erg, flat_paths):
    return solve_exponential_primal(flat_model, flat_erg, tanh_claim(), 0.0, T, ensemble=flat_paths, xi=0.2)


@pytest.fixture(scope="module")
def optimality(flat_primal, flat_model, flat_erg):
    U = exponential_handle(flat_model, flat_erg)
    return verify_optimality(flat_primal, U, n_perturbations=20,
                             negative_control=ControlPath.constant(0.0, flat_primal.ensemble))


@criterion(6)
def test_optimality_perturbations(optimality):
    assert optimality.get("primal_perturbation").statistic <= 3.0
    assert optimality.get("dual_perturbation").statistic >= -3.0
    assert optimality.get("negative_control").statistic < -3.0


@criterion(8)
def test_bidual_relation(optimality):
    chk = optimality.get("bidual")
    assert chk.passed, chk


# ---------------------------------------------------------------- duality round trip


@criterion(7)
def test_round_trip(flat_primal, flat_model, flat_erg):
    U = exponential_handle(flat_model, flat_erg)
    dual = dual_from_primal(flat_primal, U)
    back = primal_from_dual(dual, ConjugatePair.of(U))
    assert np.max(np.abs(back.X - flat_primal.X)) <= 1e-8 + dual.residual
    k = flat_primal.ensemble.index_of(T)
    assert np.max(np.abs(back.pi_star.values[:, :k] - flat_primal.pi_star.values[:, :k])) <= 1e-8 + dual.residual
    assert abs(back.xi - flat_primal.xi) <= 1e-8


@criterion(7)
def test_dual_residual_order(flat_model, flat_erg):
    U = exponential_handle(flat_model, flat_erg)
    steps = [1 / 250, 1 / 500, 1 / 1000]
    res = []
    for dt in steps:
        ens = simulate_factor_paths(flat_model, 0.0, T, dt, 5000, 21)
        sol = solve_exponential_primal(flat_model, flat_erg, tanh_claim(), 0.0, T, {"dt": dt / 4}, ensemble=ens)
        res.append(dual_from_primal(sol, U).residual)
    slope = np.polyfit(np.log(steps), np.log(res), 1)[0]
    assert 0.8 <= slope <= 1.2, (res, slope)
    for a, b in zip(res, res[1:]):
        assert 1.6 <= a / b <= 2.5


# ---------------------------------------------------------------- forward OCE


@pytest.fixture(scope="module")
def oce_engine(tanh_model, tanh_erg, tanh_paths):
    return ExponentialOceEngine(tanh_model, tanh_erg, 0.0, T, 1.0, ensemble=tanh_paths)


@criterion(9)
def test_oce_dual_gap(oce_engine, tanh_paths):
    P = tanh_claim()
    rep = oce_engine.report(P)
    assert abs(rep.normalized - rep.dual_value) <= 5e-3
    up, se = oce_engine.certificate(P, ControlPath.constant(0.0, tanh_paths))
    assert up >= rep.normalized - 3 * se


@criterion(9)
def test_classical_reduction():
    m = make_model(0.0, rho=0.0)
    ens = simulate_factor_paths(m, 0.0, 2 * T, 1 / 250, 40000, 303)
    res = classical_reduction_check(m, solve_ergodic(m), tanh_claim(), 1.0, 0.0, T, ens)
    assert abs(res["difference"]) <= 3 * res["se"] or res["difference"] == 0.0, res


@criterion(10)
def test_oce_axioms(oce_engine, tanh_paths):
    P1 = tanh_claim()
    P2 = EndowmentSpec.factor(lambda v: np.tanh(v) - 0.5, 1.5, T)
    ax = axiom_suite(oce_engine, P1, P2, 0.3, 0.4, ControlPath.constant(1.0, tanh_paths))
    assert len(ax) == 6
    assert all(r["passed"] is not False for r in ax.values()), ax
    assert abs(ax["cash_invariance"]["defect"]) <= oce_engine.solver_tol


@criterion(10)
@pytest.mark.parametrize("factor", [1.0, 1.5, 2.0])
def test_oce_maturity(oce_engine, factor):
    res = oce_maturity_check(oce_engine, tanh_claim(), 0.0, T, round(factor * T, 10))
    assert abs(res["diff"]) <= 3 * res["se"] or res["diff"] == 0.0, res


# ---------------------------------------------------------------- decoupling field


def _flat(rho=0.0):
    return MarketModel(constant(0.0), constant(0.0), rho, 1.0, 1.0, 0.0)


def _two_mode(T, n_t):
    return analytic_field("two-mode", np.linspace(0, T, n_t), np.linspace(-3.5, 3.5, 71), np.linspace(-2, 2, 41),
                          delta=0.3, eps=0.1, a=1.0)


def _wealth_claim(T):
    return EndowmentSpec("terminal-factor-wealth-function", lambda v, x: 0.4 * np.tanh(v) + 0.5 * np.tanh(x),
                         0.9, T, lipschitz_x=0.5)


@criterion(11)
def test_decoupling_cross_check():
    m, Tc = _flat(0.5), 0.5
    gv = np.linspace(-5, 5, 101)
    f = analytic_field("exponential", np.linspace(0, Tc, 101), gv, np.linspace(-3, 3, 31), gamma=1.0)
    P = EndowmentSpec.factor(np.tanh, 1.0, Tc)
    sol = solve_decoupling_field(f, m, P, Tc)
    assert sol.meta["sup_wx"] < 1.0
    ref = solve_exponential_primal(m, solve_ergodic(m), P, 0.0, Tc, {"n_v": 1201, "dt": 1 / 4000})
    mask = np.abs(gv) <= 2
    assert np.max(np.abs(sol.y[0][mask] - np.interp(gv[mask], ref.grid_v, ref.y[0])[:, None])) <= 1e-3


@criterion(11)
def test_case_two_gate():
    info = classify(_two_mode(1.0, 21), _flat(), _wealth_claim(1.0), 1.0, 0.0, None)
    bound = math.log(2 / 1.5) / info["K"]
    assert info["case"] == 2 and info["horizon_bound"] == pytest.approx(bound, rel=1e-12)
    ok = 0.9 * bound
    sol = solve_decoupling_field(_two_mode(ok, 41), _flat(), _wealth_claim(ok), ok)
    assert sol.meta["sup_wx"] < 1.0
    for bad in (bound, 1.1 * bound):
        with pytest.raises(PreconditionError):
            solve_decoupling_field(_two_mode(bad, 41), _flat(), _wealth_claim(bad), bad)


@criterion(11)
def test_decoupling_martingale_on_accepted_solve():
    Tc = 1.0
    sol = solve_decoupling_field(_two_mode(Tc, 51), _flat(), _wealth_claim(Tc), Tc)
    assert sol.meta["sup_wx"] < 1.0
    real = realize_decoupling(sol, simulate_factor_paths(_flat(), 0.0, Tc, Tc / 50, 10000, 8), 0.0)
    assert marginal_martingale_statistic(real, sol.meta["field"])["statistic"] <= 4.0


@criterion(11)
def test_cli_exit_codes(tmp_path):
    assert cli("verify", "--config", "decoupling-case2", "--out-dir", str(tmp_path / "a")).returncode == 0
    proc = cli("primal", "--config", "decoupling-case2-long", "--out-dir", str(tmp_path / "b"))
    assert proc.returncode == 3 and "horizon gate" in proc.stderr


# ---------------------------------------------------------------- determinism


@criterion(12)
@pytest.mark.parametrize("command,config", [("report", "flat-theta-entropic"), ("verify", "decoupling-case2")])
def test_determinism(tmp_path, command, config):
    runs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert cli(command, "--config", config, "--out-dir", str(d)).returncode == 0
        runs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert runs[0] == runs[1] and len(runs[0]) >= 2


if __name__ == "__main__":
    sys.exit(subprocess.call([sys.executable, "-m", "pytest", __file__, "-q", *sys.argv[1:]]))
