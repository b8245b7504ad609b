import math

import numpy as np
import pytest

from forward_fbsde.ergodic import solve_ergodic
from forward_fbsde.errors import (
    GridError,
    IterationError,
    PreconditionError,
    RegimeError,
    StabilityError,
)
from forward_fbsde.fbsde import (
    EndowmentSpec,
    classify,
    collapse_check,
    dual_from_primal,
    exponential_handle,
    marginal_martingale_statistic,
    primal_from_dual,
    realize_decoupling,
    solve_complete_market,
    solve_decoupling_field,
    solve_exponential_primal,
    verify_maturity_independence,
    verify_optimality,
    verify_self_generation,
    xz_martingale_statistic,
)
from forward_fbsde.fbsde.export import dump_field_csv, primal_summary, to_json
from forward_fbsde.forward_core import ConjugatePair, analytic_field
from forward_fbsde.functions import constant, tanh_scaled
from forward_fbsde.market import ControlPath, MarketModel, simulate_factor_paths

from conftest import make_model

GH_X, GH_W = np.polynomial.hermite_e.hermegauss(80)


def gauss_mean(f, mean, sd):
    return float(np.sum(GH_W * f(mean + sd * GH_X)) / math.sqrt(2 * math.pi))


def path_endowment(fn, T, noise="W1"):
    pick = (lambda pv: fn(pv.W1[:, -1])) if noise == "W1" else (lambda pv: fn(pv.W2[:, -1]))
    return EndowmentSpec("terminal-path-function", pick, 1.0, T, filtration=noise)


# ------------------------------------------------------------------ complete market


@pytest.fixture(scope="module")
def complete_paths():
    m = MarketModel(constant(0.2), constant(0.0), 1.0, 1.0, 0.2, 0.0)
    return simulate_factor_paths(m, 0.0, 1.0, 1 / 250, 40000, 7)


def test_complete_constant_endowment(complete_paths):
    primal, dual = solve_complete_market(0.2, EndowmentSpec.constant(0.4, 1.0), 0.0, 1.0, complete_paths,
                                         n_outer=20, n_inner=200)
    assert primal.Y0 == pytest.approx(0.4, abs=1e-12)
    assert np.allclose(primal.Y, 0.4) and np.all(primal.Z1 == 0.0)
    assert np.all(primal.q_star.values == 0.0)
    np.testing.assert_allclose(dual.Y_tilde, 0.4)


def test_complete_odd_payoff_zero_theta(complete_paths):
    primal, _ = solve_complete_market(0.0, path_endowment(np.tanh, 1.0), 0.0, 1.0, complete_paths,
                                      n_outer=10, n_inner=200)
    assert abs(primal.Y0) <= 3 * primal.meta["Y0_se"]


def test_complete_girsanov_quadrature(complete_paths):
    primal, dual = solve_complete_market(0.2, path_endowment(np.tanh, 1.0), 0.0, 1.0, complete_paths,
                                         n_outer=10, n_inner=500)
    target = gauss_mean(np.tanh, -0.2, 1.0)
    assert abs(primal.Y0 - target) <= 3 * primal.meta["Y0_se"]
    assert dual.density_martingale_stat() <= 4.0


def test_complete_rejects_orthogonal_noise(complete_paths):
    with pytest.raises(RegimeError):
        solve_complete_market(0.2, path_endowment(np.tanh, 1.0, "W2"), 0.0, 1.0, complete_paths)


# ------------------------------------------------------------------ exponential regime


def test_zero_endowment(flat_model, flat_erg, flat_paths):
    sol = solve_exponential_primal(flat_model, flat_erg, EndowmentSpec.constant(0.0, 0.4), 0.0, 0.4,
                                   ensemble=flat_paths, xi=0.1)
    assert collapse_check(sol)["passed"]
    np.testing.assert_allclose(sol.pi_star.values, 0.2, atol=1e-15)
    np.testing.assert_allclose(sol.q_star.values, 0.0, atol=1e-15)


def test_constant_endowment(tanh_model, tanh_erg):
    sol = solve_exponential_primal(tanh_model, tanh_erg, EndowmentSpec.constant(-0.3, 0.4), 0.0, 0.4)
    np.testing.assert_allclose(sol.y, -0.3, atol=1e-12)
    assert np.max(np.abs(sol.z1)) <= 1e-10 and np.max(np.abs(sol.z2)) <= 1e-10


@pytest.mark.parametrize("rho,gamma", [(0.0, 1.0), (0.0, 2.0), (0.5, 2.0)])
def test_entropic_closed_form(rho, gamma):
    # theta = 0: the orthogonal part of the claim is priced entropically at risk aversion gamma (1 - rho^2)
    m = make_model(theta=0.0, rho=rho, gamma=gamma)
    erg = solve_ergodic(m)
    P = EndowmentSpec.factor(tanh_scaled(1.0), 1.0, 1.0)
    sol = solve_exponential_primal(m, erg, P, 0.0, 1.0, {"dt": 1 / 500, "n_v": 601})
    g = gamma * (1 - rho**2)
    sd = math.sqrt((1 - math.exp(-2.0)) / 2)
    exact = -math.log(gauss_mean(lambda v: np.exp(-g * np.tanh(v)), 0.0, sd)) / g
    assert abs(sol.Y0 - exact) <= 1e-3


def test_stability_cap(zero_model, zero_erg):
    P = EndowmentSpec.factor(tanh_scaled(1.0, slope=10.0), 1.0, 0.4)
    with pytest.raises(StabilityError):
        solve_exponential_primal(zero_model, zero_erg, P, 0.0, 0.4, z_cap=1.0)


def test_exponential_guards(zero_model, zero_erg):
    with pytest.raises(GridError):
        solve_exponential_primal(zero_model, zero_erg, EndowmentSpec.constant(0.0, 0.4), 0.0, 0.4,
                                 {"dt": 0.3})
    with pytest.raises(RegimeError):
        solve_exponential_primal(zero_model, zero_erg, path_endowment(np.tanh, 0.4), 0.0, 0.4)


@pytest.fixture(scope="module")
def tanh_primal(flat_model, flat_erg, flat_paths):
    P = EndowmentSpec.factor(tanh_scaled(1.0), 1.0, 0.4)
    return solve_exponential_primal(flat_model, flat_erg, P, 0.0, 0.4, ensemble=flat_paths, xi=0.2)


def test_dual_round_trip(tanh_primal, flat_erg):
    U = exponential_handle(tanh_primal.model, flat_erg)
    dual = dual_from_primal(tanh_primal, U)
    assert np.all(dual.D > 0)
    back = primal_from_dual(dual, ConjugatePair.of(U))
    assert np.max(np.abs(back.X - tanh_primal.X)) <= 1e-8
    assert back.xi == pytest.approx(0.2, abs=1e-12)
    k = tanh_primal.ensemble.index_of(0.4)
    np.testing.assert_allclose(back.pi_star.values[:, :k], tanh_primal.pi_star.values[:, :k], atol=1e-8)
    assert dual.density_martingale_stat() <= 4.0


def test_dual_zero_endowment_closed_form(flat_model, flat_erg, flat_paths):
    sol = solve_exponential_primal(flat_model, flat_erg, EndowmentSpec.constant(0.0, 0.4), 0.0, 0.4,
                                   ensemble=flat_paths, xi=0.0)
    dual = dual_from_primal(sol, exponential_handle(flat_model, flat_erg))
    t = flat_paths.times[sol.path_index][None, :]
    # gamma = 1, y = 0, lambda = -0.02
    np.testing.assert_allclose(dual.D, np.exp(-sol.X + 0.02 * t), rtol=1e-12)
    assert dual.residual <= flat_paths.dt


def test_dual_carries_constant(flat_model, flat_erg, flat_paths):
    sol = solve_exponential_primal(flat_model, flat_erg, EndowmentSpec.constant(0.7, 0.4), 0.0, 0.4,
                                   ensemble=flat_paths)
    dual = dual_from_primal(sol, exponential_handle(flat_model, flat_erg))
    np.testing.assert_allclose(dual.Y_tilde, 0.7, atol=1e-12)


def test_martingale_statistics(tanh_primal, flat_model, flat_erg):
    U = exponential_handle(flat_model, flat_erg)
    assert marginal_martingale_statistic(tanh_primal, U)["statistic"] <= 4.0
    ens = tanh_primal.ensemble
    st = xz_martingale_statistic(flat_model, ens, tanh_primal.pi_star, tanh_primal.q_star, 0.2)
    assert max(st.values()) <= 4.0


def test_optimality_and_controls(tanh_primal, flat_model, flat_erg):
    U = exponential_handle(flat_model, flat_erg)
    rep = verify_optimality(tanh_primal, U, n_perturbations=8,
                            negative_control=ControlPath.constant(0.0, tanh_primal.ensemble))
    assert rep.passed, rep.to_dict()
    flat = verify_optimality(tanh_primal, U, n_perturbations=3, eps=(0.0,))
    assert flat.get("primal_perturbation").statistic == 0.0


def test_self_generation(flat_model, flat_erg, flat_paths):
    U = exponential_handle(flat_model, flat_erg)
    rep = verify_self_generation(U, ConjugatePair.of(U), flat_paths, 0.8, model=flat_model)
    assert rep.passed, rep.to_dict()


def test_maturity_independence(tanh_primal, flat_model, flat_erg, flat_paths):
    ctx = {"model": flat_model, "ergodic": flat_erg, "ensemble": flat_paths, "xi": 0.2, "primal": tanh_primal}
    same = verify_maturity_independence(tanh_primal.endowment, 0.4, 0.4, ctx)
    assert same.values["primal_difference"] == 0.0
    assert verify_maturity_independence(tanh_primal.endowment, 0.4, 0.8, ctx).passed


def test_summary_is_json_ready(tanh_primal, tmp_path):
    text = to_json(primal_summary(tanh_primal))
    assert '"regime": "exponential"' in text
    p = dump_field_csv(tanh_primal, tmp_path / "f.csv")
    assert p.read_text().splitlines()[0] == "t,v,y,z1,z2"


# ------------------------------------------------------------------ decoupling field


def _flat_market(rho=0.0):
    return MarketModel(constant(0.0), constant(0.0), rho, 1.0, 1.0, 0.0)


def _two_mode(T, n_t=21):
    return analytic_field("two-mode", np.linspace(0, T, n_t), np.linspace(-3.5, 3.5, 71), np.linspace(-2, 2, 41),
                          delta=0.3, eps=0.1, a=1.0)


def _wealth_claim(T):
    return EndowmentSpec("terminal-factor-wealth-function", lambda v, x: 0.4 * np.tanh(v) + 0.5 * np.tanh(x),
                         0.9, T, lipschitz_x=0.5)


def test_decoupling_exponential_cross_check():
    m = _flat_market(0.5)
    T = 0.5
    gv = np.linspace(-5, 5, 101)
    f = analytic_field("exponential", np.linspace(0, T, 101), gv, np.linspace(-3, 3, 31), gamma=1.0)
    P = EndowmentSpec.factor(np.tanh, 1.0, T)
    sol = solve_decoupling_field(f, m, P, T)
    assert sol.meta["case"] == 1 and sol.meta["sup_wx"] < 1.0
    ref = solve_exponential_primal(m, solve_ergodic(m), P, 0.0, T, {"n_v": 1201, "dt": 1 / 4000})
    mask = np.abs(gv) <= 2
    err = np.abs(sol.y[0][mask] - np.interp(gv[mask], ref.grid_v, ref.y[0])[:, None])
    assert err.max() <= 1e-3


def test_decoupling_zero_endowment():
    T = 0.5
    f = _two_mode(T)
    sol = solve_decoupling_field(f, _flat_market(), EndowmentSpec.constant(0.0, T), T, lipschitz_x=0.0)
    assert np.max(np.abs(sol.y)) == 0.0
    ens = simulate_factor_paths(_flat_market(), 0.0, T, T / 20, 500, 3)
    real = realize_decoupling(sol, ens, 0.3)
    # theta = 0 and rho = 0: the no-endowment allocation is zero
    assert np.all(real.X == 0.3)


def test_case_two_gate_boundaries():
    f = _two_mode(1.0)
    info = classify(f, _flat_market(), _wealth_claim(1.0), 1.0, 0.0, None)
    assert info["case"] == 2
    bound = math.log(4 / 3) / info["K"]
    assert info["horizon_bound"] == pytest.approx(bound, rel=1e-12)
    T_ok, T_bad = 0.9 * bound, 1.02 * bound
    sol = solve_decoupling_field(_two_mode(T_ok, 41), _flat_market(), _wealth_claim(T_ok), T_ok)
    assert sol.meta["sup_wx"] < 1.0
    assert sol.meta["sup_wx"] <= sol.meta["wx_bound"] + 1e-9
    with pytest.raises(PreconditionError):
        solve_decoupling_field(_two_mode(T_bad, 41), _flat_market(), _wealth_claim(T_bad), T_bad)


def test_case_two_needs_wealth_lipschitz_below_one():
    T = 0.5
    P = EndowmentSpec("terminal-factor-wealth-function", lambda v, x: 1.2 * np.tanh(x), 1.2, T, lipschitz_x=1.2)
    with pytest.raises(PreconditionError):
        solve_decoupling_field(_two_mode(T), _flat_market(), P, T)


def test_iteration_failure_names_node():
    T = 0.5
    with pytest.raises(IterationError) as exc:
        solve_decoupling_field(_two_mode(T), _flat_market(), _wealth_claim(T), T, max_iter=1, tol=1e-300)
    assert "t=" in str(exc.value) and "v=" in str(exc.value)


def test_decoupling_paths_are_martingale():
    T = 1.0
    sol = solve_decoupling_field(_two_mode(T, 51), _flat_market(), _wealth_claim(T), T)
    ens = simulate_factor_paths(_flat_market(), 0.0, T, T / 50, 10000, 8)
    real = realize_decoupling(sol, ens, 0.0)
    assert marginal_martingale_statistic(real, sol.meta["field"])["statistic"] <= 4.0
