import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from forward_fbsde.ergodic import solve_ergodic
from forward_fbsde.errors import ArgumentError, BoxTooSmallError, DomainError, PreconditionError, RegimeError
from forward_fbsde.fbsde import EndowmentSpec
from forward_fbsde.functions import constant
from forward_fbsde.market import ControlPath, MarketModel, simulate_factor_paths
from forward_fbsde.oce import (
    AXIOMS,
    DeflatorSpec,
    ExponentialOceEngine,
    axiom_suite,
    axioms_passed,
    classical_reduction_check,
    forward_oce_dual_certificate,
    forward_oce_exponential,
    normalize_utility,
    oce_maturity_check,
    static_oce,
    write_axiom_csv,
)

T = 0.4


def entropic(gamma, sd, payoff=np.tanh):
    val = integrate.quad(lambda w: np.exp(-gamma * payoff(w)) * stats.norm.pdf(w, 0, sd), -12 * sd, 12 * sd,
                         epsabs=1e-13)[0]
    return -math.log(val) / gamma


# ------------------------------------------------------------------ static OCE


def test_static_constancy():
    assert static_oce(lambda x: 1 - np.exp(-x), np.full(100, 0.7)) == pytest.approx(0.7, abs=1e-8)


def test_static_gaussian_entropic(rng):
    samples = rng.normal(0.3, 0.5, 200_000)
    got = static_oce(lambda x: 1 - np.exp(-x), samples)
    # exact on the empirical law; the population value m - s^2/2 sits within MC error
    emp = -math.log(np.mean(np.exp(-samples)))
    assert got == pytest.approx(emp, abs=1e-7)
    assert abs(got - (0.3 - 0.125)) <= 4 * np.std(np.exp(-samples)) / np.exp(-0.175) / math.sqrt(samples.size)


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=40))
def test_static_linear_is_mean(xs):
    assert static_oce(lambda x: x, np.array(xs)) == pytest.approx(np.mean(xs), abs=1e-9)


@given(st.floats(-2, 2))
def test_static_cash_invariance(c):
    rng = np.random.default_rng(1)
    s = rng.normal(0.0, 0.4, 500)
    u = lambda x: 1 - np.exp(-x)  # noqa: E731
    assert static_oce(u, s + c) == pytest.approx(static_oce(u, s) + c, abs=1e-7)


def test_normalization():
    u = normalize_utility(lambda x: -np.exp(-2 * x))
    assert float(u(np.array(0.0))) == pytest.approx(0.0, abs=1e-12)
    h = 1e-5
    assert float((u(np.array(h)) - u(np.array(-h))) / (2 * h)) == pytest.approx(1.0, rel=1e-6)


def test_static_box_too_small(rng):
    with pytest.raises(BoxTooSmallError):
        static_oce(lambda x: 1 - np.exp(-x), rng.normal(0, 1, 100), search_box=(2.0, 3.0))


# ------------------------------------------------------------------ forward OCE


@pytest.fixture(scope="module")
def entropic_setup():
    m = MarketModel(constant(0.0), constant(0.0), 0.0, 1.0, 1.0, 0.0)
    erg = solve_ergodic(m)
    ens = simulate_factor_paths(m, 0.0, 2 * T, 1 / 250, 40000, 3)
    return m, erg, ens


def test_forward_zero_and_constant(entropic_setup):
    m, erg, ens = entropic_setup
    eng = ExponentialOceEngine(m, erg, 0.0, T, 1.3)
    assert eng.normalized(EndowmentSpec.constant(0.0, T)) == pytest.approx(0.0, abs=1e-12)
    assert eng.normalized(EndowmentSpec.constant(-0.5, T)) == pytest.approx(-0.65, abs=1e-12)


def test_forward_entropic_oracle(entropic_setup):
    m, erg, ens = entropic_setup
    P = EndowmentSpec.factor(np.tanh, 1.0, T)
    rep = forward_oce_exponential(m, erg, P, 1.0, 0.0, T, ensemble=ens)
    target = entropic(1.0, math.sqrt(T))
    assert rep.normalized == pytest.approx(target, abs=1e-3)
    assert rep.forward_entropic_risk == pytest.approx(-rep.normalized, abs=1e-15)
    # certificate at q* reproduces the value; q = 0 only bounds it from above
    assert abs(rep.dual_value - target) <= 3 * rep.dual_se + 1e-3
    q0 = ControlPath.constant(0.0, ens)
    up, se = ExponentialOceEngine(m, erg, 0.0, T, 1.0, ensemble=ens).certificate(P, q0)
    assert up >= rep.normalized - 3 * se
    assert forward_oce_dual_certificate(m, erg, P, 1.0, 0.0, T, q0, ens) == pytest.approx(up, abs=1e-12)


def test_certificate_penalty_for_constants(flat_model, flat_erg, flat_paths):
    eng = ExponentialOceEngine(flat_model, flat_erg, 0.0, T, 1.0, ensemble=flat_paths)
    P = EndowmentSpec.constant(0.2, T)
    at_opt, _ = eng.certificate(P, eng.q_star(P))
    assert at_opt == pytest.approx(0.2, abs=1e-12)
    off, se = eng.certificate(P, ControlPath.constant(0.3, flat_paths))
    # penalty E^Q[int |q|^2 dt]/2 = 0.045 T under q = 0.3
    assert off >= 0.2
    assert off == pytest.approx(0.2 + 0.5 * 0.09 * T, abs=3 * se + 1e-12)


def test_report_and_axioms(tanh_model, tanh_erg, tanh_paths, tmp_path):
    eng = ExponentialOceEngine(tanh_model, tanh_erg, 0.0, T, 1.0, ensemble=tanh_paths)
    P1 = EndowmentSpec.factor(np.tanh, 1.0, T)
    P2 = EndowmentSpec.factor(lambda v: np.tanh(v) - 0.5, 1.5, T)
    rep = eng.report(P1)
    assert rep.dual_gap <= 5e-3
    ax = axiom_suite(eng, P1, P2, 0.3, 0.4, ControlPath.constant(1.0, tanh_paths))
    assert set(ax) == set(AXIOMS)
    assert axioms_passed(ax), ax
    assert abs(ax["cash_invariance"]["defect"]) <= eng.solver_tol
    lines = write_axiom_csv(ax, tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "axiom,passed,margin" and len(lines) == 7


def test_replication_invariance_flat(flat_model, flat_erg, flat_paths):
    eng = ExponentialOceEngine(flat_model, flat_erg, 0.0, T, 1.0, ensemble=flat_paths)
    P1 = EndowmentSpec.factor(np.tanh, 1.0, T)
    ax = axiom_suite(eng, P1, EndowmentSpec.constant(-1.0, T), -0.5, 0.5, ControlPath.constant(1.0, flat_paths))
    assert ax["replication_invariance"]["passed"]
    assert abs(ax["constancy"]["defect"]) <= 1e-12


@pytest.mark.parametrize("factor", [1.0, 1.5, 2.0])
def test_maturity_independence(tanh_model, tanh_erg, tanh_paths, factor):
    eng = ExponentialOceEngine(tanh_model, tanh_erg, 0.0, T, 1.0, ensemble=tanh_paths)
    P = EndowmentSpec.factor(np.tanh, 1.0, T)
    res = oce_maturity_check(eng, P, 0.0, T, round(factor * T, 10))
    assert res["passed"]
    if factor == 1.0:
        assert res["diff"] == 0.0


def test_maturity_constant_claim(flat_model, flat_erg, flat_paths):
    eng = ExponentialOceEngine(flat_model, flat_erg, 0.0, T, 1.0, ensemble=flat_paths)
    res = oce_maturity_check(eng, EndowmentSpec.constant(0.3, T), 0.0, T, 2 * T)
    assert res["passed"]


def test_maturity_ordering(tanh_model, tanh_erg, tanh_paths):
    eng = ExponentialOceEngine(tanh_model, tanh_erg, 0.0, T, 1.0, ensemble=tanh_paths)
    with pytest.raises(ArgumentError):
        oce_maturity_check(eng, EndowmentSpec.constant(0.0, T), 0.0, T, 0.2)


@pytest.mark.parametrize("gamma,payoff,bound", [
    (1.0, np.tanh, 1.0),
    (2.0, lambda v: np.clip(0.8 * v, -3 * 0.8 * math.sqrt(T), 3 * 0.8 * math.sqrt(T)), 2.0),
])
def test_classical_reduction(entropic_setup, gamma, payoff, bound):
    _, _, ens = entropic_setup
    m = MarketModel(constant(0.0), constant(0.0), 0.0, gamma, 1.0, 0.0)
    P = EndowmentSpec.factor(payoff, bound, T)
    res = classical_reduction_check(m, solve_ergodic(m), P, gamma, 0.0, T, ens)
    assert res["passed"], res


def test_classical_reduction_preconditions(tanh_model, tanh_erg, tanh_paths):
    P = EndowmentSpec.factor(np.tanh, 1.0, T)
    with pytest.raises(PreconditionError):
        classical_reduction_check(tanh_model, tanh_erg, P, 1.0, 0.0, T, tanh_paths)


def test_deflator_rules(rng):
    assert DeflatorSpec(2.0).is_scalar
    with pytest.raises(DomainError):
        DeflatorSpec(-1.0)
    with pytest.raises(DomainError):
        DeflatorSpec(np.full(1000, 2.0) + rng.normal(0, 0.01, 1000))
    assert not DeflatorSpec(np.exp(rng.normal(-0.005, 0.1, 1000))).is_scalar


def test_regime_guard(tanh_model, tanh_erg):
    eng = ExponentialOceEngine(tanh_model, tanh_erg, 0.0, T, 1.0)
    P = EndowmentSpec("terminal-path-function", lambda pv: pv.W1[:, -1], 1.0, T, filtration="W1")
    with pytest.raises(RegimeError):
        eng.normalized(P)
