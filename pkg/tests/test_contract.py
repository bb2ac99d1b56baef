import math

import numpy as np
import pytest

from exchange_design import NumericalError, ValidationError
from exchange_design.contract import (
    GridConfig,
    derived_constants,
    inventory_incentive,
    optimal_trade_incentive,
    solve_contract,
    solve_value_grid,
    spread_surface,
    stability_bound,
    value_function,
    value_monte_carlo,
)
from exchange_design.market import ModelParams, OptionSpec, arrival_intensity, mm_optimal_spread, reference_options


def jump_term_oracle(params, spec, v, v_shift):
    """sup over z of the exchange's per-side jump generator, built from the primitives on a dense z grid.

    For incentive z the market maker quotes d(z); the order arrives at rate lambda(d), moves the
    exchange's value to v_shift * exp(-eta (c - omega (d - threshold) - z)) and the contract pays the
    market maker's H share continuously, which multiplies v by exp(-eta H dt).
    """
    z = np.linspace(-3.0, 3.0, 600_001)
    d = mm_optimal_spread(z, params)
    lam = arrival_intensity(d, spec.fee, params)
    h = (1 - np.exp(-params.gamma * (z + d))) / params.gamma * lam
    jump = lam * (v_shift * np.exp(-params.eta * (spec.weight - params.omega * (d - spec.spread_threshold) - z)) - v)
    return float(np.max(jump - params.eta * h * v))


# ---------------------------------------------------------------- derived constants


def test_reference_constants(params):
    c = derived_constants(params, reference_options())
    assert c.b == 1.0 and c.a == 2.0
    assert c.x2 == pytest.approx(1 + 100 * (1 - 1 / 1.01), abs=1e-12)
    assert c.x2 == pytest.approx(1.990099, abs=1e-6)
    assert np.all(c.x1 == 1.0)
    assert c.O[0] == pytest.approx(1.01**-100 * math.exp(-0.5), rel=1e-13)
    assert 1.01**-100 == pytest.approx(0.36971, abs=1e-5)
    assert c.kappa == pytest.approx(0.3 * 0.01 * 1.0 / 1.01 * 0.3 / 2, rel=1e-14)


@pytest.mark.parametrize(
    "changes, weight",
    [({}, 0.0), ({"omega": 0.2}, 0.0), ({"omega": 0.1, "eta": 0.5}, 0.3), ({"A": 0.7, "gamma": 0.05}, 0.1)],
)
@pytest.mark.parametrize("ratio", [1.0, 0.8, 1.3])
def test_jump_coefficient_matches_primitive_maximization(changes, weight, ratio):
    params = ModelParams().replace(**changes)
    spec = OptionSpec(delta=0.5, fee=0.5, weight=weight, spread_threshold=2.0)
    c = derived_constants(params, [spec])
    v, v_shift = -1.0, -1.0 / ratio
    closed = -v * c.C_tilde[0] * (v / v_shift) ** (c.b / (c.a - c.b))
    assert closed == pytest.approx(jump_term_oracle(params, spec, v, v_shift), rel=1e-7)


def test_no_flow_means_no_jump_coefficient(params):
    c = derived_constants(params.replace(A=0.0), reference_options())
    assert np.all(c.C_hat == 0.0) and np.all(c.C_tilde == 0.0)


def test_omega_one_rejected():
    with pytest.raises(ValidationError):
        ModelParams(omega=1.0)


def test_weight_raises_jump_coefficient(params):
    base = derived_constants(params, reference_options())
    more = derived_constants(params, reference_options((0.1, 0, 0)))
    assert more.C_hat[0] > base.C_hat[0] and more.C_hat[1] == base.C_hat[1]


# ---------------------------------------------------------------- value grid


def test_terminal_row_is_one(coarse_solution):
    assert np.all(coarse_solution.grid.log_values[-1] == 0.0)
    assert np.all(coarse_solution.grid.values[-1] == 1.0)


def test_silent_market_is_pure_decay(params):
    p = params.replace(A=0.0)
    grid = solve_value_grid(p, reference_options(), GridConfig(n_store=11))
    c = derived_constants(p, reference_options())
    expected = -c.kappa * grid.q[None, :] ** 2 * (p.T - grid.times[:, None])
    assert np.allclose(grid.log_values, expected, rtol=1e-9, atol=1e-12)
    assert np.all(grid.log_values[:, grid.q == 0.0] == 0.0)


def test_value_bounds_and_positivity(coarse_solution, params):
    g, c = coarse_solution.grid, coarse_solution.consts
    upper = 2 * c.C_hat.sum() * (params.T - g.times)[:, None]
    lower = -c.kappa * g.q_max**2 * (params.T - g.times)[:, None]
    assert np.all(g.log_values <= upper + 1e-9)
    assert np.all(g.log_values >= lower - 1e-9)
    assert np.all(np.isfinite(g.log_values))
    assert np.all(value_function(g, c, 0.0, g.q[::50]) < 0)


def test_grid_domain_is_padded(coarse_solution, params):
    g = coarse_solution.grid
    assert g.q_max >= params.q_bar + 0.8 - 1e-12 and g.q_min <= -(params.q_bar + 0.8) + 1e-12


def test_dt_above_stability_bound_rejected(params):
    specs = reference_options()
    c = derived_constants(params, specs)
    bound = stability_bound(params, c, params.q_bar + 0.8)
    with pytest.raises(NumericalError, match="stability bound"):
        solve_value_grid(params, specs, GridConfig(dt=bound * 1.5))


def test_grid_refinement(solution, params):
    fine = solve_value_grid(params, reference_options(), GridConfig(dt=0.005, h_Q=0.0125, n_store=11))
    a = float(solution.grid.log_at(0.0, 0.0))
    b = float(fine.log_at(0.0, 0.0))
    # relative change of Ut is the change of log Ut
    assert abs(math.expm1(b - a)) < 1e-3


def test_monte_carlo_trivial_cases(params):
    specs = reference_options()
    assert value_monte_carlo(params, specs, params.T, 3.0, n_paths=10) == (1.0, 0.0)
    p = params.replace(A=0.0)
    c = derived_constants(p, specs)
    est, se = value_monte_carlo(p, specs, 10.0, 5.0, n_paths=100)
    assert est == pytest.approx(math.exp(-c.kappa * 25 * 90), rel=1e-12) and se == 0.0


def test_monte_carlo_single_option(single_solution, params):
    specs = reference_options()[:1]
    est, se = value_monte_carlo(params, specs, 0.0, 0.0, n_paths=100_000, seed=3)
    fd = math.exp(single_solution.grid.log_at(0.0, 0.0))
    assert abs(est - fd) <= 3 * se


def test_monte_carlo_independent_of_workers(params):
    specs = reference_options()
    a = value_monte_carlo(params, specs, 50.0, 10.0, n_paths=4000, seed=9, chunk_size=1000, workers=1)
    b = value_monte_carlo(params, specs, 50.0, 10.0, n_paths=4000, seed=9, chunk_size=1000, workers=3)
    assert a == b


def test_monte_carlo_validation(params):
    with pytest.raises(ValidationError):
        value_monte_carlo(params, reference_options(), 0.0, 0.0, n_paths=0)
    with pytest.raises(ValidationError):
        value_monte_carlo(params, reference_options(), params.T + 1, 0.0)


# ---------------------------------------------------------------- incentives and spreads


def test_terminal_incentive(coarse_solution, params):
    z = optimal_trade_incentive(coarse_solution.grid, coarse_solution.consts, coarse_solution.specs, 0, "ask", params.T, 0.0)
    assert z == pytest.approx(math.log(1.990099009900991 / 2), abs=1e-12)
    assert z == pytest.approx(-0.004963, abs=1e-6)


def test_incentive_side_symmetry(coarse_solution):
    Q = np.linspace(-39.0, 39.0, 27)
    for k in range(3):
        for t in (0.0, 50.0):
            ask = coarse_solution.incentive(k, "ask", t, Q)
            bid = coarse_solution.incentive(k, "bid", t, -Q)
            assert np.max(np.abs(ask - bid)) < 1e-9


def test_incentive_increases_with_weight(coarse_solution, params):
    more = solve_contract(params, reference_options((0.1, 0.0, 0.0)), GridConfig(n_store=101))
    Q = np.linspace(-30, 30, 13)
    for side in ("ask", "bid"):
        for t in (0.0, 60.0):
            assert np.all(more.incentive(0, side, t, Q) > coarse_solution.incentive(0, side, t, Q))


def test_inventory_skew(solution):
    g = solution.grid
    Q = g.q[(g.q > 0) & (g.q <= 40)]
    for k in range(3):
        assert np.all(solution.incentive(k, "ask", 0.0, Q) >= solution.incentive(k, "bid", 0.0, Q))


def test_incentive_domain_underrun(coarse_solution):
    with pytest.raises(NumericalError, match="domain underrun"):
        coarse_solution.incentive(1, "ask", 0.0, coarse_solution.grid.q_min)


def test_inventory_incentive_examples():
    p = ModelParams()
    assert inventory_incentive(0.0, p) == 0.0
    assert inventory_incentive(10.0, p) == pytest.approx(-10 * 0.01 / 1.01, abs=1e-15)
    assert inventory_incentive(1.0, p.replace(gamma=1e9)) == pytest.approx(-1.0, abs=1e-8)


def test_spread_surface_shape_and_symmetry(coarse_solution, params):
    surf = spread_surface(coarse_solution.grid, coarse_solution.consts, coarse_solution.specs, params, 0.0)
    assert surf.spreads.shape == (3, 2, surf.q.size)
    assert np.all(np.abs(surf.q) <= params.q_bar + 1e-9)
    at0 = surf.at(0.0)
    assert np.allclose(at0[:, 0], at0[:, 1], atol=1e-9)
    assert np.all(np.isnan(surf.spreads[:, 0, surf.q <= -params.q_bar + 1e-9]))
    assert np.all(np.isnan(surf.spreads[:, 1, surf.q >= params.q_bar - 1e-9]))
    finite = surf.spreads[np.isfinite(surf.spreads)]
    assert np.all(np.abs(finite) <= params.delta_max)


def _assert_skew_monotone(surf, mask):
    for k in range(surf.spreads.shape[0]):
        assert np.all(np.diff(surf.spreads[k, 0, mask]) <= 1e-12)
        assert np.all(np.diff(surf.spreads[k, 1, mask]) >= -1e-12)


def test_spread_skew_monotone_away_from_cap(solution, params):
    surf = solution.spreads(0.0)
    _assert_skew_monotone(surf, np.abs(surf.q) <= params.q_bar - 1.5)


# cap indicator jumps at |Q| = q_bar; the kink survives h_Q refinement
@pytest.mark.xfail(strict=True, reason="spread skew bends within 1.5 units of the inventory cap")
def test_spread_skew_monotone_up_to_cap(solution, params):
    surf = solution.spreads(0.0)
    _assert_skew_monotone(surf, np.abs(surf.q) < params.q_bar - 1e-9)


def test_bound_violation_raises(params):
    with pytest.raises(NumericalError, match="bound condition"):
        solve_contract(params.replace(delta_max=1.5), reference_options(), GridConfig(n_store=11))
