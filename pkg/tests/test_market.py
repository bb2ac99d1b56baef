import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exchange_design import ValidationError
from exchange_design.market import (
    CAP_TOL,
    MarketState,
    ModelParams,
    OptionSpec,
    arrival_intensity,
    bachelier_delta,
    cap_open,
    h_value,
    hamiltonian,
    hamiltonian_batch,
    mm_optimal_spread,
    reference_options,
)


def test_bachelier_at_the_money():
    assert bachelier_delta(100.0, 100.0, 30.0, 0.3) == 0.5


def test_bachelier_one_standard_deviation():
    sigma, tau = 0.3, 4.0
    expected = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    # 100 + 0.6 - 100 is not exactly 0.6 in binary
    assert bachelier_delta(100.0 + sigma * math.sqrt(tau), 100.0, tau, sigma) == pytest.approx(expected, abs=1e-14)
    assert bachelier_delta(sigma * math.sqrt(tau), 0.0, tau, sigma) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.8413, abs=1e-4)


def test_bachelier_deep_out_of_the_money():
    assert bachelier_delta(100.0 - 6 * 0.3, 100.0, 1.0, 0.3) < 1e-8


def test_bachelier_rejects_nonpositive_maturity():
    with pytest.raises(ValidationError):
        bachelier_delta(100.0, 100.0, 0.0, 0.3)
    with pytest.raises(ValidationError):
        bachelier_delta(100.0, 100.0, 1.0, 0.0)


def test_intensity_at_minus_fee_is_A(params):
    assert arrival_intensity(-0.5, 0.5, params) == params.A


def test_intensity_reference_value(params):
    assert arrival_intensity(0.5, 0.5, params, "ask", 0.0) == pytest.approx(1.5 * math.exp(-1.0), abs=1e-15)
    assert 1.5 * math.exp(-1.0) == pytest.approx(0.5518, abs=1e-4)


def test_intensity_cap_is_strict(params):
    assert arrival_intensity(0.5, 0.5, params, "ask", -params.q_bar) == 0.0
    assert arrival_intensity(0.5, 0.5, params, "bid", params.q_bar) == 0.0
    assert arrival_intensity(0.5, 0.5, params, "ask", -params.q_bar + 0.1) > 0.0
    assert arrival_intensity(0.5, 0.5, params, "bid", -params.q_bar) > 0.0


def test_cap_tolerance_treats_float_sums_as_on_the_cap():
    q = sum([0.1] * 400) * -1  # -40.000000000000x
    assert not cap_open(1.0, q, 40) and abs(q + 40) < CAP_TOL


def test_intensity_bounded_and_monotone(params):
    d = np.linspace(-params.delta_max, params.delta_max, 1001)
    lam = arrival_intensity(d, 0.5, params)
    assert np.all(np.diff(lam) < 0)
    assert lam.max() <= params.A * math.exp(params.decay * (params.delta_max - 0.5)) * (1 + 1e-15)
    assert arrival_intensity(1.0, 0.8, params) < arrival_intensity(1.0, 0.5, params)


def test_optimal_spread_examples(params):
    assert mm_optimal_spread(0.0, params) == pytest.approx(100 * math.log(1.01), abs=1e-12)
    assert 100 * math.log(1.01) == pytest.approx(0.995033, abs=1e-6)
    assert mm_optimal_spread(params.spread_intercept, params) == 0.0
    assert mm_optimal_spread(1e6, params) == -params.delta_max
    assert mm_optimal_spread(-1e6, params) == params.delta_max


def test_hamiltonian_zero_without_flow(params):
    p = params.replace(A=0.0)
    H, _ = hamiltonian(np.zeros((3, 2)), 0.0, p, [0.5, 0.8, 0.8])
    assert H == 0.0


def test_hamiltonian_ask_terms_vanish_at_cap(params):
    z = np.array([[0.3, -0.2]])
    H_cap, _ = hamiltonian(z, -params.q_bar, params, [0.5])
    H_bid_only, _ = hamiltonian(np.array([[-50.0, -0.2]]), -params.q_bar, params, [0.5])
    d = mm_optimal_spread(-0.2, params)
    bid = (1 - math.exp(-params.gamma * (-0.2 + d))) / params.gamma * params.A * math.exp(-params.decay * (d + 0.5))
    assert H_cap == pytest.approx(bid, rel=1e-14)
    assert H_bid_only == pytest.approx(bid, rel=1e-14)


def test_hamiltonian_closed_form_single_option(params):
    g, s, C, A, f = params.gamma, params.sigma, params.C, params.A, 0.5
    x = s * g / C
    per_side = (x / (1 + x)) / g * A * math.exp(-(C / s) * f) * (1 + x) ** (-C / (s * g))
    H, spreads = hamiltonian(np.zeros((1, 2)), 0.0, params, [f])
    assert H == pytest.approx(2 * per_side, rel=1e-13)
    # brute force over the admissible quotes on a 1e-4 grid, one side at a time (h is separable)
    grid = np.arange(-params.delta_max, params.delta_max + 5e-5, 1e-4)
    side = (1 - np.exp(-g * grid)) / g * A * np.exp(-(C / s) * (grid + f))
    assert 2 * side.max() <= H + 1e-12
    assert 2 * side.max() == pytest.approx(H, rel=1e-8)
    assert spreads[0, 0] == spreads[0, 1] == pytest.approx(params.spread_intercept)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.floats(0.0, 1.0),
    st.floats(-60, 60),
)
def test_hamiltonian_dominates_any_quote(z_ask, z_bid, fee, q):
    p = ModelParams()
    z = np.array([[z_ask, z_bid]])
    H, _ = hamiltonian(z, q, p, [fee])
    rng = np.random.default_rng(abs(hash((z_ask, z_bid))) % 2**32)
    for _ in range(20):
        d = rng.uniform(-p.delta_max, p.delta_max, (1, 2))
        assert h_value(d, z, q, p, [fee]) <= H + 1e-12


def test_hamiltonian_batch_matches_scalar(params):
    rng = np.random.default_rng(0)
    fees = np.array([0.5, 0.8, 0.8])
    z = rng.normal(0, 1, (50, 3, 2))
    qs = rng.uniform(-45, 45, 50)
    open_mask = np.stack([cap_open(1.0, qs, params.q_bar), cap_open(-1.0, qs, params.q_bar)], axis=1)
    batch = hamiltonian_batch(z, open_mask, params, fees)
    for n in range(50):
        assert batch[n] == pytest.approx(hamiltonian(z[n], qs[n], params, fees)[0], rel=1e-13, abs=1e-15)


def test_intercept_is_option_independent(params):
    _, spreads = hamiltonian(np.zeros((3, 2)), 0.0, params, [0.5, 0.8, 0.8])
    assert np.all(spreads == params.spread_intercept)


def test_model_params_validation():
    for bad in ({"omega": 1.0}, {"gamma": 0.0}, {"eta": -1.0}, {"A": -1.0}, {"q_bar": 0}, {"R": 0.0}, {"q_bar": 2.5}):
        with pytest.raises(ValidationError):
            ModelParams(**bad)
    assert ModelParams().y0 == 0.0


def test_option_spec_validation():
    with pytest.raises(ValidationError):
        OptionSpec(delta=1.0, fee=0.5)
    with pytest.raises(ValidationError):
        OptionSpec(delta=0.5, fee=-0.1)
    with pytest.raises(ValidationError):
        OptionSpec(delta=0.5, fee=0.1, spread_threshold=0.0)


def test_reference_options():
    specs = reference_options()
    assert [s.delta for s in specs] == [0.5, 0.8, 0.2]
    assert [s.fee for s in specs] == [0.5, 0.8, 0.8]
    assert [s.spread_threshold for s in specs] == [2.0, 3.0, 3.0]


def test_market_state_trades():
    deltas = np.array([0.5, 0.8, 0.2])
    st_ = MarketState(t=0.0, S=100.0, inventories=np.zeros(3), agg_q=0.0)
    for opt, side in [(0, "ask"), (1, "bid"), (1, "bid"), (2, "ask")]:
        st_.apply_trade(opt, side, deltas[opt])
    assert st_.inventories.tolist() == [-1, 2, -1]
    assert st_.agg_q == pytest.approx(-0.5 + 1.6 - 0.2, abs=1e-12)
    assert st_.is_consistent(deltas)
    st_.agg_q += 1e-6
    assert not st_.is_consistent(deltas)
