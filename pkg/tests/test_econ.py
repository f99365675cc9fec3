import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vanetchain.econ import (AsymmetricParams, GameParams, best_response_incentive, best_response_size,
                             equilibrium, first_order_residuals, relay_utility, relay_utility_asymmetric, sweep,
                             vehicle_utility)


# ---------------------------------------------------------------- vehicle utility

def test_vehicle_utility_roots():
    assert vehicle_utility(0.0, 3.0, 2.0, 2) == 0.0
    assert vehicle_utility(2 * 3.0 / 2.0, 3.0, 2.0, 2) == pytest.approx(0.0, abs=1e-12)
    assert vehicle_utility(1.0, 2.0, 0.5, 3) == 3 * 2.0 * 1.0 - 0.5


def test_vehicle_argmax_matches_best_response():
    grid = np.linspace(0, 20, 200_001)
    for i_inc, alpha, n_rly in ((3.0, 1.0, 1), (5.0, 0.7, 3), (0.4, 2.5, 2)):
        best = grid[np.argmax(vehicle_utility(grid, i_inc, alpha, n_rly))]
        assert best == pytest.approx(best_response_size(i_inc, alpha, n_rly), abs=grid[1] - grid[0])


def test_vehicle_utility_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        vehicle_utility(1.0, 1.0, 0.0, 1)


# ---------------------------------------------------------------- relay utility

def test_relay_utility_zero_incentive():
    assert relay_utility([5.0, 7.0], 0.0, 100.0) == 0.0


def test_relay_argmax_matches_best_response():
    grid = np.linspace(0, 50, 500_001)
    for sizes, beta in (([2.0, 3.0], 100.0), ([10.0] * 4, 200.0), ([50.0], 20.0)):
        best = grid[np.argmax(relay_utility(sizes, grid, beta))]
        assert best == pytest.approx(best_response_incentive(sum(sizes), beta), abs=grid[1] - grid[0])
    assert best_response_incentive(50.0, 20.0) == 0.0


def test_large_fleet_has_a_nonpositive_relay_range():
    sizes = [8000.0] * 200
    incentives = np.linspace(0.1, 30, 300)
    assert np.any(relay_utility(sizes, incentives, 0.9e7) <= 0)
    assert np.all(relay_utility(sizes, incentives, 1.8e7) > 0)


def test_relay_utility_input_checks():
    with pytest.raises(ValueError):
        relay_utility([1.0], 1.0, 0.0)
    with pytest.raises(ValueError):
        relay_utility([1.0], -1.0, 1.0)


# ---------------------------------------------------------------- asymmetric information

def test_point_mass_equals_symmetric():
    ap = AsymmetricParams((12.5,), (1.0,))
    for inc in (0.0, 0.3, 4.0, 17.0):
        assert relay_utility_asymmetric(ap, 40, inc, 900.0) == relay_utility([12.5] * 40, inc, 900.0)


def test_uniform_two_point_uses_the_mean_size():
    ap = AsymmetricParams((4.0, 10.0), (0.5, 0.5))
    assert relay_utility_asymmetric(ap, 10, 2.0, 50.0) == pytest.approx(50.0 * math.log(3.0) - 7.0 * 10 * 2.0)
    assert relay_utility_asymmetric(ap, 10, 0.0, 50.0) == 0.0


def test_asymmetric_params_validation():
    with pytest.raises(ValueError):
        AsymmetricParams((1.0, 2.0), (0.5, 0.6))
    with pytest.raises(ValueError):
        AsymmetricParams((1.0,), (0.5, 0.5))


# ---------------------------------------------------------------- concavity

@settings(max_examples=200, deadline=None)
@given(s=st.floats(0, 1e4), i_inc=st.floats(0, 100), alpha=st.floats(0.01, 10), n_rly=st.integers(1, 5),
       beta=st.floats(1, 1e8), total=st.floats(0, 1e7))
def test_second_differences_are_negative(s, i_inc, alpha, n_rly, beta, total):
    h = 1e-2 * max(1.0, s)
    u = lambda x: vehicle_utility(x, i_inc, alpha, n_rly)
    assert u(s + h) - 2 * u(s) + u(s - h) < 0
    k = 1e-2 * max(1.0, i_inc)
    r = lambda x: relay_utility([total], x, beta)
    assert r(i_inc + 2 * k) - 2 * r(i_inc + k) + r(i_inc) < 0


# ---------------------------------------------------------------- equilibrium

def test_single_vehicle_first_order_conditions():
    gp = GameParams.uniform(1, 1, 1.0, 10.0)
    eq = equilibrium(gp)
    veh, rly = first_order_residuals(gp, eq)
    assert veh < 1e-8 and rly < 1e-8
    # I(1 + I) = 2 beta for one vehicle with alpha = 1.
    assert eq.i_star == pytest.approx((-1 + math.sqrt(1 + 80)) / 2, rel=1e-9)
    assert eq.i_star == pytest.approx(eq.closed_form_i, rel=1e-9)
    assert eq.second_order_ok and not eq.flagged


@pytest.mark.parametrize("n,n_rly,alpha,beta", [(200, 1, 1.0, 0.9e7), (200, 1, 1.0, 1.8e7), (5, 3, 0.4, 70.0),
                                               (50, 2, 3.0, 1e3)])
def test_equilibrium_matches_closed_form(n, n_rly, alpha, beta):
    gp = GameParams.uniform(n, n_rly, alpha, beta)
    eq = equilibrium(gp)
    assert eq.i_star == pytest.approx(eq.closed_form_i, rel=1e-9)
    veh, rly = first_order_residuals(gp, eq)
    assert veh <= 1e-8 * max(1.0, eq.i_star) and rly <= 1e-8 * beta


def test_doubling_alpha_halves_sizes_at_fixed_incentive():
    alphas = np.array([0.5, 1.0, 3.0])
    for i_inc in (0.5, 2.0, 11.0):
        np.testing.assert_array_equal(best_response_size(i_inc, 2 * alphas, 2),
                                      best_response_size(i_inc, alphas, 2) / 2)


def test_heterogeneous_equilibrium_satisfies_nash_conditions():
    gp = GameParams(4, 2, (0.5, 1.0, 2.0, 4.0), 500.0)
    eq = equilibrium(gp)
    s = np.array(eq.s_star)
    for j, (si, a) in enumerate(zip(s, gp.alphas)):
        grid = np.linspace(max(si - 5, 0), si + 5, 1000)
        assert vehicle_utility(si, eq.i_star, a, gp.n_rly) >= np.max(vehicle_utility(grid, eq.i_star, a, gp.n_rly))
    grid = np.linspace(max(eq.i_star - 5, 0), eq.i_star + 5, 1000)
    assert relay_utility(s, eq.i_star, gp.beta) >= np.max(relay_utility(s, grid, gp.beta)) - 1e-9


def test_nonpositive_equilibrium_is_flagged_not_raised():
    gp = GameParams.uniform(3, 1, 1.0, 1e-9)
    eq = equilibrium(gp)
    assert eq.i_star < 1e-6 and math.isfinite(eq.u_relay)


def test_game_params_validation():
    with pytest.raises(ValueError):
        GameParams(2, 1, (1.0,), 1.0)
    with pytest.raises(ValueError):
        GameParams.uniform(2, 1, -1.0, 1.0)
    with pytest.raises(ValueError):
        GameParams.uniform(2, 0, 1.0, 1.0)


# ---------------------------------------------------------------- sweep

def test_single_point_grid():
    rows = sweep(GameParams.uniform(3, 1, 1.0, 10.0), [10.0], [2.0])
    assert len(rows) == 1 and rows[0].flag == "equilibrium"


def test_vehicle_utilities_do_not_depend_on_beta():
    rows = sweep(GameParams.uniform(4, 2, 1.5, 10.0), [10.0, 99.0], np.linspace(0, 5, 11))
    first, second = rows[:11], rows[11:]
    assert [r.u_i for r in first] == [r.u_i for r in second]
    assert [r.u_rly for r in first] != [r.u_rly for r in second]


def test_fixed_size_sweep_shows_the_beta_story():
    gp = GameParams.uniform(200, 1, 1.0, 0.9e7, size=8000.0)
    incentives = np.linspace(1, 30, 30)
    low = sweep(gp, [0.9e7], incentives, fixed_sizes=gp.sizes)
    high = sweep(gp, [1.8e7], incentives, fixed_sizes=gp.sizes)
    assert any("nonpositive" in r.flag for r in low)
    assert all(r.u_rly > 0 and r.flag == "" for r in high)
