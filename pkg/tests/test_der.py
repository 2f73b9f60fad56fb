import numpy as np
import pytest

from tdlmp import der
from oracles import lp_oracle, random_itinerary, single_window_ev


def test_ev_opt_matches_lp_oracle_on_random_itineraries():
    rng = np.random.default_rng(2024)
    checked = infeasible = 0
    while checked + infeasible < 100:
        unit = random_itinerary(rng)
        price = rng.uniform(0.01, 0.2, 24)
        ref = lp_oracle(unit, price, 24)
        if ref.status == 2:
            with pytest.raises(der.InfeasibleItineraryError):
                der.ev_opt(unit, price, np.zeros(24))
            infeasible += 1
            continue
        assert ref.status == 0
        p, q, cost = der.ev_opt(unit, price, np.zeros(24))
        assert abs(cost - ref.fun) <= 1e-6 * max(1.0, abs(ref.fun))
        assert der.ev_feasible(unit, p, q, tol=1e-6).feasible
        checked += 1
    assert checked >= 50


def test_ev_opt_with_reactive_prices_matches_cvxpy():
    cp = pytest.importorskip("cvxpy")
    unit = single_window_ev(2, 10, 4.0, 20.0)
    rng = np.random.default_rng(5)
    lp = rng.uniform(0.02, 0.1, 24)
    lq = rng.uniform(-0.02, 0.02, 24)
    p, q, cost = der.ev_opt(unit, lp, lq)
    ts = np.arange(2, 10)
    pp, qq = cp.Variable(8), cp.Variable(8)
    cons = [pp >= 0, pp <= unit.max_rate, 4.0 + cp.sum(pp) >= 20.0,
            4.0 + cp.sum(pp) <= unit.battery_capacity]
    cons += [cp.norm(cp.hstack([pp[i], qq[i]])) <= unit.charger_capacity for i in range(8)]
    prob = cp.Problem(cp.Minimize(lp[ts] @ pp + lq[ts] @ qq), cons)
    prob.solve()
    assert cost == pytest.approx(prob.value, rel=1e-6, abs=1e-7)
    # q at the charger boundary where it is priced
    assert np.allclose(np.hypot(p[ts], q[ts]), unit.charger_capacity, atol=1e-5)


def test_ev_opt_increasing_prices_charges_early():
    unit = single_window_ev(9, 17, 0.0, 12.0)
    price = np.linspace(0.01, 0.1, 24)
    p, q, cost = der.ev_opt(unit, price, np.zeros(24))
    assert np.allclose(p[9:12], 3.3, atol=1e-6)
    assert p[12] == pytest.approx(2.1, abs=1e-6)
    assert np.allclose(p[13:], 0.0, atol=1e-6)
    assert np.allclose(q, 0.0, atol=1e-6)


def test_ev_opt_flat_prices_tie_breaks_to_earliest():
    unit = single_window_ev(9, 17, 0.0, 12.0)
    p, _, _ = der.ev_opt(unit, np.full(24, 0.05), np.zeros(24))
    assert np.allclose(p[9:12], 3.3, atol=1e-5)
    assert p[12] == pytest.approx(2.1, abs=1e-5)
    assert np.allclose(p[13:17], 0.0, atol=1e-5)


def test_ev_opt_infeasible_itinerary():
    unit = single_window_ev(9, 12, 0.0, 12.0)
    with pytest.raises(der.InfeasibleItineraryError, match="cannot reach"):
        der.ev_opt(unit, np.full(24, 0.05), np.zeros(24))


def test_ev_feasibility_examples():
    unit = single_window_ev(19, 24, 6.0, 24.0)
    p = np.zeros(24)
    p[19:24] = 3.3
    rep = der.ev_feasible(unit, p, np.zeros(24))
    assert not rep.feasible  # 5 h x 3.3 = 16.5 < 18
    unit = single_window_ev(0, 8, 6.0, 24.0)
    p = np.zeros(24)
    p[0:6] = 3.3
    rep = der.ev_feasible(unit, p, np.zeros(24))
    # 19.8 kWh delivered against an 18 kWh need overshoots the 24 kWh battery
    assert rep.soc_end[0] == pytest.approx(25.8)
    assert any("soc_max" in v for v in rep.violations)
    # 12 kWh requirement, 3 h at 3.3 kW from empty: deficit 2.1 kWh
    unit = single_window_ev(9, 17, 0.0, 12.0)
    p = np.zeros(24)
    p[9:12] = 3.3
    rep = der.ev_feasible(unit, p, np.zeros(24))
    assert rep.slacks["soc_min"][0] == pytest.approx(-2.1)
    p[2] = 1.0
    rep = der.ev_feasible(unit, p, np.zeros(24))
    assert any("off" in v for v in rep.violations)


def test_pv_corner_solutions():
    rho = np.ones(4)
    pv = der.PvUnit(1, 10.0, rho)
    p, q, _ = der.pv_opt(pv, [0.1, 0, 0.05, 0.0], [0.0, 0.1, 0.05, 0.0])
    assert p[0] == pytest.approx(10.0) and q[0] == 0
    assert p[1] == 0 and q[1] == pytest.approx(10.0)
    # equal prices on the full disc: p = q = C/sqrt(2)
    assert p[2] == pytest.approx(10 / np.sqrt(2)) and q[2] == pytest.approx(10 / np.sqrt(2))
    assert p[3] == 0 and q[3] == 0
    half = der.PvUnit(1, 10.0, np.full(1, 0.5))
    p, q, _ = der.pv_opt(half, [0.05], [0.05])
    assert p[0] == pytest.approx(5.0)
    assert q[0] == pytest.approx(np.sqrt(100 - 25))
    # negative reactive price: absorb
    p, q, _ = der.pv_opt(half, [0.05], [-0.05])
    assert q[0] == pytest.approx(-np.sqrt(75))


def test_pv_opt_matches_grid_search():
    rng = np.random.default_rng(11)
    ang = np.linspace(0, 2 * np.pi, 20001)
    for _ in range(30):
        C = float(rng.uniform(1, 10))
        rho = float(rng.uniform(0.05, 1))
        a, b = rng.uniform(-0.1, 0.2), rng.uniform(-0.1, 0.1)
        pv = der.PvUnit(1, C, np.array([rho]))
        p, q, rev = der.pv_opt(pv, [a], [b])
        assert der.pv_feasible(pv, p, q, tol=1e-9).feasible
        # dense sample of the feasible set boundary and its box cut
        pp = np.clip(C * np.cos(ang), 0, rho * C)
        qq = np.sin(ang) * np.sqrt(np.maximum(C * C - pp * pp, 0))
        assert rev >= (a * pp + b * qq).max() - 1e-9


def test_pv_inactive_hours_zero():
    pv = der.PvUnit(1, 10.0, np.array([0.0, 1.0]))
    p, q, _ = der.pv_opt(pv, [0.1, 0.1], [0.1, 0.1])
    assert p[0] == 0 and q[0] == 0
    with pytest.raises(ValueError):
        der.PvUnit(1, 10.0, np.array([1.5]))


def test_pv_feasibility_circle():
    pv = der.PvUnit(1, 1.0, np.ones(1))
    assert der.pv_feasible(pv, [0.0], [0.0]).feasible
    rep = der.pv_feasible(pv, [1.0], [0.0])
    assert rep.feasible and rep.slacks["apparent"][0] == pytest.approx(0.0)
    rep = der.pv_feasible(pv, [0.6], [0.9])
    assert not rep.feasible and "apparent" in rep.violations[0]


def test_itinerary_validation():
    with pytest.raises(ValueError):
        der.EvItinerary((), (), (), 0.0)
    with pytest.raises(ValueError):
        der.EvItinerary((der.PlugInterval(1, 5, 8), der.PlugInterval(1, 6, 9)), (1.0,), (0, 0), 0.0)
    with pytest.raises(ValueError):
        der.EvItinerary((der.PlugInterval(1, 2, 8),), (), (0,), None)
    with pytest.raises(ValueError):
        single_window_ev(0, 4, 0.0, 30.0)


def test_ev_from_windows_wrap():
    ev = der.ev_from_windows([(3, 19, 7, 18.0)], 24.0, 6.6, 3.3, 1.0)
    assert ev.itinerary.wraps
    iv = ev.itinerary.intervals
    assert (iv[0].begin, iv[0].end) == (0, 7) and (iv[-1].begin, iv[-1].end) == (19, 24)
    assert ev.node_at(24)[20] == 3 and ev.node_at(24)[10] == -1
    agg = der.ev_from_windows([(3, 9, 17, 12.0)], 24.0, 6.6, 3.3, 1.0, units=3)
    assert agg.max_rate == pytest.approx(9.9) and agg.battery_capacity == pytest.approx(72.0)
    rank = der.session_rank(ev, 24)
    assert rank[19] == 0 and rank[0] == 5 and rank[10] == 24


def test_net_injection_signs():
    pv = der.PvUnit(1, 1.0, np.ones(2))
    ev = der.ev_from_windows([(2, 0, 2, 1.0)], 24.0, 6.6, 3.3, 1.0, horizon=2)
    fleet = der.DerFleet((pv,), (ev,))
    s = der.DerSchedule.zeros(fleet, 2)
    s.pv_p[0] = 0.5
    s.ev_p[0] = 0.3
    s.ev_q[0] = -0.1
    p, q = s.net_injection(fleet, 3)
    assert np.allclose(p[1], 0.5) and np.allclose(p[2], -0.3) and np.allclose(q[2], 0.1)
