import dataclasses
import math

import numpy as np
import pytest

from tdlmp.der import DerFleet, PvUnit
from tdlmp.schedules import (ALL_OPTIONS, ComparisonRow, Option, ScenarioSpec, ScheduleError, SiteConfig,
                             apply_lol_threshold, build_fleet, comparison_table, evaluate, run_option, schedule_bau,
                             schedule_tou, uniform_scenario)
from conftest import feeder_of, sites_of

RATE = 3.3  # kW


def one_ev_fleet(kind):
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    site = [s for s in sites.sites if s.kind == kind][0]
    return fd, build_fleet(ScenarioSpec({site.node: 1}, {}), fd, sites)


def kw(fd, arr):
    return np.asarray(arr) * fd.base.s_base


def test_bau_commercial_example():
    fd, fleet = one_ev_fleet("commercial")
    p = kw(fd, schedule_bau(fleet, fd).ev_p[0])
    expected = np.zeros(24)
    expected[9:12] = RATE
    expected[12] = 12.0 - 3 * RATE
    assert np.allclose(p, expected, atol=1e-9)
    assert expected[12] == pytest.approx(2.1)


def test_bau_residential_wraps_midnight():
    fd, fleet = one_ev_fleet("residential")
    sched = schedule_bau(fleet, fd)
    p = kw(fd, sched.ev_p[0])
    assert np.allclose(p[19:24], RATE)
    assert p[0] == pytest.approx(18.0 - 5 * RATE)
    assert np.all(p[1:19] == 0)
    assert p.sum() / RATE == pytest.approx(18.0 / 3.3)
    assert np.all(sched.ev_q == 0)


def test_tou_equals_bau_under_increasing_prices():
    fd, fleet = one_ev_fleet("commercial")
    assert np.allclose(schedule_tou(fleet, fd).ev_p, schedule_bau(fleet, fd).ev_p, rtol=0, atol=1e-15)


def test_tou_shifts_evening_charging_to_cheap_hours():
    fd, fleet = one_ev_fleet("residential")
    p = kw(fd, schedule_tou(fleet, fd).ev_p[0])
    assert np.all(p[19:22] == 0)
    assert np.allclose(p[[22, 23, 0, 1, 2]], RATE)
    # partial hour lands on the latest of the equally cheap selected hours
    assert p[3] == pytest.approx(18.0 - 5 * RATE)
    assert p.sum() == pytest.approx(18.0)


def test_tou_flat_prices_reproduce_bau():
    fd = feeder_of("feeder15")
    flat = dataclasses.replace(fd, lmp=np.full(fd.horizon, 0.05))
    fleet = build_fleet(uniform_scenario(sites_of("feeder15"), 2, 0.0), flat, sites_of("feeder15"))
    assert np.allclose(schedule_tou(fleet, flat).ev_p, schedule_bau(fleet, flat).ev_p, rtol=0, atol=1e-15)


@pytest.mark.parametrize("evs", [1, 3, 5])
def test_open_loop_schedules_are_multiples_of_rate(evs):
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    fleet = build_fleet(uniform_scenario(sites, evs, 0.0), fd, sites)
    for sched in (schedule_bau(fleet, fd), schedule_tou(fleet, fd)):
        for i, ev in enumerate(fleet.evs):
            ratio = sched.ev_p[i] / ev.max_rate
            partial = ~np.isclose(ratio, np.round(ratio), atol=1e-9)
            assert partial.sum() <= 1
            assert np.all(ratio <= 1 + 1e-12)


def test_pv_zero_irradiation_outputs_nothing():
    fd = feeder_of("feeder15")
    fleet = DerFleet((PvUnit(3, 0.03, np.zeros(fd.horizon)),), ())
    sched = schedule_bau(fleet, fd)
    assert np.all(sched.pv_p == 0) and np.all(sched.pv_q == 0)


def test_pv_bau_follows_available_power():
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    fleet = build_fleet(uniform_scenario(sites, 0, 30.0), fd, sites)
    sched = schedule_tou(fleet, fd)
    for i, pv in enumerate(fleet.pvs):
        assert np.allclose(sched.pv_p[i], pv.adjusted_capacity)
        assert np.all(sched.pv_q[i] == 0)


def test_unmeetable_need_raises():
    fd = feeder_of("feeder15")
    sites = SiteConfig(tuple(s.__class__(s.kind, s.node, 9, 11, 12.0) for s in sites_of("feeder15").sites[1:]))
    with pytest.raises((ScheduleError, ValueError)):
        fleet = build_fleet(uniform_scenario(sites, 1, 0.0), fd, sites)
        schedule_bau(fleet, fd)


def test_scenario_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec({1: -1}, {})
    with pytest.raises(ValueError):
        ScenarioSpec({}, {}, option="Cheapest")
    s = ScenarioSpec({1: 2}, {1: 10.0}, "ToU")
    assert s.option is Option.TOU and s.label == "2EV/10kVA"
    assert s.with_option(Option.BAU).option is Option.BAU


def test_base_case_deltas_zero_and_totals_add_up():
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    scen = [uniform_scenario(sites, 0, 0.0), uniform_scenario(sites, 1, 10.0)]
    rows, cells, base = comparison_table(scen, fd, sites)
    assert rows[0].option == "base" and rows[0].dTotal == 0.0
    assert len(rows) == 1 + len(ALL_OPTIONS)
    assert [r.option for r in rows[1:]] == [o.value for o in ALL_OPTIONS]
    for r in rows[1:]:
        assert r.dTotal == pytest.approx(r.dP + r.dQ + r.dTransformer, abs=1e-12)
    # the base case evaluated as a scenario gives zero deltas under every option
    again = run_option(ScenarioSpec({}, {}, Option.TOU), fd, sites)
    assert again.expost.total == pytest.approx(base.expost.total, abs=1e-12)


def test_table_combinatorics():
    fd, sites = feeder_of("chain4"), sites_of("chain4")
    scen = [uniform_scenario(sites, e, k) for e in (0, 1, 2) for k in (0.0, 5.0, 10.0)]
    rows, cells, _ = comparison_table(scen, fd, sites)
    assert len(cells) == 9 * 4 - 4
    assert len(rows) == len(cells) + 1
    labels = [(r.scenario, r.option) for r in rows[1:]]
    assert labels == [(s.label, o.value) for s in scen if not s.base_case for o in ALL_OPTIONS]


def test_pq_opt_beats_full_opt_on_energy_cost():
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    spec = uniform_scenario(sites, 3, 30.0)
    pq = run_option(spec.with_option(Option.PQ_OPT), fd, sites)
    full = run_option(spec.with_option(Option.FULL_OPT), fd, sites)
    assert pq.solution.cost_p + pq.solution.cost_q <= full.solution.cost_p + full.solution.cost_q + 1e-6
    assert pq.expost.cost_transformer >= full.expost.cost_transformer


def test_failed_cells_keep_their_rows():
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    bad = SiteConfig(tuple(s.__class__(s.kind, s.node, 9, 11, 12.0) for s in sites.sites[1:]))
    spec = ScenarioSpec({sites.sites[1].node: 1}, {}, name="tight")
    rows, cells, _ = comparison_table([spec], fd, bad, options=(Option.BAU, Option.FULL_OPT))
    assert all(c.status == "failed" for c in cells)
    assert all(math.isnan(r.dTotal) and r.status.startswith("failed") for r in rows[1:])


def test_lol_threshold_marks_failure():
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    cell = run_option(uniform_scenario(sites, 1, 0.0, Option.BAU), fd, sites)
    apply_lol_threshold(cell, cell.expost.lol / 2, 1.0)
    assert cell.status == "failed" and "LoL" in cell.failures[0]


def test_expost_uses_exact_thermal_model():
    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    cell = run_option(uniform_scenario(sites, 3, 0.0, Option.FULL_OPT), fd, sites)
    ex = evaluate(fd, cell.solution.problem.fleet, cell.schedule)
    name = fd.monitored[0]
    tr = ex.trajectories[name]
    assert tr.top_oil[0] == pytest.approx(tr.top_oil[-1], abs=1e-6)
    cost = sum(fd.transformers[n].hourly_cost * ex.lol_by_transformer[n] for n in ex.lol_by_transformer)
    assert ex.cost_transformer == pytest.approx(cost)
    assert ComparisonRow.COLUMNS[-1] == "status"


def test_open_loop_starts_from_first_hour_steady_state():
    from tdlmp.thermal import top_oil_initial

    fd, sites = feeder_of("feeder15"), sites_of("feeder15")
    cell = run_option(uniform_scenario(sites, 3, 0.0, Option.BAU), fd, sites)
    for k, name in fd.transformer_lines():
        h0 = top_oil_initial(fd.transformers[name], float(fd.ambient[0]), float(cell.expost.l[k, 0]))
        assert cell.expost.trajectories[name].top_oil[0] == pytest.approx(h0, abs=1e-12)
