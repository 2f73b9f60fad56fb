import copy
import json
import time

import numpy as np
import pytest

from tdlmp.der import pv_opt
from tdlmp.netmodel import downstream_paths, to_per_unit
from tdlmp.opf import OpfOptions, assemble, linearized_degradation_cost, solve
from tdlmp.powerflow import base_injections, fixed_injection_powerflow
from tdlmp.schedules import SiteConfig, build_fleet, uniform_scenario
from tdlmp.pricing import (COMPONENTS, DecompositionMismatch, DlmpSeries, MissingDualsError, _thermal_weights,
                           build_sensitivities, decompose, extract_dlmps, sensitivity_residual,
                           verify_self_schedule)
from conftest import feeder_of, fixture_path, solution_of


def doc(name):
    return json.loads(fixture_path(name).read_text())


def operating_point(fd, sol=None):
    """Injections and power-flow state, either at an OPF schedule or at base load."""
    if sol is None:
        p, q = base_injections(fd)
    else:
        dp, dq = sol.schedule.net_injection(sol.problem.fleet, fd.n_nodes)
        p, q = dp - fd.load_p, dq - fd.load_q
    return p, q, fixed_injection_powerflow(fd, p, q, tol=1e-13)


def central_difference(fd, p, q, hour, node, reactive, h=1e-5):
    """Partials w.r.t. consumption at ``node`` (injection decreases)."""
    out = []
    for sign in (1, -1):
        pp, qq = p[:, hour:hour + 1].copy(), q[:, hour:hour + 1].copy()
        (qq if reactive else pp)[node] -= sign * h
        out.append(fixed_injection_powerflow(fd, pp, qq, tol=1e-14))
    a, b = out
    d = lambda f: (f(a) - f(b))[..., 0] / (2 * h)  # noqa: E731
    return {"P": d(lambda r: r.P), "Q": d(lambda r: r.Q), "l": d(lambda r: r.l), "v": d(lambda r: r.v),
            "p0": d(lambda r: r.p0[None])[0]}


@pytest.mark.parametrize("name", ["two_bus", "chain4", "feeder15"])
def test_partials_match_finite_differences(name):
    fd = feeder_of(name)
    p, q, pf = operating_point(fd, solution_of(name))
    for hour in sorted({0, fd.horizon // 2, fd.horizon - 1}):
        op = build_sensitivities(pf, fd, hour)
        assert sensitivity_residual(op, pf, fd) <= 1e-10
        for node in range(1, fd.n_nodes):
            for reactive in (False, True):
                c = op.column(node, reactive)
                ref = central_difference(fd, p, q, hour, node, reactive)
                assert np.abs(op.dP[:, c] - ref["P"]).max() <= 1e-4
                assert np.abs(op.dQ[:, c] - ref["Q"]).max() <= 1e-4
                assert np.abs(op.dl[:, c] - ref["l"]).max() <= 1e-4
                assert np.abs(op.dv[:, c] - ref["v"]).max() <= 1e-4
                assert abs(op.dp0[c] - ref["p0"]) <= 1e-4


def test_two_bus_dp0_matches_difference():
    fd = feeder_of("two_bus")
    p, q, pf = operating_point(fd)
    op = build_sensitivities(pf, fd, 0)
    ref = central_difference(fd, p, q, 0, 1, False)
    assert op.dp0[1] == pytest.approx(ref["p0"], abs=1e-5)
    assert op.dp0[1] > 1.0  # losses grow with load


def test_zero_load_has_no_current_sensitivity():
    fd = feeder_of("feeder15")
    z = np.zeros((fd.n_nodes, 1))
    pf = fixed_injection_powerflow(fd, z, z)
    op = build_sensitivities(pf, fd, 0)
    assert np.all(op.dl == 0)
    assert np.all(op.dv[0] == 0)


def test_chain_leaf_support_is_whole_path():
    fd = feeder_of("chain4")
    _, _, pf = operating_point(fd)
    op = build_sensitivities(pf, fd, 0)
    c = op.column(3)
    assert np.all(np.abs(op.dl[:, c]) > 1e-8)
    assert np.all(np.abs(op.dP[:, c]) > 0.5)


def test_locality_exact_support():
    # only the subtree behind node 12 carries load: off-path lines with no current have exactly zero partials
    fd = feeder_of("feeder15")
    p = np.zeros((fd.n_nodes, 1))
    q = np.zeros((fd.n_nodes, 1))
    p[12], q[12] = -0.02, -0.005
    p[13] = -0.01
    pf = fixed_injection_powerflow(fd, p, q)
    op = build_sensitivities(pf, fd, 0)
    paths = downstream_paths(fd)
    for node in range(1, fd.n_nodes):
        on_path = set(paths[node])
        for k in range(fd.n_lines):
            val = abs(op.dl[k, op.column(node)])
            if k in on_path and pf.l[k, 0] > 0:
                assert val > 1e-9, (node, k)
            elif k not in on_path and pf.l[k, 0] == 0:
                assert val == 0.0, (node, k)
            elif k not in on_path:
                # coupled only through the shared voltage: second order and small
                assert val < 1e-2 * max(abs(op.dl[kk, op.column(node)]) for kk in on_path | {k}) or val < 1e-8


def test_extract_dlmps_root_identity(solved):
    _, sol = solved
    d = extract_dlmps(sol)
    fd = sol.problem.feeder
    assert np.abs(d.lam_p[0] - fd.lmp).max() <= 1e-6
    assert np.abs(d.lam_q[0] - fd.q_price).max() <= 1e-6
    lp, lq = d.at(1)
    assert lp.shape == (fd.horizon,)


def test_extract_dlmps_errors():
    sol = copy.copy(solution_of("two_bus"))
    sol.lam_p = None
    with pytest.raises(MissingDualsError):
        extract_dlmps(sol)
    sol = copy.copy(solution_of("two_bus"))
    sol.lam_p = sol.lam_p + 0.01
    with pytest.raises(ArithmeticError):
        extract_dlmps(sol)


def test_two_bus_marginal_loss_identity():
    sol = solution_of("two_bus")
    fd = sol.problem.feeder
    dec = decompose(sol)
    for t in range(fd.horizon):
        op = build_sensitivities(sol, fd, t)
        c = op.column(1)
        expected = fd.lmp[t] * (1 + fd.r @ op.dl[:, c]) + fd.q_price[t] * (fd.x @ op.dl[:, c])
        assert sol.lam_p[1, t] == pytest.approx(expected, abs=1e-7)
    assert np.all(dec.p["transformer_degradation"] == 0)
    # inactive limits carry only interior-point residue in their duals
    for c in ("voltage", "current"):
        assert np.abs(dec.p[c]).max() <= 1e-9 and np.abs(dec.q[c]).max() <= 1e-9


def test_decomposition_closes_on_fixtures(solved):
    name, sol = solved
    dec = decompose(sol, strict=True)
    tol_p = 1e-4 * np.maximum(1.0, np.abs(sol.lam_p))
    tol_q = 1e-4 * np.maximum(1.0, np.abs(sol.lam_q))
    assert np.all(np.abs(dec.total() - sol.lam_p) <= tol_p)
    assert np.all(np.abs(dec.total(reactive=True) - sol.lam_q) <= tol_q)
    assert not dec.untrusted.any()
    # root prices carry no network components
    assert np.allclose(dec.p["real_power"][0], sol.problem.feeder.lmp)


def test_decomposition_mismatch_raises():
    sol = copy.copy(solution_of("chain4"))
    sol.lam_p = sol.lam_p.copy()
    sol.lam_p[2, 1] += 0.01
    with pytest.raises(DecompositionMismatch) as ei:
        decompose(sol, strict=True)
    assert ei.value.details["node"] == 2 and ei.value.details["hour"] == 1
    assert set(COMPONENTS) <= set(ei.value.details)
    assert decompose(sol).max_closure_error == pytest.approx(0.01, rel=1e-3)


def test_binding_ampacity_drives_current_component():
    d = doc("chain4")
    fd0 = to_per_unit(d)
    _, _, pf = operating_point(fd0)
    amps = np.sqrt(pf.l[2].max()) * fd0.base.i_base("lv")
    d["lines"][2]["ampacity_A"] = round(1.1 * amps, 3)
    fd = to_per_unit(d)
    sites = SiteConfig.from_document(d)
    fleet = build_fleet(uniform_scenario(sites, 5, 0.0), fd, sites)
    sol = solve(assemble(fd, fleet, OpfOptions()))
    assert sol.mu_l[2].max() > 1e-4
    dec = decompose(sol, strict=True)
    cur = dec.p["current"]
    hours = np.flatnonzero(sol.mu_l[2] > 1e-6)
    assert np.all(cur[3, hours] > 0)
    # upstream nodes see the limit only through voltage coupling
    assert np.abs(cur[:3, hours]).max() < 1e-2 * cur[3, hours].min()


def test_thermal_weights():
    W = _thermal_weights(0.75, 5, cyclic=False)
    assert W[3, 1] == pytest.approx(0.75**2) and W[1, 3] == 0 and W[2, 2] == 1
    Wc = _thermal_weights(0.75, 5, cyclic=True)
    # periodic response: h = γ·h_prev + u over a cycle, for a unit impulse at t'
    for tp in range(5):
        h = Wc[:, tp]
        u = np.zeros(5)
        u[tp] = 1
        assert np.allclose(h, 0.75 * np.roll(h, 1) + u)


def test_transformer_component_matches_degradation_difference():
    sol = solution_of("chain4")
    fd = sol.problem.feeder
    dec = decompose(sol)
    p, q, _ = operating_point(fd, sol)
    scale = fd.base.s_base * fd.dt
    h = 1e-6
    for t in range(fd.horizon):
        costs = []
        for sign in (1, -1):
            pp = p.copy()
            pp[3, t] -= sign * h
            pf = fixed_injection_powerflow(fd, pp, q, tol=1e-14)
            costs.append(linearized_degradation_cost(fd, pf.l))
        fd_val = (costs[0] - costs[1]) / (2 * h) / scale
        assert dec.p["transformer_degradation"][3, t] == pytest.approx(fd_val, rel=1e-3, abs=1e-7)
    # future hours weigh in: a change at t' moves the recursion at every later period
    assert np.abs(dec.p["transformer_degradation"][3]).max() > 0


def test_self_schedule_fixed_point():
    for name in ("chain4", "feeder15"):
        sol = solution_of(name)
        rep = verify_self_schedule(sol, sol.problem.fleet, extract_dlmps(sol))
        assert rep.ok(1e-5), [(d.name, d.gap) for d in rep.devices]
        assert len(rep.devices) == len(sol.problem.fleet)


def test_single_pv_best_response_equals_schedule():
    sol = solution_of("chain4")
    d = extract_dlmps(sol)
    for i, pv in enumerate(sol.problem.fleet.pvs):
        bp, bq, _ = pv_opt(pv, d.lam_p[pv.node], d.lam_q[pv.node])
        assert np.allclose(bp, sol.schedule.pv_p[i], atol=1e-6)
        assert np.allclose(bq, sol.schedule.pv_q[i], atol=1e-6)


def test_perturbed_price_is_flagged():
    sol = solution_of("chain4")
    d = extract_dlmps(sol)
    pv = sol.problem.fleet.pvs[0]
    lam_p = d.lam_p.copy()
    lam_q = d.lam_q.copy()
    lam_q[pv.node, 2] *= -1.0  # sign flip makes the announced schedule wrong at hour 2
    lam_p[pv.node, 3] *= 1.1
    rep = verify_self_schedule(sol, sol.problem.fleet, DlmpSeries(lam_p, lam_q))
    pvc = [c for c in rep.devices if c.kind == "pv"][0]
    assert pvc.gap > 1e-5 and 2 in pvc.flagged_hours
    assert not rep.ok()


def test_flat_prices_zero_gap():
    sol = solution_of("chain4")
    fd = sol.problem.feeder
    flat = DlmpSeries(np.full((fd.n_nodes, fd.horizon), 0.05), np.zeros((fd.n_nodes, fd.horizon)))
    rep = verify_self_schedule(sol, sol.problem.fleet, flat)
    ev = [c for c in rep.devices if c.kind == "ev"][0]
    assert abs(ev.gap) <= 1e-6


def test_full_15_node_decomposition_time():
    sol = solution_of("feeder15")
    t0 = time.perf_counter()
    dec = decompose(sol)
    assert time.perf_counter() - t0 < 30.0
    assert dec.lam_p.shape == (15, 24)
