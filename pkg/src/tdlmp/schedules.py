"""Scheduling options, ex-post evaluation and the scenario comparison table."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .conic import SolverConfig, SolverError
from .der import DerFleet, DerSchedule, EvUnit, PvUnit, ev_from_windows, session_rank
from .netmodel import Feeder
from .opf import EXACTNESS_TOL, OpfOptions, OpfSolution, assemble, default_initial_top_oil, solve
from .powerflow import PowerFlowError, fixed_injection_powerflow
from .thermal import periodic_top_oil, simulate_exact, top_oil_initial

log = logging.getLogger(__name__)

LIMIT_TOL = 1e-6


class Option(str, enum.Enum):
    BAU = "BaU"
    TOU = "ToU"
    PQ_OPT = "PQ-opt"
    FULL_OPT = "Full-opt"


ALL_OPTIONS = (Option.BAU, Option.TOU, Option.PQ_OPT, Option.FULL_OPT)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Site:
    kind: str
    node: int
    arrive_h: float
    depart_h: float
    need_kwh: float
    transformer: str | None = None


@dataclass(frozen=True)
class SiteConfig:
    sites: tuple
    battery_kwh: float = 24.0
    rate_kw: float = 3.3
    charger_kva: float = 6.6
    pv_unit_kva: float = 10.0

    @classmethod
    def from_document(cls, doc: dict) -> "SiteConfig":
        sec = doc.get("sites") or {}
        ev = sec.get("ev", {})
        sites = tuple(
            Site(s["kind"], int(s["node"]), float(s["arrive_h"]), float(s["depart_h"]), float(s["need_kWh"]),
                 s.get("transformer"))
            for s in sec.get("locations", [])
        )
        return cls(sites, float(ev.get("battery_kWh", 24.0)), float(ev.get("rate_kW", 3.3)),
                   float(ev.get("charger_kVA", 6.6)), float(sec.get("pv_unit_kVA", 10.0)))


@dataclass(frozen=True)
class ScenarioSpec:
    ev_count: dict  # node -> number of EVs
    pv_kva: dict  # node -> installed PV kVA
    option: Option = Option.FULL_OPT
    base_case: bool = False
    name: str = ""

    def __post_init__(self):
        if any(c < 0 for c in self.ev_count.values()) or any(k < 0 for k in self.pv_kva.values()):
            raise ValueError("EV counts and PV sizes must be nonnegative")
        object.__setattr__(self, "option", Option(self.option))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        evs = sum(self.ev_count.values())
        pv = sum(self.pv_kva.values())
        return f"{evs}EV/{pv:g}kVA"

    def with_option(self, option) -> "ScenarioSpec":
        return ScenarioSpec(dict(self.ev_count), dict(self.pv_kva), Option(option), self.base_case, self.name)


def uniform_scenario(sites: SiteConfig, evs: int, pv_kva: float, option=Option.FULL_OPT, name="") -> ScenarioSpec:
    """Same EV count and PV size at every site; label uses the per-site values."""
    label = name or f"{evs}EV/{pv_kva:g}kVA"
    return ScenarioSpec({s.node: evs for s in sites.sites}, {s.node: pv_kva for s in sites.sites}, Option(option),
                        evs == 0 and pv_kva == 0, label)


def build_fleet(spec: ScenarioSpec, feeder: Feeder, sites: SiteConfig, cyclic: bool = True) -> DerFleet:
    by_node = {s.node: s for s in sites.sites}
    s_base = feeder.base.s_base
    pvs, evs = [], []
    for node, kva in sorted(spec.pv_kva.items()):
        if kva > 0:
            pvs.append(PvUnit(int(node), kva / s_base, np.asarray(feeder.irradiation), name=f"pv@{node}"))
    for node, count in sorted(spec.ev_count.items()):
        if count <= 0:
            continue
        if node not in by_node:
            raise ScheduleError(f"no EV site defined at node {node}")
        s = by_node[node]
        evs.append(ev_from_windows([(int(node), s.arrive_h, s.depart_h, s.need_kwh)], sites.battery_kwh,
                                   sites.charger_kva, sites.rate_kw, s_base, horizon=feeder.horizon, dt=feeder.dt,
                                   cyclic=cyclic, units=int(count), name=f"ev@{node}x{count}"))
    return DerFleet(tuple(pvs), tuple(evs))


def _ev_need(ev: EvUnit) -> list:
    """Energy to deliver in each plugged session, in chronological session order."""
    itin = ev.itinerary
    ivs = list(itin.intervals)
    if itin.wraps:
        # head (evening) and tail (morning) form one session that needs the whole daily drop
        total = sum(itin.trip_drops)
        if len(ivs) == 1:
            return [(ivs, total)]
        sessions = [([ivs[-1], ivs[0]], itin.trip_drops[-1])]
        for z in range(1, len(ivs) - 1):
            sessions.append(([ivs[z]], itin.trip_drops[z - 1]))
        return sessions
    out = []
    level = itin.u_init
    for z, iv in enumerate(ivs):
        if z > 0:
            level -= itin.trip_drops[z - 1]
        need = max(itin.u_min[z] - level, 0.0)
        out.append(([iv], need))
        level += need
    return out


def _fill(periods, need, rate, dt):
    """Charge at full rate in the given period order; the last hour gets the remainder."""
    p = {}
    left = need
    for t in periods:
        if left <= 1e-12:
            break
        e = min(rate * dt, left)
        p[t] = e / dt
        left -= e
    if left > 1e-9:
        raise ScheduleError(f"energy need exceeds plugged charging capacity by {left:.4g} pu·h")
    return p


def schedule_bau(fleet: DerFleet, feeder: Feeder) -> DerSchedule:
    """Uncontrolled charging at full rate from arrival; PV at available power, unity p.f."""
    T, dt = feeder.horizon, feeder.dt
    sched = DerSchedule.zeros(fleet, T)
    for i, pv in enumerate(fleet.pvs):
        sched.pv_p[i] = pv.adjusted_capacity[:T]
    for i, ev in enumerate(fleet.evs):
        for ivs, need in _ev_need(ev):
            periods = [t for iv in ivs for t in iv.periods]
            for t, val in _fill(periods, need, ev.max_rate, dt).items():
                sched.ev_p[i, t] = val
    return sched


def schedule_tou(fleet: DerFleet, feeder: Feeder) -> DerSchedule:
    """Greedy cheapest-LMP charging; ties to earlier hours of the session."""
    T, dt = feeder.horizon, feeder.dt
    lmp = np.asarray(feeder.lmp)
    sched = DerSchedule.zeros(fleet, T)
    for i, pv in enumerate(fleet.pvs):
        sched.pv_p[i] = pv.adjusted_capacity[:T]
    for i, ev in enumerate(fleet.evs):
        rank = session_rank(ev, T)
        for ivs, need in _ev_need(ev):
            periods = [t for iv in ivs for t in iv.periods]
            order = sorted(periods, key=lambda t: (lmp[t], rank[t]))
            full_hours = int(np.floor(need / (ev.max_rate * dt) + 1e-9))
            rem = need - full_hours * ev.max_rate * dt
            n_sel = full_hours + (1 if rem > 1e-12 else 0)
            if n_sel > len(order):
                raise ScheduleError(f"{ev.name}: energy need exceeds plugged charging capacity")
            chosen = order[:n_sel]
            for t in chosen:
                sched.ev_p[i, t] = ev.max_rate
            if rem > 1e-12:
                # partial hour goes to the most expensive selected hour (latest on ties)
                worst = max(chosen, key=lambda t: (lmp[t], rank[t]))
                sched.ev_p[i, worst] = rem / dt
    return sched


@dataclass
class ExPost:
    cost_p: float
    cost_q: float
    cost_transformer: float
    lol: float  # monitored transformers, hours
    lol_by_transformer: dict
    trajectories: dict
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    v: np.ndarray
    p0: np.ndarray
    q0: np.ndarray
    violations: list

    @property
    def total(self) -> float:
        return self.cost_p + self.cost_q + self.cost_transformer


def evaluate(feeder: Feeder, fleet: DerFleet, schedule: DerSchedule, cyclic: bool = True,
             open_loop: bool = False) -> ExPost:
    """Exact power flow plus exact thermal simulation of a fixed schedule.

    Open-loop schedules start from the steady top oil of their own first-hour
    load; optimized ones start on the periodic orbit (``cyclic``) or from the
    optimizer's fixed initial value.
    """
    dp, dq = schedule.net_injection(fleet, feeder.n_nodes)
    p_inj = dp - feeder.load_p
    q_inj = dq - feeder.load_q
    pf = fixed_injection_powerflow(feeder, p_inj, q_inj)
    scale = feeder.base.s_base * feeder.dt
    init = {} if cyclic or open_loop else default_initial_top_oil(feeder)
    trajs, lol_by, cost_tx = {}, {}, 0.0
    for k, name in feeder.transformer_lines():
        prm = feeder.transformers[name]
        if open_loop:
            h0 = top_oil_initial(prm, float(feeder.ambient[0]), float(pf.l[k, 0]))
        elif cyclic:
            h0 = periodic_top_oil(prm, pf.l[k], feeder.ambient, feeder.dt)
        else:
            h0 = init[name]
        tr = simulate_exact(prm, pf.l[k], feeder.ambient, h0, feeder.dt)
        trajs[name] = tr
        lol_by[name] = tr.loss_of_life
        cost_tx += prm.hourly_cost * tr.loss_of_life
    viol = []
    vmin, vmax = feeder.vmin[1:, None], feeder.vmax[1:, None]
    for j, t in np.argwhere(pf.v[1:] > vmax + LIMIT_TOL):
        viol.append(f"overvoltage at node {j + 1}, hour {t}")
    for j, t in np.argwhere(pf.v[1:] < vmin - LIMIT_TOL):
        viol.append(f"undervoltage at node {j + 1}, hour {t}")
    for k, t in np.argwhere(pf.l > feeder.lmax[:, None] * (1 + LIMIT_TOL)):
        viol.append(f"ampacity exceeded on line to node {k + 1}, hour {t}")
    lol = float(sum(lol_by[n] for n in feeder.monitored if n in lol_by))
    return ExPost(float(feeder.lmp @ pf.p0 * scale), float(feeder.q_price @ pf.q0 * scale), float(cost_tx), lol,
                  lol_by, trajs, pf.P, pf.Q, pf.l, pf.v, pf.p0, pf.q0, viol)


@dataclass
class CellResult:
    spec: ScenarioSpec
    option: Option
    schedule: DerSchedule | None
    expost: ExPost | None
    solution: OpfSolution | None = None
    status: str = "ok"
    failures: list = field(default_factory=list)
    error: str = ""

    @property
    def solved(self) -> bool:
        return self.expost is not None


def run_option(spec: ScenarioSpec, feeder: Feeder, sites: SiteConfig, cfg: SolverConfig | None = None,
               cyclic: bool = True, fleet: DerFleet | None = None, exactness_tol: float = EXACTNESS_TOL) -> CellResult:
    fleet = fleet if fleet is not None else build_fleet(spec, feeder, sites, cyclic)
    opt = spec.option
    sol = None
    try:
        if opt is Option.BAU:
            sched = schedule_bau(fleet, feeder)
        elif opt is Option.TOU:
            sched = schedule_tou(fleet, feeder)
        else:
            opts = OpfOptions(include_transformer_cost=opt is Option.FULL_OPT, cyclic=cyclic, exactness_tol=exactness_tol)
            sol = solve(assemble(feeder, fleet, opts), cfg)
            sched = sol.schedule
        ex = evaluate(feeder, fleet, sched, cyclic, open_loop=opt in (Option.BAU, Option.TOU))
    except (SolverError, PowerFlowError, ScheduleError) as exc:
        log.info("%s %s failed: %s", spec.label, opt.value, exc)
        return CellResult(spec, opt, None, None, sol, "failed", [f"{type(exc).__name__}: {exc}"], str(exc))
    res = CellResult(spec, opt, sched, ex, sol)
    if ex.violations:
        res.failures.extend(ex.violations)
        res.status = "failed"
    return res


@dataclass
class ComparisonRow:
    option: str
    scenario: str
    dP: float
    dQ: float
    dTransformer: float
    dTotal: float
    LoL: float
    status: str = "ok"

    COLUMNS = ("option", "scenario", "dP", "dQ", "dTransformer", "dTotal", "LoL", "status")

    def as_list(self):
        return [getattr(self, c) for c in self.COLUMNS]


def apply_lol_threshold(cell: CellResult, base_lol: float, factor: float) -> None:
    if cell.solved and factor is not None and cell.expost.lol > factor * base_lol:
        cell.failures.append(f"LoL {cell.expost.lol:.4g} h exceeds {factor:g} x base {base_lol:.4g} h")
        cell.status = "failed"


def comparison_table(scenarios, feeder: Feeder, sites: SiteConfig, options=ALL_OPTIONS, cfg=None, cyclic=True,
                     lol_factor: float = 10.0, exactness_tol: float = EXACTNESS_TOL):
    """Run every (scenario, option) cell against the zero-DER base case.

    Returns ``(rows, cells, base)``; failing cells are kept with NaN deltas.
    """
    base_spec = ScenarioSpec({}, {}, Option.BAU, True, "base")
    base = run_option(base_spec, feeder, sites, cfg, cyclic)
    if not base.solved:
        raise ScheduleError(f"base case could not be evaluated: {base.error}")
    b = base.expost
    rows = [ComparisonRow("base", "base", 0.0, 0.0, 0.0, 0.0, b.lol, base.status)]
    cells = []
    for spec in scenarios:
        if spec.base_case:
            continue
        for opt in options:
            cell = run_option(spec.with_option(opt), feeder, sites, cfg, cyclic, exactness_tol=exactness_tol)
            apply_lol_threshold(cell, b.lol, lol_factor)
            cells.append(cell)
            status = "ok" if not cell.failures else "failed: " + "; ".join(cell.failures[:3])
            if cell.solved:
                e = cell.expost
                dP, dQ, dT = e.cost_p - b.cost_p, e.cost_q - b.cost_q, e.cost_transformer - b.cost_transformer
                rows.append(ComparisonRow(Option(opt).value, spec.label, dP, dQ, dT, dP + dQ + dT, e.lol, status))
            else:
                nan = float("nan")
                rows.append(ComparisonRow(Option(opt).value, spec.label, nan, nan, nan, nan, nan, status))
    return rows, cells, base
