"""PV and EV device models and their price-taking self-scheduling problems.

Quantities are per-unit on the feeder power base; energies are pu·h.  PV
``p`` is generation, EV ``p`` is consumption (always >= 0).  EV ``q`` is a
consumption too, so a negative value means the charger supplies reactive power.
Periods are 0-based array positions; period ``t`` spans clock hours
``[t*dt, (t+1)*dt)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import InfeasibleError, ProgramBuilder, SolverConfig, SolverError, solve_conic

IRRADIATION_CUTOFF = 1e-6


@dataclass(frozen=True, eq=False)
class PvUnit:
    node: int
    capacity: float  # nameplate apparent power, pu
    irradiation: np.ndarray
    name: str = "pv"

    def __post_init__(self):
        rho = np.asarray(self.irradiation, dtype=float)
        if np.any(rho < 0) or np.any(rho > 1):
            raise ValueError(f"{self.name}: irradiation must lie in [0, 1]")
        if self.capacity < 0:
            raise ValueError(f"{self.name}: negative capacity")

    @property
    def adjusted_capacity(self) -> np.ndarray:
        return np.asarray(self.irradiation, dtype=float) * self.capacity

    @property
    def active(self) -> np.ndarray:
        return np.asarray(self.irradiation) > IRRADIATION_CUTOFF


@dataclass(frozen=True)
class PlugInterval:
    """EV plugged at ``node`` during periods ``begin .. end-1`` (0-based).

    ``begin`` and ``end`` are the boundary time points of the interval, so
    the SoC variables live at ``begin`` and ``end``.
    """

    node: int
    begin: int
    end: int

    @property
    def periods(self) -> range:
        return range(self.begin, self.end)


@dataclass(frozen=True)
class EvItinerary:
    """Plug-in intervals, trip energy drops and SoC requirements.

    ``trip_drops[z]`` is the energy used while driving between interval ``z``
    and ``z+1``.  ``u_min[z]`` is the minimum SoC at the end of interval ``z``.
    ``u_init=None`` means the last interval wraps into the first across the
    day boundary (SoC at the start of the horizon equals SoC at its end).
    """

    intervals: tuple
    trip_drops: tuple
    u_min: tuple
    u_init: float | None

    def __post_init__(self):
        if not self.intervals:
            raise ValueError("itinerary needs at least one interval")
        if len(self.trip_drops) != len(self.intervals) - 1 or len(self.u_min) != len(self.intervals):
            raise ValueError("trip_drops must have Z-1 entries and u_min Z entries")
        prev_end = 0
        for iv in self.intervals:
            if iv.begin < prev_end or iv.end <= iv.begin:
                raise ValueError(f"plug intervals must be disjoint, ordered and non-empty: {self.intervals}")
            prev_end = iv.end
        if any(d < 0 for d in self.trip_drops):
            raise ValueError("trip energy drops must be nonnegative")
        if self.wraps and self.intervals[0].begin != 0:
            raise ValueError("a wrapping itinerary must start its first interval at the horizon start")

    @property
    def wraps(self) -> bool:
        return self.u_init is None


@dataclass(frozen=True)
class EvUnit:
    itinerary: EvItinerary
    battery_capacity: float
    charger_capacity: float
    max_rate: float
    name: str = "ev"
    units: int = 1

    def __post_init__(self):
        if not self.battery_capacity > 0:
            raise ValueError(f"{self.name}: battery capacity must be positive")
        if not 0 < self.max_rate <= self.charger_capacity:
            raise ValueError(f"{self.name}: need 0 < max_rate <= charger_capacity")
        if any(u > self.battery_capacity + 1e-12 for u in self.itinerary.u_min):
            raise ValueError(f"{self.name}: u_min exceeds battery capacity")

    def plugged(self, horizon: int) -> np.ndarray:
        mask = np.zeros(horizon, dtype=bool)
        for iv in self.itinerary.intervals:
            mask[iv.begin:iv.end] = True
        return mask

    def node_at(self, horizon: int) -> np.ndarray:
        """Node where the EV is plugged in each period (-1 when driving)."""
        out = np.full(horizon, -1)
        for iv in self.itinerary.intervals:
            out[iv.begin:iv.end] = iv.node
        return out


def ev_from_windows(windows, battery_kwh, charger_kva, rate_kw, s_base, horizon=24, dt=1.0, cyclic=True,
                    units=1, name="ev") -> EvUnit:
    """Build an EV from daily clock windows ``(node, arrive_h, depart_h, need_kwh)``.

    The EV arrives short of ``need_kwh`` and must be full at departure.  A
    window with ``arrive > depart`` spans midnight and is split into a tail
    interval at the start of the horizon and a head interval at its end.
    With ``cyclic`` the two halves are coupled through the SoC wrap; otherwise
    the energy of the split window is prorated by the time inside the horizon.
    Capacities are multiplied by ``units`` (identical EVs aggregate exactly).
    """
    scale = units / s_base
    cap = battery_kwh * scale
    steps = lambda h: int(round(h / dt))  # noqa: E731
    wrapping = [w for w in windows if w[1] > w[2]]
    plain = sorted((w for w in windows if w[1] <= w[2]), key=lambda w: w[1])
    if len(wrapping) > 1:
        raise ValueError("at most one window may span midnight")
    seq = []  # (interval, need before it, u_min at its end)
    if wrapping:
        node, arrive, depart, need = wrapping[0]
        span = (horizon - steps(arrive)) + steps(depart)
        head_frac = (horizon - steps(arrive)) / span
        w_need = need * scale
        seq.append((PlugInterval(node, 0, steps(depart)), None, cap))
    for node, arrive, depart, need in plain:
        seq.append((PlugInterval(node, steps(arrive), steps(depart)), need * scale, cap))
    if wrapping:
        head_min = 0.0 if cyclic else cap - w_need + w_need * head_frac
        seq.append((PlugInterval(node, steps(arrive), horizon), w_need, head_min))
    intervals = tuple(s[0] for s in seq)
    drops = tuple(s[1] for s in seq[1:])
    u_min = tuple(s[2] for s in seq)
    if wrapping:
        u_init = None if cyclic else cap - w_need + w_need * head_frac
    else:
        u_init = cap - seq[0][1]
    itin = EvItinerary(intervals, drops, u_min, u_init)
    return EvUnit(itin, cap, charger_kva * scale, rate_kw * scale, name=name, units=units)


@dataclass(frozen=True)
class DerFleet:
    pvs: tuple = ()
    evs: tuple = ()

    def __len__(self):
        return len(self.pvs) + len(self.evs)


@dataclass
class DerSchedule:
    pv_p: np.ndarray
    pv_q: np.ndarray
    ev_p: np.ndarray
    ev_q: np.ndarray

    @classmethod
    def zeros(cls, fleet: DerFleet, horizon: int) -> "DerSchedule":
        return cls(np.zeros((len(fleet.pvs), horizon)), np.zeros((len(fleet.pvs), horizon)),
                   np.zeros((len(fleet.evs), horizon)), np.zeros((len(fleet.evs), horizon)))

    def net_injection(self, fleet: DerFleet, n_nodes: int):
        """Aggregate DER injections per node (generation positive), (N+1, T) each."""
        horizon = self.pv_p.shape[1]
        p = np.zeros((n_nodes, horizon))
        q = np.zeros((n_nodes, horizon))
        for i, pv in enumerate(fleet.pvs):
            p[pv.node] += self.pv_p[i]
            q[pv.node] += self.pv_q[i]
        for i, ev in enumerate(fleet.evs):
            nodes = ev.node_at(horizon)
            on = nodes >= 0
            np.add.at(p, (nodes[on], np.flatnonzero(on)), -self.ev_p[i, on])
            np.add.at(q, (nodes[on], np.flatnonzero(on)), -self.ev_q[i, on])
        return p, q


@dataclass
class FeasibilityReport:
    feasible: bool
    violations: list = field(default_factory=list)
    slacks: dict = field(default_factory=dict)
    soc_begin: np.ndarray | None = None
    soc_end: np.ndarray | None = None


def pv_feasible(unit: PvUnit, p, q, tol: float = 1e-8) -> FeasibilityReport:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    active = unit.active
    cap_t = unit.adjusted_capacity
    slacks = {
        "real_lower": np.where(active, p, np.inf),
        "real_upper": np.where(active, cap_t - p, np.inf),
        "apparent": np.where(active, unit.capacity - np.hypot(p, q), np.inf),
        "off": np.where(active, 0.0, -np.abs(p) - np.abs(q)),
    }
    viol = []
    for key, s in slacks.items():
        for t in np.flatnonzero(s < -tol):
            viol.append(f"{unit.name}: {key} violated at period {t} by {-s[t]:.3g}")
    return FeasibilityReport(not viol, viol, slacks)


def _soc_offsets(unit: EvUnit, p, dt):
    """SoC at interval boundaries relative to the SoC at the first begin point."""
    itin = unit.itinerary
    begin, end = [], []
    level = 0.0
    for z, iv in enumerate(itin.intervals):
        if z > 0:
            level -= itin.trip_drops[z - 1]
        begin.append(level)
        level += float(p[iv.begin:iv.end].sum()) * dt
        end.append(level)
    return np.array(begin), np.array(end)


def ev_feasible(unit: EvUnit, p, q, dt: float = 1.0, tol: float = 1e-8) -> FeasibilityReport:
    """Reconstruct the SoC trajectory and check the EV constraints.

    For wrapping itineraries the initial SoC is not given; the smallest
    initial level satisfying every bound is used and the daily energy balance
    is checked separately.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    horizon = len(p)
    itin = unit.itinerary
    plugged = unit.plugged(horizon)
    off_b, off_e = _soc_offsets(unit, p, dt)
    viol = []
    if itin.wraps:
        balance = off_e[-1]
        if abs(balance) > tol:
            viol.append(f"{unit.name}: daily energy balance off by {balance:.3g} (charge - trips)")
        lower = max(np.max(np.asarray(itin.u_min) - off_e), np.max(-off_b), np.max(-off_e))
        u0 = lower
    else:
        u0 = itin.u_init
    soc_b, soc_e = u0 + off_b, u0 + off_e
    slacks = {
        "soc_min": soc_e - np.asarray(itin.u_min),
        "soc_max": unit.battery_capacity - soc_e,
        "soc_nonneg": np.minimum(soc_b, soc_e),
        "rate": np.where(plugged, unit.max_rate - p, np.inf),
        "p_nonneg": p,
        "charger": np.where(plugged, unit.charger_capacity - np.hypot(p, q), np.inf),
        "off": np.where(plugged, 0.0, -np.abs(p) - np.abs(q)),
    }
    for key, s in slacks.items():
        for i in np.flatnonzero(s < -tol):
            where = "interval" if key.startswith("soc") else "period"
            viol.append(f"{unit.name}: {key} violated at {where} {i} by {-s[i]:.4g}")
    return FeasibilityReport(not viol, viol, slacks, soc_b, soc_e)


def pv_opt(unit: PvUnit, price_p, price_q):
    """Revenue-maximizing PV schedule at given nodal prices.

    Per period the problem is a linear objective over a box cut by a disc, so
    it has a closed form.  Ties (zero prices) resolve to the smallest |q| and
    then to zero real output.
    Returns ``(p, q, revenue)`` with revenue in price x pu units per period.
    """
    lp = np.asarray(price_p, dtype=float)
    lq = np.asarray(price_q, dtype=float)
    C = unit.capacity
    cap_t = unit.adjusted_capacity
    p = np.zeros_like(lp)
    q = np.zeros_like(lp)
    for t in np.flatnonzero(unit.active):
        a, b = lp[t], lq[t]
        if a > 0:
            p_star = C * a / np.hypot(a, b)
            p[t] = min(p_star, cap_t[t])
        if b != 0:
            q[t] = np.sign(b) * np.sqrt(max(C * C - p[t] * p[t], 0.0))
    return p, q, float(lp @ p + lq @ q)


def ev_problem(unit: EvUnit, price_p, price_q, dt: float = 1.0, secondary=None):
    """Assemble the EV cost-minimization problem as a conic program."""
    lp = np.asarray(price_p, dtype=float)
    lq = np.asarray(price_q, dtype=float)
    horizon = len(lp)
    itin = unit.itinerary
    Z = len(itin.intervals)
    plugged = np.flatnonzero(unit.plugged(horizon))
    nb = ProgramBuilder()
    p = nb.variables("p", len(plugged))
    q = nb.variables("q", len(plugged))
    ub = nb.variables("u_begin", Z)
    ue = nb.variables("u_end", Z)
    pos = {t: i for i, t in enumerate(plugged)}
    weights = lp if secondary is None else secondary
    nb.cost(p, weights[plugged])
    if secondary is None:
        nb.cost(q, lq[plugged])
    _ev_rows(nb, unit, p, q, ub, ue, pos, dt)
    return nb, plugged, p, q


def _ev_rows(nb: ProgramBuilder, unit: EvUnit, p, q, ub, ue, pos, dt):
    """Add SoC dynamics, bounds and charger limits for one EV."""
    itin = unit.itinerary
    Z = len(itin.intervals)
    first = nb.eq_rows(1)
    nb.coef(first, ub[0], 1.0)
    if itin.wraps:
        nb.coef(first, ue[Z - 1], -1.0)
    else:
        nb.rhs(first, itin.u_init)
    for z, iv in enumerate(itin.intervals):
        row = nb.eq_rows(1)
        nb.coef(row, ue[z], 1.0)
        nb.coef(row, ub[z], -1.0)
        cols = np.array([p[pos[t]] for t in iv.periods])
        nb.coef(row, cols, -dt)
    if Z > 1:
        trip = nb.eq_rows(Z - 1)
        nb.coef(trip, ub[1:], 1.0)
        nb.coef(trip, ue[:-1], -1.0)
        nb.rhs(trip, -np.asarray(itin.trip_drops))
    lo = nb.le_rows(Z)
    nb.coef(lo, ue, -1.0)
    nb.rhs(lo, -np.asarray(itin.u_min))
    hi = nb.le_rows(Z)
    nb.coef(hi, ue, 1.0)
    nb.rhs(hi, unit.battery_capacity)
    nonneg = nb.le_rows(Z)
    nb.coef(nonneg, ub, -1.0)
    n = len(p)
    if n:
        rate = nb.le_rows(n)
        nb.coef(rate, p, 1.0)
        nb.rhs(rate, unit.max_rate)
        pn = nb.le_rows(n)
        nb.coef(pn, p, -1.0)
        circle = nb.soc_rows(n, 3)
        nb.rhs(circle, unit.charger_capacity, select=(slice(None), 0))
        nb.cone_expr(circle, p, 1.0, select=(slice(None), 1))
        nb.cone_expr(circle, q, 1.0, select=(slice(None), 2))


class InfeasibleItineraryError(ValueError):
    pass


def session_rank(unit: EvUnit, horizon: int) -> np.ndarray:
    """Chronological rank of each plugged period within its charging session.

    For wrapping itineraries the session starting at the evening arrival comes
    before the early-morning tail.  Unplugged periods get rank ``horizon``.
    """
    ivs = list(unit.itinerary.intervals)
    if unit.itinerary.wraps and len(ivs) > 1:
        ivs = [ivs[-1]] + ivs[:-1]
    rank = np.full(horizon, horizon)
    k = 0
    for iv in ivs:
        for t in iv.periods:
            rank[t] = k
            k += 1
    return rank


def ev_itinerary_check(unit: EvUnit, horizon: int, dt: float = 1.0) -> list[str]:
    """Cheap necessary conditions: each interval can reach its SoC target."""
    itin = unit.itinerary
    problems = []
    charge_cap = [len(iv.periods) * unit.max_rate * dt for iv in itin.intervals]
    if itin.wraps:
        if sum(charge_cap) + 1e-12 < sum(itin.trip_drops):
            problems.append(f"{unit.name}: daily trip energy {sum(itin.trip_drops):.4g} exceeds plugged charging capacity {sum(charge_cap):.4g}")
        return problems
    level = itin.u_init
    for z, iv in enumerate(itin.intervals):
        if z > 0:
            level -= itin.trip_drops[z - 1]
        level = min(level + charge_cap[z], unit.battery_capacity)
        if level + 1e-12 < itin.u_min[z]:
            problems.append(f"{unit.name}: interval {z} cannot reach required SoC {itin.u_min[z]:.4g} (max {level:.4g})")
    if any(iv.end > horizon for iv in itin.intervals):
        problems.append(f"{unit.name}: interval extends beyond horizon {horizon}")
    return problems


def ev_opt(unit: EvUnit, price_p, price_q, dt: float = 1.0, cfg: SolverConfig | None = None):
    """Cost-minimizing EV schedule at given per-period prices.

    Prices are the DLMPs at the node where the EV is plugged in each period.
    A second pass keeps the optimal cost and pushes charging to the earliest
    hours, which makes degenerate (flat-price) cases deterministic.
    Returns ``(p, q, cost)`` with cost in price x pu·h units.
    """
    lp = np.asarray(price_p, dtype=float)
    lq = np.asarray(price_q, dtype=float)
    horizon = len(lp)
    problems = ev_itinerary_check(unit, horizon, dt)
    if problems:
        raise InfeasibleItineraryError("; ".join(problems))
    cfg = cfg or SolverConfig()
    nb, plugged, pv, qv = ev_problem(unit, lp, lq, dt)
    prog = nb.build()
    try:
        res = solve_conic(prog, cfg)
    except InfeasibleError as exc:
        raise InfeasibleItineraryError(f"{unit.name}: itinerary infeasible ({exc})") from exc
    best = res.objective
    p = np.zeros(horizon)
    q = np.zeros(horizon)
    p[plugged] = res.x[pv]
    q[plugged] = res.x[qv]

    # tie-break: among optimal schedules prefer earliest charging
    if len(plugged):
        rank = session_rank(unit, horizon)[plugged].astype(float) + 1.0
        nb2, _, pv2, qv2 = ev_problem(unit, lp, lq, dt, secondary=np.zeros(horizon))
        nb2.cost(pv2, rank / rank.sum())
        keep = nb2.le_rows(1)
        nb2.coef(keep, pv2, lp[plugged])
        nb2.coef(keep, qv2, lq[plugged])
        nb2.rhs(keep, best + 1e-8 * abs(best) + 1e-12)
        try:
            res2 = solve_conic(nb2.build(), cfg)
        except SolverError:
            res2 = None
        if res2 is not None:
            p[plugged] = res2.x[pv2]
            q[plugged] = res2.x[qv2]
    cost = float(lp @ p + lq @ q) * dt
    return np.clip(p, 0.0, None), q, cost
