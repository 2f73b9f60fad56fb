"""Assembly and solution of the relaxed branch-flow OPF with DERs and transformer aging.

Per period the network variables are the sending-end flows ``P, Q``, squared
currents ``l`` (one per line, line k feeds node k+1), squared voltages ``v`` of
nodes 1..N and the free-signed substation injections ``p0, q0``.  The current
definition is relaxed to a rotated second-order cone.  Monitored transformers
add a linear top-oil state ``h`` (T+1 values) and an aging epigraph ``f``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicResult, ProgramBuilder, SolverConfig, solve_conic, write_cbf
from .der import DerFleet, DerSchedule, _ev_rows
from .netmodel import Feeder
from .powerflow import base_injections, fixed_injection_powerflow
from .thermal import DEFAULT_BREAKPOINTS, build_pwl, linearize, top_oil_initial

log = logging.getLogger(__name__)

EXACTNESS_TOL = 1e-6


@dataclass
class OpfOptions:
    include_transformer_cost: bool = True
    cyclic: bool = True
    exactness_tol: float = EXACTNESS_TOL
    breakpoints: tuple = DEFAULT_BREAKPOINTS
    initial_top_oil: dict | None = None  # name -> °C, non-cyclic runs only


@dataclass
class OpfProblem:
    feeder: Feeder
    fleet: DerFleet
    options: OpfOptions
    program: object
    var: dict  # block name -> index array
    rows: dict  # block name -> global row indices
    transformers: list  # (line index, name)
    coeffs: dict  # name -> LinearizedCoefficients
    pwl: object
    h_init: dict
    price_scale: float  # $ per (pu power x period)

    @property
    def n_vars(self) -> int:
        return self.program.n_vars

    def export_cbf(self, path) -> None:
        write_cbf(self.program, path)


@dataclass
class OpfSolution:
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    v: np.ndarray  # (N+1, T) including the root
    p0: np.ndarray
    q0: np.ndarray
    schedule: DerSchedule
    h: np.ndarray  # (Y, T+1)
    f: np.ndarray  # (Y, T)
    transformer_names: list
    lam_p: np.ndarray  # $/kWh, consumption-positive
    lam_q: np.ndarray
    mu_v_up: np.ndarray  # (N+1, T), root row zero
    mu_v_lo: np.ndarray
    mu_l: np.ndarray  # (N, T)
    xi: np.ndarray  # (Y, T, M)
    objective: float  # $
    cost_p: float
    cost_q: float
    cost_transformer: float
    status: str
    solver: str
    iterations: int
    solve_time: float
    residuals: dict
    exactness_gap: np.ndarray  # (N, T)
    degenerate: bool
    weakly_active: int
    problem: OpfProblem = field(repr=False)
    raw: ConicResult | None = field(default=None, repr=False)

    @property
    def exact(self) -> bool:
        return bool(self.exactness_gap.max(initial=0.0) <= self.problem.options.exactness_tol)


def _active_pv(pv, horizon):
    return np.flatnonzero(pv.active[:horizon])


def default_initial_top_oil(feeder: Feeder) -> dict:
    """Steady top oil at the first-period ambient and the base-load current."""
    if not feeder.transformers:
        return {}
    p, q = base_injections(feeder)
    pf = fixed_injection_powerflow(feeder, p[:, :1], q[:, :1])
    out = {}
    for k, name in feeder.transformer_lines():
        out[name] = top_oil_initial(feeder.transformers[name], float(feeder.ambient[0]), float(pf.l[k, 0]))
    return out


def assemble(feeder: Feeder, fleet: DerFleet | None = None, options: OpfOptions | None = None) -> OpfProblem:
    fleet = fleet or DerFleet()
    opts = options or OpfOptions()
    T, N = feeder.horizon, feeder.n_lines
    if T == 0:
        raise ValueError("empty horizon")
    for name, arr in (("load_p", feeder.load_p), ("ambient", feeder.ambient), ("q_price", feeder.q_price)):
        if np.shape(arr)[-1] != T:
            raise ValueError(f"{name} has length {np.shape(arr)[-1]}, horizon is {T}")
    dt = feeder.dt
    scale = feeder.base.s_base * dt
    par = feeder.parent[1:]
    r, x = feeder.r[:, None], feeder.x[:, None]
    nb = ProgramBuilder()

    P = nb.variables("P", (N, T))
    Q = nb.variables("Q", (N, T))
    l = nb.variables("l", (N, T))
    v = nb.variables("v", (N, T))
    p0 = nb.variables("p0", T)
    q0 = nb.variables("q0", T)
    nb.cost(p0, feeder.lmp * scale)
    nb.cost(q0, feeder.q_price * scale)

    handles = {}
    # nodal balances, written as "injections into node = its fixed consumption"
    for key, flow, imp in (("bal_p", P, r), ("bal_q", Q, x)):
        h = nb.eq_rows((N + 1, T))
        nb.coef(h, flow, 1.0, select=slice(1, None))
        nb.coef(h, l, -imp, select=slice(1, None))
        nb.coef(h, flow, -1.0, select=par)
        nb.coef(h, p0 if key == "bal_p" else q0, 1.0, select=0)
        nb.rhs(h, feeder.load_p if key == "bal_p" else feeder.load_q)
        handles[key] = h

    nonroot = par > 0
    volt = nb.eq_rows((N, T))
    nb.coef(volt, v, 1.0)
    nb.coef(volt, v[par[nonroot] - 1], -1.0, select=nonroot)
    nb.rhs(volt, feeder.v0, select=~nonroot)
    nb.coef(volt, P, 2 * r)
    nb.coef(volt, Q, 2 * x)
    nb.coef(volt, l, -(r**2 + x**2))
    handles["volt"] = volt

    vup = nb.le_rows((N, T))
    nb.coef(vup, v, 1.0)
    nb.rhs(vup, np.broadcast_to(feeder.vmax[1:, None], (N, T)))
    vlo = nb.le_rows((N, T))
    nb.coef(vlo, v, -1.0)
    nb.rhs(vlo, np.broadcast_to(-feeder.vmin[1:, None], (N, T)))
    amp = nb.le_rows((N, T))
    nb.coef(amp, l, 1.0)
    nb.rhs(amp, np.broadcast_to(feeder.lmax[:, None], (N, T)))
    handles.update(vup=vup, vlo=vlo, amp=amp)

    # (v_i + l, 2P, 2Q, v_i - l) in SOC  <=>  v_i l >= P^2 + Q^2
    cone = nb.soc_rows(N * T, 4)
    mflat = np.repeat(nonroot, T)
    vpar = v[par[nonroot] - 1].ravel()
    nb.cone_expr(cone, l.ravel(), 1.0, select=(slice(None), 0))
    nb.cone_expr(cone, l.ravel(), -1.0, select=(slice(None), 3))
    nb.cone_expr(cone, vpar, 1.0, select=(mflat, 0))
    nb.cone_expr(cone, vpar, 1.0, select=(mflat, 3))
    nb.rhs(cone, feeder.v0, select=(~mflat, 0))
    nb.rhs(cone, feeder.v0, select=(~mflat, 3))
    nb.cone_expr(cone, P.ravel(), 2.0, select=(slice(None), 1))
    nb.cone_expr(cone, Q.ravel(), 2.0, select=(slice(None), 2))
    handles["cone"] = cone

    for i, pv in enumerate(fleet.pvs):
        act = _active_pv(pv, T)
        pp = nb.variables(f"pv{i}_p", len(act))
        pq = nb.variables(f"pv{i}_q", len(act))
        if not len(act):
            continue
        nb.coef(handles["bal_p"], pp, 1.0, select=(pv.node, act))
        nb.coef(handles["bal_q"], pq, 1.0, select=(pv.node, act))
        hi = nb.le_rows(len(act))
        nb.coef(hi, pp, 1.0)
        nb.rhs(hi, pv.adjusted_capacity[act])
        lo = nb.le_rows(len(act))
        nb.coef(lo, pp, -1.0)
        circ = nb.soc_rows(len(act), 3)
        nb.rhs(circ, pv.capacity, select=(slice(None), 0))
        nb.cone_expr(circ, pp, 1.0, select=(slice(None), 1))
        nb.cone_expr(circ, pq, 1.0, select=(slice(None), 2))

    for i, ev in enumerate(fleet.evs):
        plugged = np.flatnonzero(ev.plugged(T))
        ep = nb.variables(f"ev{i}_p", len(plugged))
        eq = nb.variables(f"ev{i}_q", len(plugged))
        Z = len(ev.itinerary.intervals)
        ub = nb.variables(f"ev{i}_ub", Z)
        ue = nb.variables(f"ev{i}_ue", Z)
        nodes = ev.node_at(T)[plugged]
        if len(plugged):
            nb.coef(handles["bal_p"], ep, -1.0, select=(nodes, plugged))
            nb.coef(handles["bal_q"], eq, -1.0, select=(nodes, plugged))
        _ev_rows(nb, ev, ep, eq, ub, ue, {t: j for j, t in enumerate(plugged)}, dt)

    pwl = build_pwl(opts.breakpoints)
    txs = feeder.transformer_lines() if opts.include_transformer_cost else []
    coeffs, h_init = {}, {}
    if txs and not opts.cyclic:
        h_init = dict(default_initial_top_oil(feeder))
        h_init.update(opts.initial_top_oil or {})
    M = pwl.n_segments
    for k, name in txs:
        prm = feeder.transformers[name]
        co = linearize(prm, pwl, feeder.ambient, dt)
        coeffs[name] = co
        h = nb.variables(f"h_{name}", T + 1)
        f = nb.variables(f"f_{name}", T)
        nb.cost(f, prm.hourly_cost * dt)
        epi = nb.le_rows((T, M))
        nb.coef(epi, h[1:, None], co.alpha1[None, :])
        nb.coef(epi, l[k][:, None], co.alpha2[None, :])
        nb.coef(epi, f[:, None], -1.0)
        nb.rhs(epi, np.broadcast_to(-co.beta[None, :], (T, M)))
        fpos = nb.le_rows(T)
        nb.coef(fpos, f, -1.0)
        rec = nb.eq_rows(T)
        nb.coef(rec, h[1:], 1.0)
        nb.coef(rec, h[:-1], -co.gamma1)
        nb.coef(rec, l[k], -co.gamma2)
        nb.rhs(rec, co.delta)
        init = nb.eq_rows(1)
        nb.coef(init, h[0], 1.0)
        if opts.cyclic:
            nb.coef(init, h[T], -1.0)
        else:
            nb.rhs(init, h_init[name])
        handles[f"epi_{name}"] = epi
        handles[f"rec_{name}"] = rec
        handles[f"init_{name}"] = init

    prog = nb.build()
    rows = {key: nb.global_rows(hd) for key, hd in handles.items()}
    rows["_nonneg"] = np.arange(prog.n_zero, prog.n_zero + prog.n_nonneg)
    return OpfProblem(feeder, fleet, opts, prog, dict(nb.var_blocks), rows, txs, coeffs, pwl, h_init, scale)


def _degeneracy(res, prog, tol=1e-6):
    lo, hi = prog.n_zero, prog.n_zero + prog.n_nonneg
    s, z = res.s[lo:hi], res.z[lo:hi]
    zscale = 1.0 + np.abs(res.z).max(initial=0.0)
    weak = int(np.count_nonzero((s < tol) & (z < tol * zscale)))
    return weak > 0, weak


def solve(problem: OpfProblem, cfg: SolverConfig | None = None) -> OpfSolution:
    res = solve_conic(problem.program, cfg or SolverConfig())
    sol = unpack(problem, res)
    flagged = exactness_check(sol)
    if flagged.any():
        log.warning("relaxation not tight on %d line-hours (max gap %.3g)", int(flagged.sum()),
                    sol.exactness_gap.max())
    return sol


def unpack(problem: OpfProblem, res: ConicResult) -> OpfSolution:
    """Map a raw conic result back onto network, device and thermal quantities."""
    fd, fleet = problem.feeder, problem.fleet
    T, N = fd.horizon, fd.n_lines
    x, z = res.x, res.z
    var, rows = problem.var, problem.rows
    P, Q, l = x[var["P"]], x[var["Q"]], x[var["l"]]
    v = np.vstack([np.full((1, T), fd.v0), x[var["v"]]])
    # on zero-impedance lines l only enters its own cone and ampacity rows, so any
    # l above the cone surface is optimal; report the tight value
    free = (fd.r == 0) & (fd.x == 0)
    for k, _ in problem.transformers:
        free[k] = False
    if free.any():
        l = l.copy()
        l[free] = (P[free] ** 2 + Q[free] ** 2) / v[fd.parent[1:][free]]
    p0, q0 = x[var["p0"]], x[var["q0"]]

    sched = DerSchedule.zeros(fleet, T)
    for i, pv in enumerate(fleet.pvs):
        act = _active_pv(pv, T)
        sched.pv_p[i, act] = x[var[f"pv{i}_p"]]
        sched.pv_q[i, act] = x[var[f"pv{i}_q"]]
    for i, ev in enumerate(fleet.evs):
        plugged = np.flatnonzero(ev.plugged(T))
        sched.ev_p[i, plugged] = x[var[f"ev{i}_p"]]
        sched.ev_q[i, plugged] = x[var[f"ev{i}_q"]]

    scale = problem.price_scale
    names = [name for _, name in problem.transformers]
    Y, M = len(names), problem.pwl.n_segments
    h = np.zeros((Y, T + 1))
    f = np.zeros((Y, T))
    xi = np.zeros((Y, T, M))
    cost_tx = 0.0
    for y, name in enumerate(names):
        h[y] = x[var[f"h_{name}"]]
        f[y] = x[var[f"f_{name}"]]
        xi[y] = z[rows[f"epi_{name}"]] / scale
        cost_tx += float(fd.transformers[name].hourly_cost * fd.dt * f[y].sum())

    mu_v_up = np.zeros((N + 1, T))
    mu_v_lo = np.zeros((N + 1, T))
    mu_v_up[1:] = z[rows["vup"]] / scale
    mu_v_lo[1:] = z[rows["vlo"]] / scale
    gap = v[fd.parent[1:]] * l - P**2 - Q**2
    degenerate, weak = _degeneracy(res, problem.program)
    return OpfSolution(
        P=P, Q=Q, l=l, v=v, p0=p0, q0=q0, schedule=sched, h=h, f=f, transformer_names=names,
        lam_p=-z[rows["bal_p"]] / scale, lam_q=-z[rows["bal_q"]] / scale,
        mu_v_up=mu_v_up, mu_v_lo=mu_v_lo, mu_l=z[rows["amp"]] / scale, xi=xi,
        objective=res.objective,
        cost_p=float(fd.lmp @ p0 * scale), cost_q=float(fd.q_price @ q0 * scale), cost_transformer=cost_tx,
        status=res.status, solver=res.solver, iterations=res.iterations, solve_time=res.solve_time,
        residuals=res.residuals, exactness_gap=gap, degenerate=degenerate, weakly_active=weak, problem=problem,
        raw=res,
    )


def exactness_check(solution: OpfSolution, tol: float | None = None) -> np.ndarray:
    """Boolean (N, T) mask of line-hours where the cone is not tight."""
    tol = solution.problem.options.exactness_tol if tol is None else tol
    return solution.exactness_gap > tol


def cyclic_residual(solution: OpfSolution) -> dict:
    """|h_0 - (value of the top-oil recursion at t=T)| per transformer."""
    out = {}
    for y, name in enumerate(solution.transformer_names):
        co = solution.problem.coeffs[name]
        k = dict((n, kk) for kk, n in solution.problem.transformers)[name]
        h_T = co.gamma1 * solution.h[y, -2] + co.gamma2 * solution.l[k, -1] + co.delta[-1]
        out[name] = abs(solution.h[y, 0] - h_T)
    return out


def cyclic_fixpoint(feeder: Feeder, fleet: DerFleet | None = None, options: OpfOptions | None = None,
                    cfg: SolverConfig | None = None) -> OpfSolution:
    """Solve with periodic top-oil and EV SoC boundary conditions inside one program."""
    opts = options or OpfOptions()
    if not opts.cyclic:
        raise ValueError("cyclic_fixpoint requires options.cyclic")
    return solve(assemble(feeder, fleet, opts), cfg)


def linearized_degradation_cost(feeder: Feeder, l, cyclic: bool = True, breakpoints=DEFAULT_BREAKPOINTS,
                                initial_top_oil: dict | None = None) -> float:
    """Transformer cost of a fixed current profile under the optimizer's linear model ($)."""
    pwl = build_pwl(breakpoints)
    total = 0.0
    init = {}
    if not cyclic:
        init = dict(default_initial_top_oil(feeder))
        init.update(initial_top_oil or {})
    for k, name in feeder.transformer_lines():
        prm = feeder.transformers[name]
        co = linearize(prm, pwl, feeder.ambient, feeder.dt)
        T = feeder.horizon
        if cyclic:
            acc = 0.0
            for t in range(T):
                acc = co.gamma1 * acc + co.gamma2 * l[k, t] + co.delta[t]
            h = acc / (1 - co.gamma1**T)
        else:
            h = init[name]
        fsum = 0.0
        for t in range(T):
            h = co.gamma1 * h + co.gamma2 * l[k, t] + co.delta[t]
            vals = co.alpha1 * h + co.alpha2 * l[k, t] + co.beta
            fsum += max(vals.max(), 0.0)
        total += prm.hourly_cost * feeder.dt * fsum
    return total
