"""DLMP extraction, power-flow sensitivities and the five-way DLMP decomposition.

Sensitivities are taken with respect to *consumption* at a node (the price
convention), for one hour at a time.  At a point where the current equation is
tight, differentiating the branch-flow equations gives per node j (line k into
j, parent i)

    dP_k - r dl_k - sum_c dP_c       = e_p(j)
    dQ_k - x dl_k - sum_c dQ_c       = e_q(j)
    -2P dP_k - 2Q dQ_k + v_i dl_k    = -l_k dv_i
    2r dP_k + 2x dQ_k - z^2 dl_k + dv_j = dv_i

with dv_0 = 0.  Each node's 4x4 block couples to its children only through
dv_j, so a leaf-to-root pass expresses every node as an affine function of its
parent's voltage change and a root-to-leaf pass recovers dv.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .der import DerFleet, ev_opt, pv_opt
from .netmodel import Feeder
from .opf import OpfSolution

COMPONENTS = ("real_power", "reactive_power", "transformer_degradation", "voltage", "current")
CLOSURE_RTOL = 1e-4


class MissingDualsError(ValueError):
    pass


class SingularSensitivityError(np.linalg.LinAlgError):
    def __init__(self, message, node=None, hour=None, condition=np.inf):
        super().__init__(message)
        self.node = node
        self.hour = hour
        self.condition = condition


class DecompositionMismatch(ArithmeticError):
    def __init__(self, message, details):
        super().__init__(message)
        self.details = details


@dataclass
class DlmpSeries:
    lam_p: np.ndarray  # (N+1, T) $/kWh
    lam_q: np.ndarray  # $/kvarh
    root_error: float = 0.0

    def at(self, node: int):
        return self.lam_p[node], self.lam_q[node]


def extract_dlmps(solution: OpfSolution, tol: float = 1e-6) -> DlmpSeries:
    """Nodal prices from the balance duals; checks the root identity."""
    if solution.lam_p is None or solution.lam_q is None:
        raise MissingDualsError("solution carries no balance duals")
    lp, lq = np.asarray(solution.lam_p), np.asarray(solution.lam_q)
    if not (np.all(np.isfinite(lp)) and np.all(np.isfinite(lq))):
        raise MissingDualsError("balance duals contain non-finite values")
    fd = solution.problem.feeder
    err = max(np.abs(lp[0] - fd.lmp).max(), np.abs(lq[0] - fd.q_price).max())
    if err > tol:
        raise ArithmeticError(f"root price differs from the wholesale price by {err:.3g}")
    return DlmpSeries(lp.copy(), lq.copy(), float(err))


@dataclass
class SensitivityOperator:
    """Partials at one hour w.r.t. consumption; column c < N+1 is real power at
    node c, column N+1+c reactive power at node c."""

    hour: int
    dP: np.ndarray  # (N, 2(N+1))
    dQ: np.ndarray
    dl: np.ndarray
    dv: np.ndarray  # (N+1, 2(N+1)), root row zero
    dp0: np.ndarray  # (2(N+1),)
    dq0: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.dv.shape[0]

    def column(self, node: int, reactive: bool = False) -> int:
        return node + (self.n_nodes if reactive else 0)


def _point_arrays(point, hour):
    P = np.asarray(point.P)[:, hour]
    Q = np.asarray(point.Q)[:, hour]
    l = np.asarray(point.l)[:, hour]
    v = np.asarray(point.v)[:, hour]
    return P, Q, l, v


def build_sensitivities(point, feeder: Feeder, hour: int, cond_limit: float = 1e12) -> SensitivityOperator:
    """Solve the differentiated branch-flow equations for every node at ``hour``.

    ``point`` is anything with ``P, Q, l`` (N, T) and ``v`` (N+1, T) arrays,
    e.g. an OPF solution or a power-flow result.
    """
    P, Q, l, v = _point_arrays(point, hour)
    N = feeder.n_lines
    n = N + 1
    ncol = 2 * n
    par = feeder.parent
    r, x = feeder.r, feeder.x
    a = np.zeros((n, 4, ncol))  # affine part per node (index 0 unused)
    b = np.zeros((n, 4))  # coefficient on the parent's dv
    sumP = np.zeros((n, ncol))
    sumQ = np.zeros((n, ncol))
    sumbP = np.zeros(n)
    sumbQ = np.zeros(n)
    for j in feeder.order[:0:-1]:
        k = j - 1
        i = par[j]
        A = np.array([
            [1.0, 0.0, -r[k], -sumbP[j]],
            [0.0, 1.0, -x[k], -sumbQ[j]],
            [-2 * P[k], -2 * Q[k], v[i], 0.0],
            [2 * r[k], 2 * x[k], -(r[k] ** 2 + x[k] ** 2), 1.0],
        ])
        rhs = np.zeros((4, ncol + 1))
        rhs[0, :ncol] = sumP[j]
        rhs[1, :ncol] = sumQ[j]
        rhs[0, j] += 1.0
        rhs[1, n + j] += 1.0
        rhs[2, ncol] = -l[k]
        rhs[3, ncol] = 1.0
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            raise SingularSensitivityError(f"singular sensitivity block at node {j}, hour {hour}", j, hour) from None
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > cond_limit:
            raise SingularSensitivityError(
                f"ill-conditioned sensitivity block at node {j}, hour {hour} (cond {cond:.3g})", j, hour, cond)
        a[j] = sol[:, :ncol]
        b[j] = sol[:, ncol]
        sumP[i] += a[j, 0]
        sumQ[i] += a[j, 1]
        sumbP[i] += b[j, 0]
        sumbQ[i] += b[j, 1]
    dv = np.zeros((n, ncol))
    U = np.zeros((n, 4, ncol))
    for j in feeder.order[1:]:
        U[j] = a[j] + b[j][:, None] * dv[par[j]][None, :]
        dv[j] = U[j, 3]
    dP, dQ, dl = U[1:, 0], U[1:, 1], U[1:, 2]
    e = np.zeros(ncol)
    e[0] = 1.0
    dp0 = sumP[0] + e
    dq0 = sumQ[0] + np.roll(e, n)
    return SensitivityOperator(hour, dP, dQ, dl, dv, dp0, dq0)


def sensitivity_system(point, feeder: Feeder, hour: int):
    """Assembled sparse 4N x 4N system and right-hand sides (for residual checks).

    Unknown order: dP (N), dQ (N), dl (N), dv of nodes 1..N.
    """
    P, Q, l, v = _point_arrays(point, hour)
    N = feeder.n_lines
    n = N + 1
    par = feeder.parent[1:]
    r, x = feeder.r, feeder.x
    k = np.arange(N)
    iP, iQ, il, iv = k, N + k, 2 * N + k, 3 * N + k
    rows, cols, vals = [], [], []

    def put(rr, cc, vv):
        rr, cc, vv = np.broadcast_arrays(rr, cc, vv)
        rows.append(rr.ravel()); cols.append(cc.ravel()); vals.append(np.asarray(vv, dtype=float).ravel())  # noqa: E702

    nonroot = par > 0
    put(iP, iP, 1.0); put(iP, il, -r)  # noqa: E702
    put(iP[par[nonroot] - 1], iP[nonroot], -1.0)
    put(iQ, iQ, 1.0); put(iQ, il, -x)  # noqa: E702
    put(iQ[par[nonroot] - 1], iQ[nonroot], -1.0)
    put(il, iP, -2 * P); put(il, iQ, -2 * Q); put(il, il, v[par])  # noqa: E702
    put(il[nonroot], iv[par[nonroot] - 1], l[nonroot])
    put(iv, iP, 2 * r); put(iv, iQ, 2 * x); put(iv, il, -(r**2 + x**2)); put(iv, iv, 1.0)  # noqa: E702
    put(iv[nonroot], iv[par[nonroot] - 1], -1.0)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(4 * N, 4 * N))
    B = np.zeros((4 * N, 2 * n))
    B[iP, k + 1] = 1.0
    B[iQ, n + k + 1] = 1.0
    return A, B


def sensitivity_residual(op: SensitivityOperator, point, feeder: Feeder) -> float:
    A, B = sensitivity_system(point, feeder, op.hour)
    X = np.vstack([op.dP, op.dQ, op.dl, op.dv[1:]])
    return float(np.abs(A @ X - B).max(initial=0.0))


@dataclass
class DlmpDecomposition:
    """Components in $/kWh (or $/kvarh), arrays of shape (N+1, T)."""

    p: dict
    q: dict
    lam_p: np.ndarray
    lam_q: np.ndarray
    untrusted: np.ndarray  # (N+1, T) bool
    closure_p: np.ndarray = field(default=None)
    closure_q: np.ndarray = field(default=None)

    def total(self, reactive: bool = False) -> np.ndarray:
        comps = self.q if reactive else self.p
        return sum(comps[c] for c in COMPONENTS)

    @property
    def max_closure_error(self) -> float:
        return float(max(np.abs(self.closure_p).max(initial=0.0), np.abs(self.closure_q).max(initial=0.0)))


def _thermal_weights(gamma1: float, T: int, cyclic: bool) -> np.ndarray:
    """w[t, t'] = response of h at period t to a unit recursion input at t'."""
    d = np.subtract.outer(np.arange(T), np.arange(T))
    if cyclic:
        return gamma1 ** np.mod(d, T) / (1.0 - gamma1**T)
    return np.where(d >= 0, gamma1 ** np.clip(d, 0, None), 0.0)


def decompose(solution: OpfSolution, sensitivities=None, rtol: float = CLOSURE_RTOL, strict: bool = False) -> DlmpDecomposition:
    """Split each nodal price into real, reactive, transformer, voltage and current parts."""
    prob = solution.problem
    fd = prob.feeder
    T, N = fd.horizon, fd.n_lines
    n = N + 1
    if sensitivities is None:
        sensitivities = [build_sensitivities(solution, fd, t) for t in range(T)]
    cp, cq = fd.lmp, fd.q_price
    comp_p = {c: np.zeros((n, T)) for c in COMPONENTS}
    comp_q = {c: np.zeros((n, T)) for c in COMPONENTS}

    # per transformer: marginal cost of one unit of l at period t'
    tx_marg = []
    for y, (k, name) in enumerate(prob.transformers):
        co = prob.coeffs[name]
        xi = solution.xi[y]  # (T, M)
        dh_cost = xi @ co.alpha1  # $/unit h at each period
        W = _thermal_weights(co.gamma1, T, prob.options.cyclic)
        marg = co.gamma2 * (dh_cost @ W) + xi @ co.alpha2
        tx_marg.append((k, marg))

    for t, op in enumerate(sensitivities):
        rl = fd.r @ op.dl
        xl = fd.x @ op.dl
        tx = np.zeros(2 * n)
        for k, marg in tx_marg:
            tx += marg[t] * op.dl[k]
        volt = (solution.mu_v_up[:, t] - solution.mu_v_lo[:, t]) @ op.dv
        cur = solution.mu_l[:, t] @ op.dl
        for comps, sl, own in ((comp_p, slice(0, n), 0), (comp_q, slice(n, 2 * n), 1)):
            comps["real_power"][:, t] = cp[t] * ((own == 0) + rl[sl])
            comps["reactive_power"][:, t] = cq[t] * ((own == 1) + xl[sl])
            comps["transformer_degradation"][:, t] = tx[sl]
            comps["voltage"][:, t] = volt[sl]
            comps["current"][:, t] = cur[sl]

    flagged = solution.exactness_gap > prob.options.exactness_tol
    untrusted = np.broadcast_to(flagged.any(axis=0)[None, :], (n, T)).copy()
    out = DlmpDecomposition(comp_p, comp_q, solution.lam_p, solution.lam_q, untrusted)
    out.closure_p = out.total() - solution.lam_p
    out.closure_q = out.total(reactive=True) - solution.lam_q
    tol_p = rtol * np.maximum(1.0, np.abs(solution.lam_p))
    tol_q = rtol * np.maximum(1.0, np.abs(solution.lam_q))
    bad = ((np.abs(out.closure_p) > tol_p) | (np.abs(out.closure_q) > tol_q)) & ~untrusted
    if strict and bad.any():
        j, t = map(int, np.argwhere(bad)[0])
        details = {c: float(comp_p[c][j, t]) for c in COMPONENTS}
        details.update(node=j, hour=t, dlmp=float(solution.lam_p[j, t]), dlmp_q=float(solution.lam_q[j, t]))
        raise DecompositionMismatch(
            f"components do not sum to the DLMP at node {j}, hour {t}: {details}", details)
    return out


@dataclass
class DeviceCheck:
    name: str
    kind: str
    own_value: float  # $ (PV revenue or EV cost)
    best_value: float
    gap: float  # >= 0 up to solver tolerance
    flagged_hours: list


@dataclass
class SelfScheduleReport:
    devices: list

    @property
    def max_gap(self) -> float:
        return max((d.gap for d in self.devices), default=0.0)

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_gap <= tol


def verify_self_schedule(solution: OpfSolution, fleet: DerFleet, dlmps: DlmpSeries, tol: float = 1e-5,
                         cfg=None) -> SelfScheduleReport:
    """Re-solve each device's price-taking problem and compare objective values."""
    fd = solution.problem.feeder
    T = fd.horizon
    scale = fd.base.s_base * fd.dt
    sch = solution.schedule
    out = []
    for i, pv in enumerate(fleet.pvs):
        lp, lq = dlmps.lam_p[pv.node], dlmps.lam_q[pv.node]
        bp, bq, _ = pv_opt(pv, lp, lq)
        own_t = (lp * sch.pv_p[i] + lq * sch.pv_q[i]) * scale
        best_t = (lp * bp + lq * bq) * scale
        gap = float(best_t.sum() - own_t.sum())
        hours = np.flatnonzero(best_t - own_t > tol).tolist() if gap > tol else []
        out.append(DeviceCheck(pv.name, "pv", float(own_t.sum()), float(best_t.sum()), gap, hours))
    for i, ev in enumerate(fleet.evs):
        nodes = ev.node_at(T)
        on = nodes >= 0
        lp = np.where(on, dlmps.lam_p[np.where(on, nodes, 0), np.arange(T)], 0.0)
        lq = np.where(on, dlmps.lam_q[np.where(on, nodes, 0), np.arange(T)], 0.0)
        bp, bq, _ = ev_opt(ev, lp, lq, fd.dt, cfg)
        own = float((lp @ sch.ev_p[i] + lq @ sch.ev_q[i]) * scale)
        best = float((lp @ bp + lq @ bq) * scale)
        gap = own - best
        hours = []
        if gap > tol:
            diff = np.abs(sch.ev_p[i] - bp) + np.abs(sch.ev_q[i] - bq)
            hours = np.flatnonzero(diff > 1e-6).tolist()
        out.append(DeviceCheck(ev.name, "ev", own, best, gap, hours))
    return SelfScheduleReport(out)
