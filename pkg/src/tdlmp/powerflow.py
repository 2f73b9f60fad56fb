"""Backward/forward sweep for the DistFlow equations with fixed injections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import Feeder


class PowerFlowError(RuntimeError):
    def __init__(self, message, residual=np.inf, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class PowerFlowResult:
    P: np.ndarray  # (N, T) sending-end real flow on line into node j (row j-1)
    Q: np.ndarray
    l: np.ndarray  # squared current
    v: np.ndarray  # (N+1, T) squared voltage, row 0 is the root
    p0: np.ndarray  # (T,) substation real injection
    q0: np.ndarray
    iterations: int
    residual: float


def _depth_levels(feeder: Feeder):
    depth = np.zeros(feeder.n_nodes, dtype=int)
    for j in feeder.order[1:]:
        depth[j] = depth[feeder.parent[j]] + 1
    return [np.flatnonzero(depth == d) for d in range(1, depth.max(initial=0) + 1)]


def distflow_residual(feeder: Feeder, p_inj, q_inj, P, Q, l, v, p0=None, q0=None) -> float:
    """Max absolute residual of the balance, voltage-drop and current equations."""
    par = feeder.parent[1:]
    r, x = feeder.r[:, None], feeder.x[:, None]
    childP = np.zeros_like(v)
    childQ = np.zeros_like(v)
    np.add.at(childP, par, P)
    np.add.at(childQ, par, Q)
    res = [
        P - r * l + p_inj[1:] - childP[1:],
        Q - x * l + q_inj[1:] - childQ[1:],
        v[1:] - v[par] + 2 * (r * P + x * Q) - (r**2 + x**2) * l,
        v[par] * l - P**2 - Q**2,
    ]
    if p0 is not None:
        res.append(p0 + p_inj[0] - childP[0])
        res.append(q0 + q_inj[0] - childQ[0])
    return float(max(np.abs(a).max(initial=0.0) for a in res))


def fixed_injection_powerflow(feeder: Feeder, p_inj, q_inj, v0: float | None = None, tol: float = 1e-10,
                              max_iter: int = 200) -> PowerFlowResult:
    """Solve the DistFlow equations (current equation as equality) by sweeps.

    ``p_inj``/``q_inj`` are net nodal injections (N+1, T), generation
    positive.  The root voltage is fixed at ``v0`` (squared, pu).
    """
    p_inj = np.atleast_2d(np.asarray(p_inj, dtype=float))
    q_inj = np.atleast_2d(np.asarray(q_inj, dtype=float))
    N, T = feeder.n_lines, p_inj.shape[1]
    v0 = feeder.v0 if v0 is None else v0
    par = feeder.parent
    r, x = feeder.r[:, None], feeder.x[:, None]
    z2 = r**2 + x**2
    levels = _depth_levels(feeder)
    P = np.zeros((N, T))
    Q = np.zeros((N, T))
    l = np.zeros((N, T))
    v = np.full((N + 1, T), v0, dtype=float)
    resid = np.inf
    for it in range(1, max_iter + 1):
        childP = np.zeros((N + 1, T))
        childQ = np.zeros((N + 1, T))
        for nodes in reversed(levels):
            k = nodes - 1
            P[k] = childP[nodes] + r[k] * l[k] - p_inj[nodes]
            Q[k] = childQ[nodes] + x[k] * l[k] - q_inj[nodes]
            np.add.at(childP, par[nodes], P[k])
            np.add.at(childQ, par[nodes], Q[k])
        # currents use the previous voltages; the forward sweep then follows
        with np.errstate(over="ignore", invalid="ignore"):
            for nodes in levels:
                k = nodes - 1
                l[k] = (P[k] ** 2 + Q[k] ** 2) / v[par[nodes]]
                v[nodes] = v[par[nodes]] - 2 * (r[k] * P[k] + x[k] * Q[k]) + z2[k] * l[k]
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise PowerFlowError("power flow diverged (non-positive voltage)", np.inf, it)
        p0 = childP[0] - p_inj[0]
        q0 = childQ[0] - q_inj[0]
        resid = distflow_residual(feeder, p_inj, q_inj, P, Q, l, v, p0, q0)
        if resid <= tol:
            return PowerFlowResult(P.copy(), Q.copy(), l.copy(), v.copy(), p0, q0, it, resid)
    raise PowerFlowError(
        f"power flow did not converge in {max_iter} sweeps (last residual {resid:.3g})", resid, max_iter)


def base_injections(feeder: Feeder):
    """Net injections of the fixed loads alone."""
    return -np.asarray(feeder.load_p), -np.asarray(feeder.load_q)
